import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bgch.estimators import (FOURIER_CLAMP, KINDS, EstimatorError, EstimatorSpec, backprop_sign,
                             surrogate_grad, surrogate_value)


def test_fourier_value_example():
    v = surrogate_value(EstimatorSpec(n=1, H=1.0), 0.5)
    assert v == pytest.approx(4 / math.pi, abs=1e-15)
    assert v == pytest.approx(1.27324, abs=1e-5)


@pytest.mark.parametrize("kind", KINDS)
def test_value_at_zero(kind):
    assert surrogate_value(EstimatorSpec(kind=kind), 0.0) == 0.0


def test_fourier_partial_sums_approach_one():
    # alternating partial sums oscillate around 1; the error shrinks with n
    vals = [float(surrogate_value(EstimatorSpec(n=n, H=2.0), 1.0)) for n in (1, 3, 5, 7, 9)]
    oracle = [4 / math.pi * sum((-1) ** (k // 2) / k for k in range(1, n + 1, 2)) for n in (1, 3, 5, 7, 9)]
    assert np.allclose(vals, oracle, atol=1e-14)
    errs = np.abs(np.array(vals) - 1.0)
    assert np.all(np.diff(errs) < 0)


def test_grad_examples():
    assert surrogate_grad(EstimatorSpec(n=5, H=1.0), 0.0) == 12.0
    assert surrogate_grad(EstimatorSpec(kind="ste", ste_clip=1.0), 0.3) == 1.0
    assert surrogate_grad(EstimatorSpec(kind="ste", ste_clip=1.0), 1.3) == 0.0
    assert surrogate_grad(EstimatorSpec(n=1, H=2.0), 1.0) == pytest.approx(0.0, abs=1e-15)


def test_harmonics_readings():
    assert EstimatorSpec(n=4).harmonics.tolist() == [1, 3]
    assert EstimatorSpec(n=3).harmonics.tolist() == [1, 3]
    assert EstimatorSpec(n=4, n_mode="count").harmonics.tolist() == [1, 3, 5, 7]
    phi = np.linspace(-0.9, 0.9, 11)
    assert np.array_equal(surrogate_grad(EstimatorSpec(n=4), phi), surrogate_grad(EstimatorSpec(n=3), phi))


def test_backprop_examples():
    spec = EstimatorSpec(n=1, H=1.0)
    assert backprop_sign(spec, np.ones(4), np.zeros(4)).tolist() == [4.0] * 4
    assert not backprop_sign(spec, np.zeros(5), np.linspace(-1, 1, 5)).any()
    with pytest.raises(EstimatorError):
        backprop_sign(spec, np.ones(3), np.zeros(4))


def test_nan_rejected():
    with pytest.raises(EstimatorError):
        surrogate_value(EstimatorSpec(), np.nan)
    with pytest.raises(EstimatorError):
        surrogate_grad(EstimatorSpec(kind="tanh"), [0.0, np.nan])


@pytest.mark.parametrize("bad", [dict(kind="pbe"), dict(H=0.0), dict(n=0), dict(n_mode="odd")])
def test_spec_validation(bad):
    with pytest.raises(EstimatorError):
        EstimatorSpec(**bad)


SPECS = [EstimatorSpec(kind="fourier", n=n, H=H) for n in (1, 4, 9) for H in (0.5, 1.0, 2.0)] + [
    EstimatorSpec(kind="tanh", tanh_temperature=2.0), EstimatorSpec(kind="sigmoid", sigmoid_temperature=3.0),
    EstimatorSpec(kind="signswish"), EstimatorSpec(kind="signswish", signswish_beta=2.0),
    EstimatorSpec(kind="tanh"), EstimatorSpec(kind="sigmoid")]


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.kind}-{s.n}-{s.H}")
def test_grad_matches_finite_difference(spec):
    rng = np.random.default_rng(7)
    phi = rng.uniform(-0.9 * spec.H, 0.9 * spec.H, 100)
    h = 1e-5
    fd = (surrogate_value(spec, phi + h) - surrogate_value(spec, phi - h)) / (2 * h)
    an = backprop_sign(spec, np.ones_like(phi), phi)
    rel = np.abs(an - fd) / np.maximum(np.abs(fd), 1.0)
    assert rel.max() < 1e-5


def test_ste_matches_identity_surrogate_inside_window():
    spec = EstimatorSpec(kind="ste", ste_clip=0.7)
    phi = np.random.default_rng(1).uniform(-0.69, 0.69, 100)
    h = 1e-6
    fd = (surrogate_value(spec, phi + h) - surrogate_value(spec, phi - h)) / (2 * h)
    assert np.allclose(surrogate_grad(spec, phi), fd, atol=1e-8)


@given(st.floats(-50, 50, allow_nan=False), st.integers(1, 16), st.floats(0.1, 5.0))
def test_fourier_odd_value_even_grad(phi, n, H):
    spec = EstimatorSpec(n=n, H=H)
    assert surrogate_value(spec, -phi) == -surrogate_value(spec, phi)
    assert surrogate_grad(spec, -phi) == surrogate_grad(spec, phi)


def test_fourier_grad_clamped_outside_window():
    spec = EstimatorSpec(n=5, H=1.0)
    assert surrogate_grad(spec, 3.7) == surrogate_grad(spec, FOURIER_CLAMP)
    assert surrogate_grad(spec, -1.0) == surrogate_grad(spec, -FOURIER_CLAMP)


def _sign_error(n, pts, H=1.0):
    return np.max(np.abs(np.sign(pts) - surrogate_value(EstimatorSpec(n=n, H=H), pts)))


@pytest.mark.parametrize("H", [0.5, 1.0, 3.0])
def test_fourier_error_non_increasing_at_half_period(H):
    pts = np.array([-0.5, 0.5]) * H
    errs = [_sign_error(n, pts, H) for n in range(1, 60, 2)]
    assert np.all(np.diff(errs) <= 1e-12)


@pytest.mark.parametrize("H", [0.5, 1.0, 3.0])
def test_fourier_sup_error_non_increasing_on_band(H):
    # sup over [0.2H, 0.8H]: uniform convergence away from the jumps at 0 and H
    band = np.concatenate([np.linspace(0.2, 0.8, 6001), -np.linspace(0.2, 0.8, 6001)]) * H
    errs = [_sign_error(n, band, H) for n in range(1, 60, 2)]
    assert np.all(np.diff(errs) <= 1e-12)


def test_fourier_error_at_band_edges_oscillates_under_envelope():
    # single points inside the band are not monotone in n (partial sums ring),
    # but they never exceed the band envelope
    pts = np.array([-0.8, -0.2, 0.2, 0.8])
    band = np.linspace(0.2, 0.8, 6001)
    errs = np.array([_sign_error(n, pts) for n in range(1, 60, 2)])
    env = np.array([_sign_error(n, band) for n in range(1, 60, 2)])
    assert np.any(np.diff(errs) > 0)
    assert np.all(errs <= env + 1e-12)


@pytest.mark.parametrize("kind", ["tanh", "sigmoid", "signswish"])
def test_baselines_are_odd_and_saturate(kind):
    spec = EstimatorSpec(kind=kind)
    phi = np.linspace(0.1, 3, 30)
    assert np.allclose(surrogate_value(spec, -phi), -surrogate_value(spec, phi), atol=1e-15)
    assert surrogate_value(spec, 40.0) == pytest.approx(1.0, abs=1e-6)
