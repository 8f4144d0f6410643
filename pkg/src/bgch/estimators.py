"""Surrogate derivatives for sign().

Forward passes always use the strict sign; these smooth stand-ins supply
the backward slope. ``surrogate_value`` is the function whose derivative
``surrogate_grad`` returns, which is what gradient checks rely on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("fourier", "ste", "tanh", "sigmoid", "signswish")

# Gradients of the Fourier surrogate are taken at clamp(phi, -0.95H, 0.95H).
FOURIER_CLAMP = 0.95


class EstimatorError(ValueError):
    pass


@dataclass(frozen=True)
class EstimatorSpec:
    """Which surrogate to use and its shape parameters.

    For ``fourier``, ``n`` is read as the inclusive bound of the odd sum
    (harmonics 1, 3, ..., <= n) unless ``n_mode="count"``, in which case it
    is the number of odd harmonics.
    """

    kind: str = "fourier"
    n: int = 4
    H: float = 1.0
    n_mode: str = "bound"
    ste_clip: float = 1.0
    tanh_temperature: float = 1.0
    sigmoid_temperature: float = 1.0
    signswish_beta: float = 5.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise EstimatorError(f"unknown estimator {self.kind!r}; choose from {', '.join(KINDS)}")
        if self.H <= 0:
            raise EstimatorError("H must be positive")
        if self.n_mode not in ("bound", "count"):
            raise EstimatorError("n_mode must be 'bound' or 'count'")
        if self.kind == "fourier" and self.n < 1:
            raise EstimatorError("fourier needs n >= 1")
        if self.ste_clip <= 0:
            raise EstimatorError("ste_clip must be positive")

    @property
    def harmonics(self) -> np.ndarray:
        if self.n_mode == "count":
            return np.arange(1, 2 * self.n, 2, dtype=np.float64)
        return np.arange(1, self.n + 1, 2, dtype=np.float64)


def _check(phi):
    phi = np.asarray(phi, dtype=np.float64)
    if np.isnan(phi).any():
        raise EstimatorError("NaN input to sign estimator")
    return phi


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def surrogate_value(spec: EstimatorSpec, phi):
    phi = _check(phi)
    k = spec.kind
    if k == "fourier":
        i = spec.harmonics
        terms = np.sin(np.multiply.outer(phi, i) * (np.pi / spec.H)) / i
        return (4.0 / np.pi) * terms.sum(axis=-1)
    if k == "ste":
        return np.clip(phi, -spec.ste_clip, spec.ste_clip)
    if k == "tanh":
        return np.tanh(spec.tanh_temperature * phi)
    if k == "sigmoid":
        return 2.0 * _sigmoid(spec.sigmoid_temperature * phi) - 1.0
    b = spec.signswish_beta
    s = _sigmoid(b * phi)
    return 2.0 * s * (1.0 + b * phi * (1.0 - s)) - 1.0


def surrogate_grad(spec: EstimatorSpec, phi):
    phi = _check(phi)
    k = spec.kind
    if k == "fourier":
        H = spec.H
        phi = np.clip(phi, -FOURIER_CLAMP * H, FOURIER_CLAMP * H)
        terms = np.cos(np.multiply.outer(phi, spec.harmonics) * (np.pi / H))
        return (4.0 / H) * terms.sum(axis=-1)
    if k == "ste":
        return (np.abs(phi) <= spec.ste_clip).astype(np.float64)
    if k == "tanh":
        t = spec.tanh_temperature
        return t * (1.0 - np.tanh(t * phi) ** 2)
    if k == "sigmoid":
        t = spec.sigmoid_temperature
        s = _sigmoid(t * phi)
        return 2.0 * t * s * (1.0 - s)
    b = spec.signswish_beta
    s = _sigmoid(b * phi)
    return 2.0 * b * s * (1.0 - s) * (2.0 + b * phi * (1.0 - 2.0 * s))


def backprop_sign(spec: EstimatorSpec, upstream, phi):
    upstream = np.asarray(upstream, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    if upstream.shape != phi.shape:
        raise EstimatorError(f"shape mismatch: upstream {upstream.shape} vs phi {phi.shape}")
    return upstream * surrogate_grad(spec, phi)
