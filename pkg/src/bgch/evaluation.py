"""Experiment drivers: ablation and estimator suites, space audit, baselines."""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

from .config import TrainConfig, stream
from .graph import DataSplit
from .hashing import HEADER_BYTES, HashCodeTable, build_code_table, n_words
from .metrics import MetricReport, evaluate_table, fingerprint, ndcg_at, recall_at  # noqa: F401
from .training import TrainingError, train

log = logging.getLogger(__name__)

ABLATION_VARIANTS = [
    ("full", ()),
    ("w/o FD", ("no_fd",)),
    ("w/o AH-TA", ("no_ah_ta",)),
    ("w/o AH-RF", ("no_ah_rf",)),
    ("w/in LF", ("learnable_factors",)),
    ("w/o L_bpr", ("no_bpr",)),
    ("w/o L_rec", ("no_rec",)),
]


def _run_seeds(split: DataSplit, cfg: TrainConfig, seeds, ns):
    reports, iter_ms = [], []
    for seed in seeds:
        res = train(split, cfg.replace(seed=seed), evaluate=False)
        reports.append(evaluate_table(res.table, split, ns=ns, config=res.config))
        iter_ms.append(res.per_iteration_ms)
    return reports, iter_ms


def _summarize(label, reports, ns, extra=None):
    row = {"variant": label, "status": "ok", "seeds": len(reports)}
    for n in ns:
        r = [rep.recall[n] for rep in reports]
        d = [rep.ndcg[n] for rep in reports]
        row[f"recall@{n}"] = float(np.mean(r))
        row[f"recall@{n}_std"] = float(np.std(r))
        row[f"ndcg@{n}"] = float(np.mean(d))
    row.update(extra or {})
    return row


def run_ablation_suite(split: DataSplit, base_cfg: TrainConfig, seeds=None, ns=(20,)) -> list:
    """Train the full model and each ablation with identical seeds and budget.

    Rows carry the mean metrics over seeds and the percentage change of
    each variant against the full model.
    """
    seeds = list(seeds) if seeds is not None else [base_cfg.seed]
    base_abl = set(base_cfg.ablations)
    rows = []
    for label, switches in ABLATION_VARIANTS:
        try:
            cfg = base_cfg.replace(ablations=frozenset(base_abl | set(switches)))
            reports, _ = _run_seeds(split, cfg, seeds, ns)
            rows.append(_summarize(label, reports, ns))
        except (TrainingError, ValueError) as exc:
            log.warning("ablation %s failed: %s", label, exc)
            rows.append({"variant": label, "status": f"failed: {exc}", "seeds": len(seeds)})
    full = rows[0]
    for row in rows:
        for n in ns:
            for m in ("recall", "ndcg"):
                key = f"{m}@{n}"
                if row["status"] == "ok" and full["status"] == "ok" and full[key] > 0:
                    row[f"{key}_delta_pct"] = 100.0 * (row[key] - full[key]) / full[key]
    return rows


def estimator_label(cfg: TrainConfig) -> str:
    e = cfg.estimator
    return f"fourier(n={e.n})" if e.kind == "fourier" else e.kind


def run_estimator_suite(split: DataSplit, base_cfg: TrainConfig, kinds=("fourier", "ste", "tanh", "sigmoid", "signswish"),
                        n_values=None, seeds=None, ns=(20,)) -> list:
    """One trained run per estimator (and per n for Fourier sweeps).

    ``iter_ms`` is the median wall time of a training iteration.
    """
    seeds = list(seeds) if seeds is not None else [base_cfg.seed]
    configs = []
    for kind in kinds:
        if kind == "fourier" and n_values:
            for n in n_values:
                configs.append(base_cfg.replace(estimator=base_cfg.estimator.__class__(
                    **{**base_cfg.estimator.__dict__, "kind": "fourier", "n": n})))
        else:
            configs.append(base_cfg.replace(estimator=base_cfg.estimator.__class__(
                **{**base_cfg.estimator.__dict__, "kind": kind})))
    rows = []
    for cfg in configs:
        label = estimator_label(cfg)
        try:
            reports, iter_ms = _run_seeds(split, cfg, seeds, ns)
            rows.append(_summarize(label, reports, ns, {"n": cfg.estimator.n if cfg.estimator.kind == "fourier" else "",
                                                        "iter_ms": float(np.median(iter_ms))}))
        except (TrainingError, ValueError) as exc:
            log.warning("estimator %s failed: %s", label, exc)
            rows.append({"variant": label, "status": f"failed: {exc}", "seeds": len(seeds)})
    return rows


def theoretical_ratio(d: int, L: int) -> float:
    """Float32 table size over hash-table size: 32d / (d + 32(L+1))."""
    return 32.0 * d / (d + 32.0 * (L + 1))


def space_audit(table: HashCodeTable, path=None) -> dict:
    """Compare the serialized table against the analytic space accounting.

    ``measured_bits_per_node`` is the file body divided by the node count.
    It equals ``payload_bits_per_node = (L+1)(d+32)`` whenever d is a
    multiple of 64; otherwise the difference is word padding, reported as
    part of the overhead together with the header.
    """
    if path is not None:
        size = Path(path).stat().st_size
    else:
        size = len(table.to_bytes())
    n, S, d = table.n_nodes, table.n_segments, table.d
    measured = (size - HEADER_BYTES) * 8 / n if n else 0.0
    payload = S * (d + 32)
    return {
        "n_nodes": n,
        "d": d,
        "L": table.L,
        "file_bytes": size,
        "measured_bits_per_node": measured,
        "payload_bits_per_node": payload,
        "padding_bits_per_node": S * (64 * n_words(d) - d),
        "theoretical_ratio": theoretical_ratio(d, table.L),
        "file_overhead_pct": 100.0 * (size * 8 - n * payload) / (size * 8),
    }


def lsh_baseline_table(n_nodes: int, dim: int, bits: int, seed: int, init_std: float = 0.1) -> HashCodeTable:
    """Sign of a Gaussian random projection of untrained embeddings, unit factors."""
    rng = stream(seed, "init")
    V = rng.normal(0.0, init_std, size=(n_nodes, dim))
    R = np.random.default_rng([seed, 99]).standard_normal((dim, bits))
    return build_code_table([V @ R], unit_scales=True)


def write_rows_csv(rows: list, path) -> None:
    fields = []
    for r in rows:
        fields.extend(k for k in r if k not in fields)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


def format_rows(rows: list, columns=None) -> str:
    """Aligned plain-text table."""
    if not rows:
        return ""
    columns = columns or [k for k in rows[0]]

    def cell(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    table = [[str(c) for c in columns]] + [[cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(columns))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in table)
