"""``bgch`` command line: train, query, eval, ablate, estimators, bench, landscape, validate.

Exit codes: 0 success, 1 runtime or validation failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ABLATIONS, ConfigError, TrainConfig, config_from_mapping, load_config
from .dispersion import validate_dispersion_ordering
from .estimators import KINDS
from .evaluation import (format_rows, run_ablation_suite, run_estimator_suite, space_audit,
                         write_rows_csv)
from .graph import GraphError, load_edge_list, planted_clusters, split
from .hashing import HashCodeTable, HashTableError
from .metrics import DEFAULT_NS, evaluate_table
from .retrieval import (RetrievalError, RetrievalIndex, bench_matching, random_table,
                        score_identity_fuzz)
from .training import TrainingError, landscape_scan, load_checkpoint, save_checkpoint, train

log = logging.getLogger("bgch")

MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


# flag dest -> config key
_FLAG_KEYS = {
    "estimator": "estimator", "n_terms": "fourier.n", "H": "fourier.H", "epsilon": "epsilon",
    "layers": "layers", "disp_iters": "disp_iters", "dim": "dim", "lambda1": "lambda1",
    "lambda2": "lambda2", "lr": "lr", "batch": "batch_size", "negatives": "negatives",
    "epochs": "epochs", "seed": "seed", "test_ratio": "test_ratio", "patience": "patience",
}


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--config", type=Path, help="TOML config; flags override it")
    g.add_argument("--seed", type=int)
    g.add_argument("--estimator", choices=KINDS)
    g.add_argument("--n-terms", dest="n_terms", type=int, help="Fourier harmonic bound n")
    g.add_argument("--H", type=float, help="Fourier half period")
    g.add_argument("--epsilon", type=float)
    g.add_argument("--layers", "-L", type=int)
    g.add_argument("--disp-iters", "-K", dest="disp_iters", type=int)
    g.add_argument("--dim", type=int)
    g.add_argument("--lambda1", type=float)
    g.add_argument("--lambda2", type=float)
    g.add_argument("--lr", type=float)
    g.add_argument("--batch", type=int)
    g.add_argument("--negatives", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--patience", type=int)
    g.add_argument("--test-ratio", dest="test_ratio", type=float)
    g.add_argument("--ablation", action="append", default=[], metavar="NAME",
                   choices=ABLATIONS, help="ablation switch; repeatable")


def _add_graph_flags(p: argparse.ArgumentParser, required: bool = False) -> None:
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--edges", type=Path, help="edge list (x y per line)")
    g.add_argument("--planted", metavar="N1xN2", help="synthetic 2-cluster graph instead of --edges")


def resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    over = {_FLAG_KEYS[k]: v for k, v in vars(args).items() if k in _FLAG_KEYS and v is not None}
    if getattr(args, "ablation", None):
        over["ablations"] = sorted(set(cfg.ablations) | set(args.ablation))
    return config_from_mapping(over, cfg) if over else cfg


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def load_input_graph(args, cfg: TrainConfig):
    """Graph plus a description for the manifest."""
    if getattr(args, "planted", None):
        try:
            n1, n2 = (int(v) for v in args.planted.lower().split("x"))
        except ValueError:
            raise UsageError(f"--planted expects N1xN2, got {args.planted!r}") from None
        return planted_clusters(n1, n2, seed=cfg.seed), {"planted": f"{n1}x{n2}", "seed": cfg.seed}
    path = getattr(args, "edges", None)
    if path is None:
        raise UsageError("one of --edges or --planted is required")
    if not path.is_file():
        raise UsageError(f"edges file not found: {path}")
    return load_edge_list(path), {"edges": str(path), "sha256": _sha256(path)}


def _write_manifest(out: Path, command: str, cfg: TrainConfig, inputs: dict, artifacts: list,
                    extra: dict | None = None) -> None:
    manifest = {"tool": "bgch", "version": __version__, "command": command, "seed": cfg.seed,
                "config": cfg.to_dict(), "inputs": inputs, "artifacts": sorted(artifacts)}
    manifest.update(extra or {})
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# -- subcommands -----------------------------------------------------------

def cmd_train(args) -> int:
    cfg = resolve_config(args)
    g, inputs = load_input_graph(args, cfg)
    data = split(g, cfg.test_ratio, cfg.seed)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    res = train(data, cfg)
    res.table.save(out / "codes.bgch")
    res.write_metrics(out / "metrics.csv")
    res.write_timing(out / "timing.csv")
    save_checkpoint(res.state, out / "checkpoint.bgck")
    artifacts = ["codes.bgch", "metrics.csv", "timing.csv", "checkpoint.bgck"]
    _write_manifest(out, "train", cfg, inputs, artifacts, {"n1": g.n1, "n2": g.n2})
    last = res.log[-1] if res.log else {}
    print(f"trained {len(res.log)} epochs; loss {last.get('loss_total', float('nan')):.5f}; "
          f"recall@{cfg.eval_n} {last.get('recall@20', float('nan')):.4f}; artifacts in {out}")
    return 0


def _read_n1(codes: Path, n1_flag) -> int | None:
    if n1_flag is not None:
        return n1_flag
    mpath = codes.parent / MANIFEST
    if mpath.is_file():
        return int(json.loads(mpath.read_text())["n1"])
    return None


def _load_table(path: Path) -> HashCodeTable:
    if not path.is_file():
        raise UsageError(f"codes file not found: {path}")
    return HashCodeTable.load(path)


def cmd_query(args) -> int:
    table = _load_table(args.codes)
    n1 = _read_n1(args.codes, args.n1)
    if n1 is None:
        log.warning("no %s beside %s and no --n1: every table row is a candidate", MANIFEST, args.codes)
        n1 = 0
        index = RetrievalIndex(table)
    else:
        index = RetrievalIndex.for_second_side(table, n1)
    nodes = list(args.node or [])
    if args.queries:
        if not args.queries.is_file():
            raise UsageError(f"queries file not found: {args.queries}")
        nodes += [ln.strip() for ln in args.queries.read_text().splitlines() if ln.strip()]
    if not nodes:
        raise UsageError("give at least one --node or a --queries file")
    if args.n > len(index):
        log.warning("N=%d exceeds the %d candidates; returning all of them", args.n, len(index))
    index.warm_up()
    out = open(args.out, "w") if args.out else sys.stdout
    times = []
    failed = 0
    try:
        out.write("query_id\trank\tcandidate_id\tscore\n")
        for raw in nodes:
            try:
                node = int(raw)
            except ValueError:
                node = -1
            if not 0 <= node < (n1 if n1 else table.n_nodes):
                print(f"error: unknown query node {raw}", file=sys.stderr)
                failed += 1
                continue
            t0 = time.perf_counter()
            res = index.topn(index.query_from_table(table, node), min(args.n, len(index)))
            times.append(time.perf_counter() - t0)
            for rank, (cand, score) in enumerate(res.pairs(), 1):
                out.write(f"{node}\t{rank}\t{cand}\t{score!r}\n")
    finally:
        if out is not sys.stdout:
            out.close()
    if times:
        t = np.asarray(times) * 1e3
        print(f"{len(times)} queries, {failed} failed; mean {t.mean():.3f} ms, "
              f"p99 {np.percentile(t, 99):.3f} ms", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    table = _load_table(args.codes)
    g, _ = load_input_graph(args, cfg)
    if table.n_nodes != g.n_nodes:
        raise UsageError(f"code table has {table.n_nodes} nodes, graph has {g.n_nodes}")
    data = split(g, cfg.test_ratio, cfg.seed)
    ns = tuple(args.ns) if args.ns else tuple(n for n in DEFAULT_NS if n <= g.n2) or (g.n2,)
    rep = evaluate_table(table, data, ns=ns, config=cfg)
    row = rep.row()
    print(format_rows([row]))
    if args.out:
        write_rows_csv([row], args.out)
    audit = space_audit(table, args.codes)
    print(f"space: {audit['measured_bits_per_node']:.0f} bits/node stored, "
          f"{audit['payload_bits_per_node']} payload, theoretical ratio {audit['theoretical_ratio']:.3f}")
    return 0


def _suite_output(rows, out: Path | None, name: str, cfg: TrainConfig, inputs: dict) -> None:
    print(format_rows(rows))
    if out:
        out.mkdir(parents=True, exist_ok=True)
        write_rows_csv(rows, out / f"{name}.csv")
        (out / f"{name}.txt").write_text(format_rows(rows) + "\n")
        _write_manifest(out, name, cfg, inputs, [f"{name}.csv", f"{name}.txt"])


def _seeds(args, cfg) -> list:
    return [cfg.seed + i for i in range(args.seeds)]


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    g, inputs = load_input_graph(args, cfg)
    data = split(g, cfg.test_ratio, cfg.seed)
    rows = run_ablation_suite(data, cfg, seeds=_seeds(args, cfg), ns=(cfg.eval_n,))
    _suite_output(rows, args.out, "ablation", cfg, inputs)
    return 0


def cmd_estimators(args) -> int:
    cfg = resolve_config(args)
    g, inputs = load_input_graph(args, cfg)
    data = split(g, cfg.test_ratio, cfg.seed)
    kinds = args.kinds.split(",") if args.kinds else KINDS
    bad = [k for k in kinds if k not in KINDS]
    if bad:
        raise UsageError(f"unknown estimator(s): {', '.join(bad)}")
    sweep = [int(v) for v in args.n_sweep.split(",")] if args.n_sweep else None
    rows = run_estimator_suite(data, cfg, kinds=kinds, n_values=sweep, seeds=_seeds(args, cfg),
                               ns=(cfg.eval_n,))
    _suite_output(rows, args.out, "estimators", cfg, inputs)
    return 0


def cmd_bench(args) -> int:
    rng = np.random.default_rng(args.seed)
    table = random_table(args.candidates + args.queries, args.d, args.L, rng)
    index = RetrievalIndex(table, np.arange(args.candidates))
    queries = [index.query_from_table(table, args.candidates + i) for i in range(args.queries)]
    report = bench_matching(index, queries, N=args.n)
    for r in report["reports"].values():
        print(f"{r.mode:8s} candidates={r.n_candidates} queries={r.n_queries} "
              f"mean={r.mean_us:.1f}us p99={r.p99_us:.1f}us")
    print(f"speedup (float / hamming): {report['speedup']:.2f}x")
    if args.out:
        blob = {k: v.as_dict() for k, v in report["reports"].items()}
        blob["speedup"] = report["speedup"]
        Path(args.out).write_text(json.dumps(blob, indent=2) + "\n")
    return 0


def parse_grid(spec: str) -> np.ndarray:
    """``start:stop:step`` (stop inclusive) or a comma list."""
    try:
        if ":" in spec:
            start, stop, step = (float(v) for v in spec.split(":"))
            if step <= 0:
                raise ValueError
            n = int(np.floor((stop - start) / step + 1e-9)) + 1
            return np.round(start + step * np.arange(n), 12)
        return np.array([float(v) for v in spec.split(",")])
    except ValueError:
        raise UsageError(f"bad grid {spec!r}; use start:stop:step or a comma list") from None


def cmd_landscape(args) -> int:
    cfg = resolve_config(args)
    g, inputs = load_input_graph(args, cfg)
    data = split(g, cfg.test_ratio, cfg.seed)
    grid = parse_grid(args.p)
    if args.checkpoint:
        V0 = load_checkpoint(args.checkpoint).V
        if V0.shape != (g.n_nodes, V0.shape[1]):
            raise UsageError("checkpoint does not match the graph")
        cfg = cfg.replace(dim=V0.shape[1])
    else:
        V0 = train(data, cfg, evaluate=False).state.V
    rows = landscape_scan(V0, data, cfg, grid, loss_kind=args.loss)
    out = args.out
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["variant", "p_x", "p_y", "loss"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "loss": repr(float(r["loss"]))})
    print(f"{len(rows)} grid points ({len(grid)}x{len(grid)} per variant) -> {out}")
    return 0


def cmd_validate(args) -> int:
    failures = 0
    if args.thm1_samples:
        for K in args.K:
            rep = validate_dispersion_ordering(c=8, n=16, K=K, epsilon=args.epsilon, samples=args.thm1_samples,
                                    seed=args.seed)
            mus = " ".join(f"{m:.5f}" for m in rep.mu_hat)
            print(f"dispersion K={K}: mu_hat = {mus}; {rep.violations} violations")
            if rep.violations:
                failures += 1
    if args.thm2_trials:
        n, bad = score_identity_fuzz(args.thm2_trials, seed=args.seed)
        print(f"score identity: {n} trials, {len(bad)} violations")
        for v in bad[:10]:
            print(f"  d={v.d} L={v.L} trial={v.trial} layer={v.layer}: hamming {v.hamming_term!r} "
                  f"float {v.float_term!r} ({v.ulps:.1f} ulp)")
        if bad:
            failures += 1
    return 1 if failures else 0


# -- entry point -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bgch", description="Binary graph hashing for bipartite retrieval")
    p.add_argument("--version", action="version", version=f"bgch {__version__}")
    p.add_argument("--threads", type=int, help="cap BLAS worker threads")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train and export codes")
    _add_graph_flags(s)
    _add_model_flags(s)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("query", help="Top-N retrieval from a code table")
    s.add_argument("--codes", type=Path, required=True)
    s.add_argument("--node", action="append", help="query x-node id; repeatable")
    s.add_argument("--queries", type=Path, help="file with one query id per line")
    s.add_argument("--n", type=int, default=20)
    s.add_argument("--n1", type=int, help="first-side node count (default: from manifest)")
    s.add_argument("--out", type=Path)
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("eval", help="Recall/NDCG of a code table on the held-out split")
    s.add_argument("--codes", type=Path, required=True)
    _add_graph_flags(s)
    _add_model_flags(s)
    s.add_argument("--ns", type=int, nargs="+")
    s.add_argument("--out", type=Path)
    s.set_defaults(func=cmd_eval)

    suites = (("ablate", cmd_ablate, None, "full model against each ablation"),
              ("estimators", cmd_estimators, "est", "compare gradient estimators"))
    for name, func, extra, text in suites:
        s = sub.add_parser(name, help=text)
        _add_graph_flags(s)
        _add_model_flags(s)
        s.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
        s.add_argument("--out", type=Path)
        if extra:
            s.add_argument("--kinds", help="comma list of estimators")
            s.add_argument("--n-sweep", dest="n_sweep", help="comma list of Fourier n values")
        s.set_defaults(func=func)

    s = sub.add_parser("bench", help="Hamming vs float matching speed")
    s.add_argument("--candidates", type=int, default=100_000)
    s.add_argument("--d", type=int, default=256)
    s.add_argument("--L", type=int, default=2)
    s.add_argument("--queries", type=int, default=20)
    s.add_argument("--n", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("landscape", help="loss over a perturbation grid")
    _add_graph_flags(s)
    _add_model_flags(s)
    s.add_argument("--p", default="0.01:0.5:0.01", help="start:stop:step or comma list")
    s.add_argument("--loss", choices=("bpr", "rec", "total"), default="bpr")
    s.add_argument("--checkpoint", type=Path)
    s.add_argument("--out", type=Path, default=Path("landscape.csv"))
    s.set_defaults(func=cmd_landscape)

    s = sub.add_parser("validate", help="dispersion shrinkage and score identity checks")
    s.add_argument("--thm1-samples", dest="thm1_samples", type=int, default=10_000)
    s.add_argument("--thm2-trials", dest="thm2_trials", type=int, default=100_000)
    s.add_argument("--K", type=int, nargs="+", default=[1, 2, 3])
    s.add_argument("--epsilon", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_validate)
    return p


def _setup_logging() -> None:
    level = os.environ.get("BGCH_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    limiter = contextlib.nullcontext()
    if args.threads:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=args.threads)
    try:
        with limiter:
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"bgch {args.command}: {exc}", file=sys.stderr)
        return 2
    except (GraphError, HashTableError, RetrievalError, TrainingError, ValueError, OSError) as exc:
        print(f"bgch {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
