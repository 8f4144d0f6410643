"""Optimization loop: dispersion, convolutional hashing, two-term loss, Adam.

The only trainable tensor is the initial embedding table ``V0`` (plus the
factor table under the ``learnable_factors`` ablation). Gradients are
derived by hand; sign() is differentiated through the configured
surrogate estimator and the rescaling factors through the L1 subgradient.
"""

from __future__ import annotations

import csv
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, TrainConfig, stream
from .dispersion import (DispersionConfig, DispersionError, ProjectionState, disperse,
                         disperse_transpose, power_iterate)
from .estimators import surrogate_grad, surrogate_value
from .graph import BipartiteGraph, DataSplit, NormalizedAdjacency, normalize
from .hashing import HashCodeTable, build_code_table, rescale_factor, sign_binarize
from .metrics import evaluate_table

log = logging.getLogger(__name__)

_LOG_CLAMP = 1e-7
METRIC_FIELDS = ["epoch", "loss_rec", "loss_bpr", "loss_total", "recall@20", "ndcg@20"]
CHECKPOINT_MAGIC = b"BGCK"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class Adam:
    def __init__(self, shape, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, param: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        param -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _neg_log(p):
    """-ln(p) with p clamped away from 0 and 1; returns (loss, active mask)."""
    active = (p > _LOG_CLAMP) & (p < 1 - _LOG_CLAMP)
    return -np.log(np.clip(p, _LOG_CLAMP, 1 - _LOG_CLAMP)), active


def loss_rec(V0, pos, neg):
    """Cross-entropy reconstruction on raw embeddings, normalized by #positives.

    ``pos`` and ``neg`` are (x, y) global-index pairs. Returns (loss, dV0).
    """
    px, py = pos
    nx, ny = neg
    zp = np.einsum("ij,ij->i", V0[px], V0[py])
    zn = np.einsum("ij,ij->i", V0[nx], V0[ny])
    sp_, sn = _sigmoid(zp), _sigmoid(zn)
    lp, ap = _neg_log(sp_)
    ln_, an = _neg_log(1.0 - sn)
    m = max(len(px), 1)
    loss = (lp.sum() + ln_.sum()) / m
    gp = np.where(ap, sp_ - 1.0, 0.0) / m
    gn = np.where(an, sn, 0.0) / m
    grad = np.zeros_like(V0)
    np.add.at(grad, px, gp[:, None] * V0[py])
    np.add.at(grad, py, gp[:, None] * V0[px])
    np.add.at(grad, nx, gn[:, None] * V0[ny])
    np.add.at(grad, ny, gn[:, None] * V0[nx])
    return float(loss), grad


def loss_bpr(scores_pos, scores_neg):
    """Mean of -ln sigma(pos - neg); returns (loss, dloss/dpos)."""
    diff = np.asarray(scores_pos, dtype=np.float64) - np.asarray(scores_neg, dtype=np.float64)
    s = _sigmoid(diff)
    l, active = _neg_log(s)
    m = max(len(diff), 1)
    return float(l.sum() / m), np.where(active, s - 1.0, 0.0) / m


def total_loss(rec: float, bpr: float, V0, cfg: TrainConfig) -> float:
    out = 0.0 if "no_rec" in cfg.ablations else rec
    if "no_bpr" not in cfg.ablations:
        out += cfg.lambda1 * bpr
    return out + cfg.lambda2 * float(np.sum(np.asarray(V0) ** 2))


@dataclass
class Forward:
    layers: list
    hashed: list        # layer indices that carry a code segment
    pre: np.ndarray     # (n, S, c) pre-sign activations
    codes: np.ndarray   # (n, S, c)
    scales: np.ndarray  # (n, S)
    proj: ProjectionState | None
    epsilon: float
    mode: str


def hashed_layers(cfg: TrainConfig) -> list:
    return [cfg.layers] if "no_ah_ta" in cfg.ablations else list(range(cfg.layers + 1))


def forward(V0, adj: NormalizedAdjacency, cfg: TrainConfig, proj: ProjectionState | None,
            mode: str = "sign", alpha=None) -> Forward:
    """Dispersion -> L propagations -> per-layer codes and factors.

    ``mode``: "sign" (strict sign, training/deployment), "surrogate"
    (the estimator's smooth function, for gradient checks) or "none"
    (identity codes and unit factors).
    """
    eps = cfg.effective_epsilon
    cur = disperse(V0, proj, eps) if eps > 0 else np.array(V0, dtype=np.float64)
    layers = [cur]
    for _ in range(cfg.layers):
        cur = adj @ cur
        layers.append(cur)
    hl = hashed_layers(cfg)
    pre = np.stack([layers[i] for i in hl], axis=1)
    if mode == "sign":
        codes = sign_binarize(pre)
    elif mode == "surrogate":
        codes = surrogate_value(cfg.estimator, pre)
    elif mode == "none":
        codes = pre
    else:
        raise ValueError(f"unknown forward mode {mode!r}")
    if mode == "none" or "no_ah_rf" in cfg.ablations:
        scales = np.ones(pre.shape[:2])
    elif alpha is not None:
        scales = alpha
    else:
        scales = rescale_factor(pre)
    return Forward(layers, hl, pre, codes, scales, proj, eps, mode)


def forward_scores(codes, scales, xs, ys) -> np.ndarray:
    """sum_s a_x a_y (Q_x . Q_y), accumulated over segments in order."""
    xs = np.asarray(xs)
    ys = np.asarray(ys)
    out = np.zeros(len(xs))
    for s in range(codes.shape[1]):
        inner = np.einsum("ij,ij->i", codes[xs, s], codes[ys, s])
        out += (scales[xs, s] * scales[ys, s]) * inner
    return out


def table_scores(table: HashCodeTable, xs, ys) -> np.ndarray:
    """Float scores straight from a frozen code table (dequantized path)."""
    signs = table.signs().astype(np.float64)
    scales = table.scales.astype(np.float64)
    return forward_scores(signs, scales, xs, ys)


def _score_backward(fw: Forward, xs, ys, g, dQ, dA):
    for s in range(fw.codes.shape[1]):
        ax, ay = fw.scales[xs, s], fw.scales[ys, s]
        qx, qy = fw.codes[xs, s], fw.codes[ys, s]
        w = g * ax * ay
        np.add.at(dQ[:, s], xs, w[:, None] * qy)
        np.add.at(dQ[:, s], ys, w[:, None] * qx)
        inner = np.einsum("ij,ij->i", qx, qy)
        np.add.at(dA[:, s], xs, g * ay * inner)
        np.add.at(dA[:, s], ys, g * ax * inner)


def backward(fw: Forward, adj: NormalizedAdjacency, cfg: TrainConfig, dQ, dA,
             learnable: bool = False):
    """Map code/factor gradients back to V0. Returns (dV0, dalpha or None)."""
    c = fw.pre.shape[2]
    if fw.mode == "none":
        dpre = dQ.copy()
    else:
        dpre = dQ * surrogate_grad(cfg.estimator, fw.pre)
    dalpha = None
    if fw.mode != "none" and "no_ah_rf" not in cfg.ablations:
        if learnable:
            dalpha = dA
        else:
            dpre += dA[:, :, None] * np.sign(fw.pre) / c
    per_layer = {layer: dpre[:, s] for s, layer in enumerate(fw.hashed)}
    G = per_layer.get(cfg.layers, np.zeros_like(fw.layers[0]))
    for layer in range(cfg.layers - 1, -1, -1):
        G = adj @ G
        if layer in per_layer:
            G = G + per_layer[layer]
    if fw.epsilon > 0:
        G = disperse_transpose(G, fw.proj, fw.epsilon)
    bad = ~np.isfinite(G)
    if bad.any():
        node = int(np.argwhere(bad)[0, 0])
        raise TrainingError(f"non-finite gradient at node {node}")
    return G, dalpha


@dataclass
class Batch:
    pos_x: np.ndarray   # global ids, repeated once per negative
    pos_y: np.ndarray
    neg_y: np.ndarray   # global ids
    n_pos: int


@dataclass
class LossParts:
    rec: float
    bpr: float
    total: float


def objective(V0, adj, cfg: TrainConfig, proj, batch: Batch, mode: str = "sign", alpha=None):
    """Loss and gradients for one batch. Returns (LossParts, dV0, dalpha, Forward)."""
    fw = forward(V0, adj, cfg, proj, mode, alpha)
    rec, dV = 0.0, np.zeros_like(V0)
    if "no_rec" not in cfg.ablations:
        k = len(batch.pos_x) // max(batch.n_pos, 1)
        first = slice(None, None, k) if k > 1 else slice(None)
        rec, dV = loss_rec(V0, (batch.pos_x[first], batch.pos_y[first]), (batch.pos_x, batch.neg_y))
    dalpha = None
    sp_ = forward_scores(fw.codes, fw.scales, batch.pos_x, batch.pos_y)
    sn = forward_scores(fw.codes, fw.scales, batch.pos_x, batch.neg_y)
    bpr, g = loss_bpr(sp_, sn)
    if "no_bpr" not in cfg.ablations and cfg.lambda1 > 0:
        g = cfg.lambda1 * g
        dQ = np.zeros_like(fw.codes)
        dA = np.zeros_like(fw.scales)
        _score_backward(fw, batch.pos_x, batch.pos_y, g, dQ, dA)
        _score_backward(fw, batch.pos_x, batch.neg_y, -g, dQ, dA)
        dconv, dalpha = backward(fw, adj, cfg, dQ, dA, learnable=alpha is not None)
        dV += dconv
    dV += 2.0 * cfg.lambda2 * V0
    return LossParts(rec, bpr, total_loss(rec, bpr, V0, cfg)), dV, dalpha, fw


def sample_negatives(xs, n2: int, edge_keys: np.ndarray, k: int, rng: np.random.Generator,
                     max_rounds: int = 1000) -> np.ndarray:
    """k uniform y-negatives per x (dense ids), rejecting observed edges."""
    xs = np.repeat(np.asarray(xs, dtype=np.int64), k)
    ys = rng.integers(0, n2, size=len(xs))
    for _ in range(max_rounds):
        keys = xs * n2 + ys
        pos = np.searchsorted(edge_keys, keys)
        pos = np.minimum(pos, len(edge_keys) - 1)
        bad = edge_keys[pos] == keys
        if not bad.any():
            return ys.reshape(-1, k)
        ys[bad] = rng.integers(0, n2, size=int(bad.sum()))
    raise TrainingError("negative sampling did not terminate; is some x adjacent to every y?")


@dataclass
class TrainState:
    V: np.ndarray
    adam: Adam
    alpha: np.ndarray | None = None
    alpha_adam: Adam | None = None
    epoch: int = 0
    proj: ProjectionState | None = None
    p0: np.ndarray | None = None
    rngs: dict = field(default_factory=dict)


@dataclass
class TrainResult:
    state: TrainState
    table: HashCodeTable
    log: list
    iter_seconds: list
    adj: NormalizedAdjacency
    config: TrainConfig

    def write_metrics(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, extrasaction="ignore")
            w.writeheader()
            for row in self.log:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})

    def write_timing(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "wall_ms", "iter_ms"])
            for row in self.log:
                w.writerow([row["epoch"], f"{row['wall_ms']:.3f}", f"{row['iter_ms']:.4f}"])

    @property
    def per_iteration_ms(self) -> float:
        return float(np.median(self.iter_seconds) * 1e3) if self.iter_seconds else 0.0


def init_state(n_nodes: int, cfg: TrainConfig) -> TrainState:
    rngs = {name: stream(cfg.seed, name) for name in ("init", "dispersion", "sampling")}
    V = rngs["init"].normal(0.0, cfg.init_std, size=(n_nodes, cfg.dim))
    return TrainState(V=V, adam=Adam(V.shape, cfg.lr), rngs=rngs)


def _projection(state: TrainState, cfg: TrainConfig) -> ProjectionState | None:
    if cfg.effective_epsilon == 0:
        return None
    dcfg = DispersionConfig(cfg.disp_iters, cfg.effective_epsilon, cfg.seed)
    rng = state.rngs["dispersion"]
    if cfg.freeze_p0:
        if state.p0 is None:
            state.p0 = rng.standard_normal(cfg.dim)
        return power_iterate(state.V, dcfg, rng, p0=state.p0)
    return power_iterate(state.V, dcfg, rng)


def code_table(state: TrainState, adj: NormalizedAdjacency, cfg: TrainConfig) -> HashCodeTable:
    """Deployment codes from the current embeddings and the last projection."""
    fw = forward(state.V, adj, cfg, state.proj, "sign", state.alpha)
    segments = list(fw.pre.transpose(1, 0, 2))
    if "no_ah_rf" in cfg.ablations:
        return build_code_table(segments, unit_scales=True)
    if state.alpha is not None:
        # a * Q == |a| * (-Q): store non-negative factors, flip the codes instead
        flip = np.where(state.alpha < 0, -1.0, 1.0)
        segments = [seg * flip[:, s, None] for s, seg in enumerate(segments)]
        return build_code_table(segments, scales=np.abs(state.alpha))
    return build_code_table(segments)


def train(split: DataSplit, cfg: TrainConfig, evaluate: bool = True,
          on_epoch=None) -> TrainResult:
    train_g = split.train
    if train_g.n_edges == 0:
        raise TrainingError("empty training set")
    adj = normalize(train_g)
    state = init_state(train_g.n_nodes, cfg)
    n1, n2 = train_g.n1, train_g.n2
    keys = train_g.edge_keys()
    deg = np.bincount(train_g.edges[:, 0], minlength=n1)
    usable = deg[train_g.edges[:, 0]] < n2
    edges = train_g.edges[usable]
    if len(edges) < train_g.n_edges:
        log.warning("%d positives skipped: their x is adjacent to every y", train_g.n_edges - len(edges))

    learnable = "learnable_factors" in cfg.ablations
    if learnable:
        state.proj = _projection(state, cfg)
        state.alpha = forward(state.V, adj, cfg, state.proj).scales.copy()
        state.alpha_adam = Adam(state.alpha.shape, cfg.lr)

    history, iter_seconds = [], []
    best, stale = -np.inf, 0
    m = len(edges)
    for epoch in range(1, cfg.epochs + 1):
        t_epoch = time.perf_counter()
        order = state.rngs["sampling"].permutation(m)
        sums = np.zeros(3)
        n_batches = 0
        epoch_iter = []
        for start in range(0, m, cfg.batch_size):
            t0 = time.perf_counter()
            idx = order[start:start + cfg.batch_size]
            bx, by = edges[idx, 0], edges[idx, 1]
            neg = sample_negatives(bx, n2, keys, cfg.negatives, state.rngs["sampling"])
            batch = Batch(np.repeat(bx, cfg.negatives), n1 + np.repeat(by, cfg.negatives),
                          n1 + neg.ravel(), len(idx))
            try:
                state.proj = _projection(state, cfg)
            except DispersionError as exc:
                raise TrainingError(f"dispersion failed at epoch {epoch}: {exc}") from exc
            parts, dV, dalpha, _ = objective(state.V, adj, cfg, state.proj, batch,
                                             alpha=state.alpha)
            if not np.isfinite(parts.total):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            state.adam.step(state.V, dV)
            if learnable and dalpha is not None:
                state.alpha_adam.step(state.alpha, dalpha)
            sums += (parts.rec, parts.bpr, parts.total)
            n_batches += 1
            epoch_iter.append(time.perf_counter() - t0)
        iter_seconds.extend(epoch_iter)
        state.epoch = epoch
        means = (sums / n_batches).tolist()
        row = {"epoch": epoch, "loss_rec": means[0], "loss_bpr": means[1], "loss_total": means[2], "recall@20": float("nan"), "ndcg@20": float("nan")}
        if evaluate and split.test.n_edges:
            rep = evaluate_table(code_table(state, adj, cfg), split, ns=(cfg.eval_n,))
            row["recall@20"] = rep.recall[cfg.eval_n]
            row["ndcg@20"] = rep.ndcg[cfg.eval_n]
        row["wall_ms"] = (time.perf_counter() - t_epoch) * 1e3
        row["iter_ms"] = float(np.mean(epoch_iter) * 1e3)
        history.append(row)
        log.info("epoch %d loss %.5f (rec %.5f bpr %.5f) recall@%d %.4f", epoch, row["loss_total"],
                 row["loss_rec"], row["loss_bpr"], cfg.eval_n, row["recall@20"])
        if on_epoch is not None:
            on_epoch(row)
        if evaluate and cfg.patience > 0 and np.isfinite(row["recall@20"]):
            if row["recall@20"] > best:
                best, stale = row["recall@20"], 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    log.info("early stop after %d stagnant epochs", stale)
                    break
    if state.proj is None and cfg.effective_epsilon > 0:
        state.proj = _projection(state, cfg)
    return TrainResult(state, code_table(state, adj, cfg), history, iter_seconds, adj, cfg)


def landscape_scan(V0, split: DataSplit, cfg: TrainConfig, p_values, loss_kind: str = "bpr",
                   proj: ProjectionState | None = None, seed: int | None = None) -> list:
    """Loss over a grid of (x-side, y-side) perturbations V + p * mean|V_row| * 1.

    Evaluates the hashed (strict sign) and non-hashed (identity code, unit
    factor) forward passes on one fixed batch of training positives with
    fixed negatives. Returns rows (variant, p_x, p_y, loss).
    """
    if loss_kind not in ("bpr", "rec", "total"):
        raise ConfigError("loss_kind must be bpr, rec or total")
    g = split.train
    adj = normalize(g)
    n1 = g.n1
    rng = stream(cfg.seed if seed is None else seed, "landscape")
    V0 = np.asarray(V0, dtype=np.float64)
    if proj is None and cfg.effective_epsilon > 0:
        proj = power_iterate(V0, DispersionConfig(cfg.disp_iters, cfg.effective_epsilon), rng)
    neg = sample_negatives(g.edges[:, 0], g.n2, g.edge_keys(), 1, rng).ravel()
    batch = Batch(g.edges[:, 0], n1 + g.edges[:, 1], n1 + neg, g.n_edges)
    row_mag = np.abs(V0).mean(axis=1, keepdims=True)
    is_x = (np.arange(len(V0)) < n1)[:, None]
    rows = []
    for variant, mode in (("hashed", "sign"), ("non_hashed", "none")):
        for px in p_values:
            for py in p_values:
                shift = np.where(is_x, px, py) * row_mag
                V = V0 + shift
                parts = _losses_only(V, adj, cfg, proj, batch, mode)
                rows.append({"variant": variant, "p_x": float(px), "p_y": float(py),
                             "loss": getattr(parts, loss_kind)})
    return rows


def _losses_only(V, adj, cfg, proj, batch, mode):
    fw = forward(V, adj, cfg, proj, mode)
    k = len(batch.pos_x) // max(batch.n_pos, 1)
    first = slice(None, None, k) if k > 1 else slice(None)
    rec, _ = loss_rec(V, (batch.pos_x[first], batch.pos_y[first]), (batch.pos_x, batch.neg_y))
    bpr, _ = loss_bpr(forward_scores(fw.codes, fw.scales, batch.pos_x, batch.pos_y),
                      forward_scores(fw.codes, fw.scales, batch.pos_x, batch.neg_y))
    return LossParts(rec, bpr, total_loss(rec, bpr, V, cfg))


def save_checkpoint(state: TrainState, path) -> None:
    """Versioned container: header, then V, Adam m, Adam v as float64."""
    n, c = state.V.shape
    header = CHECKPOINT_MAGIC + struct.pack("<HQQQQ", CHECKPOINT_VERSION, n, c, state.epoch, state.adam.t)
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in (state.V, state.adam.m, state.adam.v):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path, lr: float = 1e-2) -> TrainState:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise TrainingError(f"{path}: not a checkpoint")
    version, n, c, epoch, t = struct.unpack_from("<HQQQQ", data, 4)
    if version != CHECKPOINT_VERSION:
        raise TrainingError(f"{path}: unsupported checkpoint version {version}")
    off = 4 + struct.calcsize("<HQQQQ")
    arrs = [np.frombuffer(data, "<f8", n * c, off + i * n * c * 8).reshape(n, c).copy() for i in range(3)]
    adam = Adam((n, c), lr)
    adam.m, adam.v, adam.t = arrs[1], arrs[2], int(t)
    return TrainState(V=arrs[0], adam=adam, epoch=int(epoch))
