"""Layer-wise propagation, sign hashing, rescaling factors and bit packing.

Codes are stored one bit per coordinate (set <=> +1) in little-endian
64-bit words; padding bits past ``d`` are always zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dispersion import DispersionConfig, ProjectionState, disperse, power_iterate
from .graph import NormalizedAdjacency

TABLE_MAGIC = b"BGCH"
TABLE_VERSION = 1
_HEADER = struct.Struct("<HQII")
HEADER_BYTES = len(TABLE_MAGIC) + _HEADER.size


class HashTableError(ValueError):
    pass


def n_words(d: int) -> int:
    return (d + 63) // 64


def _record(S: int, W: int) -> np.dtype:
    # on disk a node is S float32 factors followed by S segments of W words
    return np.dtype([("scales", "<f4", (S,)), ("codes", "<u8", (S, W))])


def sign_binarize(row) -> np.ndarray:
    """+1 where row >= 0, -1 where row < 0 (sign(0) is taken as +1)."""
    row = np.asarray(row, dtype=np.float64)
    if np.isnan(row).any():
        raise HashTableError("NaN in embedding passed to sign")
    return np.where(row < 0, -1.0, 1.0)


def rescale_factor(row) -> np.ndarray | float:
    """Mean absolute value along the last axis."""
    row = np.asarray(row, dtype=np.float64)
    if row.shape[-1] < 1:
        raise HashTableError("rescaling needs d >= 1")
    return np.abs(row).sum(axis=-1) / row.shape[-1]


def pack_codes(codes) -> np.ndarray:
    """(..., d) array of +-1 (or booleans) -> (..., ceil(d/64)) uint64 words."""
    codes = np.asarray(codes)
    bits = codes > 0
    d = bits.shape[-1]
    pad = n_words(d) * 64 - d
    if pad:
        bits = np.concatenate([bits, np.zeros(bits.shape[:-1] + (pad,), dtype=bool)], axis=-1)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64, copy=False)


def unpack_codes(words, d: int) -> np.ndarray:
    """Inverse of :func:`pack_codes`; returns int8 values in {-1, +1}."""
    words = np.ascontiguousarray(np.asarray(words, dtype="<u8"))
    bits = np.unpackbits(words.view(np.uint8), axis=-1, bitorder="little")[..., :d]
    return (bits.astype(np.int8) * 2 - 1)


@dataclass(frozen=True, eq=False)
class LayerStack:
    layers: list
    proj: ProjectionState | None = None
    epsilon: float = 0.0

    @property
    def L(self) -> int:
        return len(self.layers) - 1


def convolve_stack(adj: NormalizedAdjacency, V0: np.ndarray, cfg: DispersionConfig, L: int,
                   proj: ProjectionState | None = None,
                   rng: np.random.Generator | None = None) -> LayerStack:
    """Disperse V0 once, then propagate it L times through the normalized adjacency."""
    V0 = np.asarray(V0, dtype=np.float64)
    if L < 0:
        raise HashTableError("L must be >= 0")
    if V0.ndim != 2 or V0.shape[0] != adj.shape[0]:
        raise HashTableError(f"V0 has {V0.shape[0]} rows, adjacency has {adj.shape[0]}")
    cfg.check_layers(L)
    if cfg.epsilon > 0:
        if proj is None:
            proj = power_iterate(V0, cfg, rng)
        first = disperse(V0, proj, cfg.epsilon)
    else:
        first = V0.copy()
    layers = [first]
    for _ in range(L):
        layers.append(adj @ layers[-1])
    return LayerStack(layers, proj, cfg.epsilon)


@dataclass(frozen=True, eq=False)
class HashCodeTable:
    """Per node: ``S = L + 1`` packed code segments and float32 scales."""

    codes: np.ndarray   # (n, S, W) uint64
    scales: np.ndarray  # (n, S) float32
    d: int

    def __post_init__(self):
        codes = np.ascontiguousarray(self.codes, dtype=np.uint64)
        scales = np.ascontiguousarray(self.scales, dtype=np.float32)
        if codes.ndim != 3 or scales.shape != codes.shape[:2]:
            raise HashTableError("codes must be (n, S, W) and scales (n, S)")
        if codes.shape[2] != n_words(self.d):
            raise HashTableError(f"d={self.d} needs {n_words(self.d)} words per segment")
        if np.any(scales < 0):
            raise HashTableError("rescaling factors must be non-negative")
        codes.setflags(write=False)
        scales.setflags(write=False)
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "scales", scales)

    @property
    def n_nodes(self) -> int:
        return self.codes.shape[0]

    @property
    def n_segments(self) -> int:
        return self.codes.shape[1]

    @property
    def L(self) -> int:
        return self.n_segments - 1

    @property
    def payload_bits_per_node(self) -> int:
        return self.n_segments * (self.d + 32)

    def _check(self, node, layer):
        if not 0 <= node < self.n_nodes:
            raise IndexError(f"node {node} out of range [0, {self.n_nodes})")
        if not 0 <= layer < self.n_segments:
            raise IndexError(f"layer {layer} out of range [0, {self.n_segments})")

    def segment(self, node: int, layer: int) -> np.ndarray:
        self._check(node, layer)
        return unpack_codes(self.codes[node, layer], self.d)

    def dequantize(self, node: int, layer: int) -> np.ndarray:
        return np.float64(self.scales[node, layer]) * self.segment(node, layer)

    def signs(self) -> np.ndarray:
        """All codes unpacked, shape (n, S, d), int8."""
        return unpack_codes(self.codes, self.d)

    def subset(self, nodes) -> "HashCodeTable":
        nodes = np.asarray(nodes, dtype=np.int64)
        return HashCodeTable(self.codes[nodes], self.scales[nodes], self.d)

    def to_bytes(self) -> bytes:
        S, W = self.n_segments, self.codes.shape[2]
        body = np.empty(self.n_nodes, dtype=_record(S, W))
        body["scales"] = self.scales
        body["codes"] = self.codes
        header = TABLE_MAGIC + _HEADER.pack(TABLE_VERSION, self.n_nodes, self.d, self.L)
        return header + body.tobytes()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "HashCodeTable":
        if data[:4] != TABLE_MAGIC:
            raise HashTableError("not a code table (bad magic)")
        version, n, d, L = _HEADER.unpack_from(data, 4)
        if version != TABLE_VERSION:
            raise HashTableError(f"unsupported code table version {version}")
        S, W = L + 1, n_words(d)
        rec = _record(S, W)
        expected = HEADER_BYTES + n * rec.itemsize
        if len(data) != expected:
            raise HashTableError(f"code table is {len(data)} bytes, header implies {expected}")
        body = np.frombuffer(data, dtype=rec, count=n, offset=HEADER_BYTES)
        codes = body["codes"].astype(np.uint64)
        if d % 64 and np.any(codes[..., -1] >> np.uint64(d % 64)):
            raise HashTableError("code table has set padding bits")
        return cls(codes, body["scales"].astype(np.float32), d)

    @classmethod
    def load(cls, path) -> "HashCodeTable":
        return cls.from_bytes(Path(path).read_bytes())


def build_code_table(stack: LayerStack | list, layers=None, unit_scales: bool = False,
                     scales: np.ndarray | None = None) -> HashCodeTable:
    """Sign-hash and rescale every layer (or the chosen ``layers``) of a stack.

    ``unit_scales`` forces every factor to 1; ``scales`` supplies explicit
    (n, S) factors, e.g. learned ones.
    """
    mats = stack.layers if isinstance(stack, LayerStack) else list(stack)
    if not mats:
        raise HashTableError("empty layer stack")
    if layers is not None:
        mats = [mats[i] for i in layers]
    arr = np.stack([np.asarray(m, dtype=np.float64) for m in mats], axis=1)  # (n, S, d)
    codes = pack_codes(sign_binarize(arr))
    if scales is not None:
        alpha = np.asarray(scales, dtype=np.float64)
    elif unit_scales:
        alpha = np.ones(arr.shape[:2])
    else:
        alpha = rescale_factor(arr)
    return HashCodeTable(codes, alpha.astype(np.float32), arr.shape[2])
