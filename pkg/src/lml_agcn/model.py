"""Feature backbone plus two-layer graph head.

Prediction for a batch ``X`` over the seen classes::

    H1 = lrelu(A_hat @ H0 @ W1)
    H  = A_hat @ H1 @ W2            # one classifier vector per class
    f  = lrelu(X @ V1) @ V2         # backbone representation
    y  = sigmoid(f @ H.T)
"""
from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Node

PARAM_NAMES = ("V1", "V2", "W1", "W2")
CKPT_MAGIC = b"LMLW"
CKPT_VERSION = 1


class ModelConfigError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    embed_dim: int = 16  # d
    gcn_hidden: int = 32  # h
    repr_dim: int = 32  # D
    backbone_hidden: int = 64  # m
    slope: float = 0.2
    seed: int = 0


def embedding_row(class_index: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x5EED, class_index])
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


class NodeEmbeddings:
    """Frozen per-class input vectors for the graph head; rows only ever appended."""

    def __init__(self, dim: int, seed: int = 0, table: np.ndarray | None = None) -> None:
        self.dim = dim
        self.seed = seed
        self._table = None if table is None else np.asarray(table, dtype=np.float64)
        self.names: list[str] = []
        self._rows: list[np.ndarray] = []

    def grow(self, names) -> None:
        names = list(names)
        dup = set(names) & set(self.names) or {n for n in names if names.count(n) > 1}
        if dup:
            raise ModelConfigError(f"duplicate class name(s): {sorted(dup)}")
        for name in names:
            idx = len(self._rows)
            if self._table is not None:
                if idx >= len(self._table):
                    raise ModelConfigError(f"embedding table has only {len(self._table)} rows")
                row = self._table[idx] / np.linalg.norm(self._table[idx])
            else:
                row = embedding_row(idx, self.dim, self.seed)
            self._rows.append(row)
            self.names.append(name)

    def __len__(self) -> int:
        return len(self._rows)

    @property
    def matrix(self) -> np.ndarray:
        if not self._rows:
            return np.zeros((0, self.dim))
        return np.stack(self._rows)


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([cfg.seed, 0xBEEF])

    def glorot(fan_in: int, fan_out: int) -> np.ndarray:
        return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / (fan_in + fan_out))

    return {
        "V1": glorot(cfg.feature_dim, cfg.backbone_hidden),
        "V2": glorot(cfg.backbone_hidden, cfg.repr_dim),
        "W1": glorot(cfg.embed_dim, cfg.gcn_hidden),
        "W2": glorot(cfg.gcn_hidden, cfg.repr_dim),
    }


def agcn_forward(a_hat: Node, h0: Node, w1: Node, w2: Node, slope: float = 0.2) -> Node:
    if a_hat.shape[0] != a_hat.shape[1] or a_hat.shape[1] != h0.shape[0]:
        raise DimensionError(f"propagation matrix {a_hat.shape} incompatible with embeddings {h0.shape}")
    h1 = nx.leaky_relu(a_hat @ (h0 @ w1), slope)
    return a_hat @ (h1 @ w2)


def backbone_forward(x: Node, v1: Node, v2: Node, slope: float = 0.2) -> Node:
    if x.shape[1] != v1.shape[0]:
        raise DimensionError(f"features of width {x.shape[1]} do not match backbone input {v1.shape[0]}")
    return nx.leaky_relu(x @ v1, slope) @ v2


@dataclass
class Forward:
    """Graph nodes from one prediction pass."""

    params: dict[str, Node]
    graph: Node  # H, seen x D
    features: Node  # backbone output, batch x D
    logits: Node
    probs: Node
    num_old: int

    @property
    def old_probs(self) -> Node:
        return nx.slice_cols(self.probs, 0, self.num_old)

    @property
    def new_probs(self) -> Node:
        return nx.slice_cols(self.probs, self.num_old, self.probs.shape[1])


def predict_nodes(
    x: np.ndarray,
    a_hat: np.ndarray,
    h0: np.ndarray,
    params: Mapping[str, np.ndarray | Node],
    slope: float = 0.2,
    num_old: int = 0,
) -> Forward:
    p = {k: v if isinstance(v, Node) else nx.param(v) for k, v in params.items()}
    graph = agcn_forward(nx.constant(a_hat), nx.constant(h0), p["W1"], p["W2"], slope)
    feats = backbone_forward(nx.constant(x), p["V1"], p["V2"], slope)
    logits = feats @ nx.transpose(graph)
    return Forward(p, graph, feats, logits, nx.sigmoid(logits), num_old)


def predict(x, a_hat, h0, params, slope: float = 0.2) -> np.ndarray:
    """Class probabilities, one row per example, without building gradients."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    const = {k: nx.constant(v) for k, v in params.items()}
    return predict_nodes(x, a_hat, h0, const, slope).probs.value


def params_checksum(params: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()


# -- checkpoint format -----------------------------------------------------

def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        key = name.encode("utf-8")
        buf.write(struct.pack("<H", len(key)))
        buf.write(key)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def decode_tensors(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != CKPT_MAGIC:
        raise CheckpointFormatError("bad magic, expected b'LMLW'")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointFormatError(f"truncated checkpoint at byte {pos}")
        out = struct.unpack_from(fmt, data, pos)
        pos += size
        return out

    version, count = take("<II")
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (klen,) = take("<H")
        (key,) = take(f"<{klen}s")
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        if pos + 8 * n > len(data):
            raise CheckpointFormatError(f"truncated tensor {key.decode()!r} at byte {pos}")
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
        out[key.decode("utf-8")] = arr
    if pos != len(data):
        raise CheckpointFormatError(f"{len(data) - pos} trailing bytes after last tensor")
    return out


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_tensors(tensors))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


@dataclass
class AgcnModel:
    """Live trainable model: parameters plus the growing node embedding table."""

    config: ModelConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)
    embeddings: NodeEmbeddings | None = None

    def __post_init__(self) -> None:
        if not self.params:
            self.params = init_params(self.config)
        if self.embeddings is None:
            self.embeddings = NodeEmbeddings(self.config.embed_dim, self.config.seed)

    def grow_label_space(self, names) -> None:
        self.embeddings.grow(names)

    @property
    def num_classes(self) -> int:
        return len(self.embeddings)

    def forward(self, x: np.ndarray, a_hat: np.ndarray, num_old: int = 0) -> Forward:
        return predict_nodes(
            np.asarray(x, dtype=np.float64), a_hat, self.embeddings.matrix, self.params, self.config.slope, num_old
        )

    def predict(self, x: np.ndarray, a_hat: np.ndarray) -> np.ndarray:
        return predict(x, a_hat, self.embeddings.matrix, self.params, self.config.slope)

    def checksum(self) -> str:
        return params_checksum(self.params)
