"""LightGCN forward pass, its adjoint, scoring and checkpoint files."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augmentation import AugmentedGraph
from .errors import DataError

_MAGIC = b"NSCLCKPT"
_VERSION = 1
_HEADER = struct.Struct("<8sHQIII")

FLAG_DROP_LAYER0 = 1
FLAG_NORMALIZE = 2


def init_embeddings(num_nodes: int, dim: int, rng: np.random.Generator,
                    std: float = 0.01) -> np.ndarray:
    return rng.normal(0.0, std, size=(num_nodes, dim))


@dataclass
class EmbeddingViews:
    """Per-layer outputs of one propagation and their concatenation."""

    base: np.ndarray
    layer_outputs: list[np.ndarray]
    concat: np.ndarray
    include_layer0: bool = True

    @property
    def dim(self) -> int:
        return self.base.shape[1]

    def included_layers(self) -> list[np.ndarray]:
        return ([self.base] if self.include_layer0 else []) + self.layer_outputs


def propagate(base: np.ndarray, ag: AugmentedGraph, layers: int,
              include_layer0: bool = True) -> EmbeddingViews:
    """``H^l = A_l H^{l-1}`` for ``l = 1..layers``; concatenates the layers.

    ``A_l`` is the normalised adjacency of ``ag`` for layer ``l``.
    """
    if layers < 1:
        raise ValueError("layers must be >= 1")
    n = ag.per_layer[0].shape[0]
    if base.ndim != 2 or base.shape[0] != n:
        raise ValueError(f"embedding table has shape {base.shape}, graph has {n} nodes")
    outputs = []
    h = base
    for l in range(1, layers + 1):
        h = ag.layer(l) @ h
        outputs.append(h)
    parts = ([base] if include_layer0 else []) + outputs
    return EmbeddingViews(base, outputs, np.hstack(parts), include_layer0)


def backpropagate(grad_concat: np.ndarray, ag: AugmentedGraph, layers: int,
                  include_layer0: bool = True) -> np.ndarray:
    """Gradient w.r.t. the base table given a gradient w.r.t. ``concat``."""
    n_parts = layers + (1 if include_layer0 else 0)
    dim = grad_concat.shape[1] // n_parts
    slices = [grad_concat[:, p * dim:(p + 1) * dim] for p in range(n_parts)]
    offset = 1 if include_layer0 else 0
    g = np.zeros((grad_concat.shape[0], dim))
    for l in range(layers, 0, -1):
        g = g + slices[offset + l - 1]
        g = ag.layer(l).T @ g
    if include_layer0:
        g = g + slices[0]
    return g


def score(h_user: np.ndarray, h_item: np.ndarray) -> float:
    h_user, h_item = np.asarray(h_user), np.asarray(h_item)
    if h_user.shape != h_item.shape:
        raise ValueError(f"length mismatch: {h_user.shape} vs {h_item.shape}")
    return float(h_user @ h_item)


def score_all(user_rows: np.ndarray, item_rows: np.ndarray) -> np.ndarray:
    return np.asarray(user_rows) @ np.asarray(item_rows).T


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params))

    def update(self, params: np.ndarray, grad: np.ndarray, lr: float) -> None:
        """In-place bias-corrected Adam step."""
        self.step += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.step)
        v_hat = self.v / (1 - self.beta2 ** self.step)
        params -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class ModelParams:
    embedding: np.ndarray
    optimizer: AdamState = field(repr=False, default=None)

    def __post_init__(self):
        if self.optimizer is None:
            self.optimizer = AdamState.like(self.embedding)

    @property
    def step(self) -> int:
        return self.optimizer.step


@dataclass(frozen=True)
class Checkpoint:
    embedding: np.ndarray
    layers: int
    flags: int = 0

    @property
    def drop_layer0(self) -> bool:
        return bool(self.flags & FLAG_DROP_LAYER0)

    @property
    def normalize(self) -> bool:
        return bool(self.flags & FLAG_NORMALIZE)


def save_checkpoint(path, embedding: np.ndarray, layers: int, flags: int = 0) -> None:
    n, d = embedding.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, n, d, layers, flags))
        fh.write(np.ascontiguousarray(embedding, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise DataError(f"{path}: truncated checkpoint")
    magic, version, n, d, layers, flags = _HEADER.unpack_from(data, 0)
    if magic != _MAGIC or version != _VERSION:
        raise DataError(f"{path}: not a checkpoint (magic/version mismatch)")
    expected = _HEADER.size + n * d * 8
    if len(data) != expected:
        raise DataError(f"{path}: expected {expected} bytes for a {n}x{d} table, found {len(data)}")
    table = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(n, d).astype(np.float64)
    return Checkpoint(table, layers, flags)
