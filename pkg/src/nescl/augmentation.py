"""Stochastic graph corruption: node dropout, edge dropout, random walk.

All sampling is integer-only (permutations of edge / node indices) so a
seed fixes the retained structure exactly; normalisation weights are
computed afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError
from .interactions import BipartiteGraph, normalized_weights

STRATEGIES = ("node_dropout", "edge_dropout", "random_walk")
ALIASES = {"nd": "node_dropout", "ed": "edge_dropout", "rw": "random_walk"}
RENORMALIZE = ("corrupted", "original")


def resolve_strategy(name: str) -> str:
    name = ALIASES.get(name, name)
    if name not in STRATEGIES:
        raise ConfigError(f"unknown augmentation strategy {name!r}; expected one of "
                          f"{sorted(STRATEGIES + tuple(ALIASES))}")
    return name


def round_half_up(x) -> int:
    return int(math.floor(x + Fraction(1, 2)))


def _exact(rho: float) -> Fraction:
    # decimal reading of rho, so 0.3 * 10 is exactly 3
    return Fraction(repr(float(rho)))


@dataclass(frozen=True, eq=False)
class AugmentedGraph:
    """One corrupted view; ``per_layer`` has one matrix per distinct structure.

    ``kept`` holds, per structure, the sorted indices of retained undirected
    edges of the source graph.
    """

    strategy: str
    rho: float
    per_layer: tuple[sp.csr_matrix, ...]
    kept: tuple[np.ndarray, ...]
    seed: int | None = None
    renormalize: str = "corrupted"

    def layer(self, l: int) -> sp.csr_matrix:
        """Structure used for propagation layer ``l`` (1-based)."""
        return self.per_layer[min(l, len(self.per_layer)) - 1]

    def same_structure(self, other: "AugmentedGraph") -> bool:
        return (len(self.kept) == len(other.kept)
                and all(np.array_equal(a, b) for a, b in zip(self.kept, other.kept)))


def _matrix(g: BipartiteGraph, kept: np.ndarray, renormalize: str) -> sp.csr_matrix:
    e = g.num_undirected
    users, items = g.rows[:e][kept], g.cols[:e][kept]
    rows = np.concatenate([users, items])
    cols = np.concatenate([items, users])
    if renormalize == "corrupted":
        degrees = np.bincount(rows, minlength=g.node_count)
    else:
        degrees = g.degrees
    w = normalized_weights(rows, cols, degrees) if len(rows) else np.empty(0)
    n = g.node_count
    m = sp.csr_matrix((w, (rows, cols)), shape=(n, n))
    m.sort_indices()
    return m


def _edge_dropout(g: BipartiteGraph, rho: float, rng: np.random.Generator) -> np.ndarray:
    e = g.num_undirected
    keep = round_half_up((1 - _exact(rho)) * e)
    return np.sort(rng.permutation(e)[:keep])


def _node_dropout(g: BipartiteGraph, rho: float, rng: np.random.Generator) -> np.ndarray:
    n_drop = round_half_up(_exact(rho) * g.node_count)
    dropped = np.zeros(g.node_count, dtype=bool)
    dropped[rng.permutation(g.node_count)[:n_drop]] = True
    e = g.num_undirected
    alive = ~(dropped[g.rows[:e]] | dropped[g.cols[:e]])
    return np.flatnonzero(alive)


def full_view(g: BipartiteGraph) -> AugmentedGraph:
    """The uncorrupted graph wrapped as a single-structure view."""
    kept = np.arange(g.num_undirected)
    return AugmentedGraph("none", 0.0, (_matrix(g, kept, "original"),), (kept,))


def augment(g: BipartiteGraph, strategy: str, rho: float, layers: int,
            rng: np.random.Generator, renormalize: str = "corrupted",
            seed: int | None = None) -> AugmentedGraph:
    strategy = resolve_strategy(strategy)
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"drop ratio rho must lie in [0, 1], got {rho}")
    if layers < 1:
        raise ConfigError("layers must be >= 1")
    if renormalize not in RENORMALIZE:
        raise ConfigError(f"renormalize must be one of {RENORMALIZE}")

    if strategy == "node_dropout":
        kept = (_node_dropout(g, rho, rng),)
    elif strategy == "edge_dropout":
        kept = (_edge_dropout(g, rho, rng),)
    else:
        kept = tuple(_edge_dropout(g, rho, rng) for _ in range(layers))
    per_layer = tuple(_matrix(g, k, renormalize) for k in kept)
    return AugmentedGraph(strategy, rho, per_layer, kept, seed, renormalize)


def make_view_pair(g: BipartiteGraph, strategy: str, rho: float, layers: int,
                   rng: np.random.Generator, renormalize: str = "corrupted"
                   ) -> tuple[AugmentedGraph, AugmentedGraph]:
    first = augment(g, strategy, rho, layers, rng, renormalize)
    second = augment(g, strategy, rho, layers, rng, renormalize)
    return first, second
