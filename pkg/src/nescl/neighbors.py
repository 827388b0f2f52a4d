"""Co-occurrence cosine nearest neighbours for users and items.

``sim(i, j) = |R_i & R_j| / sqrt(|R_i| |R_j|)`` where ``R_i`` is the set of
nodes on the other side that ``i`` interacted with in the train partition.
Pair counts are accumulated through the inverted index (a sparse
``R R^T`` product) rather than by enumerating all pairs.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DataError
from .interactions import InteractionDataset

SIDES = ("user", "item")

_MAGIC = b"NSCLKNN\x00"
_VERSION = 1
_HEADER = struct.Struct("<8sHBIQ")
_LENGTH = struct.Struct("<I")
_RECORD = np.dtype([("id", "<i8"), ("sim", "<f8")])


def _check_side(side: str) -> None:
    if side not in SIDES:
        raise ValueError(f"side must be one of {SIDES}, got {side!r}")


def _sets(ds: InteractionDataset, side: str) -> tuple[np.ndarray, ...]:
    return ds.user_items if side == "user" else ds.item_users


def similarity(i: int, j: int, ds: InteractionDataset, side: str) -> float:
    _check_side(side)
    sets = _sets(ds, side)
    for x in (i, j):
        if not 0 <= x < len(sets):
            raise IndexError(f"{side} id {x} out of range [0, {len(sets)})")
    a, b = sets[i], sets[j]
    if len(a) == 0 or len(b) == 0:
        return 0.0
    common = len(np.intersect1d(a, b, assume_unique=True))
    return common / math.sqrt(len(a) * len(b))


@dataclass(frozen=True, eq=False)
class NeighborTable:
    """Top-``k`` neighbours per node in CSR layout.

    Row ``v`` is ``ids[indptr[v]:indptr[v+1]]`` with matching ``sims``, sorted
    by similarity descending then id ascending. Ids are side-local
    (user ids or item ids), never graph node ids.
    """

    side: str
    k: int
    indptr: np.ndarray
    ids: np.ndarray
    sims: np.ndarray

    @property
    def num_nodes(self) -> int:
        return len(self.indptr) - 1

    def row(self, v: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[v], self.indptr[v + 1]
        return self.ids[lo:hi], self.sims[lo:hi]

    def neighbors(self, v: int) -> list[tuple[int, float]]:
        ids, sims = self.row(v)
        return list(zip(ids.tolist(), sims.tolist()))

    def equals(self, other: "NeighborTable") -> bool:
        return (self.side == other.side and self.k == other.k
                and np.array_equal(self.indptr, other.indptr)
                and np.array_equal(self.ids, other.ids)
                and np.array_equal(self.sims, other.sims))


def cooccurrence(ds: InteractionDataset, side: str) -> sp.csr_matrix:
    """Integer pair counts ``|R_i & R_j|`` for all same-side pairs."""
    r = ds.rating_matrix()
    if side == "item":
        r = r.T.tocsr()
    c = (r @ r.T).tocsr()
    c.sort_indices()
    return c


def build_neighbor_table(ds: InteractionDataset, side: str, k: int) -> NeighborTable:
    _check_side(side)
    if k < 1:
        raise ValueError("k must be >= 1")
    counts = cooccurrence(ds, side)
    deg = np.array([len(s) for s in _sets(ds, side)], dtype=np.int64)
    n = counts.shape[0]

    indptr = np.zeros(n + 1, dtype=np.int64)
    ids_out, sims_out = [], []
    for v in range(n):
        lo, hi = counts.indptr[v], counts.indptr[v + 1]
        cols = counts.indices[lo:hi].astype(np.int64)
        common = counts.data[lo:hi]
        keep = (cols != v) & (common > 0)
        cols, common = cols[keep], common[keep]
        sims = common / np.sqrt((deg[v] * deg[cols]).astype(np.float64))
        order = np.lexsort((cols, -sims))[:k]
        ids_out.append(cols[order])
        sims_out.append(sims[order])
        indptr[v + 1] = indptr[v] + len(order)
    ids = np.concatenate(ids_out) if ids_out else np.empty(0, np.int64)
    sims = np.concatenate(sims_out) if sims_out else np.empty(0)
    return NeighborTable(side, k, indptr, ids, sims.astype(np.float64))


def cache_path(directory, side: str, k: int, dataset_hash: str) -> Path:
    return Path(directory) / f"knn-{side}-k{k}-{dataset_hash[:16]}.bin"


def save_neighbor_table(table: NeighborTable, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, SIDES.index(table.side), table.k, table.num_nodes))
        for v in range(table.num_nodes):
            ids, sims = table.row(v)
            rec = np.empty(len(ids), dtype=_RECORD)
            rec["id"], rec["sim"] = ids, sims
            fh.write(_LENGTH.pack(len(ids)))
            fh.write(rec.tobytes())


def load_neighbor_table(path) -> NeighborTable:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise DataError(f"{path}: truncated neighbour cache")
    magic, version, side, k, n = _HEADER.unpack_from(data, 0)
    if magic != _MAGIC or version != _VERSION or side >= len(SIDES):
        raise DataError(f"{path}: not a neighbour cache (magic/version mismatch)")
    offset = _HEADER.size
    indptr = np.zeros(n + 1, dtype=np.int64)
    chunks = []
    for v in range(n):
        (length,) = _LENGTH.unpack_from(data, offset)
        offset += _LENGTH.size
        rec = np.frombuffer(data, dtype=_RECORD, count=length, offset=offset)
        offset += length * _RECORD.itemsize
        chunks.append(rec)
        indptr[v + 1] = indptr[v] + length
    rec = np.concatenate(chunks) if chunks else np.empty(0, dtype=_RECORD)
    return NeighborTable(SIDES[side], k, indptr, rec["id"].astype(np.int64),
                         rec["sim"].astype(np.float64))


def load_or_build(ds: InteractionDataset, side: str, k: int, cache_dir=None,
                  dataset_hash: str | None = None) -> tuple[NeighborTable, bool]:
    """Return ``(table, cache_hit)``; writes the cache on a miss."""
    if cache_dir is None:
        return build_neighbor_table(ds, side, k), False
    path = cache_path(cache_dir, side, k, dataset_hash or ds.content_hash())
    if path.exists():
        table = load_neighbor_table(path)
        if table.side == side and table.k == k and table.num_nodes == len(_sets(ds, side)):
            return table, True
    table = build_neighbor_table(ds, side, k)
    path.parent.mkdir(parents=True, exist_ok=True)
    # concurrent runs may build the same table; readers only ever see a complete file
    tmp = path.with_name(f"{path.name}.{os.getpid()}.tmp")
    save_neighbor_table(table, tmp)
    os.replace(tmp, path)
    return table, False
