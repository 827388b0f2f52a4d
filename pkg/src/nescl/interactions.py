"""Implicit-feedback datasets and the user-item bipartite graph.

Files use the LightGCN release layout: one line per user,
``user_id item_id item_id ...``, whitespace separated.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DataError


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _group(keys: np.ndarray, values: np.ndarray, size: int) -> tuple[np.ndarray, ...]:
    order = np.lexsort((values, keys))
    keys, values = keys[order], values[order]
    bounds = np.searchsorted(keys, np.arange(size + 1))
    return tuple(_frozen(values[bounds[i]:bounds[i + 1]].copy()) for i in range(size))


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    """Train/test interaction partitions with per-node adjacency sets.

    ``train_pairs`` and ``test_pairs`` are ``(P, 2)`` int64 arrays sorted by
    (user, item). ``user_items[u]`` and ``item_users[i]`` are sorted arrays
    built from the train partition only.
    """

    num_users: int
    num_items: int
    train_pairs: np.ndarray
    test_pairs: np.ndarray
    user_items: tuple[np.ndarray, ...] = field(repr=False)
    item_users: tuple[np.ndarray, ...] = field(repr=False)
    warnings: tuple[str, ...] = ()

    @classmethod
    def from_pairs(cls, num_users: int, num_items: int, train, test=(),
                   warnings=()) -> "InteractionDataset":
        train = _canonical_pairs(train)
        test = _canonical_pairs(test)
        if len(train) == 0:
            raise DataError("no interactions")
        for name, pairs in (("train", train), ("test", test)):
            if len(pairs) and (pairs.min() < 0 or pairs[:, 0].max() >= num_users
                               or pairs[:, 1].max() >= num_items):
                raise DataError(f"{name} pair out of range for {num_users} users x {num_items} items")
        warnings = list(warnings)
        if len(test):
            overlap = _contains(train, test)
            if overlap.any():
                warnings.append(f"{int(overlap.sum())} test pairs also present in train; dropped from test")
                test = test[~overlap]
        user_items = _group(train[:, 0], train[:, 1], num_users)
        item_users = _group(train[:, 1], train[:, 0], num_items)
        return cls(num_users, num_items, _frozen(train), _frozen(test),
                   user_items, item_users, tuple(warnings))

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    def test_items(self) -> tuple[np.ndarray, ...]:
        return _group(self.test_pairs[:, 0], self.test_pairs[:, 1], self.num_users)

    def user_degrees(self) -> np.ndarray:
        return np.bincount(self.train_pairs[:, 0], minlength=self.num_users)

    def item_degrees(self) -> np.ndarray:
        return np.bincount(self.train_pairs[:, 1], minlength=self.num_items)

    def rating_matrix(self) -> sp.csr_matrix:
        """Binary ``num_users x num_items`` train matrix."""
        data = np.ones(len(self.train_pairs), dtype=np.float64)
        return sp.csr_matrix((data, (self.train_pairs[:, 0], self.train_pairs[:, 1])),
                             shape=(self.num_users, self.num_items))

    def content_hash(self) -> str:
        """SHA-256 over the sizes and the train partition."""
        h = hashlib.sha256()
        h.update(np.array([self.num_users, self.num_items], dtype="<i8").tobytes())
        h.update(self.train_pairs.astype("<i8").tobytes())
        return h.hexdigest()

    def same_as(self, other: "InteractionDataset") -> bool:
        return (self.num_users == other.num_users and self.num_items == other.num_items
                and np.array_equal(self.train_pairs, other.train_pairs)
                and np.array_equal(self.test_pairs, other.test_pairs))


def _canonical_pairs(pairs) -> np.ndarray:
    a = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(a) == 0:
        return np.empty((0, 2), dtype=np.int64)
    return np.unique(a, axis=0)


def _contains(haystack: np.ndarray, needles: np.ndarray) -> np.ndarray:
    width = max(int(haystack[:, 1].max(initial=0)), int(needles[:, 1].max(initial=0))) + 1
    hk = haystack[:, 0] * width + haystack[:, 1]
    nk = needles[:, 0] * width + needles[:, 1]
    return np.isin(nk, hk)


def _parse_file(path: Path) -> tuple[list[tuple[int, int]], list[int]]:
    pairs: list[tuple[int, int]] = []
    seen_users: list[int] = []
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            try:
                tokens = raw.decode("ascii").split()
            except UnicodeDecodeError:
                raise DataError(f"{path}:{lineno}: non-ASCII content") from None
            if not tokens:
                continue
            values = []
            for tok in tokens:
                if not tok.isdigit():
                    raise DataError(f"{path}:{lineno}: malformed token {tok!r}")
                values.append(int(tok))
            user = values[0]
            seen_users.append(user)
            pairs.extend((user, item) for item in values[1:])
    return pairs, seen_users


def load_dataset(train_path, test_path=None) -> InteractionDataset:
    """Read a train file and an optional test file.

    ``num_users``/``num_items`` are one past the largest id seen in either
    file. Users listed without any train item are kept and reported in
    ``warnings``; evaluation skips them.
    """
    train_path = Path(train_path)
    train, train_users = _parse_file(train_path)
    if not train:
        raise DataError(f"{train_path}: no interactions")
    test, test_users = ([], []) if test_path is None else _parse_file(Path(test_path))

    all_users = [u for u, _ in train] + [u for u, _ in test] + train_users + test_users
    all_items = [i for _, i in train] + [i for _, i in test]
    m = 1 + max(all_users)
    n = 1 + max(all_items)

    with_train = {u for u, _ in train}
    lonely = sorted(set(train_users + test_users) - with_train)
    warnings = [f"user {u} has no train items" for u in lonely]
    return InteractionDataset.from_pairs(m, n, train, test, warnings)


def save_dataset(ds: InteractionDataset, train_path, test_path=None) -> None:
    """Write ``ds`` back out in the text format read by :func:`load_dataset`."""

    def write(path, items_by_user, keep_last: bool):
        with open(path, "w", encoding="ascii") as fh:
            for u, items in enumerate(items_by_user):
                if len(items) or (keep_last and u == ds.num_users - 1):
                    fh.write(" ".join(str(x) for x in (u, *items.tolist())) + "\n")

    test_by_user = ds.test_items()
    last = ds.num_users - 1
    last_missing = len(ds.user_items[last]) == 0 and len(test_by_user[last]) == 0
    write(train_path, ds.user_items, keep_last=last_missing)
    if test_path is not None:
        write(test_path, test_by_user, keep_last=False)


@dataclass(frozen=True, eq=False)
class BipartiteGraph:
    """Symmetric user-item graph over ``num_users + num_items`` nodes.

    Items are offset by ``num_users``. ``rows``/``cols`` list every train pair
    twice (user->item first, then item->user), ``weights`` hold the
    symmetric normalisation ``1/sqrt(d_i d_j)``.
    """

    num_users: int
    num_items: int
    rows: np.ndarray
    cols: np.ndarray
    degrees: np.ndarray
    weights: np.ndarray

    @property
    def node_count(self) -> int:
        return self.num_users + self.num_items

    @property
    def num_undirected(self) -> int:
        return len(self.rows) // 2

    def item_node(self, item):
        return np.asarray(item) + self.num_users

    def undirected_edges(self) -> np.ndarray:
        """``(E, 2)`` array of (user node, item node)."""
        e = self.num_undirected
        return np.stack([self.rows[:e], self.cols[:e]], axis=1)

    def adjacency(self) -> sp.csr_matrix:
        n = self.node_count
        return sp.csr_matrix((self.weights, (self.rows, self.cols)), shape=(n, n))


def normalized_weights(rows: np.ndarray, cols: np.ndarray, degrees: np.ndarray) -> np.ndarray:
    return 1.0 / np.sqrt(degrees[rows].astype(np.float64) * degrees[cols])


def build_graph(ds: InteractionDataset) -> BipartiteGraph:
    m = ds.num_users
    users = ds.train_pairs[:, 0]
    items = ds.train_pairs[:, 1] + m
    rows = np.concatenate([users, items])
    cols = np.concatenate([items, users])
    degrees = np.bincount(rows, minlength=ds.num_nodes)
    weights = normalized_weights(rows, cols, degrees)
    return BipartiteGraph(m, ds.num_items, _frozen(rows), _frozen(cols),
                          _frozen(degrees), _frozen(weights))
