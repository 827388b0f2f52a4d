"""Full-ranking top-K evaluation: Recall@K and NDCG@K."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .augmentation import full_view
from .encoder import propagate
from .interactions import BipartiteGraph, InteractionDataset, build_graph

DEFAULT_K = 20
METRIC_COLUMNS = ("epoch", "loss_total", "loss_rank", "loss_contrastive", "recall@20", "ndcg@20")


def _discounts(k: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, k + 2))


def recall_at_k(ranked, relevant, k: int = DEFAULT_K) -> float:
    relevant = set(int(x) for x in relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    hits = sum(1 for x in list(ranked)[:k] if int(x) in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked, relevant, k: int = DEFAULT_K) -> float:
    relevant = set(int(x) for x in relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    top = list(ranked)[:k]
    disc = _discounts(k)
    dcg = sum(disc[r] for r, x in enumerate(top) if int(x) in relevant)
    idcg = disc[:min(k, len(relevant))].sum()
    return float(dcg / idcg)


def top_k_items(scores: np.ndarray, k: int, mask: list[np.ndarray] | None = None) -> np.ndarray:
    """Top-``k`` columns per row; ties go to the lower item id.

    ``mask[r]`` lists columns excluded for row ``r`` (train items).
    """
    scores = np.array(scores, dtype=np.float64, copy=True)
    if mask is not None:
        for r, cols in enumerate(mask):
            scores[r, cols] = -np.inf
    k = min(k, scores.shape[1])
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


@dataclass
class EvalReport:
    k: int
    recall_at_k: float
    ndcg_at_k: float
    evaluated_users: int
    per_user: list[dict] | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        out = asdict(self)
        if self.per_user is None:
            out.pop("per_user")
        return out

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", f"recall@{self.k}", f"ndcg@{self.k}", "evaluated_users"])
            w.writerow([self.k, repr(self.recall_at_k), repr(self.ndcg_at_k), self.evaluated_users])
            if self.per_user:
                w.writerow([])
                w.writerow(["user", "recall", "ndcg"])
                for row in self.per_user:
                    w.writerow([row["user"], repr(row["recall"]), repr(row["ndcg"])])


def evaluable_users(ds: InteractionDataset) -> np.ndarray:
    """Users with at least one test item and one train item."""
    test = ds.test_items()
    return np.array([u for u in range(ds.num_users)
                     if len(test[u]) and len(ds.user_items[u])], dtype=np.int64)


def evaluate_scores(score_fn, ds: InteractionDataset, k: int = DEFAULT_K,
                    per_user: bool = False, chunk: int = 512) -> EvalReport:
    """Rank all items with ``score_fn(users) -> (len(users), n_items)``."""
    users = evaluable_users(ds)
    test = ds.test_items()
    recalls, ndcgs, rows = [], [], []
    for lo in range(0, len(users), chunk):
        block = users[lo:lo + chunk]
        top = top_k_items(score_fn(block), k, [ds.user_items[u] for u in block])
        for u, ranked in zip(block, top):
            rec = recall_at_k(ranked, test[u], k)
            nd = ndcg_at_k(ranked, test[u], k)
            recalls.append(rec)
            ndcgs.append(nd)
            if per_user:
                rows.append({"user": int(u), "recall": rec, "ndcg": nd})
    n = len(users)
    return EvalReport(k, float(np.mean(recalls)) if n else 0.0,
                      float(np.mean(ndcgs)) if n else 0.0, n, rows if per_user else None)


def final_representations(embedding: np.ndarray, graph: BipartiteGraph, layers: int,
                          drop_layer0: bool = False, normalize: bool = False) -> np.ndarray:
    """Concatenated representations on the uncorrupted graph."""
    h = propagate(embedding, full_view(graph), layers, include_layer0=not drop_layer0).concat
    if normalize:
        h = h / np.maximum(np.linalg.norm(h, axis=1, keepdims=True), 1e-12)
    return h


def evaluate(embedding: np.ndarray, ds: InteractionDataset, graph: BipartiteGraph | None = None,
             layers: int = 3, drop_layer0: bool = False, normalize: bool = False,
             k: int = DEFAULT_K, per_user: bool = False) -> EvalReport:
    graph = graph if graph is not None else build_graph(ds)
    if embedding.shape[0] != graph.node_count:
        raise ValueError(f"embedding table has {embedding.shape[0]} rows, dataset has "
                         f"{graph.node_count} nodes ({ds.num_users} users + {ds.num_items} items)")
    h = final_representations(embedding, graph, layers, drop_layer0, normalize)
    hu, hi = h[:ds.num_users], h[ds.num_users:]
    return evaluate_scores(lambda users: hu[users] @ hi.T, ds, k, per_user)


def popularity_baseline(ds: InteractionDataset, k: int = DEFAULT_K) -> EvalReport:
    """Every user gets items ranked by train degree."""
    deg = ds.item_degrees().astype(np.float64)
    return evaluate_scores(lambda users: np.broadcast_to(deg, (len(users), len(deg))), ds, k)


def write_metrics_csv(path, records: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in records:
            w.writerow([r["epoch"]] + [repr(float(r[c])) for c in METRIC_COLUMNS[1:]])
