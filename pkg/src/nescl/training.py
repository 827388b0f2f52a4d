"""Mini-batch training: BPR sampling, positive selection, Adam steps, fit loop."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import losses
from .augmentation import RENORMALIZE, AugmentedGraph, full_view, make_view_pair, resolve_strategy
from .encoder import (FLAG_DROP_LAYER0, FLAG_NORMALIZE, ModelParams, backpropagate,
                      init_embeddings, propagate, save_checkpoint)
from .errors import ConfigError, NumericError
from .evaluation import evaluate, write_metrics_csv
from .interactions import BipartiteGraph, InteractionDataset, build_graph
from .neighbors import NeighborTable, load_or_build

LOSSES = ("bpr", "sgl", "nescl_in", "nescl_out", "supcon_in", "supcon_out")
NEIGHBOR_STRATEGIES = ("identity_weights", "similarity_weights", "random_sampling",
                       "weighted_sampling")
INTERACTED_STRATEGIES = ("all", "sample_one")
TERMS = ("views", "nearest", "interacted")
NEAREST_SIDES = ("both", "user", "item")
REDRAW = ("step", "epoch")

PRESETS = {
    "yelp2018": {"alpha": 0.3, "aug": "node_dropout", "drop_layer0": True, "k_neighbors": 15},
    "gowalla": {"alpha": 0.1, "aug": "node_dropout", "drop_layer0": True, "k_neighbors": 5},
    "amazon-book": {"alpha": 0.3, "aug": "edge_dropout", "drop_ranking": True, "k_neighbors": 5},
}


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "nescl_out"
    tau: float = 0.1
    alpha: float = 0.3
    rho: float = 0.3
    aug: str = "node_dropout"
    layers: int = 3
    dim: int = 64
    batch: int = 2048
    epochs: int = 50
    lr: float = 1e-3
    seed: int = 0
    k_neighbors: int = 5
    neighbor_strategy: str = "random_sampling"
    interacted_strategy: str = "sample_one"
    drop_ranking: bool = False
    drop_layer0: bool = False
    renormalize: str = "corrupted"
    weight_decay: float = 1e-4
    patience: int = 10
    redraw: str = "step"
    full_support: bool = False
    terms: tuple = TERMS
    nearest_side: str = "both"
    normalize: bool = False
    init_std: float = 0.01
    eval_k: int = 20

    def __post_init__(self):
        object.__setattr__(self, "aug", resolve_strategy(self.aug))
        object.__setattr__(self, "terms", tuple(self.terms))
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.loss in LOSSES, f"loss must be one of {LOSSES}, got {self.loss!r}")
        need(self.tau > 0, "tau must be > 0")
        need(self.alpha >= 0, "alpha must be >= 0")
        need(0 <= self.rho <= 1, "rho must lie in [0, 1]")
        for name in ("layers", "dim", "batch", "k_neighbors", "eval_k"):
            need(getattr(self, name) >= 1, f"{name} must be >= 1")
        need(self.epochs >= 0, "epochs must be >= 0")
        need(self.lr >= 0, "lr must be >= 0")
        need(self.weight_decay >= 0, "weight_decay must be >= 0")
        need(self.patience >= 0, "patience must be >= 0")
        need(self.init_std > 0, "init_std must be > 0")
        need(self.neighbor_strategy in NEIGHBOR_STRATEGIES,
             f"neighbor_strategy must be one of {NEIGHBOR_STRATEGIES}")
        need(self.interacted_strategy in INTERACTED_STRATEGIES,
             f"interacted_strategy must be one of {INTERACTED_STRATEGIES}")
        need(self.renormalize in RENORMALIZE, f"renormalize must be one of {RENORMALIZE}")
        need(self.redraw in REDRAW, f"redraw must be one of {REDRAW}")
        need(self.nearest_side in NEAREST_SIDES, f"nearest_side must be one of {NEAREST_SIDES}")
        need(len(self.terms) > 0 and set(self.terms) <= set(TERMS),
             f"terms must be a non-empty subset of {TERMS}")
        need(not (self.drop_ranking and self.loss == "bpr"),
             "drop_ranking with loss=bpr leaves nothing to optimise")
        need(not (self.drop_ranking and self.alpha == 0),
             "drop_ranking with alpha=0 leaves nothing to optimise")

    @property
    def contrastive_kind(self) -> str | None:
        if self.loss == "bpr" or self.alpha == 0:
            return None
        return "infonce" if self.loss == "sgl" else self.loss

    @property
    def active_terms(self) -> tuple:
        return ("views",) if self.loss == "sgl" else self.terms

    @property
    def needs_neighbors(self) -> bool:
        return self.contrastive_kind is not None and "nearest" in self.active_terms

    @property
    def checkpoint_flags(self) -> int:
        return (FLAG_DROP_LAYER0 if self.drop_layer0 else 0) | (FLAG_NORMALIZE if self.normalize else 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["terms"] = list(self.terms)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def apply_preset(cfg: TrainConfig, name: str) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return replace(cfg, **PRESETS[name])


@dataclass
class TrainRngs:
    """Independent streams so toggling one component leaves the others intact."""

    init: np.random.Generator
    sample: np.random.Generator
    augment: np.random.Generator
    positives: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "TrainRngs":
        return cls(*(np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)))


def _as_rngs(rng) -> TrainRngs:
    if isinstance(rng, TrainRngs):
        return rng
    if isinstance(rng, np.random.Generator):
        return TrainRngs(rng, rng, rng, rng)
    return TrainRngs.from_seed(int(rng))


# ---------------------------------------------------------------------------
# sampling

class _Membership:
    """Vectorised ``item in R+_u`` test over sorted pair codes."""

    def __init__(self, ds: InteractionDataset):
        self.n = ds.num_items
        self.codes = np.sort(ds.train_pairs[:, 0].astype(np.int64) * self.n + ds.train_pairs[:, 1])

    def contains(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        q = users.astype(np.int64) * self.n + items
        pos = np.searchsorted(self.codes, q)
        pos = np.minimum(pos, len(self.codes) - 1)
        return self.codes[pos] == q


def saturated_users(ds: InteractionDataset) -> np.ndarray:
    """Users who interacted with every item (no negative exists)."""
    return np.flatnonzero(ds.user_degrees() >= ds.num_items)


def sample_negatives(ds: InteractionDataset, users: np.ndarray, rng: np.random.Generator,
                     membership: _Membership | None = None) -> np.ndarray:
    """One uniformly drawn non-interacted item per user, by rejection."""
    membership = membership or _Membership(ds)
    users = np.asarray(users, dtype=np.int64)
    if np.isin(users, saturated_users(ds)).any():
        raise ValueError("a user covers every item; no negative exists")
    neg = rng.integers(0, ds.num_items, size=len(users))
    bad = np.flatnonzero(membership.contains(users, neg))
    while len(bad):
        neg[bad] = rng.integers(0, ds.num_items, size=len(bad))
        bad = bad[membership.contains(users[bad], neg[bad])]
    return neg


def sample_bpr_pairs(ds: InteractionDataset, rng: np.random.Generator, batch: int) -> np.ndarray:
    """``(batch, 3)`` array of ``(user, pos_item, neg_item)``.

    Users are drawn uniformly among those with a train item and at least
    one non-interacted item; users covering the whole catalogue are skipped.
    """
    deg = ds.user_degrees()
    eligible = np.flatnonzero((deg > 0) & (deg < ds.num_items))
    if len(eligible) == 0:
        raise ValueError("no user has both a positive and a negative item")
    users = eligible[rng.integers(0, len(eligible), size=batch)]
    pos = np.array([ds.user_items[u][rng.integers(0, len(ds.user_items[u]))] for u in users],
                   dtype=np.int64)
    return np.stack([users, pos, sample_negatives(ds, users, rng)], axis=1)


def select_positives(anchor: int, nt: NeighborTable | None, ds: InteractionDataset,
                     strategy: str, rng: np.random.Generator,
                     interacted_strategy: str = "sample_one", nearest: bool = True,
                     interacted: bool = True) -> losses.Positives:
    """Nearest and interacted positives of graph node ``anchor`` as node ids."""
    if strategy not in NEIGHBOR_STRATEGIES:
        raise ConfigError(f"unknown neighbor strategy {strategy!r}")
    if interacted_strategy not in INTERACTED_STRATEGIES:
        raise ConfigError(f"unknown interacted strategy {interacted_strategy!r}")
    m = ds.num_users
    is_user = anchor < m
    local = anchor if is_user else anchor - m
    same_offset, other_offset = (0, m) if is_user else (m, 0)

    nn_ids = nn_w = np.empty(0)
    if nearest and nt is not None:
        ids, sims = nt.row(local)
        if len(ids):
            if strategy == "identity_weights":
                nn_ids, nn_w = ids, np.ones(len(ids))
            elif strategy == "similarity_weights":
                nn_ids, nn_w = ids, sims
            elif strategy == "random_sampling":
                nn_ids, nn_w = ids[[rng.integers(0, len(ids))]], np.ones(1)
            else:
                nn_ids, nn_w = ids[[rng.choice(len(ids), p=sims / sims.sum())]], np.ones(1)
            nn_ids = nn_ids + same_offset

    it_ids = np.empty(0)
    if interacted:
        pool = ds.user_items[local] if is_user else ds.item_users[local]
        if len(pool):
            it_ids = pool if interacted_strategy == "all" else pool[[rng.integers(0, len(pool))]]
            it_ids = it_ids + other_offset
    return losses.Positives(nn_ids, nn_w, it_ids)


# ---------------------------------------------------------------------------
# one step

def l2_normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    return x / norms, norms


def l2_normalize_backward(grad: np.ndarray, y: np.ndarray, norms: np.ndarray) -> np.ndarray:
    return (grad - y * np.sum(y * grad, axis=1, keepdims=True)) / norms


@dataclass
class StepResult:
    loss_total: float
    loss_rank: float
    loss_contrastive: float
    loss_reg: float
    grad: np.ndarray = field(repr=False)


@dataclass
class TrainingContext:
    """Fixed per-run state shared by every step."""

    ds: InteractionDataset
    graph: BipartiteGraph
    cfg: TrainConfig
    nt_user: NeighborTable | None = None
    nt_item: NeighborTable | None = None
    base_view: AugmentedGraph = None
    membership: _Membership = None
    dump_dir: Path | None = None

    def __post_init__(self):
        self.base_view = self.base_view or full_view(self.graph)
        self.membership = self.membership or _Membership(self.ds)


def _contrastive_batch(ctx: TrainingContext, triples: np.ndarray, ha: np.ndarray,
                       hb: np.ndarray, rng: np.random.Generator) -> losses.ContrastiveBatch:
    cfg, ds = ctx.cfg, ctx.ds
    m = ds.num_users
    anchors = np.unique(np.concatenate([triples[:, 0], triples[:, 1] + m]))
    terms = cfg.active_terms
    want_nn, want_it = "nearest" in terms, "interacted" in terms
    positives = []
    for a in anchors:
        is_user = a < m
        side_ok = cfg.nearest_side == "both" or cfg.nearest_side == ("user" if is_user else "item")
        nt = ctx.nt_user if is_user else ctx.nt_item
        positives.append(select_positives(int(a), nt, ds, cfg.neighbor_strategy, rng,
                                          cfg.interacted_strategy, want_nn and side_ok, want_it))
    support = np.arange(ha.shape[0]) if cfg.full_support else anchors
    return losses.ContrastiveBatch(anchors, ha, hb, positives, support, "views" in terms)


def train_step(params: ModelParams, ctx: TrainingContext, triples: np.ndarray,
               rngs: TrainRngs, views: tuple[AugmentedGraph, AugmentedGraph] | None = None
               ) -> StepResult:
    """Loss and gradient w.r.t. the base table for one batch; no update."""
    cfg = ctx.cfg
    emb = params.embedding
    m = ctx.ds.num_users
    include0 = not cfg.drop_layer0
    users, pos, neg = triples[:, 0], triples[:, 1] + m, triples[:, 2] + m
    b = len(triples)
    grad = np.zeros_like(emb)

    loss_rank = 0.0
    if not cfg.drop_ranking:
        h = propagate(emb, ctx.base_view, cfg.layers, include0).concat
        hu, hp, hn = h[users], h[pos], h[neg]
        sp_, sn = np.einsum("ij,ij->i", hu, hp), np.einsum("ij,ij->i", hu, hn)
        loss_rank = losses.bpr_loss(sp_, sn) / b
        g = losses.bpr_grad(sp_, sn)[:, None] / b
        gh = np.zeros_like(h)
        np.add.at(gh, users, g * (hp - hn))
        np.add.at(gh, pos, g * hu)
        np.add.at(gh, neg, -g * hu)
        grad += backpropagate(gh, ctx.base_view, cfg.layers, include0)

    loss_reg = 0.0
    if cfg.weight_decay > 0:
        rows = np.concatenate([users, pos, neg])
        loss_reg = cfg.weight_decay * 0.5 * float(np.sum(emb[rows] ** 2)) / b
        np.add.at(grad, rows, cfg.weight_decay * emb[rows] / b)

    loss_con = 0.0
    kind = cfg.contrastive_kind
    if kind is not None:
        if views is None:
            views = make_view_pair(ctx.graph, cfg.aug, cfg.rho, cfg.layers, rngs.augment,
                                   cfg.renormalize)
        ha = propagate(emb, views[0], cfg.layers, include0).concat
        hb = propagate(emb, views[1], cfg.layers, include0).concat
        if cfg.normalize:
            ha, na = l2_normalize_rows(ha)
            hb, nb = l2_normalize_rows(hb)
        batch = _contrastive_batch(ctx, triples, ha, hb, rngs.positives)
        res = losses.contrastive(batch, cfg.tau, kind)
        scale = 1.0 / len(batch.anchors)
        loss_con = res.loss * scale
        ga, gb = res.grad_a * (cfg.alpha * scale), res.grad_b * (cfg.alpha * scale)
        if cfg.normalize:
            ga = l2_normalize_backward(ga, ha, na)
            gb = l2_normalize_backward(gb, hb, nb)
        grad += backpropagate(ga, views[0], cfg.layers, include0)
        grad += backpropagate(gb, views[1], cfg.layers, include0)

    total = losses.combined_loss(loss_rank, loss_con, cfg.alpha, cfg.drop_ranking) + loss_reg
    if not (math.isfinite(total) and np.isfinite(grad).all()):
        _dump_failure(ctx, params, triples)
        raise NumericError(f"non-finite loss or gradient at optimizer step {params.step + 1}"
                           f" (loss_rank={loss_rank}, loss_contrastive={loss_con})")
    return StepResult(total, loss_rank, loss_con, loss_reg, grad)


def _dump_failure(ctx: TrainingContext, params: ModelParams, triples: np.ndarray) -> None:
    if ctx.dump_dir is None:
        return
    path = Path(ctx.dump_dir) / f"numeric_failure_step{params.step + 1}.npz"
    np.savez(path, triples=triples, embedding=params.embedding)


def train_epoch(params: ModelParams, ds: InteractionDataset, graph: BipartiteGraph,
                nt_user: NeighborTable | None, nt_item: NeighborTable | None,
                cfg: TrainConfig, rng, ctx: TrainingContext | None = None) -> dict:
    """One pass over the shuffled train pairs; returns mean losses and gradient norm."""
    rngs = _as_rngs(rng)
    ctx = ctx or TrainingContext(ds, graph, cfg, nt_user, nt_item)
    pairs = ds.train_pairs
    sat = saturated_users(ds)
    warnings = []
    if len(sat):
        pairs = pairs[~np.isin(pairs[:, 0], sat)]
        warnings.append(f"{len(sat)} user(s) interacted with every item; skipped for BPR")
    order = rngs.sample.permutation(len(pairs))
    views = None
    if cfg.redraw == "epoch" and cfg.contrastive_kind is not None:
        views = make_view_pair(graph, cfg.aug, cfg.rho, cfg.layers, rngs.augment, cfg.renormalize)

    sums = {"loss_total": 0.0, "loss_rank": 0.0, "loss_contrastive": 0.0, "loss_reg": 0.0,
            "grad_norm": 0.0}
    steps = 0
    for lo in range(0, len(order), cfg.batch):
        idx = order[lo:lo + cfg.batch]
        users = pairs[idx, 0].astype(np.int64)
        neg = sample_negatives(ds, users, rngs.sample, ctx.membership)
        triples = np.stack([users, pairs[idx, 1].astype(np.int64), neg], axis=1)
        # overflow shows up as a non-finite loss, which train_step turns into NumericError
        with np.errstate(over="ignore", invalid="ignore"):
            res = train_step(params, ctx, triples, rngs, views)
        params.optimizer.update(params.embedding, res.grad, cfg.lr)
        for key in ("loss_total", "loss_rank", "loss_contrastive", "loss_reg"):
            sums[key] += getattr(res, key)
        sums["grad_norm"] += float(np.linalg.norm(res.grad))
        steps += 1
    report = {k: v / max(steps, 1) for k, v in sums.items()}
    report["steps"] = steps
    report["warnings"] = warnings
    return report


# ---------------------------------------------------------------------------
# fit

@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict]
    best_epoch: int
    best_ndcg: float
    best_embedding: np.ndarray = field(repr=False)
    stopped_early: bool = False


def neighbor_tables(ds: InteractionDataset, cfg: TrainConfig, cache_dir=None
                    ) -> tuple[NeighborTable | None, NeighborTable | None]:
    if not cfg.needs_neighbors:
        return None, None
    h = ds.content_hash()
    nt_u = load_or_build(ds, "user", cfg.k_neighbors, cache_dir, h)[0] \
        if cfg.nearest_side in ("both", "user") else None
    nt_i = load_or_build(ds, "item", cfg.k_neighbors, cache_dir, h)[0] \
        if cfg.nearest_side in ("both", "item") else None
    return nt_u, nt_i


def fit(ds: InteractionDataset, cfg: TrainConfig, out_dir=None, nt_user=None, nt_item=None,
        cache_dir=None, log=None) -> TrainResult:
    """Train for ``cfg.epochs`` with per-epoch evaluation on the held-out pairs.

    The best epoch by NDCG is kept; with ``patience > 0`` training stops after
    that many epochs without improvement. With ``out_dir`` set, metrics and
    checkpoints are written there as training proceeds.
    """
    graph = build_graph(ds)
    rngs = TrainRngs.from_seed(cfg.seed)
    if nt_user is None and nt_item is None:
        nt_user, nt_item = neighbor_tables(ds, cfg, cache_dir)
    params = ModelParams(init_embeddings(graph.node_count, cfg.dim, rngs.init, cfg.init_std))
    out = Path(out_dir) if out_dir is not None else None
    ctx = TrainingContext(ds, graph, cfg, nt_user, nt_item, dump_dir=out)

    history: list[dict] = []
    best_epoch, best_ndcg, best = 0, -1.0, params.embedding.copy()
    stopped = False
    since_best = 0
    flags = cfg.checkpoint_flags
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        rep = train_epoch(params, ds, graph, nt_user, nt_item, cfg, rngs, ctx)
        ev = evaluate(params.embedding, ds, graph, cfg.layers, cfg.drop_layer0, cfg.normalize,
                      cfg.eval_k)
        record = {"epoch": epoch, "loss_total": rep["loss_total"], "loss_rank": rep["loss_rank"],
                  "loss_contrastive": rep["loss_contrastive"], "recall@20": ev.recall_at_k,
                  "ndcg@20": ev.ndcg_at_k, "loss_reg": rep["loss_reg"],
                  "grad_norm": rep["grad_norm"], "seconds": time.perf_counter() - t0}
        history.append(record)
        if ev.ndcg_at_k > best_ndcg:
            best_epoch, best_ndcg, best = epoch, ev.ndcg_at_k, params.embedding.copy()
            since_best = 0
            if out is not None:
                save_checkpoint(out / "checkpoint_best.bin", best, cfg.layers, flags)
        else:
            since_best += 1
        if out is not None:
            write_metrics_csv(out / "metrics.csv", history)
        if log is not None:
            log(f"epoch {epoch:3d} loss {rep['loss_total']:.5f} "
                f"recall@{cfg.eval_k} {ev.recall_at_k:.5f} ndcg@{cfg.eval_k} {ev.ndcg_at_k:.5f}")
        if cfg.patience and since_best >= cfg.patience:
            stopped = True
            break
    if out is not None:
        save_checkpoint(out / "checkpoint_last.bin", params.embedding, cfg.layers, flags)
        if not history:
            write_metrics_csv(out / "metrics.csv", history)
    return TrainResult(params, history, best_epoch, max(best_ndcg, 0.0), best, stopped)
