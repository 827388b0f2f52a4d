"""Ranking and contrastive objectives with analytic gradients.

Every contrastive objective here is built from softmax ratios

    r(q, t) = exp(h'_q . h''_t / tau) / sum_{j in support} exp(h'_q . h''_j / tau)

and differs only in which (query, key) pairs are formed for an anchor and
how ratios are pooled before the log:

* ``infonce``     self view only, ``-log r(i, i)``
* ``nescl_in``    one log per positive source (self / nearest / interacted),
                  ratios ``r(p, i)`` weighted and summed inside each log
* ``nescl_out``   one log over the weighted sum of every ``r(p, i)``
* ``supcon_in``   ``-log`` of the weighted mean of ``r(i, p)``
* ``supcon_out``  weighted mean of ``-log r(i, p)``

The SupCon variants anchor the denominator on ``h'_i`` and put the positive
in the key slot. Positives whose key row is not part of the support are
appended to that row's denominator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

KINDS = ("infonce", "nescl_in", "nescl_out", "supcon_in", "supcon_out")

SELF, NEAREST, INTERACTED = 0, 1, 2
SOURCE_NAMES = ("self", "nearest", "interacted")

_EMPTY_I = np.empty(0, dtype=np.int64)
_EMPTY_F = np.empty(0, dtype=np.float64)
_ONE = np.ones(1)


def check_tau(tau: float) -> None:
    if not tau > 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")


# ---------------------------------------------------------------------------
# BPR

def log_sigmoid(x):
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(log_sigmoid(x))


def bpr_loss(scores_pos, scores_neg) -> float:
    """``-sum log sigmoid(r_pos - r_neg)`` in the overflow-free form."""
    diff = np.asarray(scores_pos, dtype=np.float64) - np.asarray(scores_neg, dtype=np.float64)
    if diff.size == 0:
        raise ValueError("need at least one pair")
    return float(np.sum(np.logaddexp(0.0, -diff)))


def bpr_grad(scores_pos, scores_neg) -> np.ndarray:
    """Per-pair derivative of the loss w.r.t. ``r_pos - r_neg``: ``-sigmoid(-diff)``."""
    diff = np.asarray(scores_pos, dtype=np.float64) - np.asarray(scores_neg, dtype=np.float64)
    return -sigmoid(-diff)


def combined_loss(ranking_part: float, contrastive_part: float, alpha: float,
                  drop_ranking: bool = False) -> float:
    if alpha < 0:
        raise ConfigError("alpha must be >= 0")
    return (0.0 if drop_ranking else ranking_part) + alpha * contrastive_part


# ---------------------------------------------------------------------------
# batches

@dataclass
class Positives:
    """Resolved positives of one anchor, as graph node ids with weights."""

    nearest: np.ndarray = field(default_factory=lambda: _EMPTY_I)
    nearest_weights: np.ndarray = field(default_factory=lambda: _EMPTY_F)
    interacted: np.ndarray = field(default_factory=lambda: _EMPTY_I)
    interacted_weights: np.ndarray = field(default_factory=lambda: _EMPTY_F)

    def __post_init__(self):
        self.nearest = np.asarray(self.nearest, dtype=np.int64).reshape(-1)
        self.interacted = np.asarray(self.interacted, dtype=np.int64).reshape(-1)
        if np.size(self.nearest_weights) == 0 and len(self.nearest):
            self.nearest_weights = np.ones(len(self.nearest))
        if np.size(self.interacted_weights) == 0 and len(self.interacted):
            self.interacted_weights = np.ones(len(self.interacted))
        self.nearest_weights = np.asarray(self.nearest_weights, dtype=np.float64).reshape(-1)
        self.interacted_weights = np.asarray(self.interacted_weights, dtype=np.float64).reshape(-1)
        if len(self.nearest_weights) != len(self.nearest) or \
                len(self.interacted_weights) != len(self.interacted):
            raise ValueError("positive ids and weights differ in length")
        if (self.nearest_weights <= 0).any() or (self.interacted_weights <= 0).any():
            raise ValueError("positive weights must be > 0")


@dataclass(eq=False)
class ContrastiveBatch:
    """Anchors, the two view tables and the resolved positives.

    ``view_a`` (H') supplies positive rows, ``view_b`` (H'') supplies anchor
    and denominator rows. ``support`` defaults to the anchors themselves and
    always contains them.
    """

    anchors: np.ndarray
    view_a: np.ndarray
    view_b: np.ndarray
    positives: list[Positives] | None = None
    support: np.ndarray | None = None
    use_self: bool = True

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.int64).reshape(-1)
        if len(np.unique(self.anchors)) != len(self.anchors):
            raise ValueError("anchors must be unique")
        if self.positives is None:
            self.positives = [Positives() for _ in self.anchors]
        if len(self.positives) != len(self.anchors):
            raise ValueError("one Positives record per anchor is required")
        support = self.anchors if self.support is None else self.support
        self.support = np.unique(np.concatenate([np.asarray(support, dtype=np.int64),
                                                 self.anchors]))
        if self.view_a.shape != self.view_b.shape:
            raise ValueError("views must have the same shape")

    def subset(self, index: int) -> "ContrastiveBatch":
        """Same support and views, a single anchor."""
        return ContrastiveBatch(self.anchors[index:index + 1], self.view_a, self.view_b,
                                [self.positives[index]], self.support, self.use_self)


@dataclass
class _Terms:
    anchor: np.ndarray   # index into batch.anchors
    source: np.ndarray
    positive: np.ndarray  # node id
    weight: np.ndarray


def _collect_terms(batch: ContrastiveBatch, self_only: bool) -> _Terms:
    """Flatten positives into terms ordered by anchor, then source."""
    n = len(batch.anchors)
    with_self = batch.use_self or self_only
    pos = batch.positives
    n_nn = np.zeros(n, np.int64) if self_only else np.fromiter((len(p.nearest) for p in pos), np.int64, n)
    n_it = np.zeros(n, np.int64) if self_only else np.fromiter((len(p.interacted) for p in pos), np.int64, n)
    n_self = np.full(n, int(with_self), np.int64)
    counts = np.stack([n_self, n_nn, n_it], axis=1).reshape(-1)
    anchor = np.repeat(np.repeat(np.arange(n), 3), counts)
    source = np.repeat(np.tile(np.arange(3), n), counts)
    if len(anchor) == 0:
        return _Terms(_EMPTY_I, _EMPTY_I, _EMPTY_I, _EMPTY_F)
    ids, ws = [], []
    for a in range(n):
        if with_self:
            ids.append(batch.anchors[a:a + 1]); ws.append(_ONE)
        if not self_only:
            ids += [pos[a].nearest, pos[a].interacted]
            ws += [pos[a].nearest_weights, pos[a].interacted_weights]
    return _Terms(anchor, source, np.concatenate(ids).astype(np.int64), np.concatenate(ws))


def _groups(terms: _Terms, kind: str):
    """Group starts, per-group (anchor, coefficient, offset) and inner weights."""
    t = len(terms.anchor)
    if kind in ("infonce", "nescl_in"):
        key = terms.anchor * 3 + terms.source
    elif kind in ("nescl_out", "supcon_in"):
        key = terms.anchor
    else:
        key = np.arange(t)
    starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]]) if t else _EMPTY_I
    group_anchor = terms.anchor[starts]
    inner = terms.weight.copy()
    coef = np.ones(len(starts))
    offset = np.zeros(len(starts))
    if kind == "supcon_in":
        offset = np.log(np.add.reduceat(terms.weight, starts))
    elif kind == "supcon_out":
        per_anchor = np.bincount(terms.anchor, weights=terms.weight)
        coef = terms.weight / per_anchor[terms.anchor]
        inner = np.ones(t)
    return starts, group_anchor, coef, offset, inner


def _segment_logsumexp(values: np.ndarray, starts: np.ndarray) -> np.ndarray:
    mx = np.maximum.reduceat(values, starts)
    seg = np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, len(values)]))
    return mx + np.log(np.add.reduceat(np.exp(values - mx[seg]), starts)), seg


@dataclass
class ContrastiveResult:
    loss: float
    per_anchor: np.ndarray
    grad_a: np.ndarray | None = None
    grad_b: np.ndarray | None = None


def contrastive(batch: ContrastiveBatch, tau: float, kind: str,
                with_grad: bool = True) -> ContrastiveResult:
    """Summed loss over anchors plus gradients w.r.t. every row of both views."""
    check_tau(tau)
    if kind not in KINDS:
        raise ConfigError(f"unknown contrastive loss {kind!r}")
    terms = _collect_terms(batch, self_only=(kind == "infonce"))
    ha, hb = batch.view_a, batch.view_b
    n_anchor = len(batch.anchors)
    if len(terms.anchor) == 0:
        zeros = np.zeros_like(ha) if with_grad else None
        return ContrastiveResult(0.0, np.zeros(n_anchor), zeros,
                                 None if zeros is None else zeros.copy())

    anchor_nodes = batch.anchors[terms.anchor]
    if kind.startswith("supcon"):
        query, key = anchor_nodes, terms.positive
    else:
        query, key = terms.positive, anchor_nodes

    support = batch.support
    n_sup = len(support)
    q = ha[query]
    k_sup = hb[support]
    logits = np.empty((len(query), n_sup + 1))
    logits[:, :n_sup] = (q @ k_sup.T) / tau

    pos_in_support = np.searchsorted(support, key)
    pos_in_support = np.minimum(pos_in_support, n_sup - 1)
    inside = support[pos_in_support] == key
    rows = np.arange(len(query))
    key_col = np.where(inside, pos_in_support, n_sup)
    outside_score = np.einsum("ij,ij->i", q, hb[key]) / tau
    logits[:, n_sup] = np.where(inside, -np.inf, outside_score)
    key_logit = logits[rows, key_col]

    mx = logits.max(axis=1)
    ex = np.exp(logits - mx[:, None])
    z = ex.sum(axis=1)
    log_ratio = key_logit - (mx + np.log(z))

    starts, group_anchor, coef, offset, inner = _groups(terms, kind)
    v = np.log(inner) + log_ratio
    log_group, seg = _segment_logsumexp(v, starts)
    # supcon_out groups are single terms, so its per-term coefficients are per-group too
    group_loss = -coef * log_group + offset
    term_coef = coef[seg]
    per_anchor = np.bincount(group_anchor, weights=group_loss, minlength=n_anchor)
    result = ContrastiveResult(float(np.sum(per_anchor)), per_anchor)
    if not with_grad:
        return result

    beta = term_coef * np.exp(v - log_group[seg])
    dlogits = (beta / z)[:, None] * ex
    dlogits[rows, key_col] -= beta
    dlogits /= tau

    grad_a = np.zeros_like(ha)
    grad_b = np.zeros_like(hb)
    dq = dlogits[:, :n_sup] @ k_sup + dlogits[:, n_sup:] * hb[key]
    np.add.at(grad_a, query, dq)
    grad_b[support] += dlogits[:, :n_sup].T @ q
    outside = ~inside
    if outside.any():
        np.add.at(grad_b, key[outside], dlogits[outside, n_sup:] * q[outside])
    result.grad_a, result.grad_b = grad_a, grad_b
    return result


def infonce_self(batch: ContrastiveBatch, tau: float) -> float:
    return contrastive(batch, tau, "infonce", with_grad=False).loss


def nescl_in_loss(batch: ContrastiveBatch, tau: float) -> float:
    return contrastive(batch, tau, "nescl_in", with_grad=False).loss


def nescl_out_loss(batch: ContrastiveBatch, tau: float) -> float:
    return contrastive(batch, tau, "nescl_out", with_grad=False).loss


def supcon_in_loss(batch: ContrastiveBatch, tau: float) -> float:
    return contrastive(batch, tau, "supcon_in", with_grad=False).loss


def supcon_out_loss(batch: ContrastiveBatch, tau: float) -> float:
    return contrastive(batch, tau, "supcon_out", with_grad=False).loss


# ---------------------------------------------------------------------------
# closed-form anchor gradients

@dataclass
class AnalyticGradient:
    """Coefficients of ``dL_i / dh''_i = sum_p lambda_p h'_p`` for one anchor.

    ``numerators`` and ``denominators`` are the shifted ``exp(h'_p h''_i/tau)``
    and ``X_p = sum_j exp(h'_p h''_j/tau)`` per positive, in term order
    (self, nearest..., interacted...); ``log_y`` is set for the out variant.
    """

    anchor: int
    variant: str
    lambda_self: float | None
    lambda_nn: np.ndarray
    lambda_inter: np.ndarray
    gradient: np.ndarray
    numerators: np.ndarray = field(repr=False, default=None)
    denominators: np.ndarray = field(repr=False, default=None)
    log_y: float | None = None

    def lambdas(self) -> np.ndarray:
        head = [] if self.lambda_self is None else [self.lambda_self]
        return np.concatenate([head, self.lambda_nn, self.lambda_inter])


def _logsumexp(x: np.ndarray) -> float:
    m = np.max(x)
    return float(m + np.log(np.sum(np.exp(x - m))))


def _anchor_pieces(batch: ContrastiveBatch, index: int, tau: float):
    node = int(batch.anchors[index])
    pos = batch.positives[index]
    ids, srcs, ws = [], [], []
    if batch.use_self:
        ids.append(node); srcs.append(SELF); ws.append(1.0)
    for src, arr, w in ((NEAREST, pos.nearest, pos.nearest_weights),
                        (INTERACTED, pos.interacted, pos.interacted_weights)):
        ids.extend(arr.tolist()); srcs.extend([src] * len(arr)); ws.extend(w.tolist())
    ids = np.asarray(ids, dtype=np.int64)
    srcs = np.asarray(srcs, dtype=np.int64)
    ws = np.asarray(ws, dtype=np.float64)

    support = batch.support
    loc = int(np.searchsorted(support, node))
    hb_sup = batch.view_b[support]
    numer = np.empty(len(ids))
    denom = np.empty(len(ids))
    for t, p in enumerate(ids):
        s = (batch.view_a[p] @ hb_sup.T) / tau
        shift = s.max()
        e = np.exp(s - shift)
        numer[t] = e[loc]           # exp(h'_p h''_i / tau), shifted
        denom[t] = e.sum()          # X_p, same shift
    return node, ids, srcs, ws, numer, denom


def closed_form_anchor_gradient(batch: ContrastiveBatch, tau: float, variant: str,
                                index: int) -> AnalyticGradient:
    """Appendix-style coefficients for anchor ``batch.anchors[index]``.

    Per positive ``p``: ``lambda_p = (1/tau) (e_p - X_p) / X_p * share_p``.
    For the in variant ``share_p`` is ``p``'s weighted ratio over its
    source's total; for the out variant it is
    ``w_p e_p prod_{q != p} X_q / Y`` with
    ``Y = sum_p w_p e_p prod_{q != p} X_q``. With one positive per source and
    unit weights these reduce to the three-term closed forms.
    """
    check_tau(tau)
    if variant not in ("in", "out"):
        raise ConfigError("variant must be 'in' or 'out'")
    node, ids, srcs, ws, numer, denom = _anchor_pieces(batch, index, tau)
    base = (numer - denom) / denom / tau
    log_wr = np.log(ws) + np.log(numer) - np.log(denom)
    log_y = None
    share = np.empty(len(ids))
    if variant == "in":
        for src in (SELF, NEAREST, INTERACTED):
            sel = srcs == src
            if sel.any():
                share[sel] = np.exp(log_wr[sel] - _logsumexp(log_wr[sel]))
    elif len(ids):
        log_prod_x = np.sum(np.log(denom))
        log_terms = np.log(ws) + np.log(numer) + (log_prod_x - np.log(denom))
        log_y = _logsumexp(log_terms)
        share = np.exp(log_terms - log_y)
    lam = base * share
    grad = lam @ batch.view_a[ids] if len(ids) else np.zeros(batch.view_a.shape[1])
    lam_self = float(lam[0]) if batch.use_self else None
    return AnalyticGradient(node, variant, lam_self, lam[srcs == NEAREST], lam[srcs == INTERACTED],
                            grad, numer, denom, log_y)


def nescl_in_grad_anchor(batch: ContrastiveBatch, tau: float) -> list[AnalyticGradient]:
    return [closed_form_anchor_gradient(batch, tau, "in", a) for a in range(len(batch.anchors))]


def nescl_out_grad_anchor(batch: ContrastiveBatch, tau: float) -> list[AnalyticGradient]:
    return [closed_form_anchor_gradient(batch, tau, "out", a) for a in range(len(batch.anchors))]


def direct_anchor_gradient(batch: ContrastiveBatch, tau: float, variant: str,
                           index: int) -> np.ndarray:
    """``dL_i/dh''_i`` from the batched softmax backward pass on anchor ``index`` alone."""
    sub = batch.subset(index)
    res = contrastive(sub, tau, "nescl_" + variant)
    return res.grad_b[sub.anchors[0]]


def ratio_identity(batch: ContrastiveBatch, tau: float, index: int
                   ) -> tuple[np.ndarray, np.ndarray]:
    """``lambda_in / lambda_out`` per positive, measured and predicted.

    The prediction is ``1 + sum_{s != src(p)} R_s / R_src(p)`` with
    ``R_s = sum_{q in s} w_q / (1 + N_q / e_q)`` and ``N_q`` the denominator
    without the anchor's own entry. For unit weights and one positive per
    source, the summands are ``(1 + N_p/e_p) / (1 + N_s/e_s)``.
    """
    lam_in = closed_form_anchor_gradient(batch, tau, "in", index)
    lam_out = closed_form_anchor_gradient(batch, tau, "out", index)
    _, _, srcs, ws, numer, denom = _anchor_pieces(batch, index, tau)
    measured = lam_in.lambdas() / lam_out.lambdas()

    others = denom - numer
    r = ws / (1.0 + others / numer)
    totals = {s: r[srcs == s].sum() for s in np.unique(srcs)}
    predicted = np.array([1.0 + sum(totals[s] / totals[src] for s in totals if s != src)
                          for src in srcs])
    return measured, predicted
