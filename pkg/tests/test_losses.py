import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, relative_error, scalar_loss

from nescl.errors import ConfigError
from nescl.losses import (KINDS, ContrastiveBatch, Positives, bpr_grad, bpr_loss,
                          closed_form_anchor_gradient, combined_loss, contrastive, infonce_self,
                          nescl_in_grad_anchor, nescl_in_loss, nescl_out_grad_anchor,
                          nescl_out_loss, supcon_in_loss, supcon_out_loss)
from nescl.training import PRESETS


def random_batch(rng, n=10, d=4, n_anchor=3, support_all=False):
    ha = rng.normal(size=(n, d)) * 0.6
    hb = rng.normal(size=(n, d)) * 0.6
    anchors = rng.choice(n, size=n_anchor, replace=False)
    positives = []
    for a in anchors:
        others = np.setdiff1d(np.arange(n), [a])
        k_nn, k_it = rng.integers(0, 3, size=2)
        positives.append(Positives(rng.choice(others, size=k_nn, replace=False),
                                   rng.uniform(0.1, 1.0, size=k_nn),
                                   rng.choice(others, size=k_it, replace=False)))
    support = np.arange(n) if support_all else rng.choice(n, size=n // 2, replace=False)
    return ContrastiveBatch(anchors, ha, hb, positives, support=support)


def oracle(kind, b, tau):
    pos = [(p.nearest.tolist(), p.nearest_weights.tolist(), p.interacted.tolist(),
            p.interacted_weights.tolist()) for p in b.positives]
    return scalar_loss(kind, b.anchors.tolist(), b.view_a, b.view_b, pos, b.support.tolist(),
                       tau, b.use_self)


class TestBPR:
    def test_equal_scores(self):
        assert bpr_loss([0.3], [0.3]) == pytest.approx(math.log(2), abs=1e-15)

    def test_saturation(self):
        assert bpr_loss([40.0], [0.0]) <= 1e-17
        assert np.isfinite(bpr_loss([-800.0], [0.0]))

    def test_margin_one(self):
        # -ln sigmoid(1), frozen from a scalar evaluation
        assert bpr_loss([1.0], [0.0]) == pytest.approx(0.31326168751822286, rel=1e-12)

    def test_sum_over_pairs(self):
        assert bpr_loss([1.0, 0.0], [0.0, 0.0]) == pytest.approx(0.31326168751822286 + math.log(2))

    def test_gradient(self):
        diff = np.array([-3.0, 0.0, 2.5])
        h = 1e-6
        fd = [(bpr_loss([x + h], [0]) - bpr_loss([x - h], [0])) / (2 * h) for x in diff]
        np.testing.assert_allclose(bpr_grad(diff, 0 * diff), fd, rtol=1e-7)
        assert bpr_grad([0.0], [0.0])[0] == -0.5

    def test_empty(self):
        with pytest.raises(ValueError):
            bpr_loss([], [])


class TestInfoNCE:
    def test_uniform_dots(self):
        h = np.ones((5, 3))
        b = ContrastiveBatch([0, 1], h, h.copy(), support=np.arange(5))
        assert infonce_self(b, 0.3) == pytest.approx(2 * math.log(5), rel=1e-14)

    def test_one_negative(self):
        ha = np.array([[1.0], [0.0]])
        hb = np.array([[1.0], [0.0]])
        b = ContrastiveBatch([0], ha, hb, support=[0, 1])
        assert infonce_self(b, 1.0) == pytest.approx(0.31326168751822286, rel=1e-12)

    def test_support_of_one(self, rng):
        b = ContrastiveBatch([2], rng.normal(size=(4, 2)), rng.normal(size=(4, 2)))
        assert infonce_self(b, 0.1) == 0.0

    def test_bad_tau(self, rng):
        b = ContrastiveBatch([0], rng.normal(size=(2, 2)), rng.normal(size=(2, 2)))
        with pytest.raises(ConfigError):
            infonce_self(b, 0.0)
        with pytest.raises(ConfigError):
            contrastive(b, 0.1, "triplet")

    def test_large_logits_stay_finite(self, rng):
        h = rng.normal(size=(6, 3)) * 50
        b = ContrastiveBatch(np.arange(6), h, h.copy())
        r = contrastive(b, 0.05, "nescl_out")
        assert np.isfinite(r.loss) and np.isfinite(r.grad_a).all()


class TestNESCL:
    def test_no_positives_reduces_to_infonce(self, rng):
        b = ContrastiveBatch([0, 3], rng.normal(size=(6, 3)), rng.normal(size=(6, 3)),
                             support=np.arange(6))
        assert nescl_in_loss(b, 0.2) == pytest.approx(infonce_self(b, 0.2), rel=1e-14)
        assert nescl_out_loss(b, 0.2) == pytest.approx(infonce_self(b, 0.2), rel=1e-14)

    def test_identical_neighbour_doubles_self_term(self, rng):
        ha, hb = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        ha[4] = ha[0]
        b = ContrastiveBatch([0], ha, hb, [Positives([4], [1.0])], support=np.arange(6))
        assert nescl_in_loss(b, 0.2) == pytest.approx(2 * infonce_self(b, 0.2), rel=1e-13)

    def test_single_source_in_equals_out(self, rng):
        ha, hb = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        b = ContrastiveBatch([0], ha, hb, [Positives([], [], [3, 5])], np.arange(6), use_self=False)
        assert nescl_out_loss(b, 0.2) == pytest.approx(nescl_in_loss(b, 0.2), rel=1e-14)

    def test_three_equal_ratios(self, rng):
        ha, hb = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        ha[2] = ha[0]
        ha[4] = ha[0]
        b = ContrastiveBatch([0], ha, hb, [Positives([2], [1.0], [4])], support=np.arange(6))
        r = math.exp(-infonce_self(b, 0.25))
        out, inn = nescl_out_loss(b, 0.25), nescl_in_loss(b, 0.25)
        assert out == pytest.approx(-math.log(3 * r), rel=1e-13)
        # equality point of the log-sum / sum-of-logs relation
        assert out == pytest.approx(inn / 3 - math.log(3), rel=1e-13)

    @pytest.mark.parametrize("kind", KINDS)
    @pytest.mark.parametrize("seed", range(6))
    def test_transcription_oracle(self, kind, seed):
        b = random_batch(np.random.default_rng(seed), n=6, d=4, n_anchor=6)
        got = contrastive(b, 0.2, kind, with_grad=False).loss
        assert relative_error(got, oracle(kind, b, 0.2)) <= 1e-10

    def test_wrappers(self, rng):
        b = random_batch(rng)
        for fn, kind in ((nescl_in_loss, "nescl_in"), (nescl_out_loss, "nescl_out"),
                         (supcon_in_loss, "supcon_in"), (supcon_out_loss, "supcon_out")):
            assert fn(b, 0.3) == contrastive(b, 0.3, kind).loss


class TestSupCon:
    def test_self_only_is_infonce(self, rng):
        b = ContrastiveBatch([1, 2], rng.normal(size=(5, 3)), rng.normal(size=(5, 3)),
                             support=np.arange(5))
        assert supcon_in_loss(b, 0.2) == pytest.approx(infonce_self(b, 0.2), rel=1e-14)
        assert supcon_out_loss(b, 0.2) == pytest.approx(infonce_self(b, 0.2), rel=1e-14)

    def test_identical_positive_rows(self, rng):
        ha, hb = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        hb[3] = hb[0]
        hb[5] = hb[0]
        b = ContrastiveBatch([0], ha, hb, [Positives([3], [0.4], [5])], support=np.arange(6))
        assert supcon_in_loss(b, 0.2) == pytest.approx(supcon_out_loss(b, 0.2), rel=1e-13)

    def test_positive_outside_support(self, rng):
        b = ContrastiveBatch([0], rng.normal(size=(6, 3)), rng.normal(size=(6, 3)),
                             [Positives([], [], [5])], support=[0, 1, 2])
        for kind in ("supcon_in", "supcon_out"):
            assert contrastive(b, 0.3, kind).loss == pytest.approx(oracle(kind, b, 0.3), rel=1e-12)


class TestGradients:
    @pytest.mark.parametrize("kind", KINDS)
    def test_all_rows_finite_difference(self, kind):
        worst = 0.0
        for seed in range(50):
            b = random_batch(np.random.default_rng(seed), n=7, d=3, n_anchor=3)
            r = contrastive(b, 0.2, kind)
            f = lambda: contrastive(b, 0.2, kind, with_grad=False).loss  # noqa: E731
            worst = max(worst, relative_error(r.grad_a, central_difference(f, b.view_a)),
                        relative_error(r.grad_b, central_difference(f, b.view_b)))
        assert worst <= 1e-4

    def test_two_uniform_nodes(self):
        h = np.ones((2, 3))
        lam = closed_form_anchor_gradient(ContrastiveBatch([0], h, h.copy()), 0.1, "in", 0)
        # only the single-node support below has no negative
        b = ContrastiveBatch([0], h, h.copy(), support=[0, 1])
        assert closed_form_anchor_gradient(b, 0.1, "in", 0).lambda_self == pytest.approx(-5.0, rel=1e-14)
        assert lam.lambda_self == 0.0

    def test_no_negatives_all_zero(self, rng):
        ha, hb = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
        b = ContrastiveBatch([0], ha, hb, [Positives([1, 2], [0.5, 1.0], [3])], support=[0])
        for variant in ("in", "out"):
            g = closed_form_anchor_gradient(b, 0.2, variant, 0)
            np.testing.assert_array_equal(g.lambdas(), 0.0)

    def test_random_finite_difference(self):
        rng = np.random.default_rng(10)
        b = random_batch(rng, n=10, d=3, n_anchor=1, support_all=True)
        node = b.anchors[0]
        for variant, fn in (("in", nescl_in_loss), ("out", nescl_out_loss)):
            g = closed_form_anchor_gradient(b, 0.2, variant, 0).gradient
            fd = central_difference(lambda: fn(b, 0.2), b.view_b[node])
            assert relative_error(g, fd) <= 1e-4

    def test_equal_ratios_out_is_third(self, rng):
        ha, hb = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        ha[2] = ha[0]
        ha[4] = ha[0]
        b = ContrastiveBatch([0], ha, hb, [Positives([2], [1.0], [4])], support=np.arange(6))
        lin = closed_form_anchor_gradient(b, 0.1, "in", 0).lambdas()
        lout = closed_form_anchor_gradient(b, 0.1, "out", 0).lambdas()
        np.testing.assert_allclose(lout, lin / 3, rtol=1e-13)

    def test_single_source_out_equals_in(self, rng):
        b = ContrastiveBatch([0], rng.normal(size=(6, 3)), rng.normal(size=(6, 3)),
                             support=np.arange(6))
        assert nescl_out_grad_anchor(b, 0.2)[0].lambda_self == \
            nescl_in_grad_anchor(b, 0.2)[0].lambda_self

    def test_records_per_anchor(self, rng):
        b = random_batch(rng, n_anchor=4)
        recs = nescl_in_grad_anchor(b, 0.2)
        assert [r.anchor for r in recs] == b.anchors.tolist()
        for r, p in zip(recs, b.positives):
            assert len(r.lambda_nn) == len(p.nearest) and len(r.lambda_inter) == len(p.interacted)
            assert r.variant == "in"


instance = st.tuples(st.integers(3, 9), st.integers(1, 5), st.integers(0, 2**32 - 1),
                     st.sampled_from([0.05, 0.1, 0.2, 0.5, 1.0]))


def _instance(n, d, seed, support_size=None):
    rng = np.random.default_rng(seed)
    ha = rng.normal(size=(n, d)) * 0.5
    hb = rng.normal(size=(n, d)) * 0.5
    others = np.arange(1, n)
    pos = Positives(rng.choice(others, size=min(2, n - 1), replace=False), [0.7, 0.3][:min(2, n - 1)],
                    rng.choice(others, size=1))
    return ContrastiveBatch([0], ha, hb, [pos], support=np.arange(support_size or n))


class TestProperties:
    @settings(max_examples=80, deadline=None)
    @given(instance)
    def test_in_lambdas_negative(self, inst):
        n, d, seed, tau = inst
        g = closed_form_anchor_gradient(_instance(n, d, seed), tau, "in", 0)
        assert np.all(g.lambdas() < 0)

    @settings(max_examples=60, deadline=None)
    @given(instance, st.floats(-2, 2), st.floats(-2, 2))
    def test_shift_invariance(self, inst, a, c):
        n, d, seed, tau = inst
        b = _instance(n, d, seed)
        shifted = ContrastiveBatch(b.anchors, np.hstack([b.view_a, np.full((n, 1), a)]),
                                   np.hstack([b.view_b, np.full((n, 1), c)]), b.positives, b.support)
        for kind in KINDS:
            assert contrastive(shifted, tau, kind).loss == pytest.approx(
                contrastive(b, tau, kind).loss, rel=1e-10, abs=1e-10)
        for variant in ("in", "out"):
            np.testing.assert_allclose(closed_form_anchor_gradient(shifted, tau, variant, 0).lambdas(),
                                       closed_form_anchor_gradient(b, tau, variant, 0).lambdas(),
                                       rtol=1e-10, atol=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 20), st.floats(0.1, 3.0))
    def test_temperature_scaling(self, n, value):
        h = np.full((n, 2), value)
        b = ContrastiveBatch([0], h, h.copy(), support=np.arange(n))
        scaled = [closed_form_anchor_gradient(b, tau, "in", 0).lambda_self * tau
                  for tau in (0.05, 0.1, 0.3, 1.0)]
        np.testing.assert_allclose(scaled, -(n - 1) / n, rtol=0, atol=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(instance)
    def test_loss_lower_bounds(self, inst):
        n, d, seed, tau = inst
        b = _instance(n, d, seed)
        for kind in ("infonce", "supcon_in", "supcon_out"):
            assert contrastive(b, tau, kind, with_grad=False).loss >= -1e-12
        # pooled ratios can exceed 1, but each is below 1
        p = b.positives[0]
        total_w = 1 + p.nearest_weights.sum() + p.interacted_weights.sum()
        assert nescl_out_loss(b, tau) >= -math.log(total_w) - 1e-12


class TestBatch:
    def test_support_contains_anchors(self, rng):
        b = ContrastiveBatch([4, 1], rng.normal(size=(6, 2)), rng.normal(size=(6, 2)), support=[0])
        np.testing.assert_array_equal(b.support, [0, 1, 4])

    def test_validation(self, rng):
        h = rng.normal(size=(4, 2))
        with pytest.raises(ValueError):
            ContrastiveBatch([0, 0], h, h)
        with pytest.raises(ValueError):
            ContrastiveBatch([0], h, h[:, :1])
        with pytest.raises(ValueError):
            Positives([1, 2], [0.5])
        with pytest.raises(ValueError):
            Positives([1], [0.0])


class TestCombined:
    def test_alpha_zero(self):
        assert combined_loss(0.5, 9.0, 0.0) == 0.5

    def test_arithmetic(self):
        assert combined_loss(0.5, 0.25, 1.0) == 0.75

    def test_drop_ranking(self):
        assert combined_loss(0.5, 0.25, 1.0, drop_ranking=True) == 0.25

    def test_negative_alpha(self):
        with pytest.raises(ConfigError):
            combined_loss(0.5, 0.25, -1.0)

    def test_dataset_alphas(self):
        assert [PRESETS[d]["alpha"] for d in ("yelp2018", "gowalla", "amazon-book")] == [0.3, 0.1, 0.3]
