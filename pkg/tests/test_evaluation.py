import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ndcg_scalar

from nescl.encoder import init_embeddings
from nescl.evaluation import (EvalReport, evaluable_users, evaluate, evaluate_scores, ndcg_at_k,
                              popularity_baseline, recall_at_k, top_k_items, write_metrics_csv)
from nescl.interactions import InteractionDataset


class TestRecall:
    def test_all_found(self):
        assert recall_at_k([5, 1, 2, 9], {1, 2, 5}, 20) == 1.0

    def test_none_found(self):
        assert recall_at_k(list(range(20)), {30, 31}, 20) == 0.0

    def test_two_of_five(self):
        ranked = [7, 0, 8, 1] + list(range(10, 26))
        assert recall_at_k(ranked, {0, 1, 2, 3, 4}, 20) == 0.4

    def test_cutoff(self):
        assert recall_at_k([3, 4, 1], {1}, 2) == 0.0

    def test_empty_relevant(self):
        with pytest.raises(ValueError):
            recall_at_k([1], set(), 20)


class TestNDCG:
    def test_rank_one(self):
        assert ndcg_at_k([4, 2, 3], {4}, 20) == 1.0

    def test_rank_two(self):
        # 1/log2(3), frozen from a scalar evaluation
        assert ndcg_at_k([4, 2, 3], {2}, 20) == pytest.approx(0.6309297535714575, rel=1e-14)

    def test_ideal_ordering(self):
        assert ndcg_at_k([1, 2, 3, 9, 8], {1, 2, 3}, 20) == pytest.approx(1.0)

    def test_idcg_truncates_at_k(self):
        # 30 relevant items, all of the top 20 hit
        assert ndcg_at_k(list(range(20)), set(range(30)), 20) == pytest.approx(1.0)

    @settings(max_examples=100, deadline=None)
    @given(st.permutations(list(range(30))), st.sets(st.integers(0, 29), min_size=1, max_size=10),
           st.integers(1, 25))
    def test_matches_scalar_oracle(self, ranked, relevant, k):
        assert ndcg_at_k(ranked, relevant, k) == pytest.approx(ndcg_scalar(ranked, relevant, k), rel=1e-12)
        assert 0.0 <= recall_at_k(ranked, relevant, k) <= 1.0

    @settings(max_examples=100, deadline=None)
    @given(st.permutations(list(range(25))), st.sets(st.integers(0, 24), min_size=1, max_size=8),
           st.integers(1, 24))
    def test_moving_relevant_item_up_never_hurts(self, ranked, relevant, pos):
        ranked = list(ranked)
        if ranked[pos] in relevant and ranked[pos - 1] not in relevant:
            swapped = ranked.copy()
            swapped[pos - 1], swapped[pos] = swapped[pos], swapped[pos - 1]
            assert ndcg_at_k(swapped, relevant, 20) >= ndcg_at_k(ranked, relevant, 20)
            assert recall_at_k(swapped, relevant, 20) >= recall_at_k(ranked, relevant, 20)


class TestRanking:
    def test_ties_go_to_lower_id(self):
        top = top_k_items(np.array([[1.0, 2.0, 2.0, 0.0, 2.0]]), 3)
        np.testing.assert_array_equal(top, [[1, 2, 4]])

    def test_mask(self):
        top = top_k_items(np.array([[5.0, 4.0, 3.0]]), 2, [np.array([0])])
        np.testing.assert_array_equal(top, [[1, 2]])


def one_hot_scores(ds):
    test = ds.test_items()

    def fn(users):
        s = np.zeros((len(users), ds.num_items))
        for r, u in enumerate(users):
            s[r, test[u]] = 1.0
        return s
    return fn


class TestEvaluate:
    def test_oracle_scores_are_perfect(self, block_data):
        rep = evaluate_scores(one_hot_scores(block_data), block_data)
        assert rep.recall_at_k == 1.0 and rep.ndcg_at_k == pytest.approx(1.0)

    def test_skips_users_without_test_or_train(self):
        ds = InteractionDataset.from_pairs(3, 4, [(0, 0), (1, 1)], [(0, 2), (2, 3)])
        np.testing.assert_array_equal(evaluable_users(ds), [0])

    def test_random_embeddings_near_permutation_baseline(self, block_data):
        vals = [evaluate(init_embeddings(500, 32, np.random.default_rng(s)), block_data).ndcg_at_k
                for s in range(20)]
        rng = np.random.default_rng(0)
        test = block_data.test_items()
        perm = []
        for _ in range(20):
            users = []
            for u in range(block_data.num_users):
                cand = np.setdiff1d(np.arange(block_data.num_items), block_data.user_items[u])
                rng.shuffle(cand)
                users.append(ndcg_scalar(cand.tolist(), set(test[u].tolist()), 20))
            perm.append(np.mean(users))
        assert abs(np.mean(vals) - np.mean(perm)) < 0.006

    def test_popularity_baseline_value(self, block_data):
        # independent re-ranking: sort by (-degree, id) in plain python
        deg = np.bincount(block_data.train_pairs[:, 1], minlength=block_data.num_items)
        order = sorted(range(block_data.num_items), key=lambda i: (-deg[i], i))
        test = block_data.test_items()
        vals = []
        for u in range(block_data.num_users):
            seen = set(block_data.user_items[u].tolist())
            ranked = [i for i in order if i not in seen]
            vals.append(ndcg_scalar(ranked, set(test[u].tolist()), 20))
        rep = popularity_baseline(block_data)
        assert rep.ndcg_at_k == pytest.approx(np.mean(vals), rel=1e-12)
        assert rep.ndcg_at_k == pytest.approx(0.031908342001121026, rel=1e-12)

    def test_item_relabelling_invariant(self, block_data):
        rng = np.random.default_rng(5)
        scores = rng.normal(size=(block_data.num_users, block_data.num_items))
        perm = rng.permutation(block_data.num_items)
        inv = np.argsort(perm)
        relabelled = InteractionDataset.from_pairs(
            block_data.num_users, block_data.num_items,
            np.c_[block_data.train_pairs[:, 0], perm[block_data.train_pairs[:, 1]]],
            np.c_[block_data.test_pairs[:, 0], perm[block_data.test_pairs[:, 1]]])
        a = evaluate_scores(lambda u: scores[u], block_data)
        b = evaluate_scores(lambda u: scores[u][:, inv], relabelled)
        assert a.ndcg_at_k == pytest.approx(b.ndcg_at_k, rel=1e-14)
        assert a.recall_at_k == pytest.approx(b.recall_at_k, rel=1e-14)

    def test_deterministic_and_pure(self, block_data):
        e = init_embeddings(500, 8, np.random.default_rng(0))
        before = e.copy()
        r1 = evaluate(e, block_data, per_user=True)
        r2 = evaluate(e, block_data, per_user=True)
        assert r1 == r2
        np.testing.assert_array_equal(e, before)

    def test_shape_mismatch(self, block_data):
        with pytest.raises(ValueError, match="rows"):
            evaluate(np.zeros((10, 4)), block_data)

    def test_chunking_does_not_matter(self, block_data):
        e = init_embeddings(500, 8, np.random.default_rng(2))
        h = e[:200] @ e[200:].T
        a = evaluate_scores(lambda u: h[u], block_data, chunk=7)
        b = evaluate_scores(lambda u: h[u], block_data, chunk=1000)
        assert a == b


class TestOutput:
    def test_json_and_csv(self, tmp_path):
        rep = EvalReport(20, 0.5, 0.25, 3, [{"user": 0, "recall": 1.0, "ndcg": 0.5}])
        rep.write_json(tmp_path / "r.json")
        rep.write_csv(tmp_path / "r.csv")
        assert json.loads((tmp_path / "r.json").read_text())["ndcg_at_k"] == 0.25
        assert (tmp_path / "r.csv").read_text().splitlines()[0] == "k,recall@20,ndcg@20,evaluated_users"

    def test_metrics_csv_header(self, tmp_path):
        write_metrics_csv(tmp_path / "m.csv", [{"epoch": 1, "loss_total": 1.0, "loss_rank": 0.5,
                                                "loss_contrastive": 2.0, "recall@20": 0.1,
                                                "ndcg@20": math.pi}])
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "epoch,loss_total,loss_rank,loss_contrastive,recall@20,ndcg@20"
        assert lines[1].endswith(repr(math.pi))
