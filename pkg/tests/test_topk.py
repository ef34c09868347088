"""Successive-halving selection: algorithm, gradients, references, metric."""

import numpy as np
import pytest

from oracles import halving_topk_oracle
import reppool.autodiff as ad
from reppool.autodiff import Tape, backward, sum_all
from reppool.topk import (
    PoolConfig,
    hard_topk,
    iterative_soft_topk,
    nccs,
    peaked_softmax_pair,
    sort_by_score,
    successive_halving_topk,
    tournament_round,
)


class TestPeakedSoftmaxPair:
    def test_symmetry(self):
        assert peaked_softmax_pair(0.0, 0.0, 1.0) == (0.5, 0.5)

    def test_log3_gives_three_quarters(self):
        wa, wb = peaked_softmax_pair(np.log(3.0), 0.0, 1.0)
        assert abs(wa - 0.75) < 1e-15
        assert abs(wb - 0.25) < 1e-15

    def test_sharpness_four(self):
        # direct evaluation: 1 / (1 + e^-4)
        wa, wb = peaked_softmax_pair(1.0, 0.0, 4.0)
        assert abs(wa - 0.9820137900379085) < 1e-15
        assert wa + wb == 1.0

    def test_extreme_scores_saturate_without_overflow(self):
        wa, wb = peaked_softmax_pair(1e6, -1e6, 1.0)
        assert wa == 1.0 and wb == 0.0

    def test_tau_below_one_rejected(self):
        with pytest.raises(ValueError):
            peaked_softmax_pair(0.0, 0.0, 0.5)

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            peaked_softmax_pair(np.nan, 0.0)


class TestSortByScore:
    def test_basic_descending(self):
        E = np.arange(6.0).reshape(3, 2)
        E2, v2, perm = sort_by_score(E, [1.0, 3.0, 2.0])
        np.testing.assert_array_equal(v2.value[:, 0], [3.0, 2.0, 1.0])
        np.testing.assert_array_equal(perm, [1, 2, 0])
        np.testing.assert_array_equal(E2.value, E[[1, 2, 0]])

    def test_already_sorted_is_identity(self):
        _, _, perm = sort_by_score(np.zeros((3, 1)), [5.0, 4.0, 3.0])
        np.testing.assert_array_equal(perm, [0, 1, 2])

    def test_ties_are_stable(self):
        _, _, perm = sort_by_score(np.zeros((3, 1)), [5.0, 5.0, 5.0])
        np.testing.assert_array_equal(perm, [0, 1, 2])


class TestTournamentRound:
    def test_hand_evaluated_pair(self):
        E = np.eye(4)
        E2, v2, rec = tournament_round(E, [4.0, 3.0, 2.0, 1.0], tau=1.0)
        w1 = 1.0 / (1.0 + np.exp(-3.0))
        assert abs(rec.w_top[0] - 0.9525741268224334) < 1e-12
        assert abs(v2.value[0, 0] - 3.857722) < 1e-6
        np.testing.assert_allclose(E2.value[0], [w1, 0.0, 0.0, 1.0 - w1])

    def test_equal_scores_give_means(self):
        rng = np.random.default_rng(0)
        E = rng.normal(size=(6, 3))
        E2, _, _ = tournament_round(E, np.zeros(6), tau=1.0)
        np.testing.assert_allclose(E2.value, 0.5 * (E[:3] + E[5:2:-1]))

    def test_halves_length(self):
        E2, v2, _ = tournament_round(np.zeros((8, 2)), np.arange(8.0), tau=2.0)
        assert E2.value.shape == (4, 2)
        assert v2.value.shape == (4, 1)

    def test_odd_length_rejected(self):
        with pytest.raises(ValueError):
            tournament_round(np.zeros((3, 2)), np.zeros(3))

    def test_weight_pairs_sum_to_one_in_open_interval(self):
        rng = np.random.default_rng(1)
        _, _, rec = tournament_round(rng.normal(size=(16, 2)), rng.uniform(size=16), tau=4.0)
        np.testing.assert_array_equal(rec.w_top + rec.w_bottom, np.ones(8))
        assert np.all(rec.w_top > 0.0) and np.all(rec.w_top < 1.0)

    def test_sorted_pairing_gives_top_weight_at_least_half(self):
        rng = np.random.default_rng(2)
        for seed in range(20):
            v = np.random.default_rng(seed).uniform(size=16)
            E = rng.normal(size=(16, 3))
            _, v_sorted, _ = sort_by_score(E, v)
            _, _, rec = tournament_round(
                np.zeros((16, 3)), v_sorted.value[:, 0], tau=1.0
            )
            assert np.all(rec.w_top >= 0.5)

    def test_single_round_monotonicity(self):
        # raising one score (sort order fixed) strictly raises its weight
        v = np.array([4.0, 3.0, 2.0, 1.0])
        _, _, before = tournament_round(np.zeros((4, 2)), v, tau=1.0)
        v2 = v.copy()
        v2[1] += 0.05
        _, _, after = tournament_round(np.zeros((4, 2)), v2, tau=1.0)
        assert after.w_top[1] > before.w_top[1]


class TestSuccessiveHalving:
    def test_symmetric_two_rows(self):
        batch = successive_halving_topk(np.eye(2), [0.0, 0.0], PoolConfig(k=1))
        np.testing.assert_array_equal(batch.pooled.value, [[0.5, 0.5]])

    def test_pair_softmax_forces_three_quarters(self):
        batch = successive_halving_topk(np.eye(2), [np.log(3.0), 0.0], PoolConfig(k=1))
        np.testing.assert_allclose(batch.pooled.value, [[0.75, 0.25]], atol=1e-15)

    def test_saturated_score_recovers_row(self):
        E = np.vstack([np.eye(4)[0], np.eye(4)[1], np.eye(4)[2], np.eye(4)[3]])
        batch = successive_halving_topk(E, [100.0, 0.0, 0.0, 0.0], PoolConfig(k=1))
        assert np.max(np.abs(batch.pooled.value - E[0])) < 1e-8
        assert batch.provenance[0] == 0

    def test_matches_recursive_oracle_bitwise(self):
        rng = np.random.default_rng(7)
        E = rng.uniform(-1.0, 1.0, size=(8, 4))
        v = rng.uniform(size=8)
        batch = successive_halving_topk(E, v, PoolConfig(k=2))
        oe, ov, op = halving_topk_oracle(E, v, k=2)
        np.testing.assert_array_equal(batch.pooled.value, oe)
        np.testing.assert_array_equal(batch.pooled_scores.value[:, 0], ov)
        np.testing.assert_array_equal(batch.provenance, op)

    @pytest.mark.parametrize("sort", [True, False])
    @pytest.mark.parametrize("n,k", [(16, 4), (13, 4), (32, 1), (8, 8)])
    def test_oracle_equivalence_across_shapes(self, n, k, sort):
        rng = np.random.default_rng(n * 100 + k + sort)
        E = rng.uniform(-1.0, 1.0, size=(n, 3))
        v = rng.uniform(size=n)
        batch = successive_halving_topk(E, v, PoolConfig(k=k, tau=2.0, sort=sort))
        oe, ov, op = halving_topk_oracle(E, v, k=k, tau=2.0, sort=sort)
        np.testing.assert_array_equal(batch.pooled.value, oe)
        np.testing.assert_array_equal(batch.provenance, op)

    def test_pair_evals_equals_n_minus_k(self):
        for n, k in [(16, 4), (64, 8), (8, 1), (32, 32)]:
            rng = np.random.default_rng(n + k)
            batch = successive_halving_topk(
                rng.normal(size=(n, 2)), rng.uniform(size=n), PoolConfig(k=k)
            )
            assert batch.pair_evals == n - k

    def test_pair_evals_counts_padded_rows(self):
        rng = np.random.default_rng(3)
        batch = successive_halving_topk(
            rng.normal(size=(11, 2)), rng.uniform(size=11), PoolConfig(k=2)
        )
        assert batch.pair_evals == 16 - 2

    def test_padded_rows_never_dominate(self):
        rng = np.random.default_rng(4)
        for seed in range(20):
            r = np.random.default_rng(seed)
            n = int(r.integers(3, 30))
            E = r.normal(size=(n, 3))
            v = r.uniform(size=n)
            batch = successive_halving_topk(E, v, PoolConfig(k=2))
            assert np.all(batch.provenance < n)

    def test_provenance_distinct_and_restore_order_ascending(self):
        rng = np.random.default_rng(5)
        batch = successive_halving_topk(
            rng.normal(size=(32, 4)), rng.uniform(size=32), PoolConfig(k=8)
        )
        prov = batch.provenance
        assert len(set(prov.tolist())) == 8
        assert np.all(np.diff(prov) > 0)

    def test_k_boundaries(self):
        rng = np.random.default_rng(6)
        E = rng.normal(size=(4, 2))
        same = successive_halving_topk(E, rng.uniform(size=4), PoolConfig(k=4))
        np.testing.assert_array_equal(same.pooled.value, E)
        with pytest.raises(ValueError):
            successive_halving_topk(E, rng.uniform(size=4), PoolConfig(k=8))
        with pytest.raises(ValueError):
            PoolConfig(k=3)

    def test_gradient_reaches_scores_and_rows(self):
        rng = np.random.default_rng(8)
        tape = Tape()
        E = tape.watch(rng.normal(size=(8, 3)))
        v = tape.watch(rng.uniform(size=(8, 1)))
        batch = successive_halving_topk(E, v, PoolConfig(k=2))
        grads = backward(tape, sum_all(batch.pooled))
        assert np.any(grads[v] != 0.0)
        assert np.any(grads[E] != 0.0)

    def test_saturation_limit_small(self):
        hits = []
        for seed in range(25):
            rng = np.random.default_rng(seed)
            E = rng.uniform(-1.0, 1.0, size=(64, 16))
            v = rng.uniform(size=64) * 100.0
            batch = successive_halving_topk(E, v, PoolConfig(k=8, tau=4.0))
            hard = hard_topk(E, v, 8)[0].value
            hits.append(nccs(batch.pooled.value, hard))
        assert np.mean(hits) >= 0.99

    def test_sorted_beats_unsorted_on_average(self):
        sorted_err, unsorted_err = [], []
        for seed in range(100):
            rng = np.random.default_rng(seed)
            E = rng.uniform(-1.0, 1.0, size=(128, 8))
            v = rng.uniform(size=128) * 100.0
            hard = hard_topk(E, v, 16)[0].value
            bs = successive_halving_topk(E, v, PoolConfig(k=16, sort=True))
            bu = successive_halving_topk(E, v, PoolConfig(k=16, sort=False))
            sorted_err.append(1.0 - nccs(bs.pooled.value, hard))
            unsorted_err.append(1.0 - nccs(bu.pooled.value, hard))
        assert np.mean(sorted_err) < np.mean(unsorted_err)


class TestHardTopk:
    def test_selects_by_score_in_original_order(self):
        E = np.arange(6.0).reshape(3, 2)
        out, idx = hard_topk(E, [3.0, 1.0, 2.0], 2)
        np.testing.assert_array_equal(idx, [0, 2])
        np.testing.assert_array_equal(out.value, E[[0, 2]])

    def test_k_equals_n_is_identity(self):
        E = np.arange(8.0).reshape(4, 2)
        out, idx = hard_topk(E, [0.1, 0.9, 0.5, 0.2], 4)
        np.testing.assert_array_equal(idx, [0, 1, 2, 3])
        np.testing.assert_array_equal(out.value, E)

    def test_tie_breaks_to_lower_index(self):
        _, idx = hard_topk(np.zeros((2, 2)), [1.0, 1.0], 1)
        np.testing.assert_array_equal(idx, [0])

    def test_no_gradient_to_scores(self):
        rng = np.random.default_rng(9)
        tape = Tape()
        E = tape.watch(rng.normal(size=(6, 3)))
        v = tape.watch(rng.uniform(size=(6, 1)))
        out, _ = hard_topk(E, v, 2)
        grads = backward(tape, sum_all(out))
        np.testing.assert_array_equal(grads[v], np.zeros((6, 1)))
        assert np.any(grads[E] != 0.0)


class TestIterative:
    def test_k_one_is_single_softmax_mixture(self):
        rng = np.random.default_rng(10)
        E = rng.normal(size=(5, 3))
        v = rng.uniform(size=5)
        out = iterative_soft_topk(E, v, k=1, tau=1.0)
        p = np.exp(v - v.max())
        p /= p.sum()
        np.testing.assert_allclose(out.value, (p[None, :] @ E), atol=1e-12)

    def test_saturates_to_hard_rows_in_score_order(self):
        rng = np.random.default_rng(11)
        E = rng.normal(size=(8, 4))
        v = rng.permutation(np.arange(8.0))
        out = iterative_soft_topk(E, v, k=3, tau=200.0)
        by_score = E[np.argsort(-v)[:3]]
        assert np.max(np.abs(out.value - by_score)) < 1e-6

    def test_logged_quality_run(self):
        rng = np.random.default_rng(3)
        E = rng.uniform(-1.0, 1.0, size=(16, 8))
        v = rng.uniform(size=16)
        out = iterative_soft_topk(E, v, k=4, tau=1.0)
        hard = hard_topk(E, v, 4)[0].value
        score = nccs(out.value, hard)
        print(f"iterative nCCS at n=16 k=4 seed 3: {score:.4f}")
        assert -1.0 <= score <= 1.0

    def test_gradient_flows_to_rows(self):
        rng = np.random.default_rng(12)
        tape = Tape()
        E = tape.watch(rng.normal(size=(6, 2)))
        out = iterative_soft_topk(E, rng.uniform(size=6), k=2)
        grads = backward(tape, sum_all(out))
        assert np.any(grads[E] != 0.0)


class TestNccs:
    def test_self_similarity_is_one(self):
        Y = np.random.default_rng(13).normal(size=(5, 4))
        assert abs(nccs(Y, Y) - 1.0) < 1e-12

    def test_single_row_reduces_to_cosine(self):
        y = np.array([[1.0, 0.0]])
        yh = np.array([[1.0, 1.0]])
        assert abs(nccs(y, yh) - 1.0 / np.sqrt(2.0)) < 1e-12

    def test_permutation_invariant(self):
        Y = np.array([[1.0, 0.0], [0.0, 1.0]])
        Yh = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert nccs(Y, Yh) == 1.0

    def test_zero_row_rejected(self):
        with pytest.raises(ValueError):
            nccs(np.zeros((2, 2)), np.ones((2, 2)))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            nccs(np.ones((2, 2)), np.ones((3, 2)))
