"""Scoring functions and window-pooling baselines."""

import numpy as np
import pytest

from reppool.autodiff import Tape, backward, check_gradients, sum_all
from reppool.scorers import (
    ScorerSpec,
    compute_scores,
    index_score_values,
    init_scorer_params,
    window_pool,
)


class TestLinear:
    def test_basis_projection(self):
        rng = np.random.default_rng(0)
        E = rng.normal(size=(5, 4))
        w = np.zeros((4, 1))
        w[0, 0] = 1.0
        v = compute_scores(E, ScorerSpec("linear"), {"w": w, "b": np.zeros((1, 1))})
        np.testing.assert_array_equal(v.value[:, 0], E[:, 0])

    def test_parameter_gradients_nonzero(self):
        rng = np.random.default_rng(1)
        spec = ScorerSpec("linear")
        params = init_scorer_params(spec, 4, rng)
        tape = Tape()
        tracked = tape.watch_all(params)
        E = rng.normal(size=(6, 4))
        grads = backward(tape, sum_all(compute_scores(E, spec, tracked)))
        assert np.any(grads[tracked["w"]] != 0.0)
        assert np.any(grads[tracked["b"]] != 0.0)

    def test_missing_params_rejected(self):
        with pytest.raises(ValueError):
            compute_scores(np.ones((2, 2)), ScorerSpec("linear"))


class TestNonlinear:
    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        spec = ScorerSpec("nonlinear")
        params = dict(E=rng.normal(size=(5, 4)), **init_scorer_params(spec, 4, rng))
        weights = rng.normal(size=(5, 1))

        def build(tape, p):
            from reppool.autodiff import constant, mul

            return sum_all(mul(compute_scores(p["E"], spec, p), constant(weights)))

        report = check_gradients(build, params, tol=1e-6)
        assert report.passed, report.max_rel_error

    def test_literal_width_one_variant(self):
        rng = np.random.default_rng(3)
        spec = ScorerSpec("nonlinear", hidden_width=1)
        params = init_scorer_params(spec, 4, rng)
        assert params["w1"].shape == (4, 1)
        assert params["w2"].shape == (1, 1)
        out = compute_scores(rng.normal(size=(5, 4)), spec, params)
        assert out.value.shape == (5, 1)


class TestPowerLike:
    def test_uniform_attention_gives_unit_scores(self):
        n = 6
        ctx = np.full((n, n), 1.0 / n)
        v = compute_scores(np.ones((n, 3)), ScorerSpec("power-like"), ctx=ctx)
        np.testing.assert_allclose(v.value[:, 0], np.ones(n), atol=1e-12)

    def test_row_stochastic_mass_sums_to_n(self):
        rng = np.random.default_rng(4)
        n = 8
        logits = rng.normal(size=(n, n))
        ctx = np.exp(logits)
        ctx /= ctx.sum(axis=1, keepdims=True)
        v = compute_scores(rng.normal(size=(n, 2)), ScorerSpec("power-like"), ctx=ctx)
        assert abs(v.value.sum() - n) < 1e-9

    def test_ctx_required_and_rejected(self):
        E = np.ones((3, 2))
        with pytest.raises(ValueError):
            compute_scores(E, ScorerSpec("power-like"))
        with pytest.raises(ValueError):
            compute_scores(E, ScorerSpec("embedding"), ctx=np.ones((3, 3)))


class TestFixedKinds:
    def test_embedding_coordinate(self):
        rng = np.random.default_rng(5)
        E = rng.normal(size=(4, 5))
        v = compute_scores(E, ScorerSpec("embedding", coordinate=2))
        np.testing.assert_array_equal(v.value[:, 0], E[:, 2])

    def test_embedding_coordinate_out_of_range(self):
        with pytest.raises(ValueError):
            compute_scores(np.ones((3, 2)), ScorerSpec("embedding", coordinate=5))

    def test_random_reproducible(self):
        E = np.zeros((7, 2))
        a = compute_scores(E, ScorerSpec("random", seed=9)).value
        b = compute_scores(E, ScorerSpec("random", seed=9)).value
        np.testing.assert_array_equal(a, b)
        c = compute_scores(E, ScorerSpec("random", seed=10)).value
        assert not np.array_equal(a, c)

    def test_index_marks_every_stride(self):
        v = compute_scores(np.zeros((8, 2)), ScorerSpec("index", target_k=2))
        np.testing.assert_array_equal(v.value[:, 0], [0, 0, 0, 1, 0, 0, 0, 1])

    @pytest.mark.parametrize("n,k", [(8, 2), (10, 3), (15, 4), (64, 8), (7, 7)])
    def test_index_marks_exactly_k(self, n, k):
        assert index_score_values(n, k).sum() == k


class TestWindowPool:
    def test_mean_windows(self):
        E = np.array([[0.0, 0.0], [2.0, 2.0], [4.0, 4.0], [6.0, 6.0]])
        out = window_pool(E, "mean", 2, 2)
        np.testing.assert_array_equal(out.value, [[1.0, 1.0], [5.0, 5.0]])

    def test_max_windows(self):
        E = np.array([[0.0, 0.0], [2.0, 2.0], [4.0, 4.0], [6.0, 6.0]])
        out = window_pool(E, "max", 2, 2)
        np.testing.assert_array_equal(out.value, [[2.0, 2.0], [6.0, 6.0]])

    def test_unit_window_is_identity(self):
        E = np.random.default_rng(6).normal(size=(5, 3))
        for mode in ("mean", "max"):
            np.testing.assert_array_equal(window_pool(E, mode, 1, 1).value, E)

    def test_partial_final_window(self):
        E = np.arange(10.0).reshape(5, 2)
        out = window_pool(E, "mean", 2, 2)
        assert out.value.shape == (3, 2)
        np.testing.assert_array_equal(out.value[2], E[4])

    def test_window_kinds_rejected_by_compute_scores(self):
        with pytest.raises(ValueError):
            compute_scores(np.ones((4, 2)), ScorerSpec("mean-window"))

    def test_mode_validation(self):
        with pytest.raises(ValueError):
            window_pool(np.ones((4, 2)), "median", 2, 2)


class TestSpecValidation:
    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            ScorerSpec("quadratic")

    def test_trainable_flag(self):
        assert ScorerSpec("linear").trainable
        assert ScorerSpec("nonlinear").trainable
        assert not ScorerSpec("random").trainable
