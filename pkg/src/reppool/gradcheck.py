"""Finite-difference gradient audit covering every differentiable operation.

Each case rebuilds a small scalar loss from scratch and compares the tape
gradient of every input against central differences. Composite cases (layers,
the pooled micro model) probe a random subset of coordinates per parameter to
stay fast; primitive ops are probed exhaustively. Points are sampled away from
relu kinks, window-max ties and score-sort ties, where the operators are not
differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import attention, autodiff, models, scorers, topk
from .autodiff import GradCheckReport, check_gradients, mul, sum_all

OP_TOL = 1e-6
MODEL_TOL = 1e-5


@dataclass
class SuiteEntry:
    name: str
    report: GradCheckReport


def _weighted_sum(rng, shape):
    """Random fixed weights turning a matrix output into a scalar loss."""
    w = rng.normal(size=shape)
    return lambda out: sum_all(mul(out, autodiff.constant(w)))


def _spread_scores(rng, n, lo=0.25):
    """Distinct scores with adjacent sorted gaps >= lo, randomly ordered."""
    base = np.cumsum(lo + rng.uniform(0.0, 0.5, size=n))
    return rng.permutation(base)


# --- primitive op cases -----------------------------------------------------


def _case_matmul(rng):
    params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2))}
    w = _weighted_sum(rng, (3, 2))
    return lambda tape, p: w(autodiff.matmul(p["a"], p["b"])), params


def _case_add(rng):
    params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 4))}
    w = _weighted_sum(rng, (3, 4))
    return lambda tape, p: w(autodiff.add(p["a"], p["b"])), params


def _case_sub(rng):
    params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 4))}
    w = _weighted_sum(rng, (3, 4))
    return lambda tape, p: w(autodiff.sub(p["a"], p["b"])), params


def _case_mul(rng):
    params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 4))}
    w = _weighted_sum(rng, (3, 4))
    return lambda tape, p: w(autodiff.mul(p["a"], p["b"])), params


def _case_scale_add_const(rng):
    params = {"a": rng.normal(size=(3, 4))}
    w = _weighted_sum(rng, (3, 4))
    return lambda tape, p: w(autodiff.add_const(autodiff.scale(p["a"], -1.7), 0.4)), params


def _case_transpose(rng):
    params = {"a": rng.normal(size=(3, 5))}
    w = _weighted_sum(rng, (5, 3))
    return lambda tape, p: w(autodiff.transpose(p["a"])), params


def _case_row_softmax(rng):
    params = {"a": rng.normal(size=(4, 5))}
    w = _weighted_sum(rng, (4, 5))
    return lambda tape, p: w(autodiff.row_softmax(p["a"])), params


def _case_sigmoid(rng):
    params = {"a": rng.normal(size=(3, 4))}
    w = _weighted_sum(rng, (3, 4))
    return lambda tape, p: w(autodiff.sigmoid(p["a"])), params


def _case_tanh(rng):
    params = {"a": rng.normal(size=(3, 4))}
    w = _weighted_sum(rng, (3, 4))
    return lambda tape, p: w(autodiff.tanh(p["a"])), params


def _case_relu(rng):
    a = rng.normal(size=(3, 4))
    a = np.where(np.abs(a) < 0.05, a + np.sign(a + 0.5) * 0.1, a)  # stay off the kink
    w = _weighted_sum(rng, (3, 4))
    return lambda tape, p: w(autodiff.relu(p["a"])), {"a": a}


def _case_sum_all(rng):
    return lambda tape, p: autodiff.sum_all(p["a"]), {"a": rng.normal(size=(4, 3))}


def _case_gather_rows(rng):
    idx = np.array([0, 2, 2, 4, 1])
    params = {"a": rng.normal(size=(5, 3))}
    w = _weighted_sum(rng, (5, 3))
    return lambda tape, p: w(autodiff.gather_rows(p["a"], idx)), params


def _case_concat_slice(rng):
    params = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(3, 3))}
    w = _weighted_sum(rng, (2, 2))

    def build(tape, p):
        stacked = autodiff.concat_rows([p["a"], p["b"]])           # (5, 3)
        wide = autodiff.concat_cols([stacked, stacked])            # (5, 6)
        return w(autodiff.slice_cols(autodiff.slice_rows(wide, 1, 3), 2, 4))

    return build, params


def _case_add_bias(rng):
    params = {"a": rng.normal(size=(4, 3)), "b": rng.normal(size=(1, 3))}
    w = _weighted_sum(rng, (4, 3))
    return lambda tape, p: w(autodiff.add_bias(p["a"], p["b"])), params


def _case_mul_colvec(rng):
    params = {"a": rng.normal(size=(4, 3)), "c": rng.normal(size=(4, 1))}
    w = _weighted_sum(rng, (4, 3))
    return lambda tape, p: w(autodiff.mul_colvec(p["a"], p["c"])), params


def _case_layer_norm(rng):
    params = {
        "x": rng.normal(size=(4, 6)),
        "g": 1.0 + 0.3 * rng.normal(size=(1, 6)),
        "b": 0.3 * rng.normal(size=(1, 6)),
    }
    w = _weighted_sum(rng, (4, 6))
    return lambda tape, p: w(autodiff.layer_norm(p["x"], p["g"], p["b"])), params


def _case_softmax_xent(rng):
    targets = rng.integers(0, 7, size=5)
    mask = np.array([1, 1, 0, 1, 1], dtype=np.float64)
    params = {"logits": rng.normal(size=(5, 7))}
    return lambda tape, p: autodiff.softmax_xent(p["logits"], targets, mask), params


def _case_log_one_minus(rng):
    params = {"a": rng.uniform(0.05, 0.9, size=(3, 4))}
    w = _weighted_sum(rng, (3, 4))
    return lambda tape, p: w(autodiff.log_one_minus(p["a"])), params


def _case_clamp_min(rng):
    a = rng.normal(size=(3, 4))
    a = np.where(np.abs(a) < 0.05, a + 0.2, a)  # keep clear of the clamp boundary
    w = _weighted_sum(rng, (3, 4))
    return lambda tape, p: w(autodiff.clamp_min(p["a"], 0.0)), {"a": a}


def _case_window_max(rng):
    # re-draw until every window's per-column top-2 gap is comfortably wide
    while True:
        a = rng.normal(size=(7, 3))
        ok = True
        for s in range(0, 7, 2):
            chunk = np.sort(a[s : s + 3], axis=0)
            if chunk.shape[0] > 1 and np.min(chunk[-1] - chunk[-2]) < 1e-3:
                ok = False
        if ok:
            break
    w = _weighted_sum(rng, (4, 3))
    return lambda tape, p: w(autodiff.window_max(p["a"], 3, 2)), {"a": a}


def _case_window_pool_mean(rng):
    params = {"a": rng.normal(size=(7, 3))}
    w = _weighted_sum(rng, (3, 3))
    return lambda tape, p: w(scorers.window_pool(p["a"], "mean", 3, 3)), params


# --- pooling and scorer cases ------------------------------------------------


def _case_tournament_round(rng):
    params = {"E": rng.normal(size=(6, 3)), "v": _spread_scores(rng, 6).reshape(-1, 1)}
    w = _weighted_sum(rng, (3, 3))
    wv = _weighted_sum(rng, (3, 1))

    def build(tape, p):
        E2, v2, _ = topk.tournament_round(p["E"], p["v"], tau=2.0)
        return autodiff.add(w(E2), wv(v2))

    return build, params


def _case_halving_sorted(rng):
    cfg = topk.PoolConfig(k=2, tau=1.0, sort=True)
    params = {"E": rng.normal(size=(8, 3)), "v": _spread_scores(rng, 8).reshape(-1, 1)}
    w = _weighted_sum(rng, (2, 3))
    wv = _weighted_sum(rng, (2, 1))

    def build(tape, p):
        batch = topk.successive_halving_topk(p["E"], p["v"], cfg)
        return autodiff.add(w(batch.pooled), wv(batch.pooled_scores))

    return build, params


def _case_halving_unsorted(rng):
    cfg = topk.PoolConfig(k=2, tau=1.0, sort=False)
    params = {"E": rng.normal(size=(8, 3)), "v": _spread_scores(rng, 8).reshape(-1, 1)}
    w = _weighted_sum(rng, (2, 3))

    def build(tape, p):
        return w(topk.successive_halving_topk(p["E"], p["v"], cfg).pooled)

    return build, params


def _case_halving_padded(rng):
    cfg = topk.PoolConfig(k=2, tau=1.0)
    params = {"E": rng.normal(size=(6, 3)), "v": _spread_scores(rng, 6).reshape(-1, 1)}
    w = _weighted_sum(rng, (2, 3))

    def build(tape, p):
        return w(topk.successive_halving_topk(p["E"], p["v"], cfg).pooled)

    return build, params


def _case_iterative(rng):
    params = {"E": rng.normal(size=(6, 3)), "v": _spread_scores(rng, 6, lo=0.4).reshape(-1, 1)}
    w = _weighted_sum(rng, (2, 3))
    return lambda tape, p: w(topk.iterative_soft_topk(p["E"], p["v"], k=2, tau=1.0)), params


def _case_scorer_linear(rng):
    spec = scorers.ScorerSpec("linear")
    params = dict(E=rng.normal(size=(5, 4)), **scorers.init_scorer_params(spec, 4, rng))
    w = _weighted_sum(rng, (5, 1))

    def build(tape, p):
        return w(scorers.compute_scores(p["E"], spec, p))

    return build, params


def _case_scorer_nonlinear(rng):
    spec = scorers.ScorerSpec("nonlinear")
    params = dict(E=rng.normal(size=(5, 4)), **scorers.init_scorer_params(spec, 4, rng))
    w = _weighted_sum(rng, (5, 1))

    def build(tape, p):
        return w(scorers.compute_scores(p["E"], spec, p))

    return build, params


# --- attention and model cases ------------------------------------------------


def _case_scaled_dot(rng):
    params = {"Q": rng.normal(size=(3, 4)), "K": rng.normal(size=(5, 4)), "V": rng.normal(size=(5, 4))}
    w = _weighted_sum(rng, (3, 4))

    def build(tape, p):
        out, _ = attention.scaled_dot_attention(p["Q"], p["K"], p["V"])
        return w(out)

    return build, params


def _case_encoder_layer(rng):
    cfg = attention.AttentionConfig(model_dim=8, head_count=2, ffn_dim=16, block_size=4)
    params = dict(E=rng.normal(size=(8, 8)), **attention.init_encoder_layer(rng, cfg))
    w = _weighted_sum(rng, (8, 8))

    def build(tape, p):
        out, _ = attention.encoder_layer(p, p["E"], cfg)
        return w(out)

    return build, params


def _case_decoder_layer(rng):
    cfg = attention.AttentionConfig(model_dim=8, head_count=2, ffn_dim=16)
    params = dict(
        T=rng.normal(size=(4, 8)),
        memory=rng.normal(size=(3, 8)),
        **attention.init_decoder_layer(rng, cfg),
    )
    w = _weighted_sum(rng, (4, 8))

    def build(tape, p):
        out, _ = attention.decoder_layer(p, p["T"], p["memory"], cfg)
        return w(out)

    return build, params


def micro_model(seed: int) -> tuple[models.PooledEncoderDecoder, np.ndarray, np.ndarray]:
    """A tiny pooled model plus one input/target pair, sampled away from
    score-sort ties so the loss is differentiable at the point."""
    task = models.TaskConfig(seq_len=16, payload_count=2, payload_vocab=4, noise_vocab=4, seed=seed)
    cfg = models.needle_model_config(
        task, model_dim=8, head_count=2, ffn_dim=16, block_size=8, bottleneck=4,
        encoder_layers=1, decoder_layers=1, pool_tau=4.0,
    )
    for attempt in range(64):
        model = models.PooledEncoderDecoder(cfg, seed=seed + 1000 * attempt)
        # widen the embedding spread so pooling-score gaps are comfortably wide
        emb_rng = np.random.default_rng(seed + 1000 * attempt + 1)
        model.params["embedding"] = emb_rng.normal(0.0, 0.5, size=model.params["embedding"].shape)
        rng = np.random.default_rng(seed + 1000 * attempt + 2)
        tokens, targets, _ = models.make_needle_example(rng, task)
        trace = model.encode(tokens).traces[0]
        gaps = np.diff(np.sort(trace.scores))
        if gaps.min() > 1e-3:
            return model, tokens, targets
    raise RuntimeError("could not sample a tie-free micro model")


def _case_micro_model(rng):
    seed = int(rng.integers(0, 2**31))
    model, tokens, targets = micro_model(seed)
    params = dict(model.params)

    def build(tape, p):
        enc = model.encode(tokens, p)
        loss, _ = model.decode_train(enc.memory, targets, p)
        return loss

    return build, params


_PRIMITIVE_CASES: dict[str, Callable] = {
    "matmul": _case_matmul,
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "scale_add_const": _case_scale_add_const,
    "transpose": _case_transpose,
    "row_softmax": _case_row_softmax,
    "sigmoid": _case_sigmoid,
    "tanh": _case_tanh,
    "relu": _case_relu,
    "sum_all": _case_sum_all,
    "gather_rows": _case_gather_rows,
    "concat_slice": _case_concat_slice,
    "add_bias": _case_add_bias,
    "mul_colvec": _case_mul_colvec,
    "layer_norm": _case_layer_norm,
    "softmax_xent": _case_softmax_xent,
    "log_one_minus": _case_log_one_minus,
    "clamp_min": _case_clamp_min,
    "window_max": _case_window_max,
    "window_pool_mean": _case_window_pool_mean,
    "tournament_round": _case_tournament_round,
    "halving_topk_sorted": _case_halving_sorted,
    "halving_topk_unsorted": _case_halving_unsorted,
    "halving_topk_padded": _case_halving_padded,
    "iterative_topk": _case_iterative,
    "scorer_linear": _case_scorer_linear,
    "scorer_nonlinear": _case_scorer_nonlinear,
    "scaled_dot_attention": _case_scaled_dot,
}

# composite cases: (builder, coords per parameter, tolerance)
_COMPOSITE_CASES: dict[str, tuple[Callable, int, float]] = {
    "encoder_layer": (_case_encoder_layer, 4, OP_TOL),
    "decoder_layer": (_case_decoder_layer, 4, OP_TOL),
    "micro_model_end_to_end": (_case_micro_model, 2, MODEL_TOL),
}


def case_names() -> list[str]:
    return [*_PRIMITIVE_CASES, *_COMPOSITE_CASES]


def run_case(name: str, seed: int, eps: float = 1e-5) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    if name in _PRIMITIVE_CASES:
        build, params = _PRIMITIVE_CASES[name](rng)
        return check_gradients(build, params, eps=eps, tol=OP_TOL)
    builder, coords, tol = _COMPOSITE_CASES[name]
    build, params = builder(rng)
    return check_gradients(build, params, eps=eps, tol=tol, coords=coords, rng=rng)


def run_suite(seeds: int = 1, base_seed: int = 0, eps: float = 1e-5) -> list[SuiteEntry]:
    """Run every case over `seeds` sampling seeds; one entry per (case, seed)."""
    entries = []
    for offset in range(seeds):
        for name in case_names():
            entries.append(SuiteEntry(f"{name}[seed={base_seed + offset}]",
                                      run_case(name, base_seed + offset, eps)))
    return entries
