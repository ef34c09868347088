"""Successive-halving soft top-k selection and reference selectors.

The core operator keeps `k` convex combinations of `n` rows, each dominated by
a high-scoring row: rows are (optionally) sorted by score, paired first-vs-last
and merged with a pairwise peaked softmax, halving the set per round until k
remain. Gradients flow to both the rows and the scores, unlike hard top-k.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Array,
    Tensor,
    add,
    add_const,
    clamp_min,
    concat_rows,
    constant,
    gather_rows,
    log_one_minus,
    matmul,
    mul,
    mul_colvec,
    row_softmax,
    scale,
    sigmoid,
    slice_rows,
    sub,
    transpose,
)

PAD_SCORE_OFFSET = 1e6  # padded rows score min(v) - offset: never dominate a pair


@dataclass(frozen=True)
class PoolConfig:
    """Settings for one pooling stage."""

    k: int
    tau: float = 1.0
    sort: bool = True
    restore_order: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.k & (self.k - 1):
            raise ValueError(f"k must be a power of two, got {self.k}")
        if self.tau < 1.0:
            raise ValueError("tau must be >= 1")


@dataclass
class PooledBatch:
    """k pooled rows with their scores and dominant-source indices."""

    pooled: Tensor            # (k, d)
    pooled_scores: Tensor     # (k, 1)
    provenance: Array         # (k,) original 0-based row indices
    pair_evals: int           # total pairwise softmax evaluations performed


@dataclass
class PairRecords:
    """Pairing bookkeeping for one tournament round (0-based round-local indices)."""

    top: Array       # (m,) index of the higher-sorted element of each pair
    bottom: Array    # (m,) index of its opponent
    w_top: Array     # (m,) weight of the top element
    w_bottom: Array  # (m,)


def peaked_softmax_pair(a: float, b: float, tau: float = 1.0) -> tuple[float, float]:
    """Pairwise softmax with sharpness tau, max-shifted for stability."""
    if not (np.isfinite(a) and np.isfinite(b)):
        raise ValueError("scores must be finite")
    if tau < 1.0:
        raise ValueError("tau must be >= 1")
    m = max(a, b)
    ea = np.exp(tau * (a - m))
    eb = np.exp(tau * (b - m))
    w_a = float(ea / (ea + eb))
    return w_a, 1.0 - w_a


def _as_scores(v) -> Tensor:
    """Accept a Tensor, 1-D array or column matrix; yield an (n, 1) Tensor."""
    if isinstance(v, Tensor):
        if v.value.shape[1] != 1:
            raise ValueError(f"scores must be a column, got {v.value.shape}")
        return v
    arr = np.asarray(v, dtype=np.float64).reshape(-1, 1)
    return constant(arr)


def _stable_desc_perm(scores: Array) -> Array:
    """Stable descending permutation: ties keep original relative order."""
    return np.argsort(-scores, kind="stable")


def sort_by_score(E, v) -> tuple[Tensor, Tensor, Array]:
    """Reorder rows of E (and v) by descending score; stable on ties."""
    E = E if isinstance(E, Tensor) else constant(E)
    v = _as_scores(v)
    if E.value.shape[0] != v.value.shape[0]:
        raise ValueError("row counts of E and v differ")
    perm = _stable_desc_perm(v.value[:, 0])
    return gather_rows(E, perm), gather_rows(v, perm), perm


def tournament_round(E, v, tau: float = 1.0) -> tuple[Tensor, Tensor, PairRecords]:
    """Halve 2m rows into m convex combinations of the pairs (i, 2m-1-i).

    The weight of the pair's first element is sigmoid(tau * (v_i - v_j)),
    which equals the max-shifted pairwise softmax bit for bit.
    """
    E = E if isinstance(E, Tensor) else constant(E)
    v = _as_scores(v)
    n = E.value.shape[0]
    if n % 2:
        raise ValueError(f"tournament_round needs an even number of rows, got {n}")
    if v.value.shape[0] != n:
        raise ValueError("row counts of E and v differ")
    m = n // 2
    top_idx = np.arange(m)
    bot_idx = np.arange(n - 1, m - 1, -1)

    E_top = slice_rows(E, 0, m)
    E_bot = gather_rows(E, bot_idx)
    v_top = slice_rows(v, 0, m)
    v_bot = gather_rows(v, bot_idx)

    w_top = sigmoid(scale(sub(v_top, v_bot), tau))
    w_bot = add_const(scale(w_top, -1.0), 1.0)

    E_out = add(mul_colvec(E_top, w_top), mul_colvec(E_bot, w_bot))
    v_out = add(mul(v_top, w_top), mul(v_bot, w_bot))

    records = PairRecords(
        top=top_idx,
        bottom=bot_idx,
        w_top=w_top.value[:, 0].copy(),
        w_bottom=w_bot.value[:, 0].copy(),
    )
    return E_out, v_out, records


def _pad_pow2(E: Tensor, v: Tensor) -> tuple[Tensor, Tensor, int]:
    """Zero-pad rows up to the next power of two with strongly negative scores."""
    n = E.value.shape[0]
    n_pad = 1 << (n - 1).bit_length()
    if n_pad == n:
        return E, v, n
    pad_rows = n_pad - n
    pad_E = constant(np.zeros((pad_rows, E.value.shape[1])))
    pad_v = constant(np.full((pad_rows, 1), v.value.min() - PAD_SCORE_OFFSET))
    return concat_rows([E, pad_E]), concat_rows([v, pad_v]), n_pad


def successive_halving_topk(E, v, cfg: PoolConfig) -> PooledBatch:
    """Reduce n rows to cfg.k by repeated sort + tournament rounds.

    Rows are zero-padded to a power of two (padding can never win a pair);
    each output's provenance is the source row with the largest product of
    tournament weights along its merge path. With restore_order the outputs
    are returned in ascending provenance order. Differentiable w.r.t. both
    E and v wherever the sort order is locally constant.
    """
    E = E if isinstance(E, Tensor) else constant(E)
    v = _as_scores(v)
    n = E.value.shape[0]
    if v.value.shape[0] != n:
        raise ValueError("row counts of E and v differ")
    if cfg.k > n:
        raise ValueError(f"k={cfg.k} exceeds n={n}")

    E_cur, v_cur, n_pad = _pad_pow2(E, v)
    # dominant-source tracking: per current row, the best leaf and its weight product
    leaf = np.arange(n_pad)
    leaf_w = np.ones(n_pad)
    pair_evals = 0

    while E_cur.value.shape[0] > cfg.k:
        if cfg.sort:
            E_cur, v_cur, perm = sort_by_score(E_cur, v_cur)
            leaf = leaf[perm]
            leaf_w = leaf_w[perm]
        E_cur, v_cur, rec = tournament_round(E_cur, v_cur, cfg.tau)
        pair_evals += rec.top.size
        top_prod = rec.w_top * leaf_w[rec.top]
        bot_prod = rec.w_bottom * leaf_w[rec.bottom]
        take_top = top_prod >= bot_prod
        leaf = np.where(take_top, leaf[rec.top], leaf[rec.bottom])
        leaf_w = np.where(take_top, top_prod, bot_prod)

    provenance = leaf
    if cfg.restore_order:
        order = np.argsort(provenance, kind="stable")
        E_cur = gather_rows(E_cur, order)
        v_cur = gather_rows(v_cur, order)
        provenance = provenance[order]

    return PooledBatch(
        pooled=E_cur,
        pooled_scores=v_cur,
        provenance=provenance.copy(),
        pair_evals=pair_evals,
    )


def hard_topk(E, v, k: int) -> tuple[Tensor, Array]:
    """Exact top-k rows by score, in ascending original order; ties go low-index.

    Selection indices are derived from score values outside the tape, so the
    result carries no gradient to the scores at all.
    """
    E = E if isinstance(E, Tensor) else constant(E)
    v = _as_scores(v)
    n = E.value.shape[0]
    if k > n or k < 1:
        raise ValueError(f"k={k} out of range for n={n}")
    chosen = np.sort(_stable_desc_perm(v.value[:, 0])[:k])
    return gather_rows(E, chosen), chosen


def iterative_soft_topk(E, v, k: int, tau: float = 1.0) -> Tensor:
    """Baseline relaxation: k full-length softmaxes with cumulative masking.

    Each round takes one softmax-weighted combination of every row and then
    drives the mass it used toward -inf by adding log(1 - p), clamped below
    at -1e9, to a running mask.
    """
    E = E if isinstance(E, Tensor) else constant(E)
    v = _as_scores(v)
    n = E.value.shape[0]
    if k > n or k < 1:
        raise ValueError(f"k={k} out of range for n={n}")
    mask = constant(np.zeros((n, 1)))
    rows = []
    for step in range(k):
        logits = transpose(scale(add(v, mask), tau))
        p = row_softmax(logits)          # (1, n)
        rows.append(matmul(p, E))        # (1, d)
        if step + 1 < k:
            update = clamp_min(log_one_minus(transpose(p)), -1e9)
            mask = clamp_min(add(mask, update), -1e9)
    return concat_rows(rows)


def nccs(Y: Array, Y_hat: Array) -> float:
    """Normalized Chamfer cosine similarity: mean over rows of Y of the best
    cosine match among rows of Y_hat."""
    Y = np.asarray(Y, dtype=np.float64)
    Y_hat = np.asarray(Y_hat, dtype=np.float64)
    if Y.shape != Y_hat.shape:
        raise ValueError(f"shape mismatch: {Y.shape} vs {Y_hat.shape}")
    ny = np.linalg.norm(Y, axis=1)
    nh = np.linalg.norm(Y_hat, axis=1)
    if np.any(ny == 0.0) or np.any(nh == 0.0):
        raise ValueError("nccs is undefined for zero rows")
    cos = np.clip((Y / ny[:, None]) @ (Y_hat / nh[:, None]).T, -1.0, 1.0)
    return float(cos.max(axis=1).mean())
