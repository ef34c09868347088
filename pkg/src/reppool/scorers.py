"""Usefulness scorers and window-pooling baselines.

A scorer maps each d-dimensional row to one score. Linear and nonlinear kinds
carry trainable parameters; the rest are parameter-free references (coordinate
projection, attention column mass, fixed stride marks, seeded uniform noise).
Mean/max window kinds are not scorers at all: they shrink the matrix directly
and are handled by `window_pool`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .autodiff import (
    Array,
    Tensor,
    add_bias,
    constant,
    matmul,
    slice_cols,
    tanh,
    transpose,
    window_max,
)

SCORE_KINDS = ("linear", "nonlinear", "power-like", "embedding", "random", "index")
WINDOW_KINDS = ("mean-window", "max-window")


@dataclass(frozen=True)
class ScorerSpec:
    """Which scoring rule to use and its structural settings.

    hidden_width applies to the nonlinear kind: None keeps a d-wide hidden
    layer (classification-head shape); 1 collapses it to a single unit.
    """

    kind: str
    coordinate: int = 0        # embedding kind: which column to read
    target_k: int = 1          # index kind: how many positions to mark
    hidden_width: int | None = None
    window: int = 4            # window kinds
    stride: int = 4
    seed: int = 0              # random kind

    def __post_init__(self):
        if self.kind not in SCORE_KINDS + WINDOW_KINDS:
            raise ValueError(f"unknown scorer kind {self.kind!r}")
        if self.kind == "index" and self.target_k < 1:
            raise ValueError("index scorer needs target_k >= 1")
        if self.window < 1 or self.stride < 1:
            raise ValueError("window and stride must be >= 1")

    @property
    def trainable(self) -> bool:
        return self.kind in ("linear", "nonlinear")


def init_scorer_params(spec: ScorerSpec, d: int, rng: np.random.Generator) -> dict[str, Array]:
    """Freshly initialized parameter arrays for a trainable scorer (else empty)."""
    if spec.kind == "linear":
        return {"w": rng.normal(0.0, d**-0.5, size=(d, 1)), "b": np.zeros((1, 1))}
    if spec.kind == "nonlinear":
        h = d if spec.hidden_width is None else spec.hidden_width
        return {
            "w1": rng.normal(0.0, d**-0.5, size=(d, h)),
            "b1": np.zeros((1, h)),
            "w2": rng.normal(0.0, h**-0.5, size=(h, 1)),
            "b2": np.zeros((1, 1)),
        }
    return {}


def index_score_values(n: int, target_k: int) -> Array:
    """1 at every (n // target_k)-th position so exactly target_k rows are marked."""
    if target_k > n:
        raise ValueError(f"target_k={target_k} exceeds n={n}")
    stride = n // target_k
    v = np.zeros(n)
    marked = np.arange(stride - 1, n, stride)[:target_k]
    v[marked] = 1.0
    return v


def compute_scores(E, spec: ScorerSpec, params: Mapping[str, Tensor] | None = None, ctx=None) -> Tensor:
    """Score every row of E, returning an (n, 1) column.

    `ctx` must be the previous layer's n-by-n attention probabilities for the
    power-like kind and nothing otherwise.
    """
    E = E if isinstance(E, Tensor) else constant(E)
    n, d = E.value.shape
    if spec.kind in WINDOW_KINDS:
        raise ValueError(f"{spec.kind} pools the matrix itself; use window_pool")
    if (ctx is not None) != (spec.kind == "power-like"):
        raise ValueError("ctx is required for power-like scoring and rejected otherwise")
    if spec.trainable and not params:
        raise ValueError(f"{spec.kind} scorer needs its parameters")

    if spec.kind == "linear":
        return add_bias(matmul(E, params["w"]), params["b"])
    if spec.kind == "nonlinear":
        hidden = tanh(add_bias(matmul(E, params["w1"]), params["b1"]))
        return add_bias(matmul(hidden, params["w2"]), params["b2"])
    if spec.kind == "power-like":
        ctx = ctx if isinstance(ctx, Tensor) else constant(ctx)
        if ctx.value.shape != (n, n):
            raise ValueError(f"power-like ctx must be {n}x{n}, got {ctx.value.shape}")
        ones = constant(np.ones((1, n)))
        return transpose(matmul(ones, ctx))
    if spec.kind == "embedding":
        if not 0 <= spec.coordinate < d:
            raise ValueError(f"coordinate {spec.coordinate} out of range for d={d}")
        return slice_cols(E, spec.coordinate, spec.coordinate + 1)
    if spec.kind == "random":
        rng = np.random.default_rng(spec.seed)
        return constant(rng.uniform(0.0, 1.0, size=(n, 1)))
    if spec.kind == "index":
        return constant(index_score_values(n, spec.target_k).reshape(-1, 1))
    raise ValueError(f"unknown scorer kind {spec.kind!r}")


def window_pool(E, mode: str, window: int, stride: int) -> Tensor:
    """Columnwise mean or max over strided row windows (final partial window kept)."""
    if mode not in ("mean", "max"):
        raise ValueError(f"mode must be 'mean' or 'max', got {mode!r}")
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    E = E if isinstance(E, Tensor) else constant(E)
    n = E.value.shape[0]
    if mode == "max":
        return window_max(E, window, stride)
    starts = range(0, n, stride)
    pool = np.zeros((len(starts), n))
    for row, s in enumerate(starts):
        stop = min(s + window, n)
        pool[row, s:stop] = 1.0 / (stop - s)
    return matmul(constant(pool), E)
