"""Transformer substrate: scaled dot-product attention, multi-head wrappers,
blockwise and causal self-attention, cross-attention, feed-forward blocks and
sinusoidal positions. Residual blocks are pre-norm; dropout is carried in the
config but fixed to 0 at desk scale so gradient checks stay exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .autodiff import (
    Array,
    Tensor,
    add,
    add_bias,
    concat_cols,
    concat_rows,
    constant,
    layer_norm,
    matmul,
    multihead_attention_packed,
    relu,
    row_softmax,
    scale,
    slice_cols,
    slice_rows,
    transpose,
)

MASK_NEG = -1e30  # additive sentinel: exp underflows to exactly 0


@dataclass(frozen=True)
class AttentionConfig:
    """Shapes shared by every attention layer of a model."""

    model_dim: int
    head_count: int
    ffn_dim: int
    block_size: int = 0       # 0 = dense
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.model_dim % self.head_count:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by {self.head_count} heads"
            )
        if self.block_size < 0:
            raise ValueError("block_size must be >= 0")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.head_count


def sinusoidal_positions(n: int, d: int) -> Array:
    """Interleaved sin/cos absolute position encoding, origin at row 0."""
    if d % 2:
        raise ValueError(f"position encoding needs an even dimension, got {d}")
    pos = np.arange(n)[:, None]
    freq = np.exp(-np.log(10000.0) * np.arange(0, d, 2) / d)[None, :]
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(pos * freq)
    out[:, 1::2] = np.cos(pos * freq)
    return out


def causal_mask(t: int) -> Array:
    return np.triu(np.full((t, t), MASK_NEG), k=1)


def scaled_dot_attention(Q, K, V, mask: Array | None = None) -> tuple[Tensor, Tensor]:
    """softmax(Q K^T / sqrt(d_h) + mask) V; also returns the probabilities."""
    Q = Q if isinstance(Q, Tensor) else constant(Q)
    K = K if isinstance(K, Tensor) else constant(K)
    V = V if isinstance(V, Tensor) else constant(V)
    dh = Q.value.shape[1]
    if K.value.shape[1] != dh or K.value.shape[0] != V.value.shape[0]:
        raise ValueError("K must match Q in width and V in rows")
    logits = scale(matmul(Q, transpose(K)), dh**-0.5)
    if mask is not None:
        if mask.shape != logits.value.shape:
            raise ValueError(f"mask shape {mask.shape} != logits {logits.value.shape}")
        logits = add(logits, constant(mask))
    probs = row_softmax(logits)
    return matmul(probs, V), probs


def init_mha_params(rng: np.random.Generator, d: int, prefix: str = "") -> dict[str, Array]:
    out: dict[str, Array] = {}
    for name in ("wq", "wk", "wv", "wo"):
        out[prefix + name] = _glorot(rng, d, d)
        out[prefix + "b" + name[1]] = np.zeros((1, d))
    return out


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Array:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _heads_attend(Q, K, V, cfg: AttentionConfig, mask: Array | None):
    """Per-head attention over already-projected Q/K/V; returns merged rows
    and the head-mean probabilities."""
    outs = []
    probs_sum = None
    dh = cfg.head_dim
    for h in range(cfg.head_count):
        lo, hi = h * dh, (h + 1) * dh
        out_h, probs_h = scaled_dot_attention(
            slice_cols(Q, lo, hi), slice_cols(K, lo, hi), slice_cols(V, lo, hi), mask
        )
        outs.append(out_h)
        probs_sum = probs_h if probs_sum is None else add(probs_sum, probs_h)
    merged = concat_cols(outs) if len(outs) > 1 else outs[0]
    return merged, scale(probs_sum, 1.0 / cfg.head_count)


def multi_head_attention(
    p: Mapping[str, Tensor],
    x_q,
    x_kv,
    cfg: AttentionConfig,
    mask: Array | None = None,
    prefix: str = "",
    need_probs: bool = True,
) -> tuple[Tensor, Tensor | None]:
    """Project, attend per head, merge; returns output and head-mean probs.

    With need_probs=False the per-head work runs as one packed tape node
    (numerically equal merge, no probabilities returned).
    """
    if x_kv is None:
        x_kv = x_q
    Q = add_bias(matmul(x_q, p[prefix + "wq"]), p[prefix + "bq"])
    K = add_bias(matmul(x_kv, p[prefix + "wk"]), p[prefix + "bk"])
    V = add_bias(matmul(x_kv, p[prefix + "wv"]), p[prefix + "bv"])
    if need_probs:
        merged, probs = _heads_attend(Q, K, V, cfg, mask)
    else:
        merged = multihead_attention_packed(Q, K, V, cfg.head_count, mask)
        probs = None
    out = add_bias(matmul(merged, p[prefix + "wo"]), p[prefix + "bo"])
    return out, probs


def blockwise_self_attention(
    p: Mapping[str, Tensor],
    E,
    cfg: AttentionConfig,
    valid: Array | None = None,
    prefix: str = "",
    need_probs: bool = True,
) -> tuple[Tensor, list[Tensor]]:
    """Self-attention restricted to non-overlapping chunks of block_size rows.

    Equivalent to dense attention under a block-diagonal mask; block_size 0 (or
    >= n) degenerates to dense attention. `valid` marks rows whose keys may be
    attended to; invalid keys are masked out of every block. need_probs=False
    runs each block's heads as one packed node and returns no probabilities.
    """
    E = E if isinstance(E, Tensor) else constant(E)
    n = E.value.shape[0]
    m = cfg.block_size if 0 < cfg.block_size < n else n
    Q = add_bias(matmul(E, p[prefix + "wq"]), p[prefix + "bq"])
    K = add_bias(matmul(E, p[prefix + "wk"]), p[prefix + "bk"])
    V = add_bias(matmul(E, p[prefix + "wv"]), p[prefix + "bv"])

    block_rows = []
    block_probs = []
    for start in range(0, n, m):
        stop = min(start + m, n)
        width = stop - start
        mask = None
        if valid is not None:
            mask = np.where(valid[start:stop], 0.0, MASK_NEG)[None, :].repeat(width, axis=0)
        Qb = slice_rows(Q, start, stop)
        Kb = slice_rows(K, start, stop)
        Vb = slice_rows(V, start, stop)
        if need_probs:
            merged_b, probs_b = _heads_attend(Qb, Kb, Vb, cfg, mask)
            block_probs.append(probs_b)
        else:
            merged_b = multihead_attention_packed(Qb, Kb, Vb, cfg.head_count, mask)
        block_rows.append(merged_b)
    merged = concat_rows(block_rows) if len(block_rows) > 1 else block_rows[0]
    out = add_bias(matmul(merged, p[prefix + "wo"]), p[prefix + "bo"])
    return out, block_probs


def init_encoder_layer(rng: np.random.Generator, cfg: AttentionConfig) -> dict[str, Array]:
    d, f = cfg.model_dim, cfg.ffn_dim
    params = init_mha_params(rng, d)
    params.update(
        ln1_g=np.ones((1, d)), ln1_b=np.zeros((1, d)),
        ln2_g=np.ones((1, d)), ln2_b=np.zeros((1, d)),
        fw1=_glorot(rng, d, f), fb1=np.zeros((1, f)),
        fw2=_glorot(rng, f, d), fb2=np.zeros((1, d)),
    )
    return params


def _ffn(p: Mapping[str, Tensor], x, prefix: str = "") -> Tensor:
    hidden = relu(add_bias(matmul(x, p[prefix + "fw1"]), p[prefix + "fb1"]))
    return add_bias(matmul(hidden, p[prefix + "fw2"]), p[prefix + "fb2"])


def encoder_layer(
    p: Mapping[str, Tensor],
    E,
    cfg: AttentionConfig,
    valid: Array | None = None,
    need_probs: bool = True,
) -> tuple[Tensor, list[Tensor]]:
    """Pre-norm residual block: E + BlockMHA(norm(E)), then + FFN(norm(.))."""
    E = E if isinstance(E, Tensor) else constant(E)
    attn_in = layer_norm(E, p["ln1_g"], p["ln1_b"])
    attn_out, block_probs = blockwise_self_attention(p, attn_in, cfg, valid, need_probs=need_probs)
    x = add(E, attn_out)
    out = add(x, _ffn(p, layer_norm(x, p["ln2_g"], p["ln2_b"])))
    return out, block_probs


def init_decoder_layer(rng: np.random.Generator, cfg: AttentionConfig) -> dict[str, Array]:
    d, f = cfg.model_dim, cfg.ffn_dim
    params = init_mha_params(rng, d, prefix="s_")
    params.update(init_mha_params(rng, d, prefix="c_"))
    params.update(
        ln1_g=np.ones((1, d)), ln1_b=np.zeros((1, d)),
        ln2_g=np.ones((1, d)), ln2_b=np.zeros((1, d)),
        ln3_g=np.ones((1, d)), ln3_b=np.zeros((1, d)),
        fw1=_glorot(rng, d, f), fb1=np.zeros((1, f)),
        fw2=_glorot(rng, f, d), fb2=np.zeros((1, d)),
    )
    return params


def decoder_layer(
    p: Mapping[str, Tensor],
    T,
    memory,
    cfg: AttentionConfig,
    self_mask: Array | None = None,
    cross_mask: Array | None = None,
    need_probs: bool = True,
) -> tuple[Tensor, Tensor | None]:
    """Causal self-attention, cross-attention over the memory rows, FFN.

    self_mask defaults to the causal mask; passing explicit masks lets several
    independent sequences share one call (block-diagonal masking).
    """
    T = T if isinstance(T, Tensor) else constant(T)
    t = T.value.shape[0]
    if self_mask is None:
        self_mask = causal_mask(t)
    self_out, _ = multi_head_attention(
        p, layer_norm(T, p["ln1_g"], p["ln1_b"]), None, cfg, self_mask,
        prefix="s_", need_probs=False,
    )
    x = add(T, self_out)
    cross_out, cross_probs = multi_head_attention(
        p, layer_norm(x, p["ln2_g"], p["ln2_b"]), memory, cfg, cross_mask,
        prefix="c_", need_probs=need_probs,
    )
    x = add(x, cross_out)
    out = add(x, _ffn(p, layer_norm(x, p["ln3_g"], p["ln3_b"])))
    return out, cross_probs
