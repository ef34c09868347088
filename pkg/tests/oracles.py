"""Independent reference implementations used as test oracles.

`halving_topk_oracle` re-derives the successive-halving selection recursively
with an explicit per-pair scalar loop, sharing no code with the library path;
`masked_dense_attention` computes blockwise attention the expensive way, as
dense attention under a block-diagonal mask.
"""

from __future__ import annotations

import numpy as np


def pair_weights(a: float, b: float, tau: float) -> tuple[float, float]:
    m = max(a, b)
    ea = np.exp(tau * (a - m))
    eb = np.exp(tau * (b - m))
    wa = ea / (ea + eb)
    return wa, 1.0 - wa


def halving_topk_oracle(E, v, k: int, tau: float = 1.0, sort: bool = True,
                        restore_order: bool = True):
    """Recursive tournament selection; returns (pooled, pooled_scores, provenance)."""
    E = np.array(E, dtype=np.float64)
    v = np.array(v, dtype=np.float64).ravel()
    n = len(v)
    n_pad = 1 << (n - 1).bit_length()
    if n_pad > n:
        E = np.vstack([E, np.zeros((n_pad - n, E.shape[1]))])
        v = np.concatenate([v, np.full(n_pad - n, v.min() - 1e6)])
    leaves = np.arange(n_pad)
    leaf_w = np.ones(n_pad)

    def reduce(E, v, leaves, leaf_w):
        if len(v) == k:
            return E, v, leaves, leaf_w
        if sort:
            perm = sorted(range(len(v)), key=lambda i: -v[i])
            E, v, leaves, leaf_w = E[perm], v[perm], leaves[perm], leaf_w[perm]
        m = len(v) // 2
        E2 = np.zeros((m, E.shape[1]))
        v2 = np.zeros(m)
        lv2 = np.zeros(m, dtype=leaves.dtype)
        lw2 = np.zeros(m)
        for i in range(m):
            j = len(v) - 1 - i
            wa, wb = pair_weights(v[i], v[j], tau)
            E2[i] = wa * E[i] + wb * E[j]
            v2[i] = wa * v[i] + wb * v[j]
            pa = wa * leaf_w[i]
            pb = wb * leaf_w[j]
            if pa >= pb:
                lv2[i], lw2[i] = leaves[i], pa
            else:
                lv2[i], lw2[i] = leaves[j], pb
        return reduce(E2, v2, lv2, lw2)

    E, v, leaves, _ = reduce(E, v, leaves, leaf_w)
    if restore_order:
        order = sorted(range(k), key=lambda i: leaves[i])
        E, v, leaves = E[order], v[order], leaves[order]
    return E, v, leaves


def masked_dense_attention(Q, K, V, block: int):
    """Single-head attention with an explicit block-diagonal 0/-inf mask."""
    n = Q.shape[0]
    mask = np.full((n, n), -1e30)
    for start in range(0, n, block):
        stop = min(start + block, n)
        mask[start:stop, start:stop] = 0.0
    logits = Q @ K.T / np.sqrt(Q.shape[1]) + mask
    shifted = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(shifted)
    p /= p.sum(axis=1, keepdims=True)
    return p @ V, p
