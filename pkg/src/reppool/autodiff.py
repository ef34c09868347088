"""Dense float64 matrices with a reverse-mode gradient tape.

Every value is a 2-D float64 array. Operations take `Tensor` operands (or raw
arrays / scalars, which are treated as untracked constants), compute the
forward value eagerly, and append a backward rule to the tape owned by their
tracked inputs. `backward` replays the tape in reverse creation order and
returns a cotangent per reachable tracked tensor. Tapes are single-owner and
rebuilt per forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

Array = np.ndarray


class ShapeError(ValueError):
    """Operand shapes do not line up."""


def _as_matrix(value) -> Array:
    out = np.asarray(value, dtype=np.float64)
    if out.ndim == 0:
        out = out.reshape(1, 1)
    elif out.ndim == 1:
        out = out.reshape(-1, 1)
    elif out.ndim != 2:
        raise ShapeError(f"expected a scalar, vector or matrix, got ndim={out.ndim}")
    return out


class _Node:
    __slots__ = ("parents", "pull")

    def __init__(self, parents: tuple[int, ...], pull):
        self.parents = parents
        # pull(cotangent) -> one cotangent per parent, shape-matched
        self.pull = pull


class Tensor:
    """A float64 matrix, optionally tracked on a tape."""

    __slots__ = ("value", "tape", "_idx")

    def __init__(self, value: Array, tape: "Tape | None" = None, idx: int = -1):
        self.value = value
        self.tape = tape
        self._idx = idx

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        tracked = "tracked" if self.tape is not None else "constant"
        return f"Tensor(shape={self.value.shape}, {tracked})"

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return add_const(self, float(other))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add_const(self, -float(other))
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Append-only record of one forward pass; single-owner, not reusable."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def watch(self, value) -> Tensor:
        """Register a leaf whose cotangent will be available after backward."""
        arr = _as_matrix(value)
        t = Tensor(arr, self, len(self._nodes))
        self._nodes.append(_Node((), None))
        return t

    def watch_all(self, values: Mapping[str, Array]) -> dict[str, Tensor]:
        return {name: self.watch(v) for name, v in values.items()}


def constant(value) -> Tensor:
    """An untracked operand; receives no cotangent."""
    return Tensor(_as_matrix(value), None, -1)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _record(inputs: Sequence[Tensor], value: Array, pull) -> Tensor:
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError("operands belong to different tapes")
    if tape is None:
        return Tensor(value, None, -1)
    out = Tensor(value, tape, len(tape._nodes))
    tape._nodes.append(_Node(tuple(t._idx for t in inputs), pull))
    return out


class Gradients:
    """Cotangents keyed by tracked tensor; unreached tensors map to zeros."""

    def __init__(self, grads: list[Array | None]):
        self._grads = grads

    def __getitem__(self, t: Tensor) -> Array:
        if t.tape is None:
            raise ValueError("constants are not tracked and have no gradient")
        g = self._grads[t._idx]
        return np.zeros_like(t.value) if g is None else g


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Cotangent of a 1x1 loss w.r.t. every tensor tracked on `tape`."""
    if loss.tape is not tape:
        raise ValueError("loss was not computed on this tape")
    if loss.value.shape != (1, 1):
        raise ShapeError(f"loss must be 1x1, got {loss.value.shape}")
    grads: list[Array | None] = [None] * len(tape._nodes)
    grads[loss._idx] = np.ones((1, 1))
    for idx in range(loss._idx, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        node = tape._nodes[idx]
        if node.pull is None:
            continue
        for parent, pg in zip(node.parents, node.pull(g)):
            if parent < 0 or pg is None:
                continue
            grads[parent] = pg if grads[parent] is None else grads[parent] + pg
    return Gradients(grads)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add: {a.value.shape} vs {b.value.shape}")
    return _record((a, b), a.value + b.value, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"sub: {a.value.shape} vs {b.value.shape}")
    return _record((a, b), a.value - b.value, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    """Hadamard product."""
    a, b = _lift(a), _lift(b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"mul: {a.value.shape} vs {b.value.shape}")
    av, bv = a.value, b.value
    return _record((a, b), av * bv, lambda g: (g * bv, g * av))


def scale(a, s: float) -> Tensor:
    a = _lift(a)
    s = float(s)
    return _record((a,), a.value * s, lambda g: (g * s,))


def add_const(a, c: float) -> Tensor:
    a = _lift(a)
    return _record((a,), a.value + float(c), lambda g: (g,))


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: {a.value.shape} x {b.value.shape}")
    av, bv = a.value, b.value
    return _record((a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def transpose(a) -> Tensor:
    a = _lift(a)
    return _record((a,), a.value.T.copy(), lambda g: (g.T,))


def sum_all(a) -> Tensor:
    a = _lift(a)
    out = np.array([[a.value.sum()]])
    return _record((a,), out, lambda g: (np.full_like(a.value, g[0, 0]),))


def mean_all(a) -> Tensor:
    a = _lift(a)
    return scale(sum_all(a), 1.0 / a.value.size)


# ---------------------------------------------------------------------------
# nonlinearities


def _stable_sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _lift(a)
    y = _stable_sigmoid(a.value)
    return _record((a,), y, lambda g: (g * y * (1.0 - y),))


def tanh(a) -> Tensor:
    a = _lift(a)
    y = np.tanh(a.value)
    return _record((a,), y, lambda g: (g * (1.0 - y * y),))


def relu(a) -> Tensor:
    a = _lift(a)
    av = a.value
    # gradient at exactly 0 is 0
    return _record((a,), np.maximum(av, 0.0), lambda g: (g * (av > 0.0),))


def log_one_minus(a) -> Tensor:
    """log(1 - a), via log1p; the derivative is forced to 0 where a == 1."""
    a = _lift(a)
    av = a.value
    with np.errstate(divide="ignore"):
        y = np.log1p(-av)
    safe = av != 1.0

    def pull(g):
        return (np.where(safe, -g / np.where(safe, 1.0 - av, 1.0), 0.0),)

    return _record((a,), y, pull)


def clamp_min(a, floor: float) -> Tensor:
    """Elementwise max(a, floor); clamped entries pass no gradient."""
    a = _lift(a)
    av = a.value
    return _record((a,), np.maximum(av, floor), lambda g: (g * (av > floor),))


_ELEMENTWISE = {"tanh": tanh, "relu": relu}


def elementwise(a, fn: str, value: float | None = None) -> Tensor:
    """Apply a tagged elementwise function: tanh, relu, add-const or scale."""
    if fn in _ELEMENTWISE:
        return _ELEMENTWISE[fn](a)
    if fn == "add-const":
        if value is None:
            raise ValueError("add-const requires a value")
        return add_const(a, value)
    if fn == "scale":
        if value is None:
            raise ValueError("scale requires a value")
        return scale(a, value)
    raise ValueError(f"unknown elementwise function {fn!r}")


def row_softmax(a) -> Tensor:
    """Softmax per row, computed with per-row max subtraction."""
    a = _lift(a)
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def pull(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _record((a,), p, pull)


# ---------------------------------------------------------------------------
# structural ops


def gather_rows(a, idx) -> Tensor:
    """Select rows by index; repeated indices accumulate gradient."""
    a = _lift(a)
    idx = np.asarray(idx, dtype=np.intp).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= a.value.shape[0]):
        raise IndexError("row index out of range")
    av = a.value
    # plain assignment suffices when no index repeats (sorts, reversals)
    unique = len(np.unique(idx)) == idx.size

    def pull(g):
        out = np.zeros_like(av)
        if unique:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _record((a,), av[idx].copy(), pull)


def concat_rows(parts: Iterable) -> Tensor:
    parts = [_lift(p) for p in parts]
    if not parts:
        raise ValueError("concat_rows needs at least one operand")
    cols = parts[0].value.shape[1]
    if any(p.value.shape[1] != cols for p in parts):
        raise ShapeError("concat_rows: column counts differ")
    sizes = [p.value.shape[0] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def pull(g):
        return tuple(np.ascontiguousarray(chunk) for chunk in np.split(g, splits, axis=0))

    return _record(tuple(parts), np.concatenate([p.value for p in parts], axis=0), pull)


def concat_cols(parts: Iterable) -> Tensor:
    parts = [_lift(p) for p in parts]
    if not parts:
        raise ValueError("concat_cols needs at least one operand")
    rows = parts[0].value.shape[0]
    if any(p.value.shape[0] != rows for p in parts):
        raise ShapeError("concat_cols: row counts differ")
    sizes = [p.value.shape[1] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def pull(g):
        return tuple(np.ascontiguousarray(chunk) for chunk in np.split(g, splits, axis=1))

    return _record(tuple(parts), np.concatenate([p.value for p in parts], axis=1), pull)


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = _lift(a)
    av = a.value

    def pull(g):
        out = np.zeros_like(av)
        out[start:stop] = g
        return (out,)

    return _record((a,), av[start:stop].copy(), pull)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = _lift(a)
    av = a.value

    def pull(g):
        out = np.zeros_like(av)
        out[:, start:stop] = g
        return (out,)

    return _record((a,), av[:, start:stop].copy(), pull)


def add_bias(a, b) -> Tensor:
    """Add a 1xD row vector to every row of a."""
    a, b = _lift(a), _lift(b)
    if b.value.shape != (1, a.value.shape[1]):
        raise ShapeError(f"add_bias: bias {b.value.shape} for matrix {a.value.shape}")
    return _record((a, b), a.value + b.value, lambda g: (g, g.sum(axis=0, keepdims=True)))


def mul_colvec(a, c) -> Tensor:
    """Scale every row of a by the matching entry of an Mx1 column vector."""
    a, c = _lift(a), _lift(c)
    if c.value.shape != (a.value.shape[0], 1):
        raise ShapeError(f"mul_colvec: column {c.value.shape} for matrix {a.value.shape}")
    av, cv = a.value, c.value
    return _record((a, c), av * cv, lambda g: (g * cv, (g * av).sum(axis=1, keepdims=True)))


def window_max(a, window: int, stride: int) -> Tensor:
    """Columnwise max over strided row windows; gradient goes to the argmax."""
    a = _lift(a)
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    av = a.value
    n = av.shape[0]
    starts = list(range(0, n, stride))
    rows = []
    arg = []
    for s in starts:
        chunk = av[s : min(s + window, n)]
        rows.append(chunk.max(axis=0))
        arg.append(s + chunk.argmax(axis=0))
    out = np.stack(rows, axis=0)
    arg = np.stack(arg, axis=0)
    cols = np.arange(av.shape[1])

    def pull(g):
        z = np.zeros_like(av)
        for w in range(len(starts)):
            np.add.at(z, (arg[w], cols), g[w])
        return (z,)

    return _record((a,), out, pull)


def multihead_attention_packed(Q, K, V, heads: int, mask: Array | None = None) -> Tensor:
    """Scaled dot-product attention for all heads in a single tape node.

    Q is (q, heads*dh), K and V are (s, heads*dh); the optional additive mask
    (q, s) applies to every head. Numerically equivalent to slicing per head,
    attending and concatenating, but one node instead of dozens. Probabilities
    are not exposed; use the compositional path when they are needed.
    """
    Q, K, V = _lift(Q), _lift(K), _lift(V)
    q, d = Q.value.shape
    s = K.value.shape[0]
    if d % heads or K.value.shape[1] != d or V.value.shape != (s, d):
        raise ShapeError("multihead_attention_packed: inconsistent operand shapes")
    if mask is not None and mask.shape != (q, s):
        raise ShapeError(f"mask shape {mask.shape} != ({q}, {s})")
    dh = d // heads
    inv = dh**-0.5
    Q3 = Q.value.reshape(q, heads, dh).transpose(1, 0, 2)
    K3 = K.value.reshape(s, heads, dh).transpose(1, 0, 2)
    V3 = V.value.reshape(s, heads, dh).transpose(1, 0, 2)
    S = np.matmul(Q3, K3.transpose(0, 2, 1)) * inv
    if mask is not None:
        S = S + mask[None, :, :]
    S -= S.max(axis=2, keepdims=True)
    P = np.exp(S)
    P /= P.sum(axis=2, keepdims=True)
    O = np.matmul(P, V3)
    out = O.transpose(1, 0, 2).reshape(q, d)

    def pull(g):
        g3 = g.reshape(q, heads, dh).transpose(1, 0, 2)
        dV3 = np.matmul(P.transpose(0, 2, 1), g3)
        dP = np.matmul(g3, V3.transpose(0, 2, 1))
        dS = P * (dP - (dP * P).sum(axis=2, keepdims=True))
        dQ3 = np.matmul(dS, K3) * inv
        dK3 = np.matmul(dS.transpose(0, 2, 1), Q3) * inv
        return (
            dQ3.transpose(1, 0, 2).reshape(q, d),
            dK3.transpose(1, 0, 2).reshape(s, d),
            dV3.transpose(1, 0, 2).reshape(s, d),
        )

    return _record((Q, K, V), out, pull)


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Per-row normalization followed by an elementwise affine map."""
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    d = x.value.shape[1]
    if gain.value.shape != (1, d) or bias.value.shape != (1, d):
        raise ShapeError("layer_norm: gain/bias must be 1xD")
    xv = x.value
    mu = xv.mean(axis=1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.value + bias.value
    gv = gain.value

    def pull(g):
        dxhat = g * gv
        dx = inv / d * (d * dxhat - dxhat.sum(axis=1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _record((x, gain, bias), out, pull)


def softmax_xent(logits, targets, mask=None) -> Tensor:
    """Mean cross-entropy of row-softmaxed logits against integer targets.

    `mask`, when given, is a per-row 0/1 weight; the mean runs over unmasked
    rows only.
    """
    logits = _lift(logits)
    tv = np.asarray(targets, dtype=np.intp).ravel()
    n, v = logits.value.shape
    if tv.shape != (n,):
        raise ShapeError(f"softmax_xent: {n} rows but {tv.shape[0]} targets")
    if tv.size and (tv.min() < 0 or tv.max() >= v):
        raise IndexError("target id out of vocabulary range")
    w = np.ones(n) if mask is None else np.asarray(mask, dtype=np.float64).ravel()
    total = w.sum()
    if total <= 0:
        raise ValueError("softmax_xent: mask removes every row")
    shifted = logits.value - logits.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    per_row = lse - shifted[np.arange(n), tv]
    out = np.array([[(per_row * w).sum() / total]])
    p = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)

    def pull(g):
        grad = p.copy()
        grad[np.arange(n), tv] -= 1.0
        return (grad * (w / total)[:, None] * g[0, 0],)

    return _record((logits,), out, pull)


# ---------------------------------------------------------------------------
# gradient checking oracle and optimizer


def finite_diff_grad(f: Callable[[Array], float], x: Array, eps: float = 1e-5) -> Array:
    """Central-difference estimate of d f / d x, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.ravel()
    xf = x.copy().ravel()
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + eps
        hi = f(xf.reshape(x.shape))
        xf[i] = orig - eps
        lo = f(xf.reshape(x.shape))
        xf[i] = orig
        flat[i] = (hi - lo) / (2.0 * eps)
    return grad


@dataclass
class GradCheckReport:
    """Outcome of comparing tape gradients against finite differences.

    kink_skips counts probed coordinates excluded because the two-step-size
    finite-difference estimates disagreed with each other, i.e. the sample sat
    within eps of a non-differentiability (relu kinks, sort ties); those
    carry no information about the backward rules.
    """

    max_rel_error: dict[str, float]
    eps: float
    tol: float
    kink_skips: int = 0
    passed: bool = field(init=False)

    def __post_init__(self):
        worst = max(self.max_rel_error.values(), default=0.0)
        self.passed = worst < self.tol

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def _rel_err(a: Array, b: Array) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_gradients(
    build: Callable[[Tape, dict[str, Tensor]], Tensor],
    params: Mapping[str, Array],
    *,
    eps: float = 1e-5,
    tol: float = 1e-6,
    coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare tape gradients of `build`'s scalar output with finite differences.

    `build(tape, tracked)` must rebuild the computation from scratch; `coords`
    caps how many coordinates per parameter are probed (all when None).
    """
    params = {k: _as_matrix(v) for k, v in params.items()}
    tape = Tape()
    tracked = tape.watch_all(params)
    loss = build(tape, tracked)
    grads = backward(tape, loss)

    def eval_at(name: str, value: Array) -> float:
        trial = dict(params)
        trial[name] = value
        t2 = Tape()
        tr2 = t2.watch_all(trial)
        return float(build(t2, tr2).value[0, 0])

    def central(name: str, value: Array, flat_idx: int, step: float) -> float:
        perturbed = value.copy().ravel()
        orig = perturbed[flat_idx]
        perturbed[flat_idx] = orig + step
        hi = eval_at(name, perturbed.reshape(value.shape))
        perturbed[flat_idx] = orig - step
        lo = eval_at(name, perturbed.reshape(value.shape))
        return (hi - lo) / (2.0 * step)

    errors: dict[str, float] = {}
    kink_skips = 0
    for name, value in params.items():
        tape_grad = grads[tracked[name]].ravel()
        size = value.size
        if coords is None or coords >= size:
            picks = np.arange(size)
        else:
            picks = (rng or np.random.default_rng(0)).choice(size, size=coords, replace=False)
        worst = 0.0
        for flat_idx in picks:
            fd = central(name, value, int(flat_idx), eps)
            err = abs(tape_grad[flat_idx] - fd) / max(abs(tape_grad[flat_idx]), abs(fd), 1.0)
            if err >= tol:
                # suspect coordinate: a self-inconsistent finite difference
                # means the probe straddled a kink, not a wrong backward rule
                fd_half = central(name, value, int(flat_idx), eps / 2.0)
                if abs(fd - fd_half) > 1e-3 * max(abs(fd), abs(fd_half), 1.0):
                    kink_skips += 1
                    continue
                err = abs(tape_grad[flat_idx] - fd_half) / max(
                    abs(tape_grad[flat_idx]), abs(fd_half), 1.0
                )
            worst = max(worst, err)
        errors[name] = worst
    return GradCheckReport(errors, eps=eps, tol=tol, kink_skips=kink_skips)


@dataclass
class AdamState:
    """Adam moments and hyperparameters for one parameter."""

    m: Array
    v: Array
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, param: Array, lr: float, **kw) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param), step=0, lr=lr, **kw)


def adam_step(param: Array, grad: Array, state: AdamState) -> tuple[Array, AdamState]:
    """One bias-corrected Adam update; returns the new parameter and state."""
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ShapeError("adam_step: parameter, gradient and state shapes differ")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    mhat = m / (1.0 - state.beta1**t)
    vhat = v / (1.0 - state.beta2**t)
    new_param = param - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    new_state = AdamState(m=m, v=v, step=t, lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps)
    return new_param, new_state
