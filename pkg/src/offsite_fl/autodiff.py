"""Reverse-mode automatic differentiation over dense numpy buffers.

An Array wraps an ndarray plus gradient metadata; a Tape records every
primitive applied while it is active and replays hand-written adjoints in
reverse construction order (which is a valid reverse topological order,
since an op's inputs always exist before its output). One tape per
optimization step; tapes are single-owner and never shared across threads.

All reductions go through numpy's fixed-sequence summation, so a given
input always produces bitwise-identical results on the same platform.
Only one broadcasting form is allowed anywhere: adding a trailing-axis
bias vector to a 2-D activation. Everything else requires exact shapes.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import EmptySupervisionError, ShapeError

__all__ = [
    "Array",
    "Tape",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "embedding",
    "rms_norm",
    "silu",
    "rotary",
    "causal_attention",
    "softmax_cross_entropy",
    "kl_divergence",
    "l2_distance_sq",
]


class Array:
    """Dense tensor with optional gradient accumulator.

    values is immutable during a forward/backward cycle; optimizers may
    swap it between tapes via assign_. grad accumulates across backward
    calls until zero_grad.
    """

    __slots__ = ("values", "requires_grad", "grad", "_tape")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        arr = np.asarray(values)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.values = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: "Tape | None" = None  # tape that produced this array, if any

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values.item())

    def zero_grad(self) -> None:
        self.grad = None

    def assign_(self, new_values: np.ndarray) -> None:
        """Replace values in place (optimizer use only, never under a live tape)."""
        new_values = np.asarray(new_values, dtype=self.values.dtype)
        if new_values.shape != self.values.shape:
            raise ShapeError(f"assign_ shape {new_values.shape} != {self.values.shape}")
        self.values = new_values

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Array(shape={self.values.shape}, dtype={self.values.dtype}{flag})"


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of primitives; backward() replays adjoints in reverse."""

    def __init__(self):
        # each node: (output Array, input Arrays, adjoint fn taking upstream grad)
        self._nodes: list[tuple[Array, tuple[Array, ...], Callable]] = []
        self._leaves: dict[int, Array] = {}

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self, "tapes must unwind in LIFO order"

    def record(self, out: Array, inputs: tuple[Array, ...], backward: Callable) -> None:
        out._tape = self
        for inp in inputs:
            if inp.requires_grad and inp._tape is not self:
                self._leaves[id(inp)] = inp
        self._nodes.append((out, inputs, backward))

    def backward(self, root: Array) -> None:
        """Accumulate d(root)/d(leaf) into each requires_grad leaf's .grad.

        root must be a scalar produced on this tape. Gradients for a leaf
        add across repeated backward calls (adjoint linearity), so zero
        grads between independent steps.
        """
        if root.shape != ():
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        if root._tape is not self:
            raise ValueError("backward root was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(root): np.ones((), dtype=root.dtype)}
        for out, inputs, backward_fn in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward_fn(g)):
                if gi is None:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for key, leaf in self._leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.values)
            leaf.grad = leaf.grad + g


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _tracked(x: Array, tape: Tape | None) -> bool:
    """Whether gradient must flow to or through x on the active tape."""
    return x.requires_grad or (tape is not None and x._tape is tape)


def _check_same_dtype(*arrays: Array) -> None:
    dtypes = {a.dtype for a in arrays}
    if len(dtypes) > 1:
        raise ShapeError(f"mixed dtypes {sorted(str(d) for d in dtypes)}")


def _as_mask(mask, length: int) -> np.ndarray:
    m = np.asarray(mask)
    if m.shape != (length,):
        raise ShapeError(f"mask shape {m.shape} != ({length},)")
    return m.astype(np.float64)


# ---------------------------------------------------------------------------
# elementwise and linear primitives


def add(a: Array, b: Array) -> Array:
    """Elementwise a + b; b may also be a trailing-axis bias (d,) for 2-D a."""
    _check_same_dtype(a, b)
    bias = False
    if a.shape != b.shape:
        if a.values.ndim == 2 and b.shape == (a.shape[-1],):
            bias = True
        else:
            raise ShapeError(f"add shapes {a.shape} and {b.shape}")
    out = Array(a.values + b.values)
    tape = _active_tape()
    if tape is not None and (_tracked(a, tape) or _tracked(b, tape)):
        na, nb = _tracked(a, tape), _tracked(b, tape)

        def backward(g):
            gb = None
            if nb:
                gb = g.sum(axis=0) if bias else g
            return (g if na else None, gb)

        tape.record(out, (a, b), backward)
    return out


def sub(a: Array, b: Array) -> Array:
    """Elementwise a - b (exact shape match)."""
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes {a.shape} and {b.shape}")
    out = Array(a.values - b.values)
    tape = _active_tape()
    if tape is not None and (_tracked(a, tape) or _tracked(b, tape)):
        na, nb = _tracked(a, tape), _tracked(b, tape)

        def backward(g):
            return (g if na else None, -g if nb else None)

        tape.record(out, (a, b), backward)
    return out


def mul(a: Array, b: Array) -> Array:
    """Elementwise product, exact shape match."""
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes {a.shape} and {b.shape}")
    out = Array(a.values * b.values)
    tape = _active_tape()
    if tape is not None and (_tracked(a, tape) or _tracked(b, tape)):
        na, nb = _tracked(a, tape), _tracked(b, tape)
        av, bv = a.values, b.values

        def backward(g):
            return (g * bv if na else None, g * av if nb else None)

        tape.record(out, (a, b), backward)
    return out


def scale(a: Array, c: float) -> Array:
    """a * c for a python scalar constant c."""
    c = float(c)
    out = Array(a.values * a.dtype.type(c))
    tape = _active_tape()
    if tape is not None and _tracked(a, tape):
        tape.record(out, (a,), lambda g: (g * c,))
    return out


def matmul(a: Array, b: Array) -> Array:
    """2-D matrix product; adjoints dA = g @ B^T, dB = A^T @ g."""
    _check_same_dtype(a, b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims {a.shape} @ {b.shape}")
    out = Array(a.values @ b.values)
    tape = _active_tape()
    if tape is not None and (_tracked(a, tape) or _tracked(b, tape)):
        na, nb = _tracked(a, tape), _tracked(b, tape)
        av, bv = a.values, b.values

        def backward(g):
            return (g @ bv.T if na else None, av.T @ g if nb else None)

        tape.record(out, (a, b), backward)
    return out


def transpose(a: Array) -> Array:
    """2-D transpose."""
    if a.values.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D operand, got {a.shape}")
    out = Array(a.values.T.copy())
    tape = _active_tape()
    if tape is not None and _tracked(a, tape):
        tape.record(out, (a,), lambda g: (g.T,))
    return out


def embedding(weights: Array, ids) -> Array:
    """Row gather: weights (V, d), ids (T,) ints -> (T, d). Scatter-add adjoint."""
    ids = np.asarray(ids)
    if ids.ndim != 1 or not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"embedding ids must be 1-D ints, got {ids.shape} {ids.dtype}")
    if weights.values.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {weights.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= weights.shape[0]):
        raise ShapeError(f"token id out of range for table of {weights.shape[0]} rows")
    out = Array(weights.values[ids])
    tape = _active_tape()
    if tape is not None and _tracked(weights, tape):
        vshape = weights.shape

        def backward(g):
            gw = np.zeros(vshape, dtype=g.dtype)
            np.add.at(gw, ids, g)
            return (gw,)

        tape.record(out, (weights,), backward)
    return out


# ---------------------------------------------------------------------------
# normalization / activation / positional primitives


def rms_norm(x: Array, gain: Array, eps: float = 1e-6) -> Array:
    """Row-wise RMS normalization with learnable gain: x (T, d), gain (d,)."""
    _check_same_dtype(x, gain)
    if x.values.ndim != 2 or gain.shape != (x.shape[1],):
        raise ShapeError(f"rms_norm shapes x={x.shape} gain={gain.shape}")
    xv = x.values
    d = xv.shape[1]
    inv = 1.0 / np.sqrt((xv * xv).mean(axis=1, keepdims=True) + xv.dtype.type(eps))
    out = Array(xv * inv * gain.values)
    tape = _active_tape()
    if tape is not None and (_tracked(x, tape) or _tracked(gain, tape)):
        nx, ng = _tracked(x, tape), _tracked(gain, tape)
        gv = gain.values

        def backward(g):
            gx = None
            if nx:
                # d(inv)/dx_j = -inv^3 * x_j / d
                dot = (g * gv * xv).sum(axis=1, keepdims=True)
                gx = g * gv * inv - xv * (inv ** 3) * dot / d
            ggain = (g * xv * inv).sum(axis=0) if ng else None
            return (gx, ggain)

        tape.record(out, (x, gain), backward)
    return out


def silu(x: Array) -> Array:
    """x * sigmoid(x)."""
    xv = x.values
    sig = 1.0 / (1.0 + np.exp(-xv))
    out = Array(xv * sig)
    tape = _active_tape()
    if tape is not None and _tracked(x, tape):

        def backward(g):
            return (g * sig * (1.0 + xv * (1.0 - sig)),)

        tape.record(out, (x,), backward)
    return out


def _rotary_tables(n_pos: int, half: int, head_dim: int, base: float, dtype):
    positions = np.arange(n_pos, dtype=dtype)
    freqs = base ** (-2.0 * np.arange(half, dtype=dtype) / head_dim)
    angles = np.outer(positions, freqs)  # (T, half)
    return np.cos(angles)[:, None, :], np.sin(angles)[:, None, :]


def rotary(x: Array, n_heads: int, base: float = 10000.0) -> Array:
    """Rotary position map applied per head to x (T, d); orthogonal, so the
    adjoint is the inverse rotation."""
    if x.values.ndim != 2:
        raise ShapeError(f"rotary needs (T, d), got {x.shape}")
    t, d = x.shape
    if d % n_heads != 0:
        raise ShapeError(f"d={d} not divisible by n_heads={n_heads}")
    head_dim = d // n_heads
    if head_dim % 2 != 0:
        raise ShapeError(f"head_dim={head_dim} must be even for rotary pairs")
    half = head_dim // 2
    cos, sin = _rotary_tables(t, half, head_dim, base, np.float64)
    cos = cos.astype(x.dtype)
    sin = sin.astype(x.dtype)
    xh = x.values.reshape(t, n_heads, head_dim)
    x1, x2 = xh[:, :, :half], xh[:, :, half:]
    rot = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=2)
    out = Array(rot.reshape(t, d))
    tape = _active_tape()
    if tape is not None and _tracked(x, tape):

        def backward(g):
            gh = g.reshape(t, n_heads, head_dim)
            g1, g2 = gh[:, :, :half], gh[:, :, half:]
            back = np.concatenate([g1 * cos + g2 * sin, -g1 * sin + g2 * cos], axis=2)
            return (back.reshape(t, d),)

        tape.record(out, (x,), backward)
    return out


def causal_attention(q: Array, k: Array, v: Array, n_heads: int) -> Array:
    """Multi-head scaled dot-product attention with a strict causal mask.

    q, k, v: (T, d) with d divisible by n_heads; position i attends to j <= i.
    """
    _check_same_dtype(q, k, v)
    if not (q.shape == k.shape == v.shape) or q.values.ndim != 2:
        raise ShapeError(f"attention shapes q={q.shape} k={k.shape} v={v.shape}")
    t, d = q.shape
    if d % n_heads != 0:
        raise ShapeError(f"d={d} not divisible by n_heads={n_heads}")
    hd = d // n_heads
    dtype = q.dtype

    def split(a):  # (T, d) -> (H, T, hd)
        return a.reshape(t, n_heads, hd).transpose(1, 0, 2)

    qh, kh, vh = split(q.values), split(k.values), split(v.values)
    sc = 1.0 / np.sqrt(np.float64(hd))
    scores = (qh @ kh.transpose(0, 2, 1)) * dtype.type(sc)  # (H, T, T)
    neg = np.triu(np.full((t, t), -np.inf, dtype=dtype), k=1)
    scores = scores + neg
    scores = scores - scores.max(axis=2, keepdims=True)
    e = np.exp(scores)
    w = e / e.sum(axis=2, keepdims=True)  # (H, T, T), rows sum to 1
    outh = w @ vh  # (H, T, hd)
    out = Array(outh.transpose(1, 0, 2).reshape(t, d))
    tape = _active_tape()
    if tape is not None and (_tracked(q, tape) or _tracked(k, tape) or _tracked(v, tape)):
        nq, nk, nv = _tracked(q, tape), _tracked(k, tape), _tracked(v, tape)

        def merge(a):  # (H, T, hd) -> (T, d)
            return a.transpose(1, 0, 2).reshape(t, d)

        def backward(g):
            gh = split(g)
            gw = gh @ vh.transpose(0, 2, 1)  # (H, T, T)
            # softmax rows: masked entries have w=0, contributing nothing
            ds = w * (gw - (gw * w).sum(axis=2, keepdims=True))
            gq = merge((ds @ kh) * dtype.type(sc)) if nq else None
            gk = merge((ds.transpose(0, 2, 1) @ qh) * dtype.type(sc)) if nk else None
            gv = merge(w.transpose(0, 2, 1) @ gh) if nv else None
            return (gq, gk, gv)

        tape.record(out, (q, k, v), backward)
    return out


# ---------------------------------------------------------------------------
# masked scalar losses


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Array, targets, mask) -> Array:
    """Mean over masked positions of -log softmax(logits)[target].

    logits (T, V); targets int (T,); mask {0,1} (T,). Positions with mask 0
    contribute neither loss nor gradient; an all-zero mask is an error.
    """
    if logits.values.ndim != 2:
        raise ShapeError(f"logits must be (T, V), got {logits.shape}")
    t, vocab = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (t,) or not np.issubdtype(targets.dtype, np.integer):
        raise ShapeError(f"targets must be (T,) ints, got {targets.shape} {targets.dtype}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ShapeError(f"target id out of range for vocab {vocab}")
    m = _as_mask(mask, t)
    n_sel = m.sum()
    if n_sel == 0:
        raise EmptySupervisionError("cross entropy over an all-zero mask")
    lp = _log_softmax(logits.values)
    picked = lp[np.arange(t), targets]
    loss_val = -(picked * m.astype(logits.dtype)).sum() / logits.dtype.type(n_sel)
    out = Array(np.asarray(loss_val, dtype=logits.dtype))
    tape = _active_tape()
    if tape is not None and _tracked(logits, tape):
        probs = np.exp(lp)

        def backward(g):
            gl = probs.copy()
            gl[np.arange(t), targets] -= 1.0
            gl *= (m / n_sel)[:, None].astype(gl.dtype)
            return (gl * g,)

        tape.record(out, (logits,), backward)
    return out


def kl_divergence(p_logits: Array, q_logits: Array, mask) -> Array:
    """Mean over masked positions of KL(softmax(p) || softmax(q)).

    Gradient flows only into q_logits; the p side is a frozen reference.
    """
    _check_same_dtype(p_logits, q_logits)
    if p_logits.shape != q_logits.shape or p_logits.values.ndim != 2:
        raise ShapeError(f"kl shapes p={p_logits.shape} q={q_logits.shape}")
    t = p_logits.shape[0]
    m = _as_mask(mask, t)
    n_sel = m.sum()
    if n_sel == 0:
        raise EmptySupervisionError("kl divergence over an all-zero mask")
    lp = _log_softmax(p_logits.values)
    lq = _log_softmax(q_logits.values)
    p = np.exp(lp)
    per_pos = (p * (lp - lq)).sum(axis=1)
    loss_val = (per_pos * m.astype(per_pos.dtype)).sum() / n_sel
    out = Array(np.asarray(loss_val, dtype=p_logits.dtype))
    tape = _active_tape()
    if tape is not None and _tracked(q_logits, tape):
        q = np.exp(lq)

        def backward(g):
            gq = (q - p) * (m / n_sel)[:, None].astype(q.dtype)
            return (None, gq * g)

        tape.record(out, (p_logits, q_logits), backward)
    return out


def l2_distance_sq(a: Array, b: Array, mask=None) -> Array:
    """Sum of squared differences; optional mask selects rows (token axis).

    An all-zero mask is legal and yields zero loss and zero gradients.
    """
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"l2 shapes {a.shape} and {b.shape}")
    diff = a.values - b.values
    if mask is not None:
        m = _as_mask(mask, a.shape[0]).astype(a.dtype)
        mexp = m.reshape((a.shape[0],) + (1,) * (a.values.ndim - 1))
        diff = diff * mexp
    loss_val = (diff * diff).sum()
    out = Array(np.asarray(loss_val, dtype=a.dtype))
    tape = _active_tape()
    if tape is not None and (_tracked(a, tape) or _tracked(b, tape)):
        na, nb = _tracked(a, tape), _tracked(b, tape)

        def backward(g):
            base = 2.0 * diff * g
            return (base if na else None, -base if nb else None)

        tape.record(out, (a, b), backward)
    return out
