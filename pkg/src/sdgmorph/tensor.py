"""Dense float64 arrays with a reverse-mode tape.

Every op appends one node to the tape that owns its inputs. A node keeps its
forward value and a vector-Jacobian closure; :meth:`Tape.backward` walks the
nodes in reverse insertion order and never mutates them, so the same tape can
be differentiated any number of times.
"""

from __future__ import annotations

from dataclasses import dataclass
from numbers import Real
from typing import Callable, Optional, Sequence

import numpy as np

MAX_ORDER = 6


class ContractError(ValueError):
    """Raised when an op is called outside its preconditions."""


class DomainError(ContractError):
    """Raised for values outside an op's mathematical domain (e.g. log(0))."""


VJP = Callable[[np.ndarray, tuple], tuple]


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple
    value: np.ndarray
    vjp: Optional[VJP]
    requires_grad: bool


class Var:
    """Handle to a node on a tape."""

    __slots__ = ("tape", "id")
    __array_priority__ = 100

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape.nodes[self.id].requires_grad

    def __repr__(self):
        return f"Var(id={self.id}, op={self.tape.nodes[self.id].op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if not isinstance(other, Real):
            raise ContractError("division is only defined by a python scalar")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


class Gradients:
    """Result of a backward pass, indexable by :class:`Var` or node id."""

    def __init__(self, tape: "Tape", grads: list):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, key) -> np.ndarray:
        node_id = key.id if isinstance(key, Var) else int(key)
        g = self._grads[node_id] if node_id < len(self._grads) else None
        if g is None:
            return np.zeros_like(self._tape.nodes[node_id].value)
        return g


class Tape:
    """Append-only record of a forward computation."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, requires_grad: bool = True) -> Var:
        arr = np.array(value, dtype=np.float64)
        return self._push("leaf", (), arr, None, requires_grad)

    def constant(self, value) -> Var:
        return self.leaf(value, requires_grad=False)

    def _push(self, op, inputs, value, vjp, requires_grad=None) -> Var:
        if value.ndim > MAX_ORDER:
            raise ContractError(f"{op}: order {value.ndim} exceeds {MAX_ORDER}")
        if requires_grad is None:
            requires_grad = any(self.nodes[i].requires_grad for i in inputs)
        self.nodes.append(Node(op, tuple(inputs), value, vjp, requires_grad))
        return Var(self, len(self.nodes) - 1)

    def backward(self, root: Var) -> Gradients:
        """Gradient of a scalar ``root`` w.r.t. every node recorded before it."""
        if root.tape is not self:
            raise ContractError("root belongs to a different tape")
        if root.value.size != 1:
            raise ContractError(f"backward root must be scalar, got shape {root.shape}")
        grads: list = [None] * (root.id + 1)
        grads[root.id] = np.ones_like(root.value)
        nodes = self.nodes
        for i in range(root.id, -1, -1):
            g = grads[i]
            node = nodes[i]
            if g is None or node.vjp is None or not node.requires_grad:
                continue
            needs = tuple(nodes[j].requires_grad for j in node.inputs)
            for j, gj, need in zip(node.inputs, node.vjp(g, needs), needs):
                if gj is None or not need:
                    continue
                grads[j] = gj if grads[j] is None else grads[j] + gj
        return Gradients(self, grads)


def backward(tape: Tape, root: Var) -> Gradients:
    return tape.backward(root)


def _as_var(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ContractError("operands live on different tapes")
        return x
    return tape.constant(x)


def _pair(a, b) -> tuple:
    tape = a.tape if isinstance(a, Var) else b.tape
    a, b = _as_var(tape, a), _as_var(tape, b)
    sa, sb = a.shape, b.shape
    if sa != sb and a.value.ndim != 0 and b.value.ndim != 0:
        raise ContractError(f"shape mismatch {sa} vs {sb} (only scalar broadcasting)")
    return tape, a, b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Var:
    tape, a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return tape._push("add", (a.id, b.id), a.value + b.value,
                      lambda g, n: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    tape, a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return tape._push("sub", (a.id, b.id), a.value - b.value,
                      lambda g, n: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Var:
    tape, a, b = _pair(a, b)
    av, bv = a.value, b.value

    def vjp(g, needs):
        return (_unbroadcast(g * bv, av.shape) if needs[0] else None,
                _unbroadcast(g * av, bv.shape) if needs[1] else None)

    return tape._push("mul", (a.id, b.id), av * bv, vjp)


def neg(a: Var) -> Var:
    return a.tape._push("neg", (a.id,), -a.value, lambda g, n: (-g,))


def scale(a: Var, s: float) -> Var:
    s = float(s)
    return a.tape._push("scale", (a.id,), a.value * s, lambda g, n: (g * s,))


def clamp(a: Var, lo: float = -np.inf, hi: float = np.inf) -> Var:
    """Clip to ``[lo, hi]``; gradient passes only strictly inside the interval
    or exactly on its edge from inside (the clipped set receives zero)."""
    v = a.value
    inside = (v >= lo) & (v <= hi)
    return a.tape._push("clamp", (a.id,), np.clip(v, lo, hi),
                        lambda g, n: (g * inside,))


def relu(a: Var) -> Var:
    # max(0, x) with subgradient 0 at 0
    v = a.value
    active = v > 0
    return a.tape._push("relu", (a.id,), np.where(active, v, 0.0),
                        lambda g, n: (g * active,))


def log(a: Var) -> Var:
    v = a.value
    if np.any(v <= 0):
        raise DomainError("log of non-positive value")
    return a.tape._push("log", (a.id,), np.log(v), lambda g, n: (g / v,))


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return a.tape._push("exp", (a.id,), out, lambda g, n: (g * out,))


# --- shape and reductions --------------------------------------------------

def reshape(a: Var, shape) -> Var:
    src = a.shape
    return a.tape._push("reshape", (a.id,), a.value.reshape(shape),
                        lambda g, n: (g.reshape(src),))


def transpose(a: Var, axes=None) -> Var:
    axes = tuple(range(a.value.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return a.tape._push("transpose", (a.id,), a.value.transpose(axes),
                        lambda g, n: (g.transpose(inv),))


def broadcast_to(a: Var, shape) -> Var:
    """Explicit expansion of size-1 axes (the only broadcasting allowed)."""
    shape = tuple(shape)
    src = a.shape
    if len(src) != len(shape) or any(s != 1 and s != t for s, t in zip(src, shape)):
        raise ContractError(f"cannot expand {src} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(src, shape)) if s == 1 and t != 1)
    out = np.ascontiguousarray(np.broadcast_to(a.value, shape))
    return a.tape._push("broadcast_to", (a.id,), out,
                        lambda g, n: (g.sum(axis=axes, keepdims=True),))


def sum(a: Var, axis=None) -> Var:  # noqa: A001 - mirrors numpy naming
    src = a.shape
    out = np.asarray(a.value.sum(axis=axis))

    def vjp(g, needs):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return a.tape._push("sum", (a.id,), out, vjp)


def mean(a: Var, axis=None) -> Var:
    count = a.value.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis), 1.0 / count)


def concat(parts: Sequence[Var], axis: int = 0) -> Var:
    tape = parts[0].tape
    parts = [_as_var(tape, p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.value for p in parts], axis=axis)
    return tape._push("concat", tuple(p.id for p in parts), out,
                      lambda g, n: tuple(np.split(g, cuts, axis=axis)))


def take(a: Var, index, axis: int = 0) -> Var:
    """Select entries along ``axis`` by integer index array."""
    index = np.asarray(index, dtype=np.intp)
    src = a.shape

    def vjp(g, needs):
        out = np.zeros(src)
        np.add.at(out, (slice(None),) * axis + (index,), g)
        return (out,)

    return a.tape._push("take", (a.id,), np.take(a.value, index, axis=axis), vjp)


def reduce_extreme(a: Var, axis: int, mode: str = "max") -> Var:
    """Max or min along ``axis``; the gradient goes to the winner only.

    Ties resolve to the lowest index along the axis.
    """
    v = a.value
    if not -v.ndim <= axis < v.ndim:
        raise ContractError(f"axis {axis} invalid for order {v.ndim}")
    axis = axis % v.ndim
    if v.shape[axis] == 0:
        raise ContractError("reduce_extreme over an empty axis")
    if mode == "max":
        idx = np.argmax(v, axis=axis)
    elif mode == "min":
        idx = np.argmin(v, axis=axis)
    else:
        raise ContractError(f"unknown mode {mode!r}")
    idx = np.expand_dims(idx, axis)
    out = np.take_along_axis(v, idx, axis=axis).squeeze(axis)
    src = v.shape

    def vjp(g, needs):
        full = np.zeros(src)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return a.tape._push(f"reduce_{mode}", (a.id,), out, vjp)


def matmul(a: Var, b) -> Var:
    tape, a, b = a.tape, a, _as_var(a.tape, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ContractError(f"matmul shapes {av.shape} @ {bv.shape}")

    def vjp(g, needs):
        return (g @ bv.T if needs[0] else None, av.T @ g if needs[1] else None)

    return tape._push("matmul", (a.id, b.id), av @ bv, vjp)


def global_avg_pool(a: Var) -> Var:
    """[B, C, D, H, W] -> [B, C]."""
    if a.value.ndim != 5:
        raise ContractError(f"global_avg_pool expects order 5, got {a.shape}")
    src = a.shape
    n = src[2] * src[3] * src[4]
    return a.tape._push(
        "global_avg_pool", (a.id,), a.value.mean(axis=(2, 3, 4)),
        lambda g, _: (np.broadcast_to(g[:, :, None, None, None] / n, src).copy(),))


def matvec_affine(x: Var, w, b) -> Var:
    """features [B, F], weights [K, F], bias [K] -> [B, K]."""
    tape = x.tape
    w, b = _as_var(tape, w), _as_var(tape, b)
    xv, wv = x.value, w.value
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[1] or b.shape != (wv.shape[0],):
        raise ContractError(f"matvec_affine shapes x{xv.shape} w{wv.shape} b{b.shape}")

    def vjp(g, needs):
        return (g @ wv if needs[0] else None,
                g.T @ xv if needs[1] else None,
                g.sum(axis=0) if needs[2] else None)

    return tape._push("matvec_affine", (x.id, w.id, b.id), xv @ wv.T + b.value, vjp)


def max_pool2(a: Var) -> Var:
    """2x2x2 max pooling as three separable pair reductions."""
    B, C, D, H, W = a.shape
    if D % 2 or H % 2 or W % 2:
        raise ContractError(f"max_pool2 needs even spatial dims, got {a.shape}")
    x = reduce_extreme(reshape(a, (B, C, D, H, W // 2, 2)), 5, "max")
    x = reduce_extreme(reshape(x, (B, C, D, H // 2, 2, W // 2)), 4, "max")
    return reduce_extreme(reshape(x, (B, C, D // 2, 2, H // 2, W // 2)), 3, "max")


# --- numerically stable soft reductions ---------------------------------------

def log_softmax(a: Var, axis: int = -1) -> Var:
    v = a.value
    shifted = v - v.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)
    return a.tape._push("log_softmax", (a.id,), out,
                        lambda g, n: (g - soft * g.sum(axis=axis, keepdims=True),))


def logsumexp(a: Var, axis: int = -1, mask=None) -> Var:
    """log sum exp over ``axis``, restricted to entries where ``mask`` is true."""
    v = a.value
    mask = np.ones(v.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != v.shape:
        raise ContractError("mask shape must match input")
    if not np.all(mask.any(axis=axis)):
        raise ContractError("logsumexp over an empty masked set")
    masked = np.where(mask, v, -np.inf)
    m = masked.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(masked - m), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    soft = e / s
    return a.tape._push("logsumexp", (a.id,), out,
                        lambda g, n: (np.expand_dims(g, axis) * soft,))


class DegenerateEmbeddingError(ContractError):
    """A row with zero Euclidean norm cannot be normalized."""


def l2_normalize_rows(a: Var) -> Var:
    v = a.value
    if v.ndim != 2:
        raise ContractError(f"l2_normalize_rows expects order 2, got {v.shape}")
    norm = np.sqrt((v * v).sum(axis=1, keepdims=True))
    if np.any(norm == 0):
        rows = np.flatnonzero(norm[:, 0] == 0).tolist()
        raise DegenerateEmbeddingError(f"zero-norm embedding rows {rows}")
    q = v / norm
    return a.tape._push(
        "l2_normalize_rows", (a.id,), q,
        lambda g, n: ((g - q * (q * g).sum(axis=1, keepdims=True)) / norm,))


# --- convolution --------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """[B, C, D, H, W] -> columns [B, C*k^3, D*H*W], offset-major per channel."""
    B, C, D, H, W = x.shape
    if k == 1:
        return x.reshape(B, C, D * H * W)
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    cols = np.empty((B, C, k, k, k, D, H, W))
    for dz in range(k):
        for dy in range(k):
            for dx in range(k):
                cols[:, :, dz, dy, dx] = xp[:, :, dz:dz + D, dy:dy + H, dx:dx + W]
    return cols.reshape(B, C * k ** 3, D * H * W)


def _col2im(cols: np.ndarray, shape: tuple, k: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns back onto [B, C, D, H, W]."""
    B, C, D, H, W = shape
    if k == 1:
        return cols.reshape(shape)
    p = (k - 1) // 2
    cols = cols.reshape(B, C, k, k, k, D, H, W)
    xp = np.zeros((B, C, D + 2 * p, H + 2 * p, W + 2 * p))
    for dz in range(k):
        for dy in range(k):
            for dx in range(k):
                xp[:, :, dz:dz + D, dy:dy + H, dx:dx + W] += cols[:, :, dz, dy, dx]
    return xp[:, :, p:p + D, p:p + H, p:p + W]


def _conv_forward(x: np.ndarray, w: np.ndarray):
    B, _, D, H, W = x.shape
    cout = w.shape[0]
    cols = _im2col(x, w.shape[2])
    out = np.matmul(w.reshape(cout, -1), cols)
    return out.reshape(B, cout, D, H, W), cols


def conv3d_same(x: Var, kernels, bias=None) -> Var:
    """Zero-padded 'same' 3-D cross-correlation.

    x [B, Cin, D, H, W], kernels [Cout, Cin, k, k, k] with k odd,
    bias [Cout] or None -> [B, Cout, D, H, W].
    """
    tape = x.tape
    kernels = _as_var(tape, kernels)
    xv, wv = x.value, kernels.value
    if xv.ndim != 5 or wv.ndim != 5:
        raise ContractError(f"conv3d_same expects order-5 operands, got {xv.shape}, {wv.shape}")
    cout, cin, k = wv.shape[0], wv.shape[1], wv.shape[2]
    if wv.shape[2:] != (k, k, k):
        raise ContractError(f"kernels must be cubic, got {wv.shape}")
    if k % 2 == 0:
        raise ContractError(f"kernel size must be odd, got {k}")
    if xv.shape[1] != cin:
        raise ContractError(f"input has {xv.shape[1]} channels, kernels expect {cin}")
    if min(xv.shape[2:]) < 1:
        raise ContractError("spatial extents must be >= 1")
    out, cols = _conv_forward(xv, wv)
    inputs = [x.id, kernels.id]
    if bias is not None:
        bias = _as_var(tape, bias)
        if bias.shape != (cout,):
            raise ContractError(f"bias shape {bias.shape} != ({cout},)")
        out = out + bias.value[None, :, None, None, None]
        inputs.append(bias.id)
    out = np.ascontiguousarray(out)

    def vjp(g, needs):
        gx = gw = gb = None
        if needs[0]:
            # W^T g has Cin*k^3 rows, far fewer than im2col(g) when Cout >> Cin
            gcols = np.matmul(wv.reshape(cout, -1).T, g.reshape(g.shape[0], cout, -1))
            gx = np.ascontiguousarray(_col2im(gcols, xv.shape, k))
        if needs[1]:
            gm = g.reshape(g.shape[0], cout, -1)
            gw = gm[0] @ cols[0].T
            for b in range(1, gm.shape[0]):
                gw += gm[b] @ cols[b].T
            gw = gw.reshape(wv.shape)
        if len(needs) > 2 and needs[2]:
            gb = g.sum(axis=(0, 2, 3, 4))
        return (gx, gw, gb)[: len(needs)]

    return tape._push("conv3d_same", tuple(inputs), out, vjp)
