"""Dense float64 tensors and a recording tape for reverse-mode differentiation.

Every differentiable primitive used by the models, losses and attacks lives
here. A primitive computes its forward value eagerly with numpy and records a
closure that maps the upstream gradient to one gradient per input. Quantizer
gradients are not primitives: they enter the tape through :func:`custom` with
a straight-through rule supplied by :mod:`tqrobust.quantize`.

Broadcasting is deliberately narrow. Elementwise binary ops require identical
shapes; the only implicit broadcast is :func:`bias_add` over the last axis.
Anything else goes through the explicit :func:`broadcast_to` /
:func:`repeat_rows` primitives.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    """Immutable dense array of 64-bit floats.

    ``shape`` is a tuple of positive dimension sizes and ``data`` the flat
    row-major payload. Non-finite values are rejected at construction.
    """

    __slots__ = ("_array",)

    def __init__(self, data, shape: Sequence[int] | None = None):
        arr = np.array(data, dtype=np.float64)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if any(s <= 0 for s in shape):
                raise ValueError(f"shape dimensions must be positive, got {shape}")
            if int(np.prod(shape, dtype=np.int64)) != arr.size:
                raise ValueError(f"shape {shape} does not match {arr.size} data values")
            arr = arr.reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite")
        arr.setflags(write=False)
        self._array = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def data(self) -> np.ndarray:
        return self._array.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self._array

    def __array__(self, dtype=None, copy=None):
        return self._array if dtype is None else self._array.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._array, other._array)

    def __hash__(self):
        return hash((self.shape, self._array.tobytes()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, data={self._array.tolist()!r})"


def as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.numpy()
    return np.asarray(x, dtype=np.float64)


class Var:
    """Handle to a value recorded on a :class:`Tape`."""

    __slots__ = ("tape", "id", "value", "requires_grad")

    def __init__(self, tape: "Tape", node_id: int, value: np.ndarray, requires_grad: bool):
        self.tape = tape
        self.id = node_id
        self.value = value
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in evaluation order, so the list is topologically
    sorted by construction and :meth:`grad` simply walks it backwards.
    """

    def __init__(self):
        self._parents: list[tuple[Var, ...]] = []
        self._backward: list[Callable | None] = []

    def __len__(self):
        return len(self._parents)

    def leaf(self, value, requires_grad: bool = True) -> Var:
        return self._push(np.array(as_array(value), dtype=np.float64), (), None, requires_grad)

    def const(self, value) -> Var:
        return self.leaf(value, requires_grad=False)

    def record(self, value: np.ndarray, parents: tuple[Var, ...], backward: Callable) -> Var:
        for p in parents:
            if p.tape is not self:
                raise ValueError("cannot mix values from different tapes")
        needs = any(p.requires_grad for p in parents)
        return self._push(value, parents, backward if needs else None, needs)

    def _push(self, value, parents, backward, requires_grad) -> Var:
        node = Var(self, len(self._parents), value, requires_grad)
        self._parents.append(parents)
        self._backward.append(backward)
        return node

    def _check(self, v: Var):
        if not isinstance(v, Var) or v.tape is not self or v.id >= len(self._parents):
            raise ValueError(f"node {getattr(v, 'id', v)!r} is not on this tape")

    def grad(self, loss: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` with respect to each node in ``wrt``.

        The tape itself is left untouched, so this may be called repeatedly.
        Nodes the loss does not depend on get an all-zero gradient.
        """
        self._check(loss)
        if loss.value.shape != ():
            raise ValueError("gradient root must be scalar")
        for w in wrt:
            self._check(w)
        grads: dict[int, np.ndarray] = {loss.id: np.ones((), dtype=np.float64)}
        for node_id in range(loss.id, -1, -1):
            g = grads.get(node_id)
            back = self._backward[node_id]
            if g is None or back is None:
                continue
            parents = self._parents[node_id]
            for p, pg in zip(parents, back(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p.id in grads:
                    grads[p.id] = grads[p.id] + pg
                else:
                    grads[p.id] = pg
        return [np.array(grads[w.id]) if w.id in grads else np.zeros_like(w.value) for w in wrt]


def grad(tape: Tape, loss: Var, wrt: Sequence[Var]) -> dict[int, Tensor]:
    """Map of node id to gradient tensor; thin wrapper over :meth:`Tape.grad`."""
    return {w.id: Tensor(g) for w, g in zip(wrt, tape.grad(loss, wrt))}


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of scalar ``f`` at ``x``."""
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.array(as_array(x), dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return out


def _same_shape(a: Var, b: Var, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise and reduction primitives


def add(a: Var, b: Var) -> Var:
    _same_shape(a, b, "add")
    return a.tape.record(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Var, b: Var) -> Var:
    _same_shape(a, b, "sub")
    return a.tape.record(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Var, b: Var) -> Var:
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return a.tape.record(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return a.tape.record(a.value * c, (a,), lambda g: (g * c,))


def add_const(a: Var, c) -> Var:
    c = np.asarray(c, dtype=np.float64)
    if c.ndim and c.shape != a.shape:
        raise ValueError(f"add_const: shape mismatch {a.shape} vs {c.shape}")
    return a.tape.record(a.value + c, (a,), lambda g: (g,))


def mul_const(a: Var, c) -> Var:
    c = np.asarray(c, dtype=np.float64)
    if c.ndim and c.shape != a.shape:
        raise ValueError(f"mul_const: shape mismatch {a.shape} vs {c.shape}")
    return a.tape.record(a.value * c, (a,), lambda g: (g * c,))


def square(a: Var) -> Var:
    av = a.value
    return a.tape.record(av * av, (a,), lambda g: (2.0 * av * g,))


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return a.tape.record(out, (a,), lambda g: (g * out,))


def log(a: Var) -> Var:
    av = a.value
    return a.tape.record(np.log(av), (a,), lambda g: (g / av,))


def relu(a: Var) -> Var:
    mask = (a.value > 0).astype(np.float64)
    return a.tape.record(a.value * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Var) -> Var:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return a.tape.record(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)
    return a.tape.record(out, (a,), lambda g: (g * (1.0 - out * out),))


def reduce_sum(a: Var, axis: int | None = None) -> Var:
    shape = a.shape
    if axis is None:
        return a.tape.record(np.sum(a.value), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % len(shape)
    return a.tape.record(
        np.sum(a.value, axis=ax),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),),
    )


def mean(a: Var) -> Var:
    n = a.value.size
    shape = a.shape
    return a.tape.record(np.mean(a.value), (a,), lambda g: (np.full(shape, g / n),))


def masked_max(a: Var, exclude, axis: int = -1) -> Var:
    """Max along ``axis`` ignoring positions where ``exclude`` is true.

    The gradient goes to the first maximizing position only.
    """
    exclude = np.asarray(exclude, dtype=bool)
    if exclude.shape != a.shape:
        raise ValueError("masked_max: mask shape mismatch")
    filled = np.where(exclude, -np.inf, a.value)
    idx = np.argmax(filled, axis=axis)
    out = np.take_along_axis(filled, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    shape = a.shape

    def back(g):
        ga = np.zeros(shape)
        np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return a.tape.record(out, (a,), back)


def reshape(a: Var, shape: Sequence[int]) -> Var:
    old = a.shape
    return a.tape.record(a.value.reshape(tuple(shape)), (a,), lambda g: (g.reshape(old),))


def broadcast_to(a: Var, shape: Sequence[int]) -> Var:
    shape = tuple(shape)
    src = a.shape
    out = np.broadcast_to(a.value, shape).copy()
    lead = len(shape) - len(src)

    def back(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return a.tape.record(out, (a,), back)


def repeat_rows(a: Var, n: int) -> Var:
    """Repeat every leading-axis row ``n`` times consecutively."""
    shape = a.shape
    out = np.repeat(a.value, n, axis=0)
    return a.tape.record(out, (a,), lambda g: (g.reshape((shape[0], n) + shape[1:]).sum(axis=1),))


def take_rows(a: Var, rows) -> Var:
    """Select leading-axis rows by integer index."""
    rows = np.asarray(rows, dtype=np.int64)
    shape = a.shape

    def back(g):
        ga = np.zeros(shape)
        np.add.at(ga, rows, g)
        return (ga,)

    return a.tape.record(a.value[rows], (a,), back)


def custom(a: Var, value: np.ndarray, backward: Callable[[np.ndarray], np.ndarray]) -> Var:
    """Record an opaque op with a caller-supplied forward value and backward rule."""
    value = np.asarray(value, dtype=np.float64)
    if value.shape != a.shape:
        raise ValueError("custom: value must keep the input shape")
    return a.tape.record(value, (a,), lambda g: (backward(g),))


# ---------------------------------------------------------------------------
# layer primitives


def matmul(a: Var, b: Var) -> Var:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return a.tape.record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def bias_add(x: Var, b: Var) -> Var:
    if b.value.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ValueError(f"bias_add: bias {b.shape} does not match features of {x.shape}")
    axes = tuple(range(x.value.ndim - 1))
    return x.tape.record(x.value + b.value, (x, b), lambda g: (g, g.sum(axis=axes)))


def _same_pads(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def _pad_windows(x: np.ndarray, kh: int, kw: int, stride: int, padding: str):
    n, h, w, c = x.shape
    if padding == "same":
        ho, pt, pb = _same_pads(h, kh, stride)
        wo, pl, pr = _same_pads(w, kw, stride)
    elif padding == "valid":
        ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
        pt = pb = pl = pr = 0
        if ho <= 0 or wo <= 0:
            raise ValueError("valid convolution kernel larger than input")
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    return xp.shape, (pt, pl), win


def _scatter_windows(gw_fn, pshape, offs, xshape, kh, kw, stride, ho, wo):
    dxp = np.zeros(pshape)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += gw_fn(i, j)
    pt, pl = offs
    return dxp[:, pt : pt + xshape[1], pl : pl + xshape[2], :]


def conv2d(x: Var, w: Var, stride: int = 1, padding: str = "same") -> Var:
    """NHWC convolution with kernel of shape (kh, kw, in_channels, filters)."""
    if x.value.ndim != 4 or w.value.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ValueError(f"conv2d: incompatible shapes {x.shape} and kernel {w.shape}")
    kh, kw, c, f = w.shape
    pshape, offs, win = _pad_windows(x.value, kh, kw, stride, padding)
    n, ho, wo = win.shape[:3]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    wv = w.value
    out = (cols @ wv.reshape(kh * kw * c, f)).reshape(n, ho, wo, f)
    xshape = x.shape

    def back(g):
        g2 = g.reshape(n * ho * wo, f)
        dw = (cols.T @ g2).reshape(kh, kw, c, f)
        dx = _scatter_windows(lambda i, j: g @ wv[i, j].T, pshape, offs, xshape, kh, kw, stride, ho, wo)
        return dx, dw

    return x.tape.record(out, (x, w), back)


def depthwise_conv2d(x: Var, w: Var, stride: int = 1, padding: str = "same") -> Var:
    """Per-channel NHWC convolution with kernel of shape (kh, kw, channels)."""
    if x.value.ndim != 4 or w.value.ndim != 3 or x.shape[3] != w.shape[2]:
        raise ValueError(f"depthwise_conv2d: incompatible shapes {x.shape} and kernel {w.shape}")
    kh, kw, c = w.shape
    pshape, offs, win = _pad_windows(x.value, kh, kw, stride, padding)
    n, ho, wo = win.shape[:3]
    wv = w.value
    out = np.einsum("nhwcij,ijc->nhwc", win, wv, optimize=True)
    xshape = x.shape

    def back(g):
        dw = np.einsum("nhwcij,nhwc->ijc", win, g, optimize=True)
        dx = _scatter_windows(lambda i, j: g * wv[i, j], pshape, offs, xshape, kh, kw, stride, ho, wo)
        return dx, dw

    return x.tape.record(out, (x, w), back)


def batch_norm(x: Var, gamma: Var, beta: Var, mean_, var_, eps: float = 1e-5, training: bool = False):
    """Batch normalization over every axis but the last.

    In training mode the batch statistics are used and returned alongside the
    output as ``(out, batch_mean, batch_var)``; in inference mode ``mean_`` and
    ``var_`` are treated as constants and the same triple is returned with
    those constants echoed back.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm: parameters must have shape ({c},)")
    axes = tuple(range(x.value.ndim - 1))
    xv, gv = x.value, gamma.value
    if training:
        mu = xv.mean(axis=axes)
        var = xv.var(axis=axes)
    else:
        mu = np.asarray(mean_, dtype=np.float64)
        var = np.asarray(var_, dtype=np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    out = xhat * gv + beta.value
    m = xv.size // c

    def back(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gv
        if training:
            dx = inv / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        else:
            dx = dxhat * inv
        return dx, dgamma, dbeta

    return x.tape.record(out, (x, gamma, beta), back), mu, var


def softmax(z: np.ndarray, T: float = 1.0) -> np.ndarray:
    s = z / T
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


LOG_FLOOR = 1e-12


def softmax_cross_entropy(logits: Var, y_onehot, T: float = 1.0, reduction: str = "mean") -> Var:
    """Categorical cross-entropy of ``softmax(logits / T)`` with log clamped at 1e-12."""
    y = np.asarray(y_onehot, dtype=np.float64)
    if logits.value.ndim != 2 or y.shape != logits.shape:
        raise ValueError(f"cross-entropy: logits {logits.shape} vs targets {y.shape}")
    p = softmax(logits.value, T)
    live = p >= LOG_FLOOR
    per = -(y * np.log(np.maximum(p, LOG_FLOOR))).sum(axis=1)
    n = logits.shape[0]
    div = float(n) if reduction == "mean" else 1.0
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")

    def back(g):
        yl = y * live
        d = (p * yl.sum(axis=1, keepdims=True) - yl) / T
        return (d * (g / div),)

    return logits.tape.record(np.asarray(per.sum() / div), (logits,), back)
