"""Elementwise, reduction and shape primitives with their backward rules."""
from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, make_result


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return make_result(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    return make_result(
        a.data ** a.data.dtype.type(p),
        (a,),
        lambda g: (g * p * a.data ** a.data.dtype.type(p - 1.0),),
        "power",
    )


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return make_result(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    out = a.data.mean(axis=axis, keepdims=keepdims)
    scale = a.data.dtype.type(1.0 / n)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * scale, a.shape),)

    return make_result(out, (a,), bw, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g) if _is_fancy(idx) else out.__setitem__(idx, g)
        return (out,)

    return make_result(a.data[idx], (a,), bw, "getitem")


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def stack_interleave(a: Tensor, b: Tensor) -> Tensor:
    """Rows ``(2k, 2k+1)`` of the result are ``a[k]`` and ``b[k]``."""
    if a.shape != b.shape:
        raise ShapeError(f"interleave needs equal shapes, got {a.shape} and {b.shape}")
    out = np.stack([a.data, b.data], axis=1).reshape((2 * a.shape[0],) + a.shape[1:])

    def bw(g):
        g = g.reshape((a.shape[0], 2) + a.shape[1:])
        return g[:, 0], g[:, 1]

    return make_result(out, (a, b), bw, "interleave")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    return make_result(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
        "matmul",
    )


def maximum_scalar(a: Tensor, floor: float) -> Tensor:
    mask = a.data > floor
    return make_result(np.where(mask, a.data, a.data.dtype.type(floor)), (a,), lambda g: (g * mask,), "clamp_min")


def logsumexp(a: Tensor, axis: int = -1, mask: np.ndarray = None) -> Tensor:
    """Row-wise log-sum-exp; entries where ``mask`` is False are excluded."""
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    soft = e / s

    def bw(g):
        return (np.expand_dims(g, axis) * soft,)

    return make_result(out, (a,), bw, "logsumexp")


def _install_operators():
    Tensor.__add__ = lambda s, o: add(s, o)
    Tensor.__radd__ = lambda s, o: add(o, s)
    Tensor.__sub__ = lambda s, o: sub(s, o)
    Tensor.__rsub__ = lambda s, o: sub(o, s)
    Tensor.__mul__ = lambda s, o: mul(s, o)
    Tensor.__rmul__ = lambda s, o: mul(o, s)
    Tensor.__truediv__ = lambda s, o: div(s, o)
    Tensor.__rtruediv__ = lambda s, o: div(o, s)
    Tensor.__neg__ = lambda s: neg(s)
    Tensor.__matmul__ = lambda s, o: matmul(s, o)
    Tensor.__pow__ = lambda s, p: power(s, p)
    Tensor.__getitem__ = lambda s, idx: getitem(s, idx)
    Tensor.sum = lambda s, axis=None, keepdims=False: sum(s, axis, keepdims)
    Tensor.mean = lambda s, axis=None, keepdims=False: mean(s, axis, keepdims)
    Tensor.reshape = lambda s, *shape: reshape(s, shape[0] if len(shape) == 1 else shape)
    Tensor.T = property(lambda s: transpose(s))
    Tensor.exp = lambda s: exp(s)
    Tensor.log = lambda s: log(s)


_install_operators()
