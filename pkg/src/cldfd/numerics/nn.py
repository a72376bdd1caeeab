"""Neural-network layer primitives built on the tape."""
from __future__ import annotations

import math

import numpy as np

from ..errors import DegenerateError, ShapeError
from . import kernels
from .ops import as_tensor, reshape
from .tensor import Tensor, make_result

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x[B,Cin,H,W]`` with ``w[Cout,Cin,kh,kw]``."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    Cout, Cin, kh, kw = w.shape
    if C != Cin:
        raise ShapeError(f"conv2d channel mismatch: input has {C}, kernel expects {Cin}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride/padding {stride}/{padding}")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding}")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1

    pointwise = kh == 1 and kw == 1 and padding == 0
    if pointwise:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        cols = np.ascontiguousarray(xs.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, C)
    else:
        cols = kernels.im2col(x.data, kh, kw, stride, padding)
    w2 = w.data.reshape(Cout, -1)
    out = (cols @ w2.T).reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, Cout)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = g2 @ w2
            if pointwise:
                d = dcols.reshape(B, Ho, Wo, C).transpose(0, 3, 1, 2)
                if stride > 1:
                    gx = np.zeros(x.shape, dtype=d.dtype)
                    gx[:, :, ::stride, ::stride] = d
                else:
                    gx = np.ascontiguousarray(d)
            else:
                gx = kernels.col2im(dcols, x.shape, kh, kw, stride, padding)
        return gx, gw

    return make_result(out, (x, w), bw, "conv2d")


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    mode: str = "train",
    running_mean: np.ndarray = None,
    running_var: np.ndarray = None,
    update_stats: bool = True,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization for ``[B,C,H,W]`` or ``[B,C]`` inputs.

    In ``"train"`` mode batch statistics normalize the input and, when
    ``update_stats`` is set, the running buffers are updated in place
    (unbiased variance). ``"eval"`` mode normalizes with the running buffers.
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm expects 2-D or 4-D input, got {x.shape}")
    C = x.shape[1]
    if scale.shape != (C,) or shift.shape != (C,):
        raise ShapeError(f"batch_norm affine params must have shape ({C},)")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, C) if x.ndim == 2 else (1, C, 1, 1)
    n = x.size // C
    dt = x.data.dtype.type

    if mode == "train":
        if n < 2:
            raise DegenerateError("batch_norm in train mode needs at least two values per channel")
        mu = x.data.mean(axis=axes)
        xc = x.data - mu.reshape(bshape)
        var = (xc * xc).mean(axis=axes)
        if update_stats and running_mean is not None:
            running_mean *= dt(1.0 - momentum)
            running_mean += dt(momentum) * mu.astype(running_mean.dtype)
            running_var *= dt(1.0 - momentum)
            running_var += dt(momentum) * (var * dt(n / (n - 1))).astype(running_var.dtype)
    elif mode == "eval":
        if running_mean is None or running_var is None:
            raise ShapeError("eval-mode batch_norm needs running statistics")
        mu = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)
        xc = x.data - mu.reshape(bshape)
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")

    inv_std = (dt(1.0) / np.sqrt(var + dt(eps))).reshape(bshape)
    xhat = xc * inv_std
    out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)

    def bw(g):
        gscale = (g * xhat).sum(axis=axes)
        gshift = g.sum(axis=axes)
        dxhat = g * scale.data.reshape(bshape)
        if mode == "train":
            s1 = dxhat.sum(axis=axes).reshape(bshape)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
            gx = (inv_std / dt(n)) * (dt(n) * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv_std
        return gx, gscale, gshift

    return make_result(out, (x, scale, shift), bw, "batch_norm")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, x.data.dtype.type(0)), (x,), lambda g: (g * mask,), "relu")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    scale = x.data.dtype.type(1.0 / (H * W))

    def bw(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], x.shape),)

    return make_result(x.data.mean(axis=(2, 3)), (x,), bw, "global_avg_pool")


def linear(x: Tensor, weight: Tensor, bias: Tensor = None) -> Tensor:
    """Affine map ``x @ weight + bias`` with ``weight[D,M]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: cannot map {x.shape} with weight {weight.shape}")
    out = x.data @ weight.data
    inputs = (x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias shape {bias.shape} does not match {weight.shape[1]}")
        out = out + bias.data
        inputs = (x, weight, bias)

    def bw(g):
        grads = (g @ weight.data.T, x.data.T @ g)
        return grads + (g.sum(axis=0),) if bias is not None else grads

    return make_result(out, inputs, bw, "linear")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross-entropy needs logits [B,C] and B labels, got {logits.shape}, {labels.shape}")
    B, C = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise IndexError(f"labels must lie in [0, {C})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (g / B),)

    return make_result(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw, "cross_entropy")


def l2_sq(a, b) -> Tensor:
    """Sum of squared elementwise differences."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"l2_sq shape mismatch: {a.shape} vs {b.shape}")
    d = a.data - b.data
    return make_result(np.asarray((d * d).sum(), dtype=d.dtype), (a, b), lambda g: (2 * g * d, -2 * g * d), "l2_sq")


def l2_normalize(x: Tensor) -> Tensor:
    """Scale each row of ``x[B,D]`` to unit Euclidean norm."""
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    if np.any(norm == 0):
        raise DegenerateError("cannot normalize a zero-norm row")
    y = x.data / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norm,)

    return make_result(y, (x,), bw, "l2_normalize")


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity of ``a[B,D]`` and ``b[B,D]``, shape ``[B]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"cosine_rows needs equal [B,D] shapes, got {a.shape} and {b.shape}")
    na = np.sqrt((a.data * a.data).sum(axis=1))
    nb = np.sqrt((b.data * b.data).sum(axis=1))
    if np.any(na == 0) or np.any(nb == 0):
        raise DegenerateError("cosine similarity of a zero-norm vector is undefined")
    dot = (a.data * b.data).sum(axis=1)
    c = dot / (na * nb)

    def bw(g):
        g = g[:, None]
        ga = g * (b.data / (na * nb)[:, None] - c[:, None] * a.data / (na * na)[:, None])
        gb = g * (a.data / (na * nb)[:, None] - c[:, None] * b.data / (nb * nb)[:, None])
        return ga, gb

    return make_result(c, (a, b), bw, "cosine")


def cosine_sim(a, b) -> Tensor:
    """Cosine similarity of two vectors, as a scalar tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"cosine_sim needs two equal-length vectors, got {a.shape} and {b.shape}")
    return reshape(cosine_rows(reshape(a, (1, -1)), reshape(b, (1, -1))), ())


def he_uniform(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)
