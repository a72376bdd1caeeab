"""Pure-numpy im2col/col2im, used when the compiled core is unavailable.

Column layout is ``(B*Ho*Wo, C*kh*kw)`` with the patch axis ordered
``(c, ki, kj)``. ``col2im`` adds contributions in ``(ki, kj)`` lexicographic
order so results are bitwise identical to the compiled kernel.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride, padding):
    B, C, H, W = x.shape
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)


def col2im(cols, x_shape, kh, kw, stride, padding):
    B, C, H, W = x_shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    d = cols.reshape(B, Ho, Wo, C, kh, kw)
    out = np.zeros((B, C, Hp, Wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride] += (
                d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if padding:
        out = out[:, :, padding : padding + H, padding : padding + W]
    return np.ascontiguousarray(out)
