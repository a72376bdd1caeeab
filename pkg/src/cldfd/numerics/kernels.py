"""Backend selection for the convolution kernels.

The compiled extension is used when it imports cleanly; set
``CLDFD_PURE_PYTHON=1`` to force the numpy fallback.
"""
import logging
import os

from . import _fallback

logger = logging.getLogger(__name__)

BACKEND = "python"
if os.environ.get("CLDFD_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl

        BACKEND = "compiled"
    except ImportError:  # extension not built
        logger.debug("compiled kernels unavailable, using numpy fallback")
        _impl = _fallback
else:
    _impl = _fallback


def im2col(x, kh, kw, stride, padding):
    if not x.flags.c_contiguous:
        x = x.copy()
    return _impl.im2col(x, kh, kw, stride, padding)


def col2im(cols, x_shape, kh, kw, stride, padding):
    if not cols.flags.c_contiguous:
        cols = cols.copy()
    return _impl.col2im(cols, tuple(int(v) for v in x_shape), kh, kw, stride, padding)
