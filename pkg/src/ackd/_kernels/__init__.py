"""Convolution kernel backend selection.

The compiled Cython extension is preferred when importable; the numpy
im2col implementation is the fallback. ACKD_KERNELS overrides the choice:
"compiled" (fail if missing), "numpy", or "auto" (the default).
"""

import os

from . import conv_numpy

_choice = os.environ.get("ACKD_KERNELS", "auto").lower()
if _choice not in ("auto", "compiled", "numpy"):
    raise ValueError(f"ACKD_KERNELS must be auto|compiled|numpy, got {_choice!r}")

_impl = None
if _choice in ("auto", "compiled"):
    try:
        from . import conv_cy as _impl
    except ImportError:
        if _choice == "compiled":
            raise
if _impl is None:
    _impl = conv_numpy

BACKEND = _impl.BACKEND_NAME

conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_kernel = _impl.conv2d_backward_kernel
