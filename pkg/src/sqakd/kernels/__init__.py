"""Convolution kernel backend, selected at import time.

Prefers the compiled Cython extension; falls back to the pure-NumPy
implementation when the extension is missing or SQAKD_PURE_PYTHON=1 is set.
``BACKEND`` records which one is active.
"""

import os

from . import fallback

if os.environ.get("SQAKD_PURE_PYTHON") == "1":
    _impl = fallback
    BACKEND = "fallback"
else:
    try:
        from . import _ckernels as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = fallback
        BACKEND = "fallback"

conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_weight = _impl.conv2d_backward_weight

__all__ = [
    "BACKEND",
    "fallback",
    "conv2d_forward",
    "conv2d_backward_input",
    "conv2d_backward_weight",
]
