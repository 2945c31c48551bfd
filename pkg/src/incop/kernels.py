"""Backend selection for the hot convolution kernels.

The compiled extension ``incop._kernels`` is used when it was built and
``INCOP_PURE_PYTHON`` is unset; otherwise the NumPy implementations in
``incop._kernels_py`` are used. ``BACKEND`` names the active choice.
"""

import os

from . import _kernels_py

if os.environ.get("INCOP_PURE_PYTHON", "").strip() not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_weight = _impl.conv2d_backward_weight

__all__ = [
    "BACKEND",
    "conv2d_forward",
    "conv2d_backward_input",
    "conv2d_backward_weight",
]
