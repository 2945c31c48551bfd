"""NumPy fallback for the convolution kernels in ``_kernels.pyx``.

Same signatures and semantics (valid padding, stride 1, NCHW / OIHW layouts).
Summation order differs from the compiled loops, so results agree to rounding.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, kh, kw):
    # (N, C, OH, OW, KH, KW) view, no copy
    return sliding_window_view(x, (kh, kw), axis=(2, 3))


def conv2d_forward(x, w):
    win = _windows(x, w.shape[2], w.shape[3])
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, OH, OW, O)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward_input(dout, w, H, W):
    kh, kw = w.shape[2], w.shape[3]
    padded = np.pad(dout, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dx = conv2d_forward(padded, flipped)
    assert dx.shape[2] == H and dx.shape[3] == W
    return dx


def conv2d_backward_weight(dout, x, kh, kw):
    win = _windows(x, kh, kw)
    dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, KH, KW)
    return np.ascontiguousarray(dw)
