"""Pure-numpy im2col/col2im for 3x3, stride-1, pad-1 convolution.

Fallback used when the compiled extension is unavailable. Tap order
(k = ky*3+kx, ascending) matches the compiled kernels so results are
bit-identical across backends.
"""

import numpy as np


def im2col_3x3(x: np.ndarray, cols: np.ndarray) -> None:
    b, c, h, w = x.shape
    padded = np.zeros((b, c, h + 2, w + 2), dtype=x.dtype)
    padded[:, :, 1:-1, 1:-1] = x
    view = cols.reshape(b, c, 9, h, w)
    k = 0
    for ky in range(3):
        for kx in range(3):
            view[:, :, k] = padded[:, :, ky : ky + h, kx : kx + w]
            k += 1


def col2im_3x3(cols: np.ndarray, out: np.ndarray) -> None:
    b, c, h, w = out.shape
    gpad = np.zeros((b, c, h + 2, w + 2), dtype=cols.dtype)
    view = cols.reshape(b, c, 9, h, w)
    k = 0
    for ky in range(3):
        for kx in range(3):
            gpad[:, :, ky : ky + h, kx : kx + w] += view[:, :, k]
            k += 1
    out += gpad[:, :, 1:-1, 1:-1]
