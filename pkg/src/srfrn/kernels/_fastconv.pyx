# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col/col2im loops for 3x3, stride-1, pad-1 convolution.

These two memory-movement kernels are the hot inner loops of every conv
forward/backward in the network; the surrounding GEMM is left to BLAS.
Accumulation order matches the numpy fallback exactly (kernel-tap index
k = ky*3+kx, ascending), so both backends are bit-identical.
"""

ctypedef fused floating:
    float
    double


cpdef void im2col_3x3(floating[:, :, :, ::1] x, floating[:, :, ::1] cols) noexcept nogil:
    """Fill cols (B, C*9, H*W) with 3x3 patches of x (B, C, H, W), zero-padded by 1."""
    cdef Py_ssize_t B = x.shape[0]
    cdef Py_ssize_t C = x.shape[1]
    cdef Py_ssize_t H = x.shape[2]
    cdef Py_ssize_t W = x.shape[3]
    cdef Py_ssize_t b, c, ky, kx, y, xx, row, base, sy, dx, x0, x1

    for b in range(B):
        for c in range(C):
            for ky in range(3):
                for kx in range(3):
                    row = c * 9 + ky * 3 + kx
                    dx = kx - 1
                    x0 = 0 if dx >= 0 else 1
                    x1 = W if dx <= 0 else W - 1
                    for y in range(H):
                        sy = y + ky - 1
                        base = y * W
                        if sy < 0 or sy >= H:
                            for xx in range(W):
                                cols[b, row, base + xx] = 0
                            continue
                        for xx in range(0, x0):
                            cols[b, row, base + xx] = 0
                        for xx in range(x0, x1):
                            cols[b, row, base + xx] = x[b, c, sy, xx + dx]
                        for xx in range(x1, W):
                            cols[b, row, base + xx] = 0


cpdef void col2im_3x3(floating[:, :, ::1] cols, floating[:, :, :, ::1] out) noexcept nogil:
    """Scatter-add cols (B, C*9, H*W) back into out (B, C, H, W); out must be zeroed."""
    cdef Py_ssize_t B = out.shape[0]
    cdef Py_ssize_t C = out.shape[1]
    cdef Py_ssize_t H = out.shape[2]
    cdef Py_ssize_t W = out.shape[3]
    cdef Py_ssize_t b, c, ky, kx, y, xx, row, base, sy, dx, x0, x1

    for b in range(B):
        for c in range(C):
            for ky in range(3):
                for kx in range(3):
                    row = c * 9 + ky * 3 + kx
                    dx = kx - 1
                    x0 = 0 if dx >= 0 else 1
                    x1 = W if dx <= 0 else W - 1
                    for y in range(H):
                        sy = y + ky - 1
                        if sy < 0 or sy >= H:
                            continue
                        base = y * W
                        for xx in range(x0, x1):
                            out[b, c, sy, xx + dx] += cols[b, row, base + xx]
