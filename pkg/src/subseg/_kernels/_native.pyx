# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False, language_level=3
"""Compiled inner loops. Must stay bit-compatible with ``_fallback``."""

from libc.stdint cimport uint64_t

ctypedef fused real:
    float
    double


def im2col3(real[:, :, :, ::1] x, real[:, ::1] cols):
    """Gather 3x3 zero-padded neighbourhoods of NCHW ``x`` into (C*9, N*H*W)."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t n, c, ky, kx, i, j, si, row, off, j0, j1
    for c in range(C):
        for ky in range(3):
            for kx in range(3):
                row = (c * 3 + ky) * 3 + kx
                # valid output columns read x[..., j + kx - 1]
                j0 = 1 if kx == 0 else 0
                j1 = W - 1 if kx == 2 else W
                for n in range(N):
                    for i in range(H):
                        off = (n * H + i) * W
                        si = i + ky - 1
                        if si < 0 or si >= H:
                            for j in range(W):
                                cols[row, off + j] = 0
                            continue
                        if j0 == 1:
                            cols[row, off] = 0
                        if j1 == W - 1:
                            cols[row, off + W - 1] = 0
                        for j in range(j0, j1):
                            cols[row, off + j] = x[n, c, si, j + kx - 1]


def col2im3(real[:, ::1] cols, real[:, :, :, ::1] dx):
    """Adjoint of ``im2col3``; accumulates in (ky, kx) order per output pixel."""
    cdef Py_ssize_t N = dx.shape[0], C = dx.shape[1], H = dx.shape[2], W = dx.shape[3]
    cdef Py_ssize_t n, c, ky, kx, i, j, oi, oj, row0
    cdef real acc
    for n in range(N):
        for c in range(C):
            row0 = c * 9
            for i in range(H):
                for j in range(W):
                    acc = 0
                    for ky in range(3):
                        oi = i - ky + 1
                        if oi < 0 or oi >= H:
                            continue
                        for kx in range(3):
                            oj = j - kx + 1
                            if oj < 0 or oj >= W:
                                continue
                            acc = acc + cols[row0 + ky * 3 + kx, (n * H + oi) * W + oj]
                    dx[n, c, i, j] = acc


def maxpool2_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] out, signed char[:, :, :, ::1] arg):
    cdef Py_ssize_t N = out.shape[0], C = out.shape[1], H = out.shape[2], W = out.shape[3]
    cdef Py_ssize_t n, c, i, j
    cdef real best, v
    cdef signed char k
    for n in range(N):
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    best = x[n, c, 2 * i, 2 * j]
                    k = 0
                    v = x[n, c, 2 * i, 2 * j + 1]
                    if v > best:
                        best = v
                        k = 1
                    v = x[n, c, 2 * i + 1, 2 * j]
                    if v > best:
                        best = v
                        k = 2
                    v = x[n, c, 2 * i + 1, 2 * j + 1]
                    if v > best:
                        best = v
                        k = 3
                    out[n, c, i, j] = best
                    arg[n, c, i, j] = k


def maxpool2_backward(real[:, :, :, ::1] dout, signed char[:, :, :, ::1] arg, real[:, :, :, ::1] dx):
    cdef Py_ssize_t N = dout.shape[0], C = dout.shape[1], H = dout.shape[2], W = dout.shape[3]
    cdef Py_ssize_t n, c, i, j
    cdef signed char k
    for n in range(N):
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    k = arg[n, c, i, j]
                    dx[n, c, 2 * i, 2 * j] = 0
                    dx[n, c, 2 * i, 2 * j + 1] = 0
                    dx[n, c, 2 * i + 1, 2 * j] = 0
                    dx[n, c, 2 * i + 1, 2 * j + 1] = 0
                    dx[n, c, 2 * i + (k >> 1), 2 * j + (k & 1)] = dout[n, c, i, j]


def upsample2_backward(real[:, :, :, ::1] dout, real[:, :, :, ::1] dx):
    cdef Py_ssize_t N = dx.shape[0], C = dx.shape[1], H = dx.shape[2], W = dx.shape[3]
    cdef Py_ssize_t n, c, i, j
    for n in range(N):
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    dx[n, c, i, j] = ((dout[n, c, 2 * i, 2 * j] + dout[n, c, 2 * i, 2 * j + 1])
                                      + dout[n, c, 2 * i + 1, 2 * j]) + dout[n, c, 2 * i + 1, 2 * j + 1]


cdef inline uint64_t _rotl(uint64_t x, int k) nogil:
    return (x << k) | (x >> (64 - k))


def xoshiro_fill(uint64_t[::1] state, uint64_t[::1] out):
    """xoshiro256** stream; advances ``state`` in place."""
    cdef uint64_t s0 = state[0], s1 = state[1], s2 = state[2], s3 = state[3], t
    cdef Py_ssize_t i
    for i in range(out.shape[0]):
        out[i] = _rotl(s1 * 5, 7) * 9
        t = s1 << 17
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    state[0] = s0
    state[1] = s1
    state[2] = s2
    state[3] = s3
