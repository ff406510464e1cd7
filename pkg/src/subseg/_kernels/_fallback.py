"""Pure numpy versions of the compiled kernels (same signatures, same results)."""

import numpy as np

_MASK = (1 << 64) - 1


def im2col3(x, cols):
    N, C, H, W = x.shape
    xp = np.zeros((N, C, H + 2, W + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    view = cols.reshape(C, 3, 3, N, H, W)
    for ky in range(3):
        for kx in range(3):
            view[:, ky, kx] = xp[:, :, ky:ky + H, kx:kx + W].transpose(1, 0, 2, 3)


def col2im3(cols, dx):
    N, C, H, W = dx.shape
    view = cols.reshape(C, 3, 3, N, H, W)
    acc = np.zeros((C, N, H + 2, W + 2), dtype=dx.dtype)
    # column position (i, j) of tap (ky, kx) reads padded pixel (i + ky, j + kx)
    for ky in range(3):
        for kx in range(3):
            acc[:, :, ky:ky + H, kx:kx + W] += view[:, ky, kx]
    dx[...] = acc[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3)


def maxpool2_forward(x, out, arg):
    N, C, H, W = out.shape
    taps = np.stack([x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2],
                     x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2]])
    # np.argmax returns the first maximum, matching the strict '>' scan
    k = np.argmax(taps, axis=0)
    out[...] = np.take_along_axis(taps, k[None], axis=0)[0]
    arg[...] = k


def maxpool2_backward(dout, arg, dx):
    dx[...] = 0
    for k, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        dx[:, :, di::2, dj::2] = np.where(arg == k, dout, 0)


def upsample2_backward(dout, dx):
    dx[...] = ((dout[:, :, 0::2, 0::2] + dout[:, :, 0::2, 1::2])
               + dout[:, :, 1::2, 0::2]) + dout[:, :, 1::2, 1::2]


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _MASK


def xoshiro_fill(state, out):
    s0, s1, s2, s3 = (int(v) for v in state)
    vals = []
    for _ in range(out.shape[0]):
        vals.append((_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK)
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    out[:] = np.array(vals, dtype=np.uint64)
    state[:] = np.array([s0, s1, s2, s3], dtype=np.uint64)
