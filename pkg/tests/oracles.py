"""Slow, loop-based reference implementations used only by the tests.

They share no code with the package: every quantity is recomputed from its
textbook definition one pixel at a time in float64.
"""

from __future__ import annotations

import math

MASK64 = (1 << 64) - 1


# ---------------------------------------------------------------- PRNG

def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & MASK64


def xoshiro_stream(state, n):
    s = list(state)
    out = []
    for _ in range(n):
        out.append((_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64)
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
    return out


# ---------------------------------------------------------------- conv

def conv2d(x, w, b=None):
    """Stride 1, zero padding k // 2; nested lists or arrays indexed [n][c][i][j]."""
    N, C, H, W = len(x), len(x[0]), len(x[0][0]), len(x[0][0][0])
    O, k = len(w), len(w[0][0])
    p = k // 2
    out = [[[[0.0] * W for _ in range(H)] for _ in range(O)] for _ in range(N)]
    for n in range(N):
        for o in range(O):
            for i in range(H):
                for j in range(W):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(C):
                        for ki in range(k):
                            for kj in range(k):
                                ii, jj = i + ki - p, j + kj - p
                                if 0 <= ii < H and 0 <= jj < W:
                                    acc += float(x[n][c][ii][jj]) * float(w[o][c][ki][kj])
                    out[n][o][i][j] = acc
    return out


# ---------------------------------------------------------------- losses

def _softmax(v):
    m = max(v)
    e = [math.exp(a - m) for a in v]
    s = sum(e)
    return [a / s for a in e]


def ce_dice(logits, target, mask=None, eps=1e-5):
    """logits/target indexed [n][c][i][j]; mask [n][i][j] or None."""
    N, C, H, W = len(logits), len(logits[0]), len(logits[0][0]), len(logits[0][0][0])
    ce = 0.0
    wsum = 0.0
    inter = [0.0] * C
    psum = [0.0] * C
    tsum = [0.0] * C
    for n in range(N):
        for i in range(H):
            for j in range(W):
                m = 1.0 if mask is None else float(mask[n][i][j])
                p = _softmax([float(logits[n][c][i][j]) for c in range(C)])
                for c in range(C):
                    t = float(target[n][c][i][j])
                    ce -= m * t * math.log(p[c])
                    inter[c] += m * p[c] * t
                    psum[c] += m * p[c]
                    tsum[c] += m * t
                wsum += m
    dice = sum((2 * inter[c] + eps) / (psum[c] + tsum[c] + eps) for c in range(C)) / C
    return ce / wsum + 1.0 - dice


def negative_learning(logits, y, parent, eps=1e-7):
    N, K, H, W = len(logits), len(logits[0]), len(logits[0][0]), len(logits[0][0][0])
    total = 0.0
    for n in range(N):
        for i in range(H):
            for j in range(W):
                p = _softmax([float(logits[n][c][i][j]) for c in range(K)])
                q = sum(p[c] for c in range(K) if parent[c] != y[n][i][j])
                total += -math.log(1.0 - q + eps)
    return total / (N * H * W)


# ---------------------------------------------------------------- pseudo labels and mixing

def pseudo_label(pa, pb, y, tau, parent):
    """Returns (z_pse, valid) as nested lists."""
    K, H, W = len(pa), len(pa[0]), len(pa[0][0])
    z = [[0] * W for _ in range(H)]
    valid = [[False] * W for _ in range(H)]
    for i in range(H):
        for j in range(W):
            a = max(range(K), key=lambda c: (pa[c][i][j], -c))
            b = max(range(K), key=lambda c: (pb[c][i][j], -c))
            ok = a == b and pa[a][i][j] >= tau and pb[b][i][j] >= tau and parent[a] == y[i][j]
            valid[i][j] = ok
            z[i][j] = a if ok else 0
    return z, valid


def bbox(mask):
    rows = [i for i, r in enumerate(mask) if any(r)]
    cols = [j for j in range(len(mask[0])) if any(r[j] for r in mask)]
    return rows[0], cols[0], rows[-1] + 1, cols[-1] + 1


def _src(i, n_out, n_in):
    v = (i + 0.5) * n_in / n_out - 0.5
    return min(max(v, 0.0), n_in - 1)


def bilinear(img, H, W):
    """img [h][w] -> [H][W], pixel-centre aligned, edge-clamped."""
    h, w = len(img), len(img[0])
    out = [[0.0] * W for _ in range(H)]
    for i in range(H):
        sy = _src(i, H, h)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(W):
            sx = _src(j, W, w)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            out[i][j] = ((1 - fy) * ((1 - fx) * img[y0][x0] + fx * img[y0][x1])
                         + fy * ((1 - fx) * img[y1][x0] + fx * img[y1][x1]))
    return out


def nearest(lab, H, W):
    h, w = len(lab), len(lab[0])
    return [[lab[min(int((i + 0.5) * h / H), h - 1)][min(int((j + 0.5) * w / W), w - 1)]
             for j in range(W)] for i in range(H)]


def mix(x, y, xf, yf, zf, alpha):
    """Single-channel mix; returns (x_mix, z_full) as nested lists."""
    t, l, b, r = bbox(y)
    ft, fl, fb, fr = bbox(yf)
    patch = bilinear([row[fl:fr] for row in xf[ft:fb]], b - t, r - l)
    labels = nearest([row[fl:fr] for row in zf[ft:fb]], b - t, r - l)
    xm = [list(map(float, row)) for row in x]
    zfull = [[0] * len(x[0]) for _ in x]
    for i in range(t, b):
        for j in range(l, r):
            xm[i][j] = alpha * patch[i - t][j - l] + (1 - alpha) * x[i][j]
            zfull[i][j] = labels[i - t][j - l]
    return xm, zfull


def mixed_target(z_full, z_pse, valid, alpha, K):
    H, W = len(z_full), len(z_full[0])
    t = [[[0.0] * W for _ in range(H)] for _ in range(K)]
    for i in range(H):
        for j in range(W):
            if valid[i][j]:
                t[z_full[i][j]][i][j] += alpha
                t[z_pse[i][j]][i][j] += 1 - alpha
            else:
                t[z_full[i][j]][i][j] = 1.0
    return t


# ---------------------------------------------------------------- metrics

def dice(a, b):
    sa = sb = inter = 0
    for ra, rb in zip(a, b):
        for va, vb in zip(ra, rb):
            sa += bool(va)
            sb += bool(vb)
            inter += bool(va) and bool(vb)
    return 1.0 if sa + sb == 0 else 2.0 * inter / (sa + sb)


def boundary_points(mask):
    H, W = len(mask), len(mask[0])
    pts = []
    for i in range(H):
        for j in range(W):
            if not mask[i][j]:
                continue
            edge = False
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ii, jj = i + di, j + dj
                if not (0 <= ii < H and 0 <= jj < W) or not mask[ii][jj]:
                    edge = True
            if edge:
                pts.append((i, j))
    return pts


def hd95(a, b):
    pa, pb = boundary_points(a), boundary_points(b)
    if not pa and not pb:
        return 0.0
    if not pa or not pb:
        return None
    dists = [min(math.hypot(i - k, j - l) for k, l in pb) for i, j in pa]
    dists += [min(math.hypot(i - k, j - l) for k, l in pa) for i, j in pb]
    dists.sort()
    rank = max(1, math.ceil(0.95 * len(dists)))
    return dists[rank - 1]
