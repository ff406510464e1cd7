"""HierarchicalMix: transform-invariant pseudo labels and foreground-only mixup.

For a coarse sample ``(x, y)`` paired with a fine sample ``(x', y', z')``:

1. predict on ``x`` and on ``T x`` (random rot90/flip), map the second
   prediction back with ``T^-1``, and keep a pixel's argmax as pseudo label
   only where both agree, both are at least ``tau`` confident and the label's
   superclass matches ``y``;
2. resize the foreground bounding box of ``x'`` onto the foreground
   bounding box of ``x`` and blend with weight ``alpha``;
3. supervise the mixed image with ``alpha * onehot(z) + (1 - alpha) * onehot(z_pse)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ops
from .core.rng import Rng
from .core.tensor import no_grad
from .data import HierarchySpec


class EmptyForegroundError(ValueError):
    pass


@dataclass(frozen=True)
class SpatialTransform:
    rot90_k: int = 0
    flip_h: bool = False
    flip_v: bool = False

    def apply(self, a: np.ndarray) -> np.ndarray:
        """Transform the last two (spatial) axes."""
        out = np.rot90(a, self.rot90_k, axes=(-2, -1))
        if self.flip_h:
            out = out[..., ::-1]
        if self.flip_v:
            out = out[..., ::-1, :]
        return np.ascontiguousarray(out)

    def inverse(self, a: np.ndarray) -> np.ndarray:
        out = a
        if self.flip_v:
            out = out[..., ::-1, :]
        if self.flip_h:
            out = out[..., ::-1]
        return np.ascontiguousarray(np.rot90(out, -self.rot90_k, axes=(-2, -1)))


def sample_transform(rng: Rng) -> SpatialTransform:
    """Uniform over the 16 (rotation, flip_h, flip_v) combinations."""
    code = rng.integers(16)
    return SpatialTransform(rot90_k=code >> 2, flip_h=bool(code & 1), flip_v=bool(code & 2))


@dataclass
class PseudoLabel:
    z_pse: np.ndarray     # (H, W) subclass indices, 0 where invalid
    valid: np.ndarray     # (H, W) bool
    tau_used: float


def make_pseudo_label(probs_a: np.ndarray, probs_b_aligned: np.ndarray, y: np.ndarray, tau: float,
                      hierarchy: HierarchySpec) -> PseudoLabel:
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if probs_a.shape != probs_b_aligned.shape or probs_a.shape[1:] != np.shape(y):
        raise ValueError(f"make_pseudo_label: shapes {probs_a.shape}, {probs_b_aligned.shape}, "
                         f"{np.shape(y)} do not line up")
    a = probs_a.argmax(axis=0)
    b = probs_b_aligned.argmax(axis=0)
    conf_a = np.take_along_axis(probs_a, a[None], axis=0)[0]
    conf_b = np.take_along_axis(probs_b_aligned, b[None], axis=0)[0]
    valid = (a == b) & (conf_a >= tau) & (conf_b >= tau) & (hierarchy.parent_map[a] == y)
    return PseudoLabel(z_pse=np.where(valid, a, 0), valid=valid, tau_used=tau)


def tau_schedule(iteration: int, total: int) -> float:
    """Confidence threshold decaying linearly from 1 to 0.4 over training."""
    if not 0 <= iteration <= total:
        raise ValueError(f"iteration {iteration} outside [0, {total}]")
    return 1.0 - 0.6 * (iteration / total)


def foreground_bbox(y: np.ndarray) -> tuple[int, int, int, int]:
    """Tight (top, left, bottom, right) box of foreground pixels, bottom/right exclusive."""
    rows = np.flatnonzero(np.asarray(y).any(axis=1))
    cols = np.flatnonzero(np.asarray(y).any(axis=0))
    if rows.size == 0:
        raise EmptyForegroundError("no foreground pixels")
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


def _source_coords(n_out: int, n_in: int) -> np.ndarray:
    # pixel-centre alignment; identity when n_out == n_in
    return np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1)


def resize_bilinear(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """(C, h, w) -> (C, H, W) bilinear resampling, computed in float64."""
    C, h, w = img.shape
    H, W = size
    sy, sx = _source_coords(H, h), _source_coords(W, w)
    y0, x0 = np.floor(sy).astype(int), np.floor(sx).astype(int)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    wy, wx = (sy - y0)[:, None], (sx - x0)[None, :]
    src = img.astype(np.float64)
    top = (1 - wx) * src[:, y0][:, :, x0] + wx * src[:, y0][:, :, x1]
    bot = (1 - wx) * src[:, y1][:, :, x0] + wx * src[:, y1][:, :, x1]
    return (1 - wy) * top + wy * bot


def resize_nearest(labels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = labels.shape
    H, W = size
    iy = np.minimum(np.floor((np.arange(H) + 0.5) * (h / H)).astype(int), h - 1)
    ix = np.minimum(np.floor((np.arange(W) + 0.5) * (w / W)).astype(int), w - 1)
    return labels[iy][:, ix]


@dataclass
class MixResult:
    x_mix: np.ndarray                 # (C, H, W)
    z_full: np.ndarray                # (H, W)
    mix_bbox: tuple[int, int, int, int]
    alpha: float


def mix_images(x: np.ndarray, y: np.ndarray, x_fine: np.ndarray, y_fine: np.ndarray,
               z_fine: np.ndarray, alpha: float) -> MixResult:
    """Overlay the fine sample's foreground box onto the coarse sample's foreground box."""
    if not 0.5 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0.5, 1], got {alpha}")
    t, l, b, r = foreground_bbox(y)
    ft, fl, fb, fr = foreground_bbox(y_fine)
    size = (b - t, r - l)
    patch = resize_bilinear(x_fine[:, ft:fb, fl:fr], size)
    labels = resize_nearest(z_fine[ft:fb, fl:fr], size)
    x_mix = x.copy()
    inside = x[:, t:b, l:r].astype(np.float64)
    x_mix[:, t:b, l:r] = (alpha * patch + (1.0 - alpha) * inside).astype(x.dtype)
    z_full = np.zeros(y.shape, dtype=np.int64)
    z_full[t:b, l:r] = labels
    return MixResult(x_mix=x_mix, z_full=z_full, mix_bbox=(t, l, b, r), alpha=alpha)


def mixed_target(z_full: np.ndarray, pseudo: PseudoLabel, alpha: float,
                 num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Soft (K, H, W) target and an all-ones weight mask.

    Pixels without a valid pseudo label are supervised by the resized fine labels alone.
    """
    if z_full.shape != pseudo.z_pse.shape:
        raise ValueError(f"mixed_target: shapes {z_full.shape} and {pseudo.z_pse.shape} differ")
    eye = np.eye(num_classes)
    fine = eye[z_full].transpose(2, 0, 1)
    pse = eye[pseudo.z_pse].transpose(2, 0, 1)
    target = np.where(pseudo.valid[None], alpha * fine + (1.0 - alpha) * pse, fine)
    return target, np.ones(z_full.shape)


@dataclass
class MixedBatch:
    images: np.ndarray          # (M, C, H, W)
    targets: np.ndarray         # (M, K, H, W)
    masks: np.ndarray           # (M, H, W)
    coarse_index: list[int]     # which coarse sample each row came from
    pseudo: list[PseudoLabel]
    mixes: list[MixResult]


def hierarchical_mix(net, coarse_x: np.ndarray, coarse_y: np.ndarray, fine_x: np.ndarray,
                     fine_y: np.ndarray, fine_z: np.ndarray, tau: float, rng: Rng,
                     hierarchy: HierarchySpec) -> MixedBatch | None:
    """Build the mixed images and soft targets for one batch.

    The two prediction passes run without gradients and in inference mode, so
    they neither backpropagate nor touch batch-norm statistics. Coarse samples
    without foreground, or batches without a fine sample that has foreground,
    are skipped. Returns ``None`` when nothing could be mixed.
    """
    partners = [j for j in range(len(fine_y)) if fine_y[j].any()]
    rows = [i for i in range(len(coarse_y)) if coarse_y[i].any()]
    # draw per coarse sample in a fixed order so the stream does not depend on skips
    draws = [(sample_transform(rng), rng.integers(max(len(partners), 1)), rng.uniform(0.5, 1.0))
             for _ in range(len(coarse_y))]
    if not rows or not partners:
        return None

    transforms = [draws[i][0] for i in rows]
    stacked = np.concatenate([coarse_x[rows], np.stack([tf.apply(coarse_x[i]) for tf, i in zip(transforms, rows)])])
    was_training = net.training
    net.eval()
    try:
        with no_grad():
            probs = ops.softmax(net(stacked).sub_logits, axis=1).data
    finally:
        net.train(was_training)

    images, targets, masks, pseudo, mixes = [], [], [], [], []
    n = len(rows)
    for k, i in enumerate(rows):
        tf, pick, alpha = draws[i]
        pl = make_pseudo_label(probs[k], tf.inverse(probs[n + k]), coarse_y[i], tau, hierarchy)
        j = partners[pick]
        mix = mix_images(coarse_x[i], coarse_y[i], fine_x[j], fine_y[j], fine_z[j], alpha)
        target, mask = mixed_target(mix.z_full, pl, alpha, hierarchy.K)
        images.append(mix.x_mix)
        targets.append(target)
        masks.append(mask)
        pseudo.append(pl)
        mixes.append(mix)
    return MixedBatch(np.stack(images), np.stack(targets), np.stack(masks), rows, pseudo, mixes)


def pseudo_label_precision(pseudo: PseudoLabel, oracle_z: np.ndarray) -> float | None:
    """Fraction of valid pseudo labels matching the hidden subclass map (diagnostics only)."""
    if not pseudo.valid.any():
        return None
    return float((pseudo.z_pse[pseudo.valid] == oracle_z[pseudo.valid]).mean())
