"""Segmentation losses: cross entropy + soft Dice, negative learning, and the supervised pair."""

from __future__ import annotations

import numpy as np

from .core import ops
from .core.tensor import Tensor
from .data import HierarchySpec

DICE_EPS = 1e-5
NL_EPS = 1e-7


class LabelError(ValueError):
    pass


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """(N, H, W) integer map -> (N, C, H, W) one-hot."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"labels outside [0, {num_classes}) in one_hot")
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=dtype)
    np.put_along_axis(out, labels[:, None], 1, axis=1)
    return out


def ce_dice_loss(logits: Tensor, target: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Cross entropy plus (1 - mean soft Dice), both over the unmasked pixels.

    ``target`` is a per-pixel distribution shaped like ``logits``; ``mask`` is
    an optional (N, H, W) pixel weight.
    """
    target = np.asarray(target, dtype=logits.dtype)
    if target.shape != logits.shape:
        raise LabelError(f"ce_dice_loss: target shape {target.shape} != logits shape {logits.shape}")
    if np.abs(target.sum(axis=1) - 1.0).max() > 1e-4:
        raise LabelError("ce_dice_loss: target rows must sum to 1")
    if mask is None:
        mask = np.ones((logits.shape[0],) + logits.shape[2:], dtype=logits.dtype)
    mask = np.asarray(mask, dtype=logits.dtype)
    total = float(mask.sum())
    if total <= 0:
        raise LabelError("ce_dice_loss: every pixel is masked out")
    m4 = mask[:, None]
    weighted_t = target * m4
    axes = (0, 2, 3)

    ce = ops.scale(ops.sum(ops.log_softmax(logits, axis=1) * weighted_t), -1.0 / total)
    p = ops.softmax(logits, axis=1)
    inter = ops.sum(p * weighted_t, axis=axes)
    denom = ops.sum(p * m4, axis=axes) + (weighted_t.sum(axis=axes) + DICE_EPS)
    dice = (ops.scale(inter, 2.0) + DICE_EPS) / denom
    return ce + (1.0 - ops.mean(dice))


def negative_learning_loss(sub_logits: Tensor, y: np.ndarray, hierarchy: HierarchySpec) -> Tensor:
    """Mean of ``-log(1 - q)``, ``q`` = subclass probability mass outside the pixel's superclass."""
    wrong = (hierarchy.parent_map[None, :, None, None] != np.asarray(y)[:, None]).astype(sub_logits.dtype)
    q = ops.sum(ops.softmax(sub_logits, axis=1) * wrong, axis=1)
    return ops.scale(ops.mean(ops.log(ops.scale(q, -1.0) + (1.0 + NL_EPS))), -1.0)


def supervised_losses(outputs, y: np.ndarray, z: np.ndarray | None,
                      hierarchy: HierarchySpec) -> tuple[Tensor, Tensor]:
    """``(L_c, L_f)``; ``L_f`` is a constant zero when no subclass map is given.

    Without a superclass head (plain U-Net) ``L_c`` is a constant zero.
    """
    zero = Tensor(np.zeros((), dtype=outputs.sub_logits.dtype))
    if outputs.super_logits is None:
        lc = zero
    else:
        lc = ce_dice_loss(outputs.super_logits, one_hot(y, hierarchy.R, outputs.super_logits.dtype))
    if z is None:
        return lc, zero
    if not np.array_equal(hierarchy.collapse(z), y):
        raise LabelError("supervised_losses: subclass map disagrees with superclass map")
    return lc, ce_dice_loss(outputs.sub_logits, one_hot(z, hierarchy.K, outputs.sub_logits.dtype))
