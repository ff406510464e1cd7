"""Central finite-difference oracle for the analytic gradients.

Only forward evaluations are used here, so the oracle is independent of the
backward rules it checks.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .rng import Rng
from .tensor import Tensor, backward, no_grad


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_difference(loss_fn: Callable[[], Tensor], leaf: Tensor, index: tuple, step: float) -> float:
    """``(L(v + h) - L(v - h)) / 2h`` at one coordinate of ``leaf``; the value is restored."""
    old = leaf.data[index].copy()
    with no_grad():
        leaf.data[index] = old + step
        up = float(loss_fn().data.astype(np.float64).sum())
        leaf.data[index] = old - step
        down = float(loss_fn().data.astype(np.float64).sum())
    leaf.data[index] = old
    return (up - down) / (2.0 * step)


def check_gradients(loss_fn: Callable[[], Tensor], leaves: Sequence[Tensor], step: float = 1e-3,
                    samples: int | None = None, seed: int = 0) -> list[dict]:
    """Compare analytic gradients with finite differences.

    ``loss_fn`` must rebuild the graph from ``leaves`` on every call and return
    a scalar. With ``samples`` set, that many coordinates are drawn uniformly
    over all leaves; otherwise every coordinate is checked.
    """
    for leaf in leaves:
        leaf.grad = None if not hasattr(leaf, "momentum_buffer") else np.zeros_like(leaf.data)
    backward(loss_fn())
    analytic = [np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.copy() for leaf in leaves]

    coords = [(i, np.unravel_index(j, leaf.shape)) for i, leaf in enumerate(leaves) for j in range(leaf.data.size)]
    if samples is not None and samples < len(coords):
        rng = Rng(seed)
        coords = [coords[j] for j in sorted(rng.sample_without_replacement(len(coords), samples))]

    results = []
    for i, idx in coords:
        a = float(analytic[i][idx])
        n = finite_difference(loss_fn, leaves[i], idx, step)
        results.append({"leaf": i, "index": tuple(int(v) for v in idx), "analytic": a,
                        "numeric": n, "rel_err": relative_error(a, n)})
    return results
