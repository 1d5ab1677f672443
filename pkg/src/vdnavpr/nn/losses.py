"""Triplet loss on squared Euclidean distances, averaged over negatives."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, as_tensor, relu, reshape, sub, tmean, tsum


def triplet_loss(anchor, positive, negatives: Sequence, margin: float) -> Tensor:
    """``mean_n max(0, ||a-p||^2 - ||a-n||^2 + margin)`` over the negatives."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    anchor = as_tensor(anchor)
    positive = as_tensor(positive)
    negs = [as_tensor(n) for n in negatives]
    if not negs:
        raise ShapeError("triplet_loss needs at least one negative")
    dims = {anchor.shape, positive.shape, *(n.shape for n in negs)}
    if len(dims) != 1:
        raise ShapeError(f"all triplet vectors must share one shape, got {sorted(dims)}")
    a2 = reshape(anchor, (1, anchor.size))
    p2 = reshape(positive, (1, positive.size))
    n2 = [reshape(n, (1, n.size)) for n in negs]
    loss, _ = triplet_loss_batch(a2, p2, _stack3(n2), margin)
    return loss


def _stack3(rows: Sequence[Tensor]) -> Tensor:
    from .tensor import concat

    expanded = [reshape(r, (r.shape[0], 1, r.shape[1])) for r in rows]
    return concat(expanded, axis=1)


def triplet_loss_batch(
    anchors: Tensor,
    positives: Tensor,
    negatives: Tensor,
    margin: float,
) -> tuple[Tensor, np.ndarray]:
    """Batched triplet loss.

    ``anchors``/``positives`` are ``(t, d)``, ``negatives`` is ``(t, k, d)``.
    Returns the scalar mean loss and the per-triplet loss values (numpy),
    the latter for hardness bookkeeping.
    """
    anchors = as_tensor(anchors)
    positives = as_tensor(positives)
    negatives = as_tensor(negatives)
    if anchors.ndim != 2 or positives.shape != anchors.shape:
        raise ShapeError(f"anchors/positives must be matching 2-D, got {anchors.shape} vs {positives.shape}")
    t, d = anchors.shape
    if negatives.ndim != 3 or negatives.shape[0] != t or negatives.shape[2] != d:
        raise ShapeError(f"negatives must be (t, k, {d}), got {negatives.shape}")

    diff_pos = sub(anchors, positives)
    d_pos = tsum(diff_pos * diff_pos, axis=1, keepdims=True)  # (t, 1)
    diff_neg = sub(reshape(anchors, (t, 1, d)), negatives)
    d_neg = tsum(diff_neg * diff_neg, axis=2)  # (t, k)
    hinge = relu(sub(d_pos, d_neg) + margin)
    per_triplet = tmean(hinge, axis=1)  # (t,)
    loss = tmean(per_triplet)
    return loss, per_triplet.data.copy()
