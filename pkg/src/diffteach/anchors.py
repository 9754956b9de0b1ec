"""Anchor grids and ground-truth assignment for the region proposal stage."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import BoxSet, encode_deltas, iou_matrix

BASE_SIZES = (8, 16, 32, 64)  # one per pyramid level, in input pixels
ASPECT_RATIOS = (0.5, 1.0, 2.0)

IGNORE = -1
NEGATIVE = 0
POSITIVE = 1


@dataclass(frozen=True)
class AnchorGrid:
    """All anchors for one pyramid geometry, xyxy, concatenated P2..P5."""

    boxes: np.ndarray
    level_sizes: tuple  # (h, w) per level
    per_level: tuple  # anchor count per level

    def __len__(self):
        return len(self.boxes)


def generate_anchors(level_sizes, strides, base_sizes=BASE_SIZES, ratios=ASPECT_RATIOS):
    """Anchor boxes centered on each feature cell.

    Per level, each cell center (i + 0.5, j + 0.5) * stride carries one anchor
    per aspect ratio with area base**2; ratio r gives height/width = r. The
    function is pure, so identical inputs give identical arrays.
    """
    if len(level_sizes) != len(strides) or len(strides) != len(base_sizes):
        raise ValueError("level_sizes, strides, base_sizes must align")
    all_boxes = []
    counts = []
    for (h, w), stride, base in zip(level_sizes, strides, base_sizes):
        ws = np.array([base / np.sqrt(r) for r in ratios])
        hs = np.array([base * np.sqrt(r) for r in ratios])
        cx = (np.arange(w) + 0.5) * stride
        cy = (np.arange(h) + 0.5) * stride
        gx, gy = np.meshgrid(cx, cy)  # (h, w)
        centers = np.stack([gx, gy], axis=-1).reshape(-1, 1, 2)
        half = np.stack([ws, hs], axis=-1)[None] / 2.0  # (1, A, 2)
        lo = centers - half
        hi = centers + half
        boxes = np.concatenate([lo, hi], axis=-1).reshape(-1, 4)
        all_boxes.append(boxes)
        counts.append(len(boxes))
    return AnchorGrid(
        boxes=np.concatenate(all_boxes).astype(np.float64),
        level_sizes=tuple(tuple(s) for s in level_sizes),
        per_level=tuple(counts),
    )


def assign_rpn_targets(anchors_xyxy, gt: BoxSet, pos_iou=0.7, neg_iou=0.3):
    """Label anchors for objectness and pick their regression targets.

    Anchors with IoU >= pos_iou to any ground-truth box are positive, as is
    the best-overlapping anchor of each ground-truth box (so no gt goes
    unclaimed). Anchors below neg_iou are negative; the rest are ignored.
    Positives regress toward their highest-IoU gt box.

    Returns (labels, reg_targets, matched_gt) where labels is (A,) int8 over
    {POSITIVE, NEGATIVE, IGNORE}, reg_targets is (A, 4) float64 (zeros for
    non-positives) and matched_gt is (A,) int64 gt index or -1.
    """
    anchors = np.asarray(anchors_xyxy, dtype=np.float64)
    n = len(anchors)
    labels = np.full(n, NEGATIVE, dtype=np.int8)
    reg = np.zeros((n, 4), dtype=np.float64)
    matched = np.full(n, -1, dtype=np.int64)
    if len(gt) == 0:
        return labels, reg, matched
    ious = iou_matrix(anchors, gt.to_xyxy())
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    labels[best_iou >= pos_iou] = POSITIVE
    labels[(best_iou >= neg_iou) & (best_iou < pos_iou)] = IGNORE
    # claim the best anchor for every gt, including ties at the max overlap
    gt_best = ious.max(axis=0)
    for g in range(len(gt)):
        if gt_best[g] <= 0:
            continue
        winners = np.flatnonzero(ious[:, g] == gt_best[g])
        labels[winners] = POSITIVE
        best_gt[winners] = g
    pos = labels == POSITIVE
    matched[pos] = best_gt[pos]
    reg[pos] = encode_deltas(anchors[pos], gt.to_xyxy()[best_gt[pos]])
    return labels, reg, matched


def sample_balanced(labels, total, max_pos_fraction, rng):
    """Pick training indices with at most max_pos_fraction positives.

    Positives are subsampled first; the remainder is filled with negatives.
    Returns (pos_idx, neg_idx). When there are too few negatives the batch
    just comes up short.
    """
    pos_idx = np.flatnonzero(labels == POSITIVE)
    neg_idx = np.flatnonzero(labels == NEGATIVE)
    max_pos = int(round(total * max_pos_fraction))
    if len(pos_idx) > max_pos:
        pos_idx = rng.choice(pos_idx, size=max_pos, replace=False)
    n_neg = min(total - len(pos_idx), len(neg_idx))
    if len(neg_idx) > n_neg:
        neg_idx = rng.choice(neg_idx, size=n_neg, replace=False)
    return np.sort(pos_idx), np.sort(neg_idx)
