"""Axis-aligned box containers and geometry used by the detector and the
evaluator.

Boxes are stored as [x, y, w, h] in pixels with a top-left origin, matching
the dataset JSON. Geometry helpers that need corners convert to
[x1, y1, x2, y2] ("xyxy") internally; x2/y2 are exclusive of nothing special,
just x + w and y + h.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .validation import check_array


@dataclass
class BoxSet:
    """Boxes with class labels and optional detection scores.

    boxes:  (N, 4) float32, [x, y, w, h]
    labels: (N,) int64 category ids
    scores: (N,) float32 in [0, 1], or None for ground truth
    """

    boxes: np.ndarray
    labels: np.ndarray
    scores: np.ndarray | None = None

    def __post_init__(self):
        self.boxes = check_array("boxes", self.boxes, ndim=2, dtype=np.float32)
        if self.boxes.shape[1] != 4:
            raise ValueError(f"boxes must be (N, 4), got {self.boxes.shape}")
        self.labels = check_array("labels", self.labels, ndim=1, dtype=np.int64)
        if len(self.labels) != len(self.boxes):
            raise ValueError(
                f"labels length {len(self.labels)} != boxes length {len(self.boxes)}"
            )
        if self.scores is not None:
            self.scores = check_array("scores", self.scores, ndim=1, dtype=np.float32)
            if len(self.scores) != len(self.boxes):
                raise ValueError("scores length mismatch with boxes")

    @classmethod
    def empty(cls, with_scores=False):
        return cls(
            boxes=np.zeros((0, 4), np.float32),
            labels=np.zeros((0,), np.int64),
            scores=np.zeros((0,), np.float32) if with_scores else None,
        )

    def __len__(self):
        return len(self.boxes)

    def to_xyxy(self):
        b = self.boxes
        return np.concatenate([b[:, :2], b[:, :2] + b[:, 2:]], axis=1)

    def areas(self):
        return self.boxes[:, 2] * self.boxes[:, 3]

    def select(self, index):
        return BoxSet(
            boxes=self.boxes[index],
            labels=self.labels[index],
            scores=None if self.scores is None else self.scores[index],
        )

    def validate(self, image_width, image_height, category_ids=None):
        """Raise ValueError on degenerate or out-of-bounds boxes."""
        b = self.boxes
        if len(b) == 0:
            return self
        if not np.isfinite(b).all():
            raise ValueError("boxes contain non-finite values")
        if (b[:, 2] <= 0).any() or (b[:, 3] <= 0).any():
            bad = int(np.flatnonzero((b[:, 2] <= 0) | (b[:, 3] <= 0))[0])
            raise ValueError(f"box {bad} has non-positive width or height")
        if (b[:, 0] < 0).any() or (b[:, 1] < 0).any():
            raise ValueError("boxes extend past the top-left image edge")
        if (b[:, 0] + b[:, 2] > image_width + 1e-3).any() or (
            b[:, 1] + b[:, 3] > image_height + 1e-3
        ).any():
            raise ValueError("boxes extend past the bottom-right image edge")
        if category_ids is not None:
            known = set(int(c) for c in category_ids)
            for lab in self.labels:
                if int(lab) not in known:
                    raise ValueError(f"unknown category id {int(lab)}")
        return self


def xywh_to_xyxy(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    out = boxes.copy()
    out[..., 2] = boxes[..., 0] + boxes[..., 2]
    out[..., 3] = boxes[..., 1] + boxes[..., 3]
    return out


def xyxy_to_xywh(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    out = boxes.copy()
    out[..., 2] = boxes[..., 2] - boxes[..., 0]
    out[..., 3] = boxes[..., 3] - boxes[..., 1]
    return out


def iou_matrix(a_xyxy, b_xyxy):
    """Pairwise intersection-over-union for two xyxy box arrays.

    Returns an (N, M) float64 matrix. Degenerate boxes (zero or negative
    extent) get IoU 0 against everything.
    """
    a = np.asarray(a_xyxy, dtype=np.float64)
    b = np.asarray(b_xyxy, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("iou_matrix expects 2-d arrays")
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 2], b[None, :, 2])
    y2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def nms(boxes_xyxy, scores, iou_threshold):
    """Greedy non-maximum suppression.

    Boxes are visited in descending score order (ties broken by lower index);
    a box is kept unless it overlaps an already-kept box with IoU above the
    threshold. Returns the kept indices in visit order.
    """
    boxes = np.asarray(boxes_xyxy, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if len(boxes) == 0:
        return np.zeros((0,), np.int64)
    # lexsort: last key is primary, so -scores dominates, index breaks ties
    order = np.lexsort((np.arange(len(scores)), -scores))
    keep = []
    suppressed = np.zeros(len(boxes), dtype=bool)
    ious = iou_matrix(boxes, boxes)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_threshold
        suppressed[i] = True
    return np.asarray(keep, dtype=np.int64)


def encode_deltas(src_xyxy, target_xyxy):
    """Regression offsets that map src (anchor/proposal) boxes onto targets.

    dx, dy are the center shift in units of the src extent; dw, dh are log
    extent ratios. Inverse of decode_deltas.
    """
    src = np.asarray(src_xyxy, dtype=np.float64)
    tgt = np.asarray(target_xyxy, dtype=np.float64)
    sw = src[..., 2] - src[..., 0]
    sh = src[..., 3] - src[..., 1]
    scx = src[..., 0] + 0.5 * sw
    scy = src[..., 1] + 0.5 * sh
    tw = tgt[..., 2] - tgt[..., 0]
    th = tgt[..., 3] - tgt[..., 1]
    tcx = tgt[..., 0] + 0.5 * tw
    tcy = tgt[..., 1] + 0.5 * th
    if (sw <= 0).any() or (sh <= 0).any():
        raise ValueError("encode_deltas: source boxes must have positive extent")
    if (tw <= 0).any() or (th <= 0).any():
        raise ValueError("encode_deltas: target boxes must have positive extent")
    return np.stack(
        [(tcx - scx) / sw, (tcy - scy) / sh, np.log(tw / sw), np.log(th / sh)],
        axis=-1,
    )


# log-ratio clamp keeps exp() finite when the head predicts garbage early on
_MAX_LOG_RATIO = 4.0


def decode_deltas(src_xyxy, deltas):
    src = np.asarray(src_xyxy, dtype=np.float64)
    d = np.asarray(deltas, dtype=np.float64)
    sw = src[..., 2] - src[..., 0]
    sh = src[..., 3] - src[..., 1]
    scx = src[..., 0] + 0.5 * sw
    scy = src[..., 1] + 0.5 * sh
    cx = scx + d[..., 0] * sw
    cy = scy + d[..., 1] * sh
    w = sw * np.exp(np.clip(d[..., 2], -_MAX_LOG_RATIO, _MAX_LOG_RATIO))
    h = sh * np.exp(np.clip(d[..., 3], -_MAX_LOG_RATIO, _MAX_LOG_RATIO))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def clip_xyxy(boxes, width, height):
    boxes = np.asarray(boxes, dtype=np.float64).copy()
    boxes[..., 0::2] = np.clip(boxes[..., 0::2], 0, width)
    boxes[..., 1::2] = np.clip(boxes[..., 1::2], 0, height)
    return boxes
