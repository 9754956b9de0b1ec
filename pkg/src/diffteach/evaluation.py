"""Detection metrics: IoU, average precision, error taxonomy, confusion.

Matching is greedy: detections are visited in descending score order (ties
broken by detection index) and claim the unmatched ground-truth box of the
same class with the highest IoU at or above the threshold. AP uses all-point
interpolation of the precision envelope.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .boxes import BoxSet, iou_matrix, xywh_to_xyxy

TAXONOMY_KEYS = (
    "correct",
    "duplicate",
    "class_confusion",
    "localization",
    "background",
)


def iou(box_a, box_b):
    """IoU of two xywh boxes. Degenerate boxes are rejected."""
    a = np.asarray(box_a, dtype=np.float64)
    b = np.asarray(box_b, dtype=np.float64)
    if a.shape != (4,) or b.shape != (4,):
        raise ValueError("iou expects two [x, y, w, h] boxes")
    if a[2] <= 0 or a[3] <= 0 or b[2] <= 0 or b[3] <= 0:
        raise ValueError("degenerate box: width and height must be positive")
    return float(iou_matrix(xywh_to_xyxy(a[None]), xywh_to_xyxy(b[None]))[0, 0])


def _det_order(scores):
    # descending score, ascending index on ties
    return np.lexsort((np.arange(len(scores)), -np.asarray(scores, np.float64)))


def match_class(dets: BoxSet, gts: BoxSet, class_id, iou_thr):
    """Greedy-match detections of one class inside one image.

    Returns (det_indices, tp_flags, matched_gt) with det_indices in visit
    order. A detection matches the unmatched same-class gt with the highest
    IoU >= iou_thr, lowest gt index on ties.
    """
    det_idx = np.flatnonzero(dets.labels == class_id)
    gt_idx = np.flatnonzero(gts.labels == class_id)
    if len(det_idx) == 0:
        return det_idx, np.zeros(0, bool), np.zeros(0, np.int64)
    order = _det_order(dets.scores[det_idx])
    det_idx = det_idx[order]
    tp = np.zeros(len(det_idx), dtype=bool)
    matched_gt = np.full(len(det_idx), -1, dtype=np.int64)
    if len(gt_idx):
        ious = iou_matrix(dets.select(det_idx).to_xyxy(), gts.select(gt_idx).to_xyxy())
        taken = np.zeros(len(gt_idx), dtype=bool)
        for d in range(len(det_idx)):
            row = np.where(taken, -1.0, ious[d])
            g = int(row.argmax())
            if row[g] >= iou_thr:
                tp[d] = True
                matched_gt[d] = gt_idx[g]
                taken[g] = True
    return det_idx, tp, matched_gt


def average_precision(det_list, gt_list, class_id, iou_thr=0.5):
    """All-point interpolated AP for one class over a list of images.

    det_list / gt_list: one BoxSet per image. Returns None when the class
    appears in neither ground truth nor detections ("absent"); returns 0.0
    when there are detections but no ground truth.
    """
    if len(det_list) != len(gt_list):
        raise ValueError("det_list and gt_list must have equal length")
    total_gt = sum(int((g.labels == class_id).sum()) for g in gt_list)
    records = []  # (score, image_idx, tp)
    for i, (dets, gts) in enumerate(zip(det_list, gt_list)):
        det_idx, tp, _ = match_class(dets, gts, class_id, iou_thr)
        for j, d in enumerate(det_idx):
            records.append((float(dets.scores[d]), i, bool(tp[j])))
    if total_gt == 0 and not records:
        return None
    if total_gt == 0:
        return 0.0
    if not records:
        return 0.0
    scores = np.array([r[0] for r in records])
    order = np.lexsort((np.arange(len(records)), -scores))
    tp = np.array([records[k][2] for k in order], dtype=np.float64)
    fp = 1.0 - tp
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    recall = tp_cum / total_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
    # precision envelope, then sum area under the recall steps
    for k in range(len(precision) - 2, -1, -1):
        precision[k] = max(precision[k], precision[k + 1])
    prev_r = 0.0
    ap = 0.0
    for k in range(len(recall)):
        ap += (recall[k] - prev_r) * precision[k]
        prev_r = recall[k]
    return float(ap)


@dataclass
class EvalReport:
    map: float
    per_class: dict  # name -> AP or None for absent classes
    iou_thr: float
    num_images: int
    num_gt: int
    num_detections: int
    taxonomy: dict | None = None
    missed_gt: int | None = None
    confusion: list | None = None
    class_names: list | None = None

    def to_json(self):
        return json.dumps(
            {
                "map": self.map,
                "per_class": self.per_class,
                "iou_thr": self.iou_thr,
                "num_images": self.num_images,
                "num_gt": self.num_gt,
                "num_detections": self.num_detections,
                "taxonomy": self.taxonomy,
                "missed_gt": self.missed_gt,
                "confusion": self.confusion,
                "class_names": self.class_names,
            },
            sort_keys=True,
            indent=1,
        )

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["class", "ap"])
            for name in sorted(self.per_class):
                ap = self.per_class[name]
                wr.writerow([name, "" if ap is None else f"{ap:.6f}"])
            wr.writerow(["mAP", f"{self.map:.6f}"])


def evaluate_detections(det_list, gt_list, categories, iou_thr=0.5, with_errors=False):
    """Full evaluation over aligned detection / ground-truth lists.

    categories: iterable of (id, name). Classes absent from both sides are
    reported as None and excluded from the mean; if no class is present at
    all the mAP is 0.
    """
    per_class = {}
    values = []
    for cid, name in categories:
        ap = average_precision(det_list, gt_list, cid, iou_thr)
        per_class[name] = ap
        if ap is not None:
            values.append(ap)
    report = EvalReport(
        map=float(np.mean(values)) if values else 0.0,
        per_class=per_class,
        iou_thr=float(iou_thr),
        num_images=len(gt_list),
        num_gt=int(sum(len(g) for g in gt_list)),
        num_detections=int(sum(len(d) for d in det_list)),
    )
    if with_errors:
        tax, missed = error_taxonomy(det_list, gt_list)
        report.taxonomy = tax
        report.missed_gt = missed
        report.confusion = confusion_matrix(det_list, gt_list, categories, iou_thr).tolist()
        report.class_names = [name for _, name in categories] + ["background"]
    return report


def error_taxonomy(det_list, gt_list, fg_iou=0.5, loc_iou=0.1):
    """Bucket every detection into exactly one error (or 'correct') class.

    Priority per detection, visited in descending score order per image:
    correct (matches an unmatched same-class gt at IoU >= fg_iou), duplicate
    (same-class gt already matched), class_confusion (wrong-class gt at
    IoU >= fg_iou), localization (same-class gt at loc_iou <= IoU < fg_iou),
    background (everything else). Also returns the count of gt boxes no
    correct detection claimed.
    """
    counts = {k: 0 for k in TAXONOMY_KEYS}
    missed = 0
    for dets, gts in zip(det_list, gt_list):
        matched = np.zeros(len(gts), dtype=bool)
        order = _det_order(dets.scores if dets.scores is not None else np.zeros(len(dets)))
        ious = (
            iou_matrix(dets.to_xyxy(), gts.to_xyxy())
            if len(dets) and len(gts)
            else np.zeros((len(dets), len(gts)))
        )
        for d in order:
            same = gts.labels == dets.labels[d]
            row = ious[d] if len(gts) else np.zeros(0)
            free_same = same & ~matched & (row >= fg_iou)
            if free_same.any():
                # claim the best free same-class gt
                cand = np.where(free_same, row, -1.0)
                matched[int(cand.argmax())] = True
                counts["correct"] += 1
            elif (same & matched & (row >= fg_iou)).any():
                counts["duplicate"] += 1
            elif (~same & (row >= fg_iou)).any():
                counts["class_confusion"] += 1
            elif (same & (row >= loc_iou) & (row < fg_iou)).any():
                counts["localization"] += 1
            else:
                counts["background"] += 1
        missed += int((~matched).sum())
    return counts, missed


def confusion_matrix(det_list, gt_list, categories, iou_thr=0.5):
    """(C+1) x (C+1) matrix, rows gt class, cols predicted; the last row and
    column are background (unmatched detections / unclaimed gt). Matching is
    class-agnostic greedy by score."""
    ids = [cid for cid, _ in categories]
    index = {cid: k for k, cid in enumerate(ids)}
    c = len(ids)
    mat = np.zeros((c + 1, c + 1), dtype=np.int64)
    for dets, gts in zip(det_list, gt_list):
        taken = np.zeros(len(gts), dtype=bool)
        order = _det_order(dets.scores if dets.scores is not None else np.zeros(len(dets)))
        ious = (
            iou_matrix(dets.to_xyxy(), gts.to_xyxy())
            if len(dets) and len(gts)
            else np.zeros((len(dets), len(gts)))
        )
        for d in order:
            row = np.where(taken, -1.0, ious[d]) if len(gts) else np.zeros(0)
            col = index[int(dets.labels[d])]
            if len(row) and row.max() >= iou_thr:
                g = int(row.argmax())
                taken[g] = True
                mat[index[int(gts.labels[g])], col] += 1
            else:
                mat[c, col] += 1
        for g in np.flatnonzero(~taken):
            mat[index[int(gts.labels[g])], c] += 1
    return mat


def relative_cross_domain(cross_map, oracle_map):
    """Cross-domain mAP as a percentage of the in-domain oracle mAP."""
    cross_map = float(cross_map)
    oracle_map = float(oracle_map)
    if oracle_map <= 0:
        raise ValueError("oracle mAP must be positive")
    if cross_map < 0:
        raise ValueError("cross-domain mAP cannot be negative")
    return 100.0 * cross_map / oracle_map
