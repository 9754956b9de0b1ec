"""A compact two-stage detector over a 4-level feature pyramid.

Stage one scores anchors and proposes boxes; stage two pools a 7x7 patch per
proposal from the pyramid level matching its scale and classifies/refines it.
Box geometry (IoU, NMS, delta coding) lives in boxes.py and runs in numpy;
only tensors that need gradients stay in torch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import anchors as anchor_lib
from .anchors import AnchorGrid, POSITIVE, generate_anchors, sample_balanced
from .backbone import FeaturePyramid, PYRAMID_STRIDES
from .boxes import (
    BoxSet,
    clip_xyxy,
    decode_deltas,
    encode_deltas,
    iou_matrix,
    nms,
    xyxy_to_xywh,
)
from .denoiser import _norm_groups
from .validation import check_positive_int, check_rng


@dataclass(frozen=True)
class DetectorConfig:
    num_classes: int = 3
    head_channels: int = 64
    roi_size: int = 7
    roi_hidden: int = 256
    anchor_base_sizes: tuple = anchor_lib.BASE_SIZES
    anchor_ratios: tuple = anchor_lib.ASPECT_RATIOS
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rpn_batch: int = 256
    rpn_pos_fraction: float = 0.5
    pre_nms_top: int = 300
    proposal_nms_iou: float = 0.7
    post_nms_top: int = 100
    roi_fg_iou: float = 0.5
    roi_batch: int = 64
    roi_pos_fraction: float = 0.25
    score_floor: float = 0.05
    detect_nms_iou: float = 0.5
    max_detections: int = 100

    def __post_init__(self):
        check_positive_int("num_classes", self.num_classes)
        if not 0.0 <= self.score_floor < 1.0:
            raise ValueError("score_floor must be in [0, 1)")


class RPNHead(nn.Module):
    def __init__(self, channels, num_anchors):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.obj = nn.Conv2d(channels, num_anchors, 1)
        self.reg = nn.Conv2d(channels, num_anchors * 4, 1)
        self.num_anchors = num_anchors

    def forward(self, levels):
        obj_all, reg_all = [], []
        for feat in levels:
            h = torch.relu(self.conv(feat))
            b, _, fh, fw = h.shape
            obj = self.obj(h).permute(0, 2, 3, 1).reshape(b, -1)
            reg = (
                self.reg(h)
                .view(b, self.num_anchors, 4, fh, fw)
                .permute(0, 3, 4, 1, 2)
                .reshape(b, -1, 4)
            )
            obj_all.append(obj)
            reg_all.append(reg)
        return torch.cat(obj_all, dim=1), torch.cat(reg_all, dim=1)


class RoIBoxHead(nn.Module):
    def __init__(self, channels, roi_size, hidden, num_classes):
        super().__init__()
        self.fc1 = nn.Linear(channels * roi_size * roi_size, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.cls = nn.Linear(hidden, num_classes + 1)
        self.reg = nn.Linear(hidden, num_classes * 4)

    def forward(self, pooled):
        h = torch.relu(self.fc1(pooled.flatten(1)))
        h = torch.relu(self.fc2(h))
        return self.cls(h), self.reg(h)


class MiniDetector(nn.Module):
    """Backbone + per-level projection neck + RPN + box head."""

    def __init__(self, backbone, config: DetectorConfig = DetectorConfig()):
        super().__init__()
        self.backbone = backbone
        self.config = config
        nA = len(config.anchor_ratios)
        ch = config.head_channels
        self.neck = nn.ModuleList(
            [
                nn.Sequential(
                    nn.Conv2d(c, ch, 1),
                    nn.GroupNorm(_norm_groups(ch), ch),
                    nn.ReLU(),
                )
                for c in backbone.out_channels
            ]
        )
        self.rpn = RPNHead(ch, nA)
        self.roi_head = RoIBoxHead(ch, config.roi_size, config.roi_hidden, config.num_classes)
        self._anchor_cache = {}

    def pyramid(self, images, image_ids=None):
        raw = self.backbone(images, image_ids=image_ids)
        return FeaturePyramid([proj(lv) for proj, lv in zip(self.neck, raw.levels)])

    def pyramid_from_taps(self, taps, image_hw):
        raw = self.backbone.fuse_taps(taps, image_hw)
        return FeaturePyramid([proj(lv) for proj, lv in zip(self.neck, raw.levels)])

    def anchors_for(self, pyramid: FeaturePyramid) -> AnchorGrid:
        sizes = tuple(tuple(lv.shape[-2:]) for lv in pyramid.levels)
        if sizes not in self._anchor_cache:
            self._anchor_cache[sizes] = generate_anchors(
                sizes,
                PYRAMID_STRIDES,
                self.config.anchor_base_sizes,
                self.config.anchor_ratios,
            )
        return self._anchor_cache[sizes]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


def assign_pyramid_levels(boxes_xyxy, image_side):
    """Pick the pooling level per box: sqrt(area) of image_side/8 maps to P2,
    each doubling moves one level coarser, clamped to [P2, P5]."""
    b = np.asarray(boxes_xyxy, dtype=np.float64)
    w = np.clip(b[:, 2] - b[:, 0], 1e-6, None)
    h = np.clip(b[:, 3] - b[:, 1], 1e-6, None)
    scale = np.sqrt(w * h) / (image_side / 8.0)
    k = 2 + np.floor(np.log2(np.clip(scale, 1e-6, None)))
    return np.clip(k, 2, 5).astype(np.int64) - 2  # index into pyramid.levels


def roi_pool(pyramid: FeaturePyramid, boxes_xyxy, batch_index, image_side, roi_size):
    """Bilinear 7x7 pooling from the level assigned to each box.

    boxes_xyxy: (N, 4) numpy in image pixels; batch_index: (N,) image index
    within the batch. Returns (N, C, roi_size, roi_size).
    """
    n = len(boxes_xyxy)
    channels = pyramid.levels[0].shape[1]
    out = pyramid.levels[0].new_zeros((n, channels, roi_size, roi_size))
    if n == 0:
        return out
    levels = assign_pyramid_levels(boxes_xyxy, image_side)
    cells = (np.arange(roi_size) + 0.5) / roi_size
    for lvl in range(4):
        pick = np.flatnonzero(levels == lvl)
        if len(pick) == 0:
            continue
        feat = pyramid.levels[lvl]
        stride = PYRAMID_STRIDES[lvl]
        fh, fw = feat.shape[-2:]
        b = boxes_xyxy[pick]
        # sample point grid in feature coordinates, then normalize for
        # grid_sample's align_corners=False convention
        xs = (b[:, 0:1] + cells[None] * (b[:, 2:3] - b[:, 0:1])) / stride
        ys = (b[:, 1:2] + cells[None] * (b[:, 3:4] - b[:, 1:2])) / stride
        gx = torch.as_tensor(xs / fw * 2 - 1, dtype=feat.dtype)
        gy = torch.as_tensor(ys / fh * 2 - 1, dtype=feat.dtype)
        grid = torch.stack(
            [gx[:, None, :].expand(-1, roi_size, -1), gy[:, :, None].expand(-1, -1, roi_size)],
        dim=-1)
        src = feat[torch.as_tensor(batch_index[pick])]
        pooled = nn.functional.grid_sample(src, grid, align_corners=False, padding_mode="border")
        out[torch.as_tensor(pick)] = pooled
    return out


def make_proposals(
    obj_logits, deltas, anchor_grid: AnchorGrid, image_hw, config: DetectorConfig
):
    """Decode, clip, and NMS the RPN output into per-image proposal arrays."""
    scores = torch.sigmoid(obj_logits).detach().cpu().numpy()
    offs = deltas.detach().cpu().numpy()
    h, w = image_hw
    out = []
    for i in range(scores.shape[0]):
        boxes = clip_xyxy(decode_deltas(anchor_grid.boxes, offs[i]), w, h)
        wide = (boxes[:, 2] - boxes[:, 0] >= 1.0) & (boxes[:, 3] - boxes[:, 1] >= 1.0)
        idx = np.flatnonzero(wide)
        sc = scores[i, idx]
        if len(idx) > config.pre_nms_top:
            top = np.argpartition(-sc, config.pre_nms_top)[: config.pre_nms_top]
            idx, sc = idx[top], sc[top]
        keep = nms(boxes[idx], sc, config.proposal_nms_iou)
        keep = keep[: config.post_nms_top]
        out.append(boxes[idx[keep]])
    return out


def _assign_rois(proposals, gt: BoxSet, fg_iou):
    """Per-proposal class labels (0 = background), matched gt, reg targets."""
    n = len(proposals)
    labels = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    reg = np.zeros((n, 4), dtype=np.float64)
    if len(gt) > 0 and n > 0:
        ious = iou_matrix(proposals, gt.to_xyxy())
        best = ious.argmax(axis=1)
        best_iou = ious[np.arange(n), best]
        fg = best_iou >= fg_iou
        labels[fg] = gt.labels[best[fg]]
        matched[fg] = best[fg]
        if fg.any():
            reg[fg] = encode_deltas(proposals[fg], gt.to_xyxy()[best[fg]])
    return labels, matched, reg


def _smooth_l1(pred, target, beta=1.0):
    diff = torch.abs(pred - target)
    return torch.where(diff < beta, 0.5 * diff**2 / beta, diff - 0.5 * beta)


def _check_finite(name, value):
    if not torch.isfinite(value):
        raise RuntimeError(f"detection loss term {name!r} is non-finite: {value}")
    return value


def detection_loss(
    detector: MiniDetector,
    images,
    gt_list,
    rng,
    image_ids=None,
    pyramid=None,
    image_hw=None,
    proposals_override=None,
):
    """Four-term training loss averaged over the batch.

    gt_list: one BoxSet per image. rng drives anchor/ROI subsampling, so two
    calls with generators in the same state take identical samples.
    pyramid + image_hw let callers feed precomputed features (the frozen-tap
    cache path); images may then be None.
    proposals_override: optional per-image xyxy arrays that bypass proposal
    generation (used by finite-difference tests to pin the sampled region).

    Returns a dict with 'rpn_obj', 'rpn_reg', 'roi_cls', 'roi_reg', 'total'.
    """
    check_rng("rng", rng)
    cfg = detector.config
    if pyramid is None:
        if images is None:
            raise ValueError("need images when no pyramid is supplied")
        pyramid = detector.pyramid(images, image_ids=image_ids)
    batch = pyramid.levels[0].shape[0]
    if len(gt_list) != batch:
        raise ValueError(f"got {len(gt_list)} ground-truth sets for batch of {batch}")
    if image_hw is None:
        image_hw = (int(images.shape[-2]), int(images.shape[-1]))
    else:
        image_hw = (int(image_hw[0]), int(image_hw[1]))
    grid = detector.anchors_for(pyramid)
    obj_logits, rpn_deltas = detector.rpn(pyramid.levels)

    zero = obj_logits.sum() * 0.0
    rpn_obj_terms, rpn_reg_terms = [], []
    for i in range(batch):
        labels, reg_targets, _ = anchor_lib.assign_rpn_targets(
            grid.boxes, gt_list[i], cfg.rpn_pos_iou, cfg.rpn_neg_iou
        )
        pos_idx, neg_idx = sample_balanced(labels, cfg.rpn_batch, cfg.rpn_pos_fraction, rng)
        sampled = np.concatenate([pos_idx, neg_idx])
        n_sampled = max(len(sampled), 1)
        logit = obj_logits[i, torch.as_tensor(sampled)]
        target = torch.zeros(len(sampled), dtype=logit.dtype)
        target[: len(pos_idx)] = 1.0
        rpn_obj_terms.append(
            nn.functional.binary_cross_entropy_with_logits(logit, target, reduction="mean")
            if len(sampled)
            else zero
        )
        if len(pos_idx):
            pred = rpn_deltas[i, torch.as_tensor(pos_idx)]
            tgt = torch.as_tensor(reg_targets[pos_idx], dtype=pred.dtype)
            rpn_reg_terms.append(_smooth_l1(pred, tgt).sum() / n_sampled)
        else:
            rpn_reg_terms.append(zero)

    if proposals_override is not None:
        proposals = [np.asarray(p, dtype=np.float64) for p in proposals_override]
    else:
        proposals = make_proposals(obj_logits, rpn_deltas, grid, image_hw, cfg)
        # seeing its own ground truth as proposals stabilizes the box head
        proposals = [
            np.concatenate([p, gt.to_xyxy()]) if len(gt) else p
            for p, gt in zip(proposals, gt_list)
        ]

    roi_cls_terms, roi_reg_terms = [], []
    roi_boxes, roi_batch_idx, roi_labels, roi_reg_targets = [], [], [], []
    for i in range(batch):
        labels, _, reg_targets = _assign_rois(proposals[i], gt_list[i], cfg.roi_fg_iou)
        marks = np.where(labels > 0, POSITIVE, 0).astype(np.int8)
        pos_idx, neg_idx = sample_balanced(marks, cfg.roi_batch, cfg.roi_pos_fraction, rng)
        sampled = np.concatenate([pos_idx, neg_idx])
        if len(sampled) == 0:
            continue
        roi_boxes.append(proposals[i][sampled])
        roi_batch_idx.append(np.full(len(sampled), i))
        roi_labels.append(labels[sampled])
        roi_reg_targets.append(reg_targets[sampled])

    if roi_boxes:
        boxes = np.concatenate(roi_boxes)
        batch_idx = np.concatenate(roi_batch_idx)
        labels = np.concatenate(roi_labels)
        reg_targets = np.concatenate(roi_reg_targets)
        pooled = roi_pool(pyramid, boxes, batch_idx, image_hw[0], cfg.roi_size)
        cls_logits, reg_pred = detector.roi_head(pooled)
        label_t = torch.as_tensor(labels)
        for i in range(batch):
            rows = np.flatnonzero(batch_idx == i)
            if len(rows) == 0:
                roi_cls_terms.append(zero)
                roi_reg_terms.append(zero)
                continue
            rows_t = torch.as_tensor(rows)
            roi_cls_terms.append(
                nn.functional.cross_entropy(cls_logits[rows_t], label_t[rows_t])
            )
            fg = rows[labels[rows] > 0]
            if len(fg):
                cls = labels[fg] - 1
                pred = reg_pred[torch.as_tensor(fg)].view(len(fg), -1, 4)
                pred = pred[torch.arange(len(fg)), torch.as_tensor(cls)]
                tgt = torch.as_tensor(reg_targets[fg], dtype=pred.dtype)
                roi_reg_terms.append(_smooth_l1(pred, tgt).sum() / len(rows))
            else:
                roi_reg_terms.append(zero)
    if not roi_cls_terms:
        roi_cls_terms = [zero]
        roi_reg_terms = [zero]

    out = {
        "rpn_obj": torch.stack(rpn_obj_terms).mean(),
        "rpn_reg": torch.stack(rpn_reg_terms).mean(),
        "roi_cls": torch.stack(roi_cls_terms).mean(),
        "roi_reg": torch.stack(roi_reg_terms).mean(),
    }
    for name, value in out.items():
        _check_finite(name, value)
    out["total"] = out["rpn_obj"] + out["rpn_reg"] + out["roi_cls"] + out["roi_reg"]
    return out


@torch.no_grad()
def detect(detector: MiniDetector, images, image_ids=None, score_floor=None):
    """Run the full pipeline and return one BoxSet per image.

    Scores are softmax probabilities in [0, 1]; boxes are xywh pixels clipped
    to the image. Per-class NMS then a global top-k cap.
    """
    cfg = detector.config
    was_training = detector.training
    detector.eval()
    try:
        floor = cfg.score_floor if score_floor is None else float(score_floor)
        pyramid = detector.pyramid(images, image_ids=image_ids)
        image_hw = (int(images.shape[-2]), int(images.shape[-1]))
        grid = detector.anchors_for(pyramid)
        obj_logits, rpn_deltas = detector.rpn(pyramid.levels)
        proposals = make_proposals(obj_logits, rpn_deltas, grid, image_hw, cfg)
        results = []
        for i in range(images.shape[0]):
            props = proposals[i]
            if len(props) == 0:
                results.append(BoxSet.empty(with_scores=True))
                continue
            pooled = roi_pool(
                pyramid, props, np.full(len(props), i), image_hw[0], cfg.roi_size
            )
            cls_logits, reg_pred = detector.roi_head(pooled)
            probs = torch.softmax(cls_logits, dim=1).cpu().numpy()
            regs = reg_pred.view(len(props), cfg.num_classes, 4).cpu().numpy()
            boxes_out, labels_out, scores_out = [], [], []
            for c in range(1, cfg.num_classes + 1):
                sc = probs[:, c]
                keep = np.flatnonzero(sc >= floor)
                if len(keep) == 0:
                    continue
                decoded = clip_xyxy(
                    decode_deltas(props[keep], regs[keep, c - 1]), image_hw[1], image_hw[0]
                )
                ok = (decoded[:, 2] > decoded[:, 0]) & (decoded[:, 3] > decoded[:, 1])
                decoded, sc_k = decoded[ok], sc[keep][ok]
                if len(decoded) == 0:
                    continue
                kept = nms(decoded, sc_k, cfg.detect_nms_iou)
                boxes_out.append(decoded[kept])
                labels_out.append(np.full(len(kept), c, dtype=np.int64))
                scores_out.append(sc_k[kept])
            if not boxes_out:
                results.append(BoxSet.empty(with_scores=True))
                continue
            boxes_cat = np.concatenate(boxes_out)
            labels_cat = np.concatenate(labels_out)
            scores_cat = np.concatenate(scores_out)
            order = np.lexsort((np.arange(len(scores_cat)), -scores_cat))
            order = order[: cfg.max_detections]
            results.append(
                BoxSet(
                    boxes=xyxy_to_xywh(boxes_cat[order]).astype(np.float32),
                    labels=labels_cat[order],
                    scores=scores_cat[order].astype(np.float32),
                )
            )
        return results
    finally:
        detector.train(was_training)
