"""Weak and strong image augmentation with box-consistent geometry.

Geometric ops are composed into a single affine map that is applied to both
the image and the box corners (corners are mapped, then re-boxed as the
axis-aligned hull). Color ops never touch geometry. All randomness comes from
the caller's numpy Generator, and every draw happens unconditionally in a
fixed order so a given seed always produces the same transform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image, ImageEnhance, ImageOps

from .boxes import BoxSet
from .validation import check_probability, check_rng


@dataclass(frozen=True)
class AugmentationPolicy:
    """Parameters for one augmentation strength.

    kind "weak": random crop-and-resize (area >= min_crop_area of the
    original) plus horizontal flip with probability flip_p.
    kind "strong": the weak geometry is not repeated here; strong adds
    rotation/shear/translation and photometric ops, each applied with
    probability op_p.
    """

    kind: str = "weak"
    flip_p: float = 0.5
    min_crop_area: float = 0.8
    op_p: float = 0.3
    max_rotate_deg: float = 15.0
    max_shear_deg: float = 10.0
    max_translate_frac: float = 0.1
    contrast_range: tuple = (0.8, 1.2)
    sharpness_range: tuple = (0.5, 1.5)
    posterize_bits: tuple = (4, 7)
    hue_shift: float = 0.02
    saturation_range: tuple = (0.85, 1.15)
    min_box_keep: float = 0.25  # drop boxes whose clipped area falls below this

    def __post_init__(self):
        if self.kind not in ("weak", "strong", "none"):
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        check_probability("flip_p", self.flip_p)
        check_probability("op_p", self.op_p)
        check_probability("min_crop_area", self.min_crop_area)

    @classmethod
    def weak(cls, **overrides):
        return cls(kind="weak", **overrides)

    @classmethod
    def strong(cls, **overrides):
        return cls(kind="strong", **overrides)

    @classmethod
    def none(cls):
        return cls(kind="none")


@dataclass(frozen=True)
class GeometricTransform:
    """2x3 affine matrix mapping input pixel coords to output pixel coords."""

    matrix: np.ndarray
    out_size: tuple

    def apply_points(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.matrix[:, :2].T + self.matrix[:, 2]

    def apply_boxes(self, boxes_xywh):
        """Map each box's corners and take the axis-aligned hull."""
        b = np.asarray(boxes_xywh, dtype=np.float64)
        if len(b) == 0:
            return b.reshape(0, 4)
        x1, y1 = b[:, 0], b[:, 1]
        x2, y2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
        corners = np.stack(
            [
                np.stack([x1, y1], -1),
                np.stack([x2, y1], -1),
                np.stack([x2, y2], -1),
                np.stack([x1, y2], -1),
            ],
            axis=1,
        )  # (N, 4, 2)
        mapped = self.apply_points(corners.reshape(-1, 2)).reshape(-1, 4, 2)
        lo = mapped.min(axis=1)
        hi = mapped.max(axis=1)
        return np.concatenate([lo, hi - lo], axis=1)  # back to xywh


def _mat(a, b, c, d, e, f):
    return np.array([[a, b, c], [d, e, f]], dtype=np.float64)


def _compose(m2, m1):
    """Affine composition: first m1, then m2."""
    a = np.vstack([m1, [0, 0, 1]])
    b = np.vstack([m2, [0, 0, 1]])
    return (b @ a)[:2]


def sample_geometry(policy: AugmentationPolicy, rng, size):
    """Draw the geometric part of the policy as one GeometricTransform.

    The draw order is fixed per kind so transforms are reproducible from the
    generator state alone.
    """
    check_rng("rng", rng)
    w, h = size
    m = _mat(1, 0, 0, 0, 1, 0)
    if policy.kind == "none":
        return GeometricTransform(m, (w, h))
    if policy.kind == "weak":
        area = rng.uniform(policy.min_crop_area, 1.0)
        ar = math.sqrt(area)
        cw, ch = w * ar, h * ar
        x0 = rng.uniform(0, w - cw)
        y0 = rng.uniform(0, h - ch)
        flip = rng.random() < policy.flip_p
        s = w / cw  # == h / ch, aspect preserved
        m = _mat(s, 0, -x0 * s, 0, s, -y0 * s)
        if flip:
            m = _compose(_mat(-1, 0, w, 0, 1, 0), m)
        return GeometricTransform(m, (w, h))
    # strong: rotation, shear, translation about the image center, each gated
    cx, cy = w / 2.0, h / 2.0
    angle = rng.uniform(-policy.max_rotate_deg, policy.max_rotate_deg)
    use_rot = rng.random() < policy.op_p
    shear = rng.uniform(-policy.max_shear_deg, policy.max_shear_deg)
    use_shear = rng.random() < policy.op_p
    tx = rng.uniform(-policy.max_translate_frac, policy.max_translate_frac) * w
    ty = rng.uniform(-policy.max_translate_frac, policy.max_translate_frac) * h
    use_trans = rng.random() < policy.op_p
    to_center = _mat(1, 0, -cx, 0, 1, -cy)
    back = _mat(1, 0, cx, 0, 1, cy)
    if use_rot:
        r = math.radians(angle)
        rot = _mat(math.cos(r), -math.sin(r), 0, math.sin(r), math.cos(r), 0)
        m = _compose(_compose(back, _compose(rot, to_center)), m)
    if use_shear:
        t = math.tan(math.radians(shear))
        sh = _mat(1, t, 0, 0, 1, 0)
        m = _compose(_compose(back, _compose(sh, to_center)), m)
    if use_trans:
        m = _compose(_mat(1, 0, tx, 0, 1, ty), m)
    return GeometricTransform(m, (w, h))


def _apply_geometry_to_image(image: Image.Image, tf: GeometricTransform):
    # PIL wants the inverse map (output pixel -> input pixel)
    full = np.vstack([tf.matrix, [0, 0, 1]])
    inv = np.linalg.inv(full)[:2].reshape(-1)
    return image.transform(
        tf.out_size, Image.AFFINE, tuple(inv), resample=Image.BILINEAR, fillcolor=(127, 127, 127)
    )


def _shift_hue_saturation(image, hue_shift, sat_factor):
    hsv = np.asarray(image.convert("HSV"), dtype=np.int16)
    hsv[..., 0] = (hsv[..., 0] + int(round(hue_shift * 255))) % 256
    hsv[..., 1] = np.clip(hsv[..., 1] * sat_factor, 0, 255).astype(np.int16)
    return Image.fromarray(hsv.astype(np.uint8), "HSV").convert("RGB")


def _apply_color(image: Image.Image, policy: AugmentationPolicy, rng):
    """Photometric ops for the strong policy, fixed draw order."""
    contrast = rng.uniform(*policy.contrast_range)
    use_contrast = rng.random() < policy.op_p
    use_equalize = rng.random() < policy.op_p
    sharp = rng.uniform(*policy.sharpness_range)
    use_sharp = rng.random() < policy.op_p
    bits = int(rng.integers(policy.posterize_bits[0], policy.posterize_bits[1] + 1))
    use_poster = rng.random() < policy.op_p
    hue = rng.uniform(-policy.hue_shift, policy.hue_shift)
    sat = rng.uniform(*policy.saturation_range)
    use_jitter = rng.random() < policy.op_p
    if use_contrast:
        image = ImageEnhance.Contrast(image).enhance(contrast)
    if use_equalize:
        image = ImageOps.equalize(image)
    if use_sharp:
        image = ImageEnhance.Sharpness(image).enhance(sharp)
    if use_poster:
        image = ImageOps.posterize(image, bits)
    if use_jitter:
        image = _shift_hue_saturation(image, hue, sat)
    return image


def augment(image, boxes: BoxSet, policy: AugmentationPolicy, rng):
    """Apply the policy; returns (image, boxes) as a new uint8 HWC array and
    a new BoxSet. Boxes are corner-mapped through the same affine as the
    image, clipped, and dropped when the clipped area falls below
    min_box_keep of the pre-transform area.
    """
    arr = np.asarray(image)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("augment expects an HWC uint8 RGB image")
    h, w = arr.shape[:2]
    tf = sample_geometry(policy, rng, (w, h))
    pil = Image.fromarray(arr)
    out = _apply_geometry_to_image(pil, tf)
    if policy.kind == "strong":
        out = _apply_color(out, policy, rng)
    new_boxes = tf.apply_boxes(boxes.boxes)
    keep = np.ones(len(new_boxes), dtype=bool)
    if len(new_boxes):
        orig_area = boxes.areas().astype(np.float64)
        x1 = np.clip(new_boxes[:, 0], 0, w)
        y1 = np.clip(new_boxes[:, 1], 0, h)
        x2 = np.clip(new_boxes[:, 0] + new_boxes[:, 2], 0, w)
        y2 = np.clip(new_boxes[:, 1] + new_boxes[:, 3], 0, h)
        clipped = np.stack([x1, y1, x2 - x1, y2 - y1], axis=1)
        area = clipped[:, 2] * clipped[:, 3]
        keep = area >= policy.min_box_keep * orig_area
        keep &= (clipped[:, 2] > 1.0) & (clipped[:, 3] > 1.0)
        new_boxes = clipped
    result = BoxSet(
        boxes=new_boxes[keep].astype(np.float32).reshape(-1, 4),
        labels=boxes.labels[keep],
        scores=None if boxes.scores is None else boxes.scores[keep],
    )
    return np.asarray(out), result
