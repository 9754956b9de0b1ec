"""Detector and training-state checkpoints.

Every file carries a format version and enough architecture description to
rebuild the module graph before loading tensors, so shape mismatches fail
loudly instead of silently loading into the wrong net.
"""

from __future__ import annotations

from dataclasses import asdict

import torch

from .backbone import ConvBackbone, DiffusionBackbone, FeatureExtractionConfig
from .denoiser import DenoiserConfig, TinyUNet
from .detector import DetectorConfig, MiniDetector
from .schedules import build_schedule

DETECTOR_VERSION = 1
TRAIN_STATE_VERSION = 1


def _backbone_descriptor(backbone):
    if isinstance(backbone, DiffusionBackbone):
        return {
            "type": "diffusion",
            "denoiser": {
                "image_side": backbone.denoiser.config.image_side,
                "in_channels": backbone.denoiser.config.in_channels,
                "stage_channels": list(backbone.denoiser.config.stage_channels),
                "time_dim": backbone.denoiser.config.time_dim,
            },
            "schedule": backbone.schedule.to_dict(),
            "features": asdict(backbone.feature_config),
            "out_channels": list(backbone.out_channels),
        }
    if isinstance(backbone, ConvBackbone):
        return {"type": "conv", "stage_channels": list(backbone.out_channels)}
    raise TypeError(f"cannot describe backbone of type {type(backbone).__name__}")


def _build_backbone(desc):
    if desc["type"] == "diffusion":
        den = TinyUNet(
            DenoiserConfig(
                image_side=desc["denoiser"]["image_side"],
                in_channels=desc["denoiser"]["in_channels"],
                stage_channels=tuple(desc["denoiser"]["stage_channels"]),
                time_dim=desc["denoiser"]["time_dim"],
            )
        )
        return DiffusionBackbone(
            den,
            build_schedule(**desc["schedule"]),
            FeatureExtractionConfig(**desc["features"]),
            out_channels=tuple(desc["out_channels"]),
        )
    if desc["type"] == "conv":
        return ConvBackbone(stage_channels=tuple(desc["stage_channels"]))
    raise ValueError(f"unknown backbone type {desc['type']!r}")


def detector_blob(detector: MiniDetector):
    cfg = asdict(detector.config)
    cfg["anchor_base_sizes"] = list(cfg["anchor_base_sizes"])
    cfg["anchor_ratios"] = list(cfg["anchor_ratios"])
    return {
        "format_version": DETECTOR_VERSION,
        "detector_config": cfg,
        "backbone": _backbone_descriptor(detector.backbone),
        "state_dict": detector.state_dict(),
    }


def detector_from_blob(blob):
    version = blob.get("format_version")
    if version != DETECTOR_VERSION:
        raise ValueError(f"unsupported detector checkpoint version {version!r}")
    cfg = dict(blob["detector_config"])
    cfg["anchor_base_sizes"] = tuple(cfg["anchor_base_sizes"])
    cfg["anchor_ratios"] = tuple(cfg["anchor_ratios"])
    detector = MiniDetector(_build_backbone(blob["backbone"]), DetectorConfig(**cfg))
    try:
        detector.load_state_dict(blob["state_dict"])
    except RuntimeError as exc:
        raise ValueError(f"checkpoint tensors do not match architecture: {exc}") from exc
    if blob["backbone"]["type"] == "diffusion":
        detector.backbone.denoiser.requires_grad_(False)
        detector.backbone.denoiser.eval()
    return detector


def save_detector(path, detector: MiniDetector, extra=None):
    blob = detector_blob(detector)
    if extra:
        blob["extra"] = extra
    torch.save(blob, path)


def load_detector(path):
    blob = torch.load(path, map_location="cpu", weights_only=False)
    return detector_from_blob(blob)


def save_train_state(path, trainer):
    """Checkpoint a SelfTrainer so training can resume bit-for-bit."""
    blob = {
        "format_version": TRAIN_STATE_VERSION,
        "step": trainer.step,
        "config": asdict(trainer.config),
        "student": detector_blob(trainer.student),
        "mean_teacher": (
            detector_blob(trainer.mean_teacher) if trainer.mean_teacher is not None else None
        ),
        "optimizer": trainer.optimizer.state_dict(),
        "np_rng_state": trainer.rng.bit_generator.state,
        "metrics": trainer.metrics,
        "teacher_checksums": trainer.teacher_checksums,
    }
    torch.save(blob, path)


def load_train_state(path):
    blob = torch.load(path, map_location="cpu", weights_only=False)
    version = blob.get("format_version")
    if version != TRAIN_STATE_VERSION:
        raise ValueError(f"unsupported training checkpoint version {version!r}")
    return blob
