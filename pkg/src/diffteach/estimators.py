"""scikit-learn style wrappers around the training pipelines.

These expose fit/predict/transform/score with get_params/set_params so the
pieces compose with sklearn tooling (cloning, grid search over the numeric
knobs). Heavy state created by fit lives in trailing-underscore attributes;
__init__ only stores its arguments, per the sklearn contract.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin

from .backbone import ConvBackbone, DiffusionBackbone, FeatureExtractionConfig, extract_taps
from .data import DetectionDataset
from .denoiser import DenoiserConfig
from .detector import DetectorConfig, MiniDetector, detect
from .diffusion_pretrain import PretrainConfig, images_to_tensor, pretrain_denoiser
from .evaluation import evaluate_detections
from .schedules import build_schedule
from .selftrain import (
    SelfTrainer,
    SelfTrainingConfig,
    TeacherTrainConfig,
    train_diffusion_teacher,
)


def _check_dataset(name, ds):
    if not isinstance(ds, DetectionDataset):
        raise TypeError(f"{name} must be a DetectionDataset, got {type(ds).__name__}")
    if len(ds) == 0:
        raise ValueError(f"{name} is empty")
    return ds


def _check_images(images):
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = [images]
    arrs = [np.asarray(im) for im in images]
    for k, a in enumerate(arrs):
        if a.ndim != 3 or a.shape[2] != 3 or a.dtype != np.uint8:
            raise ValueError(f"image {k} must be HWC uint8 RGB, got {a.dtype} {a.shape}")
    return arrs


class DiffusionFeatureExtractor(BaseEstimator, TransformerMixin):
    """Unsupervised denoiser pretraining + frozen feature probing.

    fit(images) pretrains the denoiser on the image list; transform(images)
    returns, per image, the list over kept probe steps of 4 tap arrays
    (deepest first).
    """

    def __init__(
        self,
        image_side=96,
        stage_channels=(32, 64, 128, 256),
        t_max=1000,
        beta_start=1e-4,
        beta_end=0.02,
        steps=2000,
        batch_size=8,
        lr=2e-4,
        time_steps=5,
        save_steps=5,
        t_high=500,
        seed=0,
    ):
        self.image_side = image_side
        self.stage_channels = stage_channels
        self.t_max = t_max
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.time_steps = time_steps
        self.save_steps = save_steps
        self.t_high = t_high
        self.seed = seed

    def fit(self, X, y=None):
        images = _check_images(X)
        schedule = build_schedule(self.t_max, self.beta_start, self.beta_end)
        model, history = pretrain_denoiser(
            images,
            schedule,
            PretrainConfig(steps=self.steps, batch_size=self.batch_size, lr=self.lr),
            DenoiserConfig(image_side=self.image_side, stage_channels=tuple(self.stage_channels)),
            seed=self.seed,
        )
        self.denoiser_ = model
        self.schedule_ = schedule
        self.history_ = history
        self.feature_config_ = FeatureExtractionConfig(
            time_steps=self.time_steps, save_steps=self.save_steps, t_high=self.t_high
        )
        return self

    def transform(self, X):
        if not hasattr(self, "denoiser_"):
            raise RuntimeError("call fit before transform")
        images = _check_images(X)
        out = []
        for k, img in enumerate(images):
            taps = extract_taps(
                self.denoiser_,
                self.schedule_,
                images_to_tensor([img]),
                self.feature_config_,
                image_ids=[k],
            )
            out.append([[lvl.numpy()[0] for lvl in per_t] for per_t in taps])
        return out


class SupervisedDetector(BaseEstimator):
    """Source-only detector training; the lower bound in all comparisons."""

    def __init__(
        self,
        backbone_channels=(32, 64, 128, 256),
        head_channels=64,
        roi_hidden=256,
        num_classes=3,
        total_steps=600,
        batch_size=8,
        base_lr=0.02,
        seed=0,
    ):
        self.backbone_channels = backbone_channels
        self.head_channels = head_channels
        self.roi_hidden = roi_hidden
        self.num_classes = num_classes
        self.total_steps = total_steps
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.seed = seed

    def _build(self):
        torch.manual_seed(self.seed)
        return MiniDetector(
            ConvBackbone(tuple(self.backbone_channels)),
            DetectorConfig(
                num_classes=self.num_classes,
                head_channels=self.head_channels,
                roi_hidden=self.roi_hidden,
            ),
        )

    def fit(self, X, y=None):
        """X: a labeled DetectionDataset."""
        dataset = _check_dataset("X", X)
        config = SelfTrainingConfig(
            total_steps=self.total_steps,
            batch_size=self.batch_size,
            base_lr=self.base_lr,
            teacher_mode="source_only",
        )
        data = {
            "source_train": dataset,
            "target_train": dataset.strip_annotations(),
            "target_val": dataset,
        }
        trainer = SelfTrainer(self._build(), config, data, seed=self.seed)
        while trainer.step < config.total_steps:
            trainer.train_step()
        self.detector_ = trainer.student
        return self

    def predict(self, X):
        if not hasattr(self, "detector_"):
            raise RuntimeError("call fit before predict")
        images = _check_images(X)
        out = []
        for lo in range(0, len(images), 8):
            out.extend(detect(self.detector_, images_to_tensor(images[lo : lo + 8])))
        return out

    def score(self, X, y=None):
        """mAP at IoU 0.5 on a labeled DetectionDataset."""
        dataset = _check_dataset("X", X)
        dets = self.predict(dataset.images)
        return evaluate_detections(dets, dataset.annotations, dataset.categories).map


class DomainAdaptiveDetector(BaseEstimator):
    """Full pipeline: frozen diffusion teacher + student + mean teacher.

    fit(source_dataset, target_dataset) pretrains the denoiser on both
    domains, trains the teacher on source, then self-trains the student on
    the unlabeled target. predict runs the final model (the mean teacher).
    """

    def __init__(
        self,
        denoiser_channels=(32, 64, 128, 256),
        pretrain_steps=2000,
        time_steps=5,
        save_steps=5,
        t_high=500,
        teacher_out_channels=(24, 48, 96, 160),
        teacher_steps=400,
        backbone_channels=(32, 64, 128, 256),
        head_channels=64,
        total_steps=600,
        burn_in_fraction=0.6,
        batch_size=8,
        sigma=0.5,
        unsup_weight=1.0,
        ema_alpha=0.999,
        teacher_mode="ddt",
        seed=0,
    ):
        self.denoiser_channels = denoiser_channels
        self.pretrain_steps = pretrain_steps
        self.time_steps = time_steps
        self.save_steps = save_steps
        self.t_high = t_high
        self.teacher_out_channels = teacher_out_channels
        self.teacher_steps = teacher_steps
        self.backbone_channels = backbone_channels
        self.head_channels = head_channels
        self.total_steps = total_steps
        self.burn_in_fraction = burn_in_fraction
        self.batch_size = batch_size
        self.sigma = sigma
        self.unsup_weight = unsup_weight
        self.ema_alpha = ema_alpha
        self.teacher_mode = teacher_mode
        self.seed = seed

    def fit(self, X, y=None, target=None, target_val=None):
        """X: labeled source DetectionDataset; target: unlabeled target
        DetectionDataset (labels, if present, are stripped)."""
        source = _check_dataset("X", X)
        if target is None:
            raise ValueError("fit needs target= with the unlabeled target dataset")
        target = _check_dataset("target", target)
        num_classes = len(source.categories)
        side = source.image_side
        needs_diffusion = self.teacher_mode in ("ddt", "no_mean_teacher")
        teacher = None
        if needs_diffusion:
            pool = source.images + target.images
            schedule = build_schedule()
            denoiser, self.pretrain_history_ = pretrain_denoiser(
                pool,
                schedule,
                PretrainConfig(steps=self.pretrain_steps),
                DenoiserConfig(image_side=side, stage_channels=tuple(self.denoiser_channels)),
                seed=self.seed,
            )
            torch.manual_seed(self.seed)
            teacher = MiniDetector(
                DiffusionBackbone(
                    denoiser,
                    schedule,
                    FeatureExtractionConfig(
                        time_steps=self.time_steps,
                        save_steps=self.save_steps,
                        t_high=self.t_high,
                    ),
                    out_channels=tuple(self.teacher_out_channels),
                ),
                DetectorConfig(num_classes=num_classes, head_channels=self.head_channels),
            )
            self.teacher_history_ = train_diffusion_teacher(
                teacher, source, TeacherTrainConfig(steps=self.teacher_steps), seed=self.seed
            )
            self.teacher_ = teacher
        torch.manual_seed(self.seed)
        student = MiniDetector(
            ConvBackbone(tuple(self.backbone_channels)),
            DetectorConfig(num_classes=num_classes, head_channels=self.head_channels),
        )
        config = SelfTrainingConfig(
            total_steps=self.total_steps,
            burn_in_fraction=self.burn_in_fraction,
            batch_size=self.batch_size,
            sigma=self.sigma,
            unsup_weight=self.unsup_weight,
            ema_alpha=self.ema_alpha,
            teacher_mode=self.teacher_mode,
        )
        data = {
            "source_train": source,
            "target_train": target.strip_annotations(),
            "target_val": target_val if target_val is not None else target,
        }
        trainer = SelfTrainer(
            student, config, data, seed=self.seed, diffusion_teacher=teacher
        )
        while trainer.step < config.total_steps:
            trainer.train_step()
        self.trainer_ = trainer
        self.detector_ = trainer.final_model()
        return self

    def predict(self, X):
        if not hasattr(self, "detector_"):
            raise RuntimeError("call fit before predict")
        images = _check_images(X)
        needs_ids = isinstance(self.detector_.backbone, DiffusionBackbone)
        out = []
        for lo in range(0, len(images), 8):
            chunk = images[lo : lo + 8]
            ids = list(range(lo, lo + len(chunk))) if needs_ids else None
            out.extend(detect(self.detector_, images_to_tensor(chunk), image_ids=ids))
        return out

    def score(self, X, y=None):
        dataset = _check_dataset("X", X)
        dets = self.predict(dataset.images)
        return evaluate_detections(dets, dataset.annotations, dataset.categories).map
