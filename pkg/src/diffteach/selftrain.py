"""Teacher-student self-training across a domain gap.

Training runs in two phases. During burn-in the student sees only labeled
source images (strongly augmented). Afterwards each step mixes half a batch
of source images with half a batch of unlabeled target images: a frozen
teacher labels the weakly augmented target view, the surviving boxes above
the confidence threshold become hard pseudo labels, and the student trains on
a strong view of the same image with the boxes mapped through the extra
geometry. An exponential-moving-average copy of the student ("mean teacher")
is maintained from the phase boundary onward and is the final model.

Teacher variants:
  ddt                  frozen diffusion-feature detector labels; EMA tracked
  no_mean_teacher      diffusion teacher labels; no EMA copy
  no_diffusion_teacher the EMA copy itself labels (classic mean teacher)
  no_teacher           no pseudo labels; source-only for the full schedule
  source_only          alias used by the baseline CLI mode
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .augment import AugmentationPolicy, augment
from .backbone import module_checksum
from .boxes import BoxSet
from .data import DetectionDataset
from .detector import MiniDetector, detect, detection_loss
from .diffusion_pretrain import images_to_tensor
from .evaluation import evaluate_detections
from .validation import check_fraction, check_in, check_positive_int

TEACHER_MODES = ("ddt", "no_mean_teacher", "no_diffusion_teacher", "no_teacher", "source_only")
_MODES_WITH_EMA = ("ddt", "no_diffusion_teacher")
_MODES_WITH_DIFFUSION = ("ddt", "no_mean_teacher")


@dataclass
class SelfTrainingConfig:
    total_steps: int = 600
    burn_in_fraction: float = 0.6
    batch_size: int = 8
    sigma: float = 0.5
    unsup_weight: float = 1.0
    ema_alpha: float = 0.999
    teacher_mode: str = "ddt"
    base_lr: float = 0.02  # scaled by batch_size / 16
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_milestones: tuple = (0.8, 0.9)
    decay_factor: float = 0.1
    eval_every: int = 0  # 0 picks total_steps // 20

    def __post_init__(self):
        check_positive_int("total_steps", self.total_steps)
        check_positive_int("batch_size", self.batch_size)
        check_fraction("burn_in_fraction", self.burn_in_fraction)
        check_fraction("sigma", self.sigma)
        check_fraction("ema_alpha", self.ema_alpha)
        check_in("teacher_mode", self.teacher_mode, TEACHER_MODES)
        if self.unsup_weight < 0:
            raise ValueError("unsup_weight must be non-negative")
        if self.batch_size % 2 != 0:
            raise ValueError("batch_size must be even (half source, half target)")
        self.decay_milestones = tuple(self.decay_milestones)

    @property
    def burn_in_steps(self):
        return int(round(self.total_steps * self.burn_in_fraction))


def combined_loss(supervised, unsupervised, weight):
    """supervised + weight * unsupervised, with finite/positive checks."""
    if weight < 0:
        raise ValueError("loss weight must be non-negative")
    total = supervised + weight * unsupervised
    value = float(total.detach()) if torch.is_tensor(total) else float(total)
    if not np.isfinite(value):
        raise RuntimeError(f"combined loss is non-finite: {value}")
    return total


def ema_update(teacher, student, alpha):
    """teacher <- alpha * teacher + (1 - alpha) * student.

    Accepts module pairs (updated in place, buffers copied from the student),
    dicts of tensors, or bare tensors/arrays (returned as new values). The
    arithmetic stays in the operands' dtype.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    if isinstance(teacher, nn.Module):
        with torch.no_grad():
            for tp, sp in zip(teacher.parameters(), student.parameters()):
                tp.mul_(alpha).add_(sp, alpha=1.0 - alpha)
            for tb, sb in zip(teacher.buffers(), student.buffers()):
                tb.copy_(sb)
        return teacher
    if isinstance(teacher, dict):
        return {k: ema_update(v, student[k], alpha) for k, v in teacher.items()}
    return alpha * teacher + (1.0 - alpha) * student


def filter_by_score(dets: BoxSet, threshold):
    if dets.scores is None:
        raise ValueError("filter_by_score needs scored detections")
    keep = np.flatnonzero(dets.scores >= threshold)
    return dets.select(keep)


def generate_pseudo_labels(teacher: MiniDetector, images, sigma, image_ids=None):
    """Detect on (weak views of) images and keep boxes scoring >= sigma.

    Returns one BoxSet per image; scores are retained so callers can
    re-threshold a frozen dump.
    """
    check_fraction("sigma", sigma)
    dets = detect(teacher, images, image_ids=image_ids)
    return [filter_by_score(d, sigma) for d in dets]


def _sample_indices(rng, count, size):
    if count >= size:
        return rng.choice(count, size=size, replace=False)
    return rng.choice(count, size=size, replace=True)


class SelfTrainer:
    """Owns the student, the optional teachers, the optimizer, and all RNG.

    Determinism contract: given the same datasets, config, and seed, two
    trainers produce bitwise-identical students. The only randomness consumed
    during training flows through self.rng (numpy); the frozen diffusion
    teacher derives its probe noise from image ids.
    """

    def __init__(
        self,
        student: MiniDetector,
        config: SelfTrainingConfig,
        data,
        seed=0,
        diffusion_teacher: MiniDetector = None,
        weak_policy: AugmentationPolicy = None,
        strong_policy: AugmentationPolicy = None,
    ):
        for key in ("source_train", "target_train", "target_val"):
            if key not in data:
                raise ValueError(f"data is missing the {key!r} split")
        mode = config.teacher_mode
        if mode in _MODES_WITH_DIFFUSION and diffusion_teacher is None:
            raise ValueError(f"teacher_mode {mode!r} needs a diffusion teacher")
        if mode not in _MODES_WITH_DIFFUSION and diffusion_teacher is not None:
            raise ValueError(f"teacher_mode {mode!r} does not take a diffusion teacher")
        self.student = student
        self.config = config
        self.data = data
        self.seed = seed
        self.diffusion_teacher = diffusion_teacher
        if diffusion_teacher is not None:
            diffusion_teacher.requires_grad_(False)
            diffusion_teacher.eval()
        self.mean_teacher = None
        self.rng = np.random.default_rng(seed)
        self.weak_policy = weak_policy or AugmentationPolicy.weak()
        self.strong_policy = strong_policy or AugmentationPolicy.strong()
        self.optimizer = torch.optim.SGD(
            student.trainable_parameters(),
            lr=self._lr_at(1),
            momentum=config.momentum,
            weight_decay=config.weight_decay,
        )
        self.step = 0
        self.metrics = []
        self.teacher_checksums = []
        self._teacher_eval_cache = {}
        if self.diffusion_teacher is not None:
            self.teacher_checksums.append(module_checksum(self.diffusion_teacher))

    # -- schedule ---------------------------------------------------------

    def _lr_at(self, step):
        lr = self.config.base_lr * self.config.batch_size / 16.0
        frac = step / self.config.total_steps
        for m in self.config.decay_milestones:
            if frac > m:
                lr *= self.config.decay_factor
        return lr

    def _apply_lr(self):
        lr = self._lr_at(self.step)
        for group in self.optimizer.param_groups:
            group["lr"] = lr

    # -- batch assembly ---------------------------------------------------

    def _labeled_batch(self, dataset: DetectionDataset, count, policy):
        idx = _sample_indices(self.rng, len(dataset), count)
        imgs, gts = [], []
        for i in idx:
            img, gt = augment(dataset.images[i], dataset.annotations[i], policy, self.rng)
            imgs.append(img)
            gts.append(gt)
        return images_to_tensor(imgs), gts

    def _pseudo_batch(self, count):
        """Weak view -> teacher labels -> strong view on top.

        Images whose labels all fall below sigma are dropped so they add
        nothing to the unsupervised loss.
        """
        dataset = self.data["target_train"]
        idx = _sample_indices(self.rng, len(dataset), count)
        weak_imgs, ids = [], []
        for i in idx:
            img, _ = augment(
                dataset.images[i], BoxSet.empty(), self.weak_policy, self.rng
            )
            weak_imgs.append(img)
            ids.append(dataset.image_ids[i])
        teacher = (
            self.diffusion_teacher
            if self.config.teacher_mode in _MODES_WITH_DIFFUSION
            else self.mean_teacher
        )
        with torch.no_grad():
            pseudo = generate_pseudo_labels(
                teacher, images_to_tensor(weak_imgs), self.config.sigma, image_ids=ids
            )
        imgs, gts = [], []
        for img, labels in zip(weak_imgs, pseudo):
            if len(labels) == 0:
                continue
            strong_img, strong_labels = augment(img, labels, self.strong_policy, self.rng)
            if len(strong_labels) == 0:
                continue
            imgs.append(strong_img)
            gts.append(BoxSet(boxes=strong_labels.boxes, labels=strong_labels.labels))
        if not imgs:
            return None, []
        return images_to_tensor(imgs), gts

    # -- steps ------------------------------------------------------------

    def _phase_two_active(self):
        return (
            self.config.teacher_mode not in ("no_teacher", "source_only")
            and self.step > self.config.burn_in_steps
        )

    def _ensure_mean_teacher(self):
        if self.mean_teacher is None and self.config.teacher_mode in _MODES_WITH_EMA:
            self.mean_teacher = copy.deepcopy(self.student)
            self.mean_teacher.requires_grad_(False)
            self.mean_teacher.eval()

    def train_step(self):
        """Advance one optimizer step; returns a small loss record."""
        self.step += 1
        self._apply_lr()
        self.student.train()
        cfg = self.config
        if not self._phase_two_active():
            images, gts = self._labeled_batch(
                self.data["source_train"], cfg.batch_size, self.strong_policy
            )
            sup = detection_loss(self.student, images, gts, self.rng)["total"]
            unsup = torch.zeros(())
            total = sup
        else:
            self._ensure_mean_teacher()
            half = cfg.batch_size // 2
            images, gts = self._labeled_batch(
                self.data["source_train"], half, self.strong_policy
            )
            sup = detection_loss(self.student, images, gts, self.rng)["total"]
            t_images, t_gts = self._pseudo_batch(half)
            if t_images is None:
                unsup = torch.zeros(())
            else:
                unsup = detection_loss(self.student, t_images, t_gts, self.rng)["total"]
            total = combined_loss(sup, unsup, cfg.unsup_weight)
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()
        if self.step > cfg.burn_in_steps:
            self._ensure_mean_teacher()
            if self.mean_teacher is not None:
                ema_update(self.mean_teacher, self.student, cfg.ema_alpha)
        return {
            "step": self.step,
            "loss": float(total.detach()),
            "sup": float(sup.detach()),
            "unsup": float(unsup.detach()),
        }

    # -- evaluation and logging -------------------------------------------

    def evaluate_role(self, role, split="target_val"):
        dataset = self.data[split]
        if role == "student":
            model, ids_needed = self.student, False
        elif role == "mean_teacher":
            model, ids_needed = self.mean_teacher, False
        elif role == "diffusion_teacher":
            model, ids_needed = self.diffusion_teacher, True
        else:
            raise ValueError(f"unknown role {role!r}")
        if model is None:
            return None
        if role == "diffusion_teacher" and split in self._teacher_eval_cache:
            # the teacher is frozen and its features are deterministic, so
            # its score cannot change; compute once and reuse
            return self._teacher_eval_cache[split]
        dets = []
        bs = 8
        for lo in range(0, len(dataset), bs):
            images = images_to_tensor(dataset.images[lo : lo + bs])
            ids = dataset.image_ids[lo : lo + bs] if ids_needed else None
            dets.extend(detect(model, images, image_ids=ids))
        report = evaluate_detections(dets, dataset.annotations, dataset.categories)
        if role == "diffusion_teacher":
            self._teacher_eval_cache[split] = report
        return report

    def log_metrics(self, splits=("target_val",)):
        for split in splits:
            for role in ("student", "mean_teacher", "diffusion_teacher"):
                report = self.evaluate_role(role, split)
                if report is None:
                    continue
                self.metrics.append(
                    {
                        "step": self.step,
                        "role": role,
                        "split": split,
                        "mAP": report.map,
                        "per_class_ap": report.per_class,
                    }
                )
        if self.diffusion_teacher is not None:
            self.teacher_checksums.append(module_checksum(self.diffusion_teacher))

    def eval_steps(self):
        cfg = self.config
        every = cfg.eval_every or max(1, cfg.total_steps // 20)
        steps = set(range(every, cfg.total_steps + 1, every))
        steps.add(cfg.burn_in_steps)
        steps.add(cfg.total_steps)
        steps.discard(0)
        return sorted(steps)

    def run(self, metrics_path=None, splits=("target_val",)):
        """Train to total_steps, logging at the eval schedule.

        Returns the metrics list. The final model is the mean teacher when
        one is tracked, otherwise the student (see final_model()).
        """
        eval_at = set(self.eval_steps())
        writer = open(metrics_path, "a") if metrics_path else None
        try:
            wrote = len(self.metrics)
            while self.step < self.config.total_steps:
                self.train_step()
                if self.step in eval_at:
                    self.log_metrics(splits=splits)
                    if writer:
                        for rec in self.metrics[wrote:]:
                            writer.write(json.dumps(rec, sort_keys=True) + "\n")
                        writer.flush()
                        wrote = len(self.metrics)
        finally:
            if writer:
                writer.close()
        return self.metrics

    def final_model(self):
        return self.mean_teacher if self.mean_teacher is not None else self.student

    def final_role(self):
        return "mean_teacher" if self.mean_teacher is not None else "student"


@dataclass
class TeacherTrainConfig:
    """Supervised training of the diffusion-feature detector on source."""

    steps: int = 400
    batch_size: int = 8
    base_lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_milestones: tuple = (0.8, 0.9)
    decay_factor: float = 0.1
    flip_p: float = 0.5

    def __post_init__(self):
        check_positive_int("steps", self.steps)
        check_positive_int("batch_size", self.batch_size)
        self.decay_milestones = tuple(self.decay_milestones)


def _flip_boxes(gt: BoxSet, width):
    if len(gt) == 0:
        return gt
    boxes = gt.boxes.copy()
    boxes[:, 0] = width - boxes[:, 0] - boxes[:, 2]
    return BoxSet(boxes=boxes, labels=gt.labels.copy())


# flipped variants get their own noise stream, separated from the originals
_FLIP_ID_OFFSET = 1 << 20


def train_diffusion_teacher(detector: MiniDetector, dataset, config, seed=0):
    """Train the bottleneck and heads on labeled source images.

    The denoiser is frozen, so the taps of every image (and of its mirror,
    the only geometric augmentation used here) are computed once and cached;
    each step then costs only the trainable half of the network. Returns a
    history of loss records.
    """
    from .backbone import DiffusionBackbone

    if not isinstance(detector.backbone, DiffusionBackbone):
        raise TypeError("train_diffusion_teacher expects a diffusion backbone")
    backbone = detector.backbone
    side = dataset.image_side
    rng = np.random.default_rng(seed)
    cache = {}
    with torch.no_grad():
        for i in range(len(dataset)):
            img = dataset.images[i]
            iid = dataset.image_ids[i]
            for flip in (0, 1):
                arr = img[:, ::-1, :].copy() if flip else img
                cache[(i, flip)] = _extract_for_cache(
                    backbone, arr, iid + flip * _FLIP_ID_OFFSET
                )
    opt = torch.optim.SGD(
        detector.trainable_parameters(),
        lr=config.base_lr * config.batch_size / 16.0,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    history = []
    detector.train()
    for step in range(1, config.steps + 1):
        lr = config.base_lr * config.batch_size / 16.0
        for m in config.decay_milestones:
            if step / config.steps > m:
                lr *= config.decay_factor
        for group in opt.param_groups:
            group["lr"] = lr
        idx = _sample_indices(rng, len(dataset), config.batch_size)
        flips = rng.random(config.batch_size) < config.flip_p
        taps = _batch_cached_taps([cache[(int(i), int(f))] for i, f in zip(idx, flips)])
        gts = [
            _flip_boxes(dataset.annotations[int(i)], side) if f else dataset.annotations[int(i)]
            for i, f in zip(idx, flips)
        ]
        pyramid = detector.pyramid_from_taps(taps, (side, side))
        loss = detection_loss(
            detector, None, gts, rng, pyramid=pyramid, image_hw=(side, side)
        )["total"]
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step == 1 or step % 25 == 0 or step == config.steps:
            history.append({"step": step, "loss": float(loss.detach())})
    detector.eval()
    return history


def _extract_for_cache(backbone, image_array, image_id):
    from .backbone import extract_taps

    tensor = images_to_tensor([image_array])
    return extract_taps(
        backbone.denoiser,
        backbone.schedule,
        tensor,
        backbone.feature_config,
        image_ids=[image_id],
    )


def _batch_cached_taps(per_image):
    """Stack per-image tap lists into batched tap lists."""
    n_times = len(per_image[0])
    out = []
    for t in range(n_times):
        out.append(
            [
                torch.cat([item[t][lvl] for item in per_image], dim=0)
                for lvl in range(4)
            ]
        )
    return out


def resume_trainer(blob, data, diffusion_teacher=None):
    """Rebuild a SelfTrainer from load_train_state output, bit-for-bit."""
    from .checkpoints import detector_from_blob

    config = SelfTrainingConfig(**{
        **blob["config"],
        "decay_milestones": tuple(blob["config"]["decay_milestones"]),
    })
    student = detector_from_blob(blob["student"])
    trainer = SelfTrainer(
        student,
        config,
        data,
        seed=0,
        diffusion_teacher=diffusion_teacher,
    )
    trainer.step = blob["step"]
    if blob["mean_teacher"] is not None:
        trainer.mean_teacher = detector_from_blob(blob["mean_teacher"])
        trainer.mean_teacher.requires_grad_(False)
        trainer.mean_teacher.eval()
    trainer.optimizer = torch.optim.SGD(
        student.trainable_parameters(),
        lr=config.base_lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    trainer.optimizer.load_state_dict(blob["optimizer"])
    trainer.rng = np.random.default_rng()
    trainer.rng.bit_generator.state = blob["np_rng_state"]
    trainer.metrics = list(blob["metrics"])
    trainer.teacher_checksums = list(blob["teacher_checksums"])
    return trainer
