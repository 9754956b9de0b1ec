"""Experiment configuration: strict JSON parsing and resolved write-back.

Unknown keys are rejected with their dotted path so typos fail before any
compute is spent. The resolved config (all defaults filled in) is written
back into each run directory together with sha256 hashes of the input files.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

from .augment import AugmentationPolicy
from .backbone import FeatureExtractionConfig
from .data import DomainPairSpec, ShiftSpec
from .denoiser import DenoiserConfig
from .detector import DetectorConfig
from .diffusion_pretrain import PretrainConfig
from .selftrain import SelfTrainingConfig, TeacherTrainConfig


def _check_keys(section, allowed, path):
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ValueError(f"unknown config key {path}.{unknown[0]!r}")


def _build(cls, section, path, aliases=None, force=None):
    """Instantiate a dataclass from a dict section, strictly."""
    aliases = aliases or {}
    section = {aliases.get(k, k): v for k, v in dict(section).items()}
    allowed = [f.name for f in fields(cls)]
    _check_keys(section, allowed, path)
    if force:
        section.update(force)
    tupled = {
        k: tuple(v) if isinstance(v, list) else v for k, v in section.items()
    }
    return cls(**tupled)


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_root: str = "runs"
    data: DomainPairSpec = field(default_factory=DomainPairSpec)
    schedule: dict = field(default_factory=lambda: {"t_max": 1000, "beta_start": 1e-4, "beta_end": 0.02})
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    features: FeatureExtractionConfig = field(default_factory=FeatureExtractionConfig)
    teacher_detector: DetectorConfig = field(default_factory=DetectorConfig)
    teacher_out_channels: tuple = (24, 48, 96, 160)
    teacher_train: TeacherTrainConfig = field(default_factory=TeacherTrainConfig)
    student_detector: DetectorConfig = field(default_factory=DetectorConfig)
    student_backbone_channels: tuple = (32, 64, 128, 256)
    selftrain: SelfTrainingConfig = field(default_factory=SelfTrainingConfig)
    weak_augment: AugmentationPolicy = field(default_factory=AugmentationPolicy.weak)
    strong_augment: AugmentationPolicy = field(default_factory=AugmentationPolicy.strong)

    @classmethod
    def from_dict(cls, raw):
        allowed = {
            "seed",
            "output_root",
            "data",
            "schedule",
            "denoiser",
            "pretrain",
            "features",
            "teacher",
            "student",
            "selftrain",
            "augment",
        }
        _check_keys(raw, allowed, "config")
        kwargs = {}
        if "seed" in raw:
            kwargs["seed"] = int(raw["seed"])
        if "output_root" in raw:
            kwargs["output_root"] = str(raw["output_root"])
        if "data" in raw:
            data = dict(raw["data"])
            if isinstance(data.get("shift"), dict):
                data["shift"] = _build(ShiftSpec, data["shift"], "config.data.shift")
            data.setdefault("seed", kwargs.get("seed", 0))
            kwargs["data"] = _build(DomainPairSpec, data, "config.data")
        if "schedule" in raw:
            _check_keys(raw["schedule"], ("t_max", "beta_start", "beta_end"), "config.schedule")
            kwargs["schedule"] = {**cls().schedule, **raw["schedule"]}
        if "denoiser" in raw:
            den = dict(raw["denoiser"])
            den.setdefault("image_side", raw.get("data", {}).get("image_side", DomainPairSpec().image_side))
            kwargs["denoiser"] = _build(DenoiserConfig, den, "config.denoiser")
        elif "data" in raw:
            kwargs["denoiser"] = DenoiserConfig(image_side=kwargs["data"].image_side)
        if "pretrain" in raw:
            kwargs["pretrain"] = _build(PretrainConfig, raw["pretrain"], "config.pretrain")
        if "features" in raw:
            kwargs["features"] = _build(
                FeatureExtractionConfig, raw["features"], "config.features"
            )
        if "teacher" in raw:
            tch = dict(raw["teacher"])
            _check_keys(tch, ("detector", "out_channels", "train"), "config.teacher")
            if "detector" in tch:
                kwargs["teacher_detector"] = _build(
                    DetectorConfig, tch["detector"], "config.teacher.detector"
                )
            if "out_channels" in tch:
                kwargs["teacher_out_channels"] = tuple(tch["out_channels"])
            if "train" in tch:
                kwargs["teacher_train"] = _build(
                    TeacherTrainConfig, tch["train"], "config.teacher.train"
                )
        if "student" in raw:
            stu = dict(raw["student"])
            _check_keys(stu, ("detector", "backbone_channels"), "config.student")
            if "detector" in stu:
                kwargs["student_detector"] = _build(
                    DetectorConfig, stu["detector"], "config.student.detector"
                )
            if "backbone_channels" in stu:
                kwargs["student_backbone_channels"] = tuple(stu["backbone_channels"])
        if "selftrain" in raw:
            kwargs["selftrain"] = _build(
                SelfTrainingConfig,
                raw["selftrain"],
                "config.selftrain",
                aliases={"lambda": "unsup_weight"},
            )
        if "augment" in raw:
            aug = dict(raw["augment"])
            _check_keys(aug, ("weak", "strong"), "config.augment")
            if "weak" in aug:
                kwargs["weak_augment"] = _build(
                    AugmentationPolicy, aug["weak"], "config.augment.weak",
                    force={"kind": "weak"},
                )
            if "strong" in aug:
                kwargs["strong_augment"] = _build(
                    AugmentationPolicy, aug["strong"], "config.augment.strong",
                    force={"kind": "strong"},
                )
        return cls(**kwargs)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ValueError("config root must be a JSON object")
        return cls.from_dict(raw)

    def resolved(self):
        """Plain-dict view with every default filled in."""
        out = dataclasses.asdict(self)
        return json.loads(json.dumps(out, sort_keys=True, default=list))


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_resolved_config(config: ExperimentConfig, path, input_paths=None):
    blob = {"config": config.resolved()}
    if input_paths:
        blob["input_hashes"] = {str(p): sha256_file(p) for p in sorted(input_paths)}
    with open(path, "w") as fh:
        json.dump(blob, fh, sort_keys=True, indent=1)
    return path
