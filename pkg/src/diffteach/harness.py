"""End-to-end experiment runners behind the CLI verbs.

Each runner owns one artifact directory: it takes a run lock, writes the
resolved config with input hashes, produces its outputs, and releases the
lock. Runners are plain functions so tests can drive them without the CLI.
"""

from __future__ import annotations

import json
import os
from contextlib import contextmanager
from dataclasses import asdict

import numpy as np
import torch

from . import plots
from .augment import AugmentationPolicy
from .backbone import ConvBackbone, DiffusionBackbone, FeatureExtractionConfig
from .checkpoints import (
    load_detector,
    load_train_state,
    save_detector,
    save_train_state,
)
from .config import ExperimentConfig, sha256_file, write_resolved_config
from .data import generate_domain_pair, read_dataset, write_dataset
from .denoiser import TinyUNet, load_denoiser, save_denoiser
from .detector import MiniDetector, detect
from .diffusion_pretrain import images_to_tensor, pretrain_denoiser
from .evaluation import evaluate_detections
from .schedules import build_schedule
from .selftrain import (
    SelfTrainer,
    resume_trainer,
    train_diffusion_teacher,
)

SPLIT_NAMES = ("source_train", "source_val", "target_train", "target_val")

CLI_MODES = {
    "baseline": "source_only",
    "ddt": "ddt",
    "no_mean_teacher": "no_mean_teacher",
    "no_diffusion_teacher": "no_diffusion_teacher",
    "no_teacher": "no_teacher",
}


class RunLockError(RuntimeError):
    pass


@contextmanager
def run_lock(out_dir):
    """Guard an artifact directory against concurrent or clobbering runs."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLockError(
            f"{out_dir} is locked by another run (delete {path} if that run is dead)"
        )
    with os.fdopen(fd, "w") as fh:
        fh.write(str(os.getpid()))
    try:
        yield out_dir
    finally:
        os.remove(path)


def run_gen_data(config: ExperimentConfig, out_dir):
    """Render both domains and write the four splits.

    The target-train JSON is written without annotations; the full labels go
    to target_train.oracle.json for upper-bound experiments only.
    """
    with run_lock(out_dir):
        datasets = generate_domain_pair(config.data)
        paths = {}
        for name in SPLIT_NAMES:
            ds = datasets[name]
            if name == "target_train":
                paths[name] = write_dataset(ds, out_dir, name, include_annotations=False)
                paths[name + ".oracle"] = write_dataset(ds, out_dir, name + ".oracle")
            else:
                paths[name] = write_dataset(ds, out_dir, name)
        write_resolved_config(
            config, os.path.join(out_dir, "resolved_config.json")
        )
    return paths


def load_splits(data_dir, with_target_train_labels=False):
    out = {}
    for name in SPLIT_NAMES:
        path = os.path.join(data_dir, f"{name}.json")
        if name == "target_train" and with_target_train_labels:
            oracle = os.path.join(data_dir, "target_train.oracle.json")
            if os.path.exists(oracle):
                path = oracle
        out[name] = read_dataset(path)
    return out


def split_paths(data_dir):
    return [os.path.join(data_dir, f"{n}.json") for n in SPLIT_NAMES]


def run_pretrain(config: ExperimentConfig, data_dir, out_dir):
    """Pretrain the denoiser on the unlabeled union of both domains."""
    with run_lock(out_dir):
        splits = load_splits(data_dir)
        pool = splits["source_train"].images + splits["target_train"].images
        schedule = build_schedule(**config.schedule)
        model, history = pretrain_denoiser(
            pool, schedule, config.pretrain, config.denoiser, seed=config.seed
        )
        ckpt = os.path.join(out_dir, "denoiser.pt")
        save_denoiser(ckpt, model, schedule)
        with open(os.path.join(out_dir, "loss_curve.json"), "w") as fh:
            json.dump(history, fh, sort_keys=True, indent=1)
        plots.loss_curve(history, os.path.join(out_dir, "loss_curve.png"))
        write_resolved_config(
            config,
            os.path.join(out_dir, "resolved_config.json"),
            input_paths=split_paths(data_dir)[:1] + split_paths(data_dir)[2:3],
        )
    return ckpt


def build_teacher(config: ExperimentConfig, denoiser, schedule):
    backbone = DiffusionBackbone(
        denoiser,
        schedule,
        config.features,
        out_channels=config.teacher_out_channels,
    )
    return MiniDetector(backbone, config.teacher_detector)


def build_student(config: ExperimentConfig):
    return MiniDetector(
        ConvBackbone(config.student_backbone_channels), config.student_detector
    )


def run_train_teacher(config: ExperimentConfig, data_dir, denoiser_path, out_dir):
    """Supervised teacher training on source with the frozen denoiser."""
    with run_lock(out_dir):
        splits = load_splits(data_dir)
        denoiser, schedule = load_denoiser(denoiser_path)
        torch.manual_seed(config.seed)
        teacher = build_teacher(config, denoiser, schedule)
        before = teacher.backbone.frozen_checksum()
        history = train_diffusion_teacher(
            teacher, splits["source_train"], config.teacher_train, seed=config.seed
        )
        after = teacher.backbone.frozen_checksum()
        if before != after:
            raise RuntimeError("frozen denoiser weights changed during teacher training")
        ckpt = os.path.join(out_dir, "teacher.pt")
        save_detector(ckpt, teacher, extra={"history": history})
        report = evaluate_checkpoint(teacher, splits["source_val"], needs_ids=True)
        tgt_report = evaluate_checkpoint(teacher, splits["target_val"], needs_ids=True)
        with open(os.path.join(out_dir, "eval.json"), "w") as fh:
            fh.write(
                json.dumps(
                    {
                        "source_val_map": report.map,
                        "target_val_map": tgt_report.map,
                        "denoiser_checksum": after,
                    },
                    sort_keys=True,
                    indent=1,
                )
            )
        write_resolved_config(
            config,
            os.path.join(out_dir, "resolved_config.json"),
            input_paths=[denoiser_path] + split_paths(data_dir),
        )
    return ckpt


def evaluate_checkpoint(detector, dataset, needs_ids=None, batch=8):
    if needs_ids is None:
        needs_ids = isinstance(detector.backbone, DiffusionBackbone)
    dets = []
    for lo in range(0, len(dataset), batch):
        images = images_to_tensor(dataset.images[lo : lo + batch])
        ids = dataset.image_ids[lo : lo + batch] if needs_ids else None
        dets.extend(detect(detector, images, image_ids=ids))
    return evaluate_detections(dets, dataset.annotations, dataset.categories)


def run_train(config: ExperimentConfig, mode, data_dir, out_dir, teacher_path=None, resume=False):
    """One training run (baseline or any teacher variant).

    Artifacts: metrics.jsonl, train_state.pt, student.pt, mean_teacher.pt
    (when tracked), final.pt, resolved_config.json, map_curve.png.
    """
    if mode not in CLI_MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {sorted(CLI_MODES)}")
    teacher_mode = CLI_MODES[mode]
    needs_teacher = teacher_mode in ("ddt", "no_mean_teacher")
    if needs_teacher and not teacher_path:
        raise ValueError(f"mode {mode!r} needs --teacher with a trained teacher checkpoint")
    with run_lock(out_dir):
        splits = load_splits(data_dir)
        data = {
            "source_train": splits["source_train"],
            "source_val": splits["source_val"],
            "target_train": splits["target_train"].strip_annotations(),
            "target_val": splits["target_val"],
        }
        teacher = load_detector(teacher_path) if needs_teacher else None
        metrics_path = os.path.join(out_dir, "metrics.jsonl")
        state_path = os.path.join(out_dir, "train_state.pt")
        if resume:
            if not os.path.exists(state_path):
                raise FileNotFoundError(f"cannot resume: {state_path} does not exist")
            blob = load_train_state(state_path)
            trainer = resume_trainer(blob, data, diffusion_teacher=teacher)
        else:
            if os.path.exists(metrics_path):
                os.remove(metrics_path)
            cfg = _selftrain_config_for_mode(config, teacher_mode)
            torch.manual_seed(config.seed)
            student = build_student(config)
            trainer = SelfTrainer(
                student,
                cfg,
                data,
                seed=config.seed,
                diffusion_teacher=teacher,
                weak_policy=config.weak_augment,
                strong_policy=config.strong_augment,
            )
        trainer.run(metrics_path=metrics_path)
        save_train_state(state_path, trainer)
        save_detector(os.path.join(out_dir, "student.pt"), trainer.student)
        if trainer.mean_teacher is not None:
            save_detector(os.path.join(out_dir, "mean_teacher.pt"), trainer.mean_teacher)
        save_detector(os.path.join(out_dir, "final.pt"), trainer.final_model())
        summary = {
            "mode": mode,
            "final_role": trainer.final_role(),
            "final_target_map": _last_map(trainer.metrics, trainer.final_role()),
            "teacher_checksums_constant": len(set(trainer.teacher_checksums)) <= 1,
        }
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump(summary, fh, sort_keys=True, indent=1)
        plots.map_curve(trainer.metrics, os.path.join(out_dir, "map_curve.png"))
        inputs = split_paths(data_dir) + ([teacher_path] if teacher_path else [])
        write_resolved_config(
            config, os.path.join(out_dir, "resolved_config.json"), input_paths=inputs
        )
    return summary


def _selftrain_config_for_mode(config: ExperimentConfig, teacher_mode):
    params = asdict(config.selftrain)
    params["teacher_mode"] = teacher_mode
    params["decay_milestones"] = tuple(params["decay_milestones"])
    from .selftrain import SelfTrainingConfig

    return SelfTrainingConfig(**params)


def _last_map(metrics, role, split="target_val"):
    vals = [m["mAP"] for m in metrics if m["role"] == role and m["split"] == split]
    return vals[-1] if vals else None


def run_eval(checkpoint_path, dataset_path, out_path):
    detector = load_detector(checkpoint_path)
    dataset = read_dataset(dataset_path)
    report = evaluate_checkpoint(detector, dataset)
    with open(out_path, "w") as fh:
        fh.write(report.to_json())
    csv_path = os.path.splitext(out_path)[0] + ".csv"
    report.write_csv(csv_path)
    return report


def run_analyze_errors(checkpoint_path, dataset_path, out_dir, score_min=0.5):
    """Error-taxonomy report: counts, confusion matrix, PR curves."""
    os.makedirs(out_dir, exist_ok=True)
    detector = load_detector(checkpoint_path)
    dataset = read_dataset(dataset_path)
    needs_ids = isinstance(detector.backbone, DiffusionBackbone)
    dets = []
    for lo in range(0, len(dataset), 8):
        images = images_to_tensor(dataset.images[lo : lo + 8])
        ids = dataset.image_ids[lo : lo + 8] if needs_ids else None
        dets.extend(detect(detector, images, image_ids=ids))
    from .selftrain import filter_by_score

    strong = [filter_by_score(d, score_min) for d in dets]
    report = evaluate_detections(
        strong, dataset.annotations, dataset.categories, with_errors=True
    )
    with open(os.path.join(out_dir, "errors.json"), "w") as fh:
        fh.write(report.to_json())
    with open(os.path.join(out_dir, "confusion.csv"), "w") as fh:
        names = report.class_names
        fh.write("gt\\pred," + ",".join(names) + "\n")
        for row_name, row in zip(names, report.confusion):
            fh.write(row_name + "," + ",".join(str(v) for v in row) + "\n")
    plots.pr_curves(dets, dataset, os.path.join(out_dir, "pr_curves.png"))
    return report


ABLATION_GRIDS = {
    "lambda": [0.5, 1.0, 2.0],
    "sigma": [0.3, 0.4, 0.5, 0.6, 0.7],
    "steps": [1, 2, 5],
    "augmentation": ["none", "weak", "strong"],
    "teacher": ["ddt", "no_mean_teacher", "no_diffusion_teacher", "no_teacher"],
}


def run_ablate(
    config: ExperimentConfig,
    param,
    values,
    data_dir,
    out_dir,
    teacher_path=None,
    denoiser_path=None,
):
    """Sweep one knob, retraining per value, and tabulate final target mAP.

    The probe-steps sweep changes the teacher's feature extraction, so it
    retrains the teacher per value and therefore needs denoiser_path.
    """
    if param not in ABLATION_GRIDS:
        raise ValueError(f"unknown ablation param {param!r}; choose from {sorted(ABLATION_GRIDS)}")
    values = values if values is not None else ABLATION_GRIDS[param]
    if param == "steps" and denoiser_path is None:
        raise ValueError("the steps ablation retrains the teacher; pass denoiser_path")
    rows = []
    os.makedirs(out_dir, exist_ok=True)
    for value in values:
        sub = os.path.join(out_dir, f"{param}={value}")
        cfg, mode = _apply_ablation(config, param, value)
        run_teacher_path = teacher_path
        if param == "steps":
            run_teacher_path = run_train_teacher(
                cfg, data_dir, denoiser_path, os.path.join(sub, "teacher")
            )
        summary = run_train(cfg, mode, data_dir, sub, teacher_path=run_teacher_path)
        rows.append(
            {
                "param": param,
                "value": value,
                "mode": mode,
                "final_role": summary["final_role"],
                "final_target_map": summary["final_target_map"],
            }
        )
    with open(os.path.join(out_dir, "table.json"), "w") as fh:
        json.dump(rows, fh, sort_keys=True, indent=1)
    with open(os.path.join(out_dir, "table.csv"), "w") as fh:
        fh.write("param,value,mode,final_role,final_target_map\n")
        for r in rows:
            fh.write(
                f"{r['param']},{r['value']},{r['mode']},{r['final_role']},"
                f"{r['final_target_map']}\n"
            )
    return rows


def _apply_ablation(config: ExperimentConfig, param, value):
    import copy as _copy

    cfg = _copy.deepcopy(config)
    mode = "ddt"
    if param == "lambda":
        cfg.selftrain.unsup_weight = float(value)
    elif param == "sigma":
        cfg.selftrain.sigma = float(value)
    elif param == "steps":
        steps = int(value)
        cfg.features = FeatureExtractionConfig(
            time_steps=steps,
            save_steps=min(steps, cfg.features.save_steps),
            t_high=cfg.features.t_high,
            noise_mode=cfg.features.noise_mode,
        )
    elif param == "augmentation":
        kind = str(value)
        if kind == "none":
            cfg.strong_augment = AugmentationPolicy.none()
        elif kind == "weak":
            cfg.strong_augment = AugmentationPolicy.weak()
        elif kind != "strong":
            raise ValueError(f"augmentation ablation value must be none/weak/strong, got {value!r}")
    elif param == "teacher":
        if value not in CLI_MODES or value == "baseline":
            raise ValueError(f"teacher ablation value {value!r} is not a mode")
        mode = str(value)
    return cfg, mode
