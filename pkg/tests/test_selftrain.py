"""Tests for teacher-student self-training: EMA updates, pseudo-label
filtering, phase transitions, teacher freezing, and checkpoint resume."""

import copy
import json

import numpy as np
import pytest
import torch
from torch import nn

from diffteach.backbone import (
    ConvBackbone,
    DiffusionBackbone,
    FeatureExtractionConfig,
    module_checksum,
)
from diffteach.boxes import BoxSet
from diffteach.checkpoints import (
    detector_blob,
    detector_from_blob,
    load_detector,
    load_train_state,
    save_detector,
    save_train_state,
)
from diffteach.data import DomainPairSpec, generate_domain_pair
from diffteach.denoiser import DenoiserConfig, TinyUNet
from diffteach.detector import DetectorConfig, MiniDetector
from diffteach.diffusion_pretrain import images_to_tensor
from diffteach.schedules import build_schedule
from diffteach.selftrain import (
    SelfTrainer,
    SelfTrainingConfig,
    TeacherTrainConfig,
    _flip_boxes,
    combined_loss,
    ema_update,
    filter_by_score,
    generate_pseudo_labels,
    resume_trainer,
    train_diffusion_teacher,
)

from oracles import ema_closed_form

SIDE = 32


def tiny_det_config(**overrides):
    base = dict(
        num_classes=3,
        head_channels=16,
        roi_size=3,
        roi_hidden=32,
        rpn_batch=32,
        pre_nms_top=50,
        post_nms_top=20,
        roi_batch=8,
        max_detections=15,
    )
    base.update(overrides)
    return DetectorConfig(**base)


def make_student(seed):
    torch.manual_seed(seed)
    return MiniDetector(ConvBackbone(stage_channels=(8, 8, 16, 16)), tiny_det_config())


def make_diffusion_teacher(seed):
    torch.manual_seed(seed)
    den = TinyUNet(DenoiserConfig(image_side=SIDE, stage_channels=(4, 8, 8, 16), time_dim=16))
    backbone = DiffusionBackbone(
        den,
        build_schedule(),
        FeatureExtractionConfig(time_steps=2, save_steps=2, t_high=100),
        out_channels=(8, 8, 16, 16),
    )
    return MiniDetector(backbone, tiny_det_config())


def short_config(**overrides):
    base = dict(
        total_steps=6,
        burn_in_fraction=0.5,
        batch_size=4,
        sigma=0.5,
        ema_alpha=0.9,
        eval_every=3,
        base_lr=0.02,
    )
    base.update(overrides)
    return SelfTrainingConfig(**base)


@pytest.fixture(scope="module")
def splits():
    pair = generate_domain_pair(
        DomainPairSpec(
            image_side=SIDE, train_images=6, val_images=3, min_objects=1, max_objects=2, seed=11
        )
    )
    return {
        "source_train": pair["source_train"],
        "target_train": pair["target_train"].strip_annotations(),
        "target_val": pair["target_val"],
    }


class TestConfig:
    def test_burn_in_steps_rounds(self):
        assert SelfTrainingConfig(total_steps=10, burn_in_fraction=0.6).burn_in_steps == 6
        assert SelfTrainingConfig(total_steps=9, burn_in_fraction=0.6).burn_in_steps == 5
        assert SelfTrainingConfig(total_steps=10, burn_in_fraction=0.0).burn_in_steps == 0

    def test_odd_batch_rejected(self):
        with pytest.raises(ValueError, match="even"):
            SelfTrainingConfig(batch_size=5)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError, match="teacher_mode"):
            SelfTrainingConfig(teacher_mode="oracle")

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            SelfTrainingConfig(unsup_weight=-0.5)

    def test_fraction_bounds(self):
        with pytest.raises(ValueError, match="burn_in_fraction"):
            SelfTrainingConfig(burn_in_fraction=1.5)
        with pytest.raises(ValueError, match="sigma"):
            SelfTrainingConfig(sigma=-0.1)


class TestCombinedLoss:
    def test_weighted_sum(self):
        sup = torch.tensor(1.5, requires_grad=True)
        unsup = torch.tensor(2.0)
        total = combined_loss(sup, unsup, 0.5)
        assert float(total.detach()) == pytest.approx(2.5)
        assert total.requires_grad

    def test_plain_floats(self):
        assert combined_loss(1.0, 2.0, 2.0) == pytest.approx(5.0)

    def test_negative_weight(self):
        with pytest.raises(ValueError, match="non-negative"):
            combined_loss(torch.tensor(1.0), torch.tensor(1.0), -1.0)

    def test_non_finite_raises(self):
        with pytest.raises(RuntimeError, match="non-finite"):
            combined_loss(torch.tensor(1.0), torch.tensor(float("inf")), 1.0)


class TestEmaUpdate:
    @pytest.mark.parametrize("k", [1, 10, 1000])
    def test_repeated_updates_match_closed_form(self, k, rng):
        # fixed student, k applications: teacher_k = a^k t0 + (1 - a^k) s
        alpha = 0.99
        t0 = rng.normal(size=(5, 3))
        s = rng.normal(size=(5, 3))
        teacher = {"w": torch.from_numpy(t0.copy())}
        student = {"w": torch.from_numpy(s.copy())}
        for _ in range(k):
            teacher = ema_update(teacher, student, alpha)
        expected = ema_closed_form(t0, s, alpha, k)
        np.testing.assert_allclose(teacher["w"].numpy(), expected, rtol=1e-10, atol=1e-12)

    def test_arrays_returned_not_mutated(self, rng):
        t = rng.normal(size=4)
        s = rng.normal(size=4)
        t_before = t.copy()
        out = ema_update(t, s, 0.5)
        np.testing.assert_array_equal(t, t_before)
        np.testing.assert_allclose(out, 0.5 * t + 0.5 * s, rtol=1e-12)

    def test_module_updated_in_place(self):
        torch.manual_seed(0)
        teacher = nn.Sequential(nn.Linear(3, 2), nn.BatchNorm1d(2))
        torch.manual_seed(1)
        student = nn.Sequential(nn.Linear(3, 2), nn.BatchNorm1d(2))
        student(torch.randn(8, 3))  # move the running stats off their init
        alpha = 0.9
        expected = [
            tp.detach().mul(alpha).add(sp.detach(), alpha=1.0 - alpha)
            for tp, sp in zip(teacher.parameters(), student.parameters())
        ]
        out = ema_update(teacher, student, alpha)
        assert out is teacher
        for tp, want in zip(teacher.parameters(), expected):
            assert torch.equal(tp.detach(), want)
        for tb, sb in zip(teacher.buffers(), student.buffers()):
            assert torch.equal(tb, sb)

    def test_alpha_endpoints(self):
        t = torch.tensor([1.0, 2.0])
        s = torch.tensor([5.0, 6.0])
        assert torch.equal(ema_update(t, s, 1.0), t)
        assert torch.equal(ema_update(t, s, 0.0), s)

    @pytest.mark.parametrize("alpha", [-0.1, 1.1])
    def test_alpha_out_of_range(self, alpha):
        with pytest.raises(ValueError, match="alpha"):
            ema_update(torch.zeros(2), torch.ones(2), alpha)


class TestPseudoLabels:
    def test_filter_threshold_inclusive(self):
        dets = BoxSet(
            boxes=np.array([[0, 0, 5, 5], [10, 10, 5, 5], [20, 20, 5, 5]], dtype=np.float64),
            labels=np.array([1, 2, 3]),
            scores=np.array([0.2, 0.5, 0.9]),
        )
        kept = filter_by_score(dets, 0.5)  # 0.5 is exact in float32, so >= keeps it
        np.testing.assert_allclose(kept.scores, [0.5, 0.9], rtol=1e-6)
        np.testing.assert_array_equal(kept.labels, [2, 3])

    def test_filter_count_monotone_in_threshold(self, rng):
        from conftest import random_boxset

        for _ in range(10):
            dets = random_boxset(rng, 20, side=SIDE, with_scores=True)
            counts = [len(filter_by_score(dets, s)) for s in np.linspace(0.0, 1.0, 11)]
            assert counts == sorted(counts, reverse=True)
            assert counts[0] == 20  # every score is >= 0

    def test_filter_needs_scores(self):
        dets = BoxSet(
            boxes=np.array([[0.0, 0.0, 4.0, 4.0]]), labels=np.array([1]), scores=None
        )
        with pytest.raises(ValueError, match="scored"):
            filter_by_score(dets, 0.5)

    def test_generate_respects_sigma(self, splits):
        model = make_student(3)
        images = images_to_tensor(splits["target_train"].images[:2])
        low = generate_pseudo_labels(model, images, 0.0)
        high = generate_pseudo_labels(model, images, 0.9)
        assert len(low) == 2 and len(high) == 2
        for d_low, d_high in zip(low, high):
            assert len(d_high) <= len(d_low)
            if len(d_high):
                assert d_high.scores.min() >= 0.9

    def test_generate_validates_sigma(self, splits):
        model = make_student(3)
        images = images_to_tensor(splits["target_train"].images[:1])
        with pytest.raises(ValueError, match="sigma"):
            generate_pseudo_labels(model, images, 1.5)


class TestTrainerConstruction:
    def test_missing_split(self, splits):
        data = {k: v for k, v in splits.items() if k != "target_val"}
        with pytest.raises(ValueError, match="target_val"):
            SelfTrainer(make_student(1), short_config(teacher_mode="source_only"), data)

    def test_ddt_needs_diffusion_teacher(self, splits):
        with pytest.raises(ValueError, match="needs a diffusion teacher"):
            SelfTrainer(make_student(1), short_config(teacher_mode="ddt"), splits)

    def test_source_only_refuses_diffusion_teacher(self, splits):
        with pytest.raises(ValueError, match="does not take"):
            SelfTrainer(
                make_student(1),
                short_config(teacher_mode="source_only"),
                splits,
                diffusion_teacher=make_diffusion_teacher(2),
            )

    def test_diffusion_teacher_frozen_at_init(self, splits):
        teacher = make_diffusion_teacher(2)
        teacher.train()
        trainer = SelfTrainer(
            make_student(1), short_config(), splits, diffusion_teacher=teacher
        )
        assert not teacher.training
        assert all(not p.requires_grad for p in teacher.parameters())
        assert trainer.teacher_checksums == [module_checksum(teacher)]

    def test_no_teacher_has_no_checksums(self, splits):
        trainer = SelfTrainer(
            make_student(1), short_config(teacher_mode="source_only"), splits
        )
        assert trainer.teacher_checksums == []

    def test_lr_schedule(self, splits):
        cfg = short_config(
            teacher_mode="source_only", total_steps=100, batch_size=4, base_lr=0.02
        )
        trainer = SelfTrainer(make_student(1), cfg, splits)
        base = 0.02 * 4 / 16.0
        assert trainer._lr_at(50) == pytest.approx(base, rel=1e-12)
        assert trainer._lr_at(80) == pytest.approx(base, rel=1e-12)  # frac == 0.8, not past
        assert trainer._lr_at(81) == pytest.approx(base * 0.1, rel=1e-12)
        assert trainer._lr_at(91) == pytest.approx(base * 0.01, rel=1e-12)


class TestPhases:
    def test_burn_in_matches_source_only_bitwise(self, splits):
        # during burn-in the teacher is never consulted, so a ddt trainer and
        # a source-only trainer with the same seeds walk the same trajectory
        cfg_kwargs = dict(total_steps=6, burn_in_fraction=0.5)
        t_plain = SelfTrainer(
            make_student(21),
            short_config(teacher_mode="source_only", **cfg_kwargs),
            splits,
            seed=5,
        )
        t_ddt = SelfTrainer(
            make_student(21),
            short_config(teacher_mode="ddt", **cfg_kwargs),
            splits,
            seed=5,
            diffusion_teacher=make_diffusion_teacher(33),
        )
        for _ in range(3):
            rec_a = t_plain.train_step()
            rec_b = t_ddt.train_step()
            assert rec_a == rec_b
        sd_a = t_plain.student.state_dict()
        sd_b = t_ddt.student.state_dict()
        assert all(torch.equal(sd_a[k], sd_b[k]) for k in sd_a)

    def test_mean_teacher_created_at_phase_boundary(self, splits):
        trainer = SelfTrainer(
            make_student(22),
            short_config(),
            splits,
            seed=6,
            diffusion_teacher=make_diffusion_teacher(33),
        )
        burn_in = trainer.config.burn_in_steps
        for _ in range(burn_in):
            trainer.train_step()
        assert trainer.mean_teacher is None
        entry = {k: v.clone() for k, v in trainer.student.state_dict().items()}
        trainer.train_step()
        assert trainer.mean_teacher is not None
        assert not trainer.mean_teacher.training
        # the copy is taken before the step's update, then one EMA pull toward
        # the post-step student: teacher = a * entry + (1 - a) * student
        alpha = trainer.config.ema_alpha
        post = trainer.student.state_dict()
        teacher_sd = trainer.mean_teacher.state_dict()
        moved = 0
        for k in teacher_sd:
            want = entry[k].double() * alpha + post[k].double() * (1.0 - alpha)
            assert torch.allclose(teacher_sd[k].double(), want, atol=1e-6), k
            moved += int(not torch.equal(entry[k], post[k]))
        assert moved > 0

    def test_unsup_zero_during_burn_in(self, splits):
        trainer = SelfTrainer(
            make_student(23),
            short_config(),
            splits,
            seed=7,
            diffusion_teacher=make_diffusion_teacher(33),
        )
        rec = trainer.train_step()
        assert rec["unsup"] == 0.0
        assert rec["loss"] == pytest.approx(rec["sup"])

    def test_source_only_never_builds_mean_teacher(self, splits):
        trainer = SelfTrainer(
            make_student(24),
            short_config(teacher_mode="source_only", total_steps=4, burn_in_fraction=0.5),
            splits,
            seed=8,
        )
        recs = [trainer.train_step() for _ in range(4)]
        assert trainer.mean_teacher is None
        assert all(r["unsup"] == 0.0 for r in recs)
        assert trainer.final_role() == "student"
        assert trainer.final_model() is trainer.student

    def test_no_mean_teacher_mode_skips_ema_copy(self, splits):
        trainer = SelfTrainer(
            make_student(25),
            short_config(teacher_mode="no_mean_teacher", total_steps=4, burn_in_fraction=0.5),
            splits,
            seed=9,
            diffusion_teacher=make_diffusion_teacher(33),
        )
        for _ in range(4):
            trainer.train_step()
        assert trainer.mean_teacher is None
        assert trainer.final_role() == "student"

    def test_classic_mean_teacher_labels_itself(self, splits):
        trainer = SelfTrainer(
            make_student(26),
            short_config(
                teacher_mode="no_diffusion_teacher", total_steps=4, burn_in_fraction=0.5
            ),
            splits,
            seed=10,
        )
        for _ in range(4):
            trainer.train_step()
        assert trainer.mean_teacher is not None
        assert trainer.teacher_checksums == []

    def test_high_sigma_skips_pseudo_batches(self, splits):
        # an untrained teacher cannot clear sigma = 0.99 with a 4-way softmax,
        # so every pseudo batch comes back empty and the unsup term stays 0
        trainer = SelfTrainer(
            make_student(27),
            short_config(sigma=0.99, total_steps=4, burn_in_fraction=0.25),
            splits,
            seed=11,
            diffusion_teacher=make_diffusion_teacher(33),
        )
        recs = [trainer.train_step() for _ in range(3)]
        assert all(r["unsup"] == 0.0 for r in recs[1:])
        assert trainer.mean_teacher is not None  # EMA still runs on skipped batches


@pytest.fixture(scope="module")
def run_trainer(splits, tmp_path_factory):
    trainer = SelfTrainer(
        make_student(31),
        short_config(total_steps=4, burn_in_fraction=0.5, eval_every=2),
        splits,
        seed=12,
        diffusion_teacher=make_diffusion_teacher(34),
    )
    path = tmp_path_factory.mktemp("run") / "metrics.jsonl"
    trainer.run(metrics_path=path)
    return trainer, path


class TestEvaluationAndRun:
    def test_unknown_role(self, splits):
        trainer = SelfTrainer(
            make_student(30), short_config(teacher_mode="source_only"), splits
        )
        with pytest.raises(ValueError, match="role"):
            trainer.evaluate_role("oracle")

    def test_absent_roles_return_none(self, splits):
        trainer = SelfTrainer(
            make_student(30), short_config(teacher_mode="source_only"), splits
        )
        assert trainer.evaluate_role("mean_teacher") is None
        assert trainer.evaluate_role("diffusion_teacher") is None

    def test_teacher_eval_cached(self, splits):
        trainer = SelfTrainer(
            make_student(32),
            short_config(),
            splits,
            seed=13,
            diffusion_teacher=make_diffusion_teacher(34),
        )
        first = trainer.evaluate_role("diffusion_teacher")
        assert trainer.evaluate_role("diffusion_teacher") is first
        trainer.train_step()
        assert trainer.evaluate_role("diffusion_teacher") is first

    def test_eval_steps_schedule(self):
        cfg = short_config(total_steps=10, burn_in_fraction=0.5, eval_every=3)
        trainer = SelfTrainer.__new__(SelfTrainer)
        trainer.config = cfg
        assert trainer.eval_steps() == [3, 5, 6, 9, 10]
        cfg2 = short_config(total_steps=100, burn_in_fraction=0.6, eval_every=0)
        trainer.config = cfg2
        steps = trainer.eval_steps()
        assert steps == sorted(set(range(5, 101, 5)))  # burn-in step 60 already on grid

    def test_run_metrics_schema(self, run_trainer):
        trainer, _ = run_trainer
        assert trainer.step == 4
        assert trainer.metrics, "run() logged nothing"
        for rec in trainer.metrics:
            assert set(rec) == {"step", "role", "split", "mAP", "per_class_ap"}
            assert rec["split"] == "target_val"
        roles_at_end = {r["role"] for r in trainer.metrics if r["step"] == 4}
        assert roles_at_end == {"student", "mean_teacher", "diffusion_teacher"}
        roles_at_burn_in = {r["role"] for r in trainer.metrics if r["step"] == 2}
        assert "mean_teacher" not in roles_at_burn_in

    def test_run_writes_jsonl(self, run_trainer):
        trainer, path = run_trainer
        lines = path.read_text().strip().splitlines()
        assert len(lines) == len(trainer.metrics)
        for line, rec in zip(lines, trainer.metrics):
            assert json.loads(line) == json.loads(json.dumps(rec, sort_keys=True))

    def test_teacher_frozen_across_run(self, run_trainer):
        trainer, _ = run_trainer
        sums = trainer.teacher_checksums
        assert len(sums) >= 2
        assert len(set(sums)) == 1
        assert module_checksum(trainer.diffusion_teacher) == sums[0]

    def test_final_model_is_mean_teacher(self, run_trainer):
        trainer, _ = run_trainer
        assert trainer.final_role() == "mean_teacher"
        assert trainer.final_model() is trainer.mean_teacher

    def test_run_is_deterministic(self, splits):
        def go():
            trainer = SelfTrainer(
                make_student(35),
                short_config(total_steps=4, burn_in_fraction=0.5, eval_every=2),
                splits,
                seed=14,
                diffusion_teacher=make_diffusion_teacher(36),
            )
            trainer.run()
            return trainer

        a, b = go(), go()
        assert a.metrics == b.metrics
        assert module_checksum(a.student) == module_checksum(b.student)
        assert module_checksum(a.mean_teacher) == module_checksum(b.mean_teacher)


class TestTeacherTraining:
    def test_requires_diffusion_backbone(self, splits):
        with pytest.raises(TypeError, match="diffusion backbone"):
            train_diffusion_teacher(
                make_student(1), splits["source_train"], TeacherTrainConfig(steps=1)
            )

    def test_history_and_freezing(self, splits):
        teacher = make_diffusion_teacher(40)
        frozen_before = teacher.backbone.frozen_checksum()
        fuse_before = module_checksum(teacher.backbone.fuse)
        history = train_diffusion_teacher(
            teacher, splits["source_train"], TeacherTrainConfig(steps=3, batch_size=2), seed=1
        )
        assert [h["step"] for h in history] == [1, 3]
        assert all(np.isfinite(h["loss"]) for h in history)
        assert not teacher.training
        assert teacher.backbone.frozen_checksum() == frozen_before
        assert module_checksum(teacher.backbone.fuse) != fuse_before

    def test_deterministic(self, splits):
        def go():
            teacher = make_diffusion_teacher(41)
            train_diffusion_teacher(
                teacher, splits["source_train"], TeacherTrainConfig(steps=2, batch_size=2), seed=2
            )
            return teacher

        a, b = go(), go()
        sd_a, sd_b = a.state_dict(), b.state_dict()
        assert all(torch.equal(sd_a[k], sd_b[k]) for k in sd_a)

    def test_cached_taps_match_live_pyramid(self, splits):
        # the training loop fuses cached per-image taps; that must agree with
        # running the backbone directly on the batched images
        from diffteach.selftrain import _batch_cached_taps, _extract_for_cache

        teacher = make_diffusion_teacher(42)
        ds = splits["source_train"]
        per_image = [
            _extract_for_cache(teacher.backbone, ds.images[i], ds.image_ids[i])
            for i in range(2)
        ]
        taps = _batch_cached_taps(per_image)
        cached = teacher.pyramid_from_taps(taps, (SIDE, SIDE))
        live = teacher.pyramid(
            images_to_tensor(ds.images[:2]), image_ids=ds.image_ids[:2]
        )
        for c, l in zip(cached.levels, live.levels):
            assert torch.allclose(c, l, atol=1e-5)

    def test_flip_boxes(self):
        gt = BoxSet(
            boxes=np.array([[3.0, 5.0, 10.0, 4.0], [0.0, 0.0, 2.0, 2.0]]),
            labels=np.array([1, 2]),
        )
        flipped = _flip_boxes(gt, SIDE)
        np.testing.assert_allclose(flipped.boxes[0], [SIDE - 13, 5, 10, 4])
        np.testing.assert_allclose(flipped.boxes[1], [SIDE - 2, 0, 2, 2])
        np.testing.assert_array_equal(flipped.labels, gt.labels)
        back = _flip_boxes(flipped, SIDE)
        np.testing.assert_allclose(back.boxes, gt.boxes)
        assert len(_flip_boxes(BoxSet.empty(), SIDE)) == 0


class TestCheckpoints:
    def test_detector_blob_roundtrip_conv(self, splits):
        det = make_student(50)
        det.eval()
        clone = detector_from_blob(detector_blob(det))
        sd_a, sd_b = det.state_dict(), clone.state_dict()
        assert all(torch.equal(sd_a[k], sd_b[k]) for k in sd_a)
        images = images_to_tensor(splits["target_val"].images[:2])
        with torch.no_grad():
            pa = det.pyramid(images)
            pb = clone.pyramid(images)
        assert all(torch.equal(a, b) for a, b in zip(pa.levels, pb.levels))

    def test_detector_file_roundtrip_diffusion(self, splits, tmp_path):
        det = make_diffusion_teacher(51)
        path = tmp_path / "teacher.pt"
        save_detector(path, det, extra={"note": "x"})
        clone = load_detector(path)
        assert isinstance(clone.backbone, DiffusionBackbone)
        assert not clone.backbone.denoiser.training
        assert all(not p.requires_grad for p in clone.backbone.denoiser.parameters())
        images = images_to_tensor(splits["target_val"].images[:1])
        ids = splits["target_val"].image_ids[:1]
        with torch.no_grad():
            pa = det.pyramid(images, image_ids=ids)
            pb = clone.pyramid(images, image_ids=ids)
        assert all(torch.equal(a, b) for a, b in zip(pa.levels, pb.levels))

    def test_detector_version_check(self, splits):
        blob = detector_blob(make_student(52))
        blob["format_version"] = 99
        with pytest.raises(ValueError, match="version"):
            detector_from_blob(blob)

    def test_train_state_version_check(self, tmp_path):
        path = tmp_path / "state.pt"
        torch.save({"format_version": 99}, path)
        with pytest.raises(ValueError, match="version"):
            load_train_state(path)


class TestResume:
    def test_resume_is_bitwise_identical(self, splits, tmp_path):
        # save mid-burn-in, resume, and train across the phase boundary: the
        # resumed trainer must replay the exact trajectory of the original
        teacher = make_diffusion_teacher(60)
        trainer = SelfTrainer(
            make_student(61),
            short_config(total_steps=6, burn_in_fraction=0.5),
            splits,
            seed=15,
            diffusion_teacher=teacher,
        )
        for _ in range(3):
            trainer.train_step()
        path = tmp_path / "state.pt"
        save_train_state(path, trainer)
        tail_a = [trainer.train_step() for _ in range(3)]

        resumed = resume_trainer(load_train_state(path), splits, diffusion_teacher=teacher)
        assert resumed.step == 3
        assert resumed.mean_teacher is None
        tail_b = [resumed.train_step() for _ in range(3)]

        assert tail_a == tail_b
        assert trainer.step == resumed.step == 6
        for name in ("student", "mean_teacher"):
            sd_a = getattr(trainer, name).state_dict()
            sd_b = getattr(resumed, name).state_dict()
            assert all(torch.equal(sd_a[k], sd_b[k]) for k in sd_a), name
        assert trainer.rng.bit_generator.state == resumed.rng.bit_generator.state
        buf_a = trainer.optimizer.state_dict()["state"]
        buf_b = resumed.optimizer.state_dict()["state"]
        assert buf_a.keys() == buf_b.keys()
        for k in buf_a:
            assert torch.equal(buf_a[k]["momentum_buffer"], buf_b[k]["momentum_buffer"])

    def test_resume_restores_logs(self, splits, tmp_path):
        trainer = SelfTrainer(
            make_student(62),
            short_config(total_steps=4, burn_in_fraction=0.5, eval_every=2),
            splits,
            seed=16,
            diffusion_teacher=make_diffusion_teacher(63),
        )
        trainer.train_step()
        trainer.train_step()
        trainer.log_metrics()
        path = tmp_path / "state.pt"
        save_train_state(path, trainer)
        resumed = resume_trainer(
            load_train_state(path), splits, diffusion_teacher=make_diffusion_teacher(63)
        )
        assert resumed.metrics == trainer.metrics
        assert resumed.teacher_checksums == trainer.teacher_checksums
