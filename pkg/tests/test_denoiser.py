"""Noise-predictor architecture contracts and checkpoint round-trips."""

import numpy as np
import pytest
import torch

from diffteach.denoiser import (
    CHECKPOINT_VERSION,
    DenoiserConfig,
    TinyUNet,
    denoise_with_taps,
    load_denoiser,
    save_denoiser,
    timestep_embedding,
)
from diffteach.diffusion_pretrain import PretrainConfig, images_to_tensor, pretrain_denoiser
from diffteach.schedules import build_schedule


class TestConfig:
    def test_side_must_divide_by_16(self):
        with pytest.raises(ValueError, match="16"):
            DenoiserConfig(image_side=40)

    def test_needs_four_stages(self):
        with pytest.raises(ValueError, match="4"):
            DenoiserConfig(image_side=32, stage_channels=(8, 16, 32))

    def test_tap_shapes_deepest_first(self):
        cfg = DenoiserConfig(image_side=64, stage_channels=(4, 8, 16, 32))
        assert cfg.tap_shapes() == [
            (32, 8, 8),
            (16, 16, 16),
            (8, 32, 32),
            (4, 64, 64),
        ]


class TestTimestepEmbedding:
    def test_shape_and_range(self):
        t = torch.tensor([1, 500, 1000])
        emb = timestep_embedding(t, 16)
        assert emb.shape == (3, 16)
        assert emb.abs().max() <= 1.0 + 1e-6

    def test_first_half_cos_second_half_sin(self):
        # frequency 0 is exactly 1, so cos slot is cos(t), sin slot sin(t)
        t = torch.tensor([7])
        emb = timestep_embedding(t, 8)
        assert emb[0, 0] == pytest.approx(np.cos(7.0), rel=1e-6)
        assert emb[0, 4] == pytest.approx(np.sin(7.0), rel=1e-6)

    def test_deterministic_and_distinct(self):
        t = torch.arange(1, 50)
        a = timestep_embedding(t, 32)
        b = timestep_embedding(t, 32)
        assert torch.equal(a, b)
        # distinct timesteps map to distinct embeddings
        d = torch.cdist(a, a)
        d.fill_diagonal_(1.0)
        assert (d > 1e-4).all()

    def test_odd_dim_padded(self):
        emb = timestep_embedding(torch.tensor([3]), 7)
        assert emb.shape == (1, 7)
        assert emb[0, -1] == 0.0


class TestTinyUNet:
    def test_forward_shapes(self, tiny_denoiser):
        model = tiny_denoiser
        x = torch.randn(2, 3, 32, 32)
        eps, taps = model(x, torch.tensor([5, 9]))
        assert eps.shape == x.shape
        assert len(taps) == 4
        for tap, (c, h, w) in zip(taps, model.config.tap_shapes()):
            assert tuple(tap.shape) == (2, c, h, w)

    def test_scalar_timestep_broadcasts(self, tiny_denoiser):
        model = tiny_denoiser
        x = torch.randn(3, 3, 32, 32)
        e1, _ = model(x, torch.tensor(7))
        e2, _ = model(x, torch.tensor([7, 7, 7]))
        assert torch.equal(e1, e2)

    def test_timestep_changes_output(self, tiny_denoiser):
        model = tiny_denoiser
        x = torch.randn(1, 3, 32, 32)
        e1, _ = model(x, torch.tensor([1]))
        e2, _ = model(x, torch.tensor([900]))
        assert not torch.allclose(e1, e2)

    def test_rejects_wrong_rank(self, tiny_denoiser):
        model = tiny_denoiser
        with pytest.raises(ValueError, match="B, C, H, W"):
            model(torch.randn(3, 32, 32), torch.tensor([1]))

    def test_denoise_with_taps_no_grad_and_detached(self, tiny_denoiser):
        model = tiny_denoiser
        x = torch.randn(1, 3, 32, 32, requires_grad=True)
        eps, taps = denoise_with_taps(model, x, torch.tensor([10]))
        assert not eps.requires_grad
        assert all(not t.requires_grad for t in taps)


class TestCheckpoint:
    def test_roundtrip_preserves_weights_and_schedule(self, tmp_path, tiny_denoiser, schedule):
        model = tiny_denoiser
        p = tmp_path / "denoiser.pt"
        save_denoiser(p, model, schedule)
        loaded, sched2 = load_denoiser(p)
        assert loaded.config == model.config
        np.testing.assert_array_equal(sched2.alpha_bar, schedule.alpha_bar)
        x = torch.randn(1, 3, 32, 32)
        with torch.no_grad():
            e1, _ = model(x, torch.tensor([4]))
            e2, _ = loaded(x, torch.tensor([4]))
        assert torch.equal(e1, e2)

    def test_version_mismatch_rejected(self, tmp_path, tiny_denoiser, schedule):
        model = tiny_denoiser
        p = tmp_path / "denoiser.pt"
        save_denoiser(p, model, schedule)
        blob = torch.load(p, weights_only=False)
        blob["format_version"] = CHECKPOINT_VERSION + 1
        torch.save(blob, p)
        with pytest.raises(ValueError, match="version"):
            load_denoiser(p)

    def test_corrupt_weights_rejected(self, tmp_path, tiny_denoiser, schedule):
        model = tiny_denoiser
        p = tmp_path / "denoiser.pt"
        save_denoiser(p, model, schedule)
        blob = torch.load(p, weights_only=False)
        del blob["state_dict"]["stem.weight"]
        torch.save(blob, p)
        with pytest.raises(ValueError):
            load_denoiser(p)


class TestPretrain:
    def test_images_to_tensor_maps_uint8_to_unit_interval(self):
        imgs = np.stack(
            [np.zeros((16, 16, 3), np.uint8), np.full((16, 16, 3), 255, np.uint8)]
        )
        t = images_to_tensor(imgs)
        assert t.shape == (2, 3, 16, 16)
        assert t.min().item() == -1.0 and t.max().item() == 1.0

    def test_images_to_tensor_rejects_wrong_dtype(self):
        with pytest.raises(ValueError):
            images_to_tensor(np.zeros((1, 16, 16, 3), np.float32))

    def test_short_run_reduces_loss_and_is_seeded(self):
        rng = np.random.default_rng(0)
        imgs = rng.integers(0, 256, size=(12, 32, 32, 3), dtype=np.uint8)
        cfg = PretrainConfig(steps=30, batch_size=6, lr=2e-3, log_every=10)
        dcfg = DenoiserConfig(image_side=32, stage_channels=(4, 8, 8, 16), time_dim=16)
        schedule = build_schedule()
        m1, h1 = pretrain_denoiser(imgs, schedule, cfg, dcfg, seed=123)
        m2, h2 = pretrain_denoiser(imgs, schedule, cfg, dcfg, seed=123)
        # same seed: bitwise-identical weights and loss history
        for (k1, v1), (k2, v2) in zip(
            m1.state_dict().items(), m2.state_dict().items()
        ):
            assert k1 == k2 and torch.equal(v1, v2)
        assert h1 == h2
        assert h1[0]["step"] == 1 and h1[-1]["step"] == 30
        # loss should come down from the untrained start on average
        assert h1[-1]["loss"] < h1[0]["loss"]
        assert not m1.training

    def test_different_seed_differs(self):
        rng = np.random.default_rng(0)
        imgs = rng.integers(0, 256, size=(8, 32, 32, 3), dtype=np.uint8)
        cfg = PretrainConfig(steps=5, batch_size=4, lr=1e-3, log_every=5)
        dcfg = DenoiserConfig(image_side=32, stage_channels=(4, 8, 8, 16), time_dim=16)
        schedule = build_schedule()
        m1, _ = pretrain_denoiser(imgs, schedule, cfg, dcfg, seed=1)
        m2, _ = pretrain_denoiser(imgs, schedule, cfg, dcfg, seed=2)
        same = all(
            torch.equal(v1, v2)
            for v1, v2 in zip(m1.state_dict().values(), m2.state_dict().values())
        )
        assert not same
