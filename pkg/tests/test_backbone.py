"""Frozen-denoiser feature extraction and pyramid fusion contracts."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from diffteach.backbone import (
    PYRAMID_STRIDES,
    ConvBackbone,
    DiffusionBackbone,
    FeatureExtractionConfig,
    FeaturePyramid,
    deterministic_noise,
    extract_taps,
    module_checksum,
)
from diffteach.denoiser import DenoiserConfig, TinyUNet


@pytest.fixture(scope="module")
def small_features():
    return FeatureExtractionConfig(time_steps=2, save_steps=2, t_high=100)


@pytest.fixture(scope="module")
def backbone(schedule, small_features):
    torch.manual_seed(3)
    den = TinyUNet(DenoiserConfig(image_side=32, stage_channels=(4, 8, 8, 16), time_dim=16))
    torch.manual_seed(4)
    return DiffusionBackbone(den, schedule, small_features)


class TestFeatureExtractionConfig:
    def test_probed_default(self):
        cfg = FeatureExtractionConfig()
        assert cfg.probed_timesteps() == [100, 200, 300, 400, 500]
        assert cfg.kept_timesteps() == [100, 200, 300, 400, 500]

    def test_kept_subsampling_always_includes_last(self):
        cfg = FeatureExtractionConfig(time_steps=5, save_steps=2, t_high=500)
        assert cfg.kept_timesteps() == [200, 500]
        cfg1 = FeatureExtractionConfig(time_steps=5, save_steps=1, t_high=500)
        assert cfg1.kept_timesteps() == [500]
        cfg3 = FeatureExtractionConfig(time_steps=4, save_steps=3, t_high=400)
        assert cfg3.kept_timesteps() == [100, 200, 400]

    @given(st.integers(1, 60), st.integers(1, 900))
    @settings(max_examples=80, deadline=None)
    def test_probed_strictly_increasing_and_in_range(self, n, t_high):
        if n > t_high:
            with pytest.raises(ValueError):
                FeatureExtractionConfig(time_steps=n, save_steps=1, t_high=t_high)
            return
        cfg = FeatureExtractionConfig(time_steps=n, save_steps=1, t_high=t_high)
        ts = cfg.probed_timesteps()
        assert len(ts) == n
        assert all(1 <= t <= t_high for t in ts)
        assert all(a < b for a, b in zip(ts, ts[1:]))
        assert ts[-1] == t_high
        kept = cfg.kept_timesteps()
        assert set(kept) <= set(ts) and kept[-1] == t_high

    def test_rejects_bad_combos(self):
        with pytest.raises(ValueError, match="save_steps"):
            FeatureExtractionConfig(time_steps=2, save_steps=3)
        with pytest.raises(ValueError, match="noise_mode"):
            FeatureExtractionConfig(noise_mode="fresh")
        with pytest.raises(ValueError):
            FeatureExtractionConfig(time_steps=0)


class TestDeterministicNoise:
    def test_pure_function_of_id_and_t(self):
        a = deterministic_noise(5, 100, (3, 8, 8))
        b = deterministic_noise(5, 100, (3, 8, 8))
        assert torch.equal(a, b)

    def test_id_and_t_both_matter(self):
        base = deterministic_noise(5, 100, (3, 8, 8))
        assert not torch.equal(base, deterministic_noise(6, 100, (3, 8, 8)))
        assert not torch.equal(base, deterministic_noise(5, 101, (3, 8, 8)))

    def test_unit_gaussian_stats(self):
        x = deterministic_noise(0, 1, (64, 64, 16))
        assert abs(x.mean().item()) < 0.02
        assert abs(x.std().item() - 1.0) < 0.02


class TestExtractTaps:
    def test_structure_and_shapes(self, backbone, small_features):
        x = torch.randn(2, 3, 32, 32)
        taps = extract_taps(
            backbone.denoiser, backbone.schedule, x, small_features, image_ids=[0, 1]
        )
        assert len(taps) == small_features.save_steps
        expect = backbone.denoiser.config.tap_shapes()
        for per_t in taps:
            assert len(per_t) == 4
            for tap, (c, h, w) in zip(per_t, expect):
                assert tuple(tap.shape) == (2, c, h, w)
                assert not tap.requires_grad

    def test_single_image_becomes_batch_of_one(self, backbone, small_features):
        x = torch.randn(3, 32, 32)
        taps = extract_taps(
            backbone.denoiser, backbone.schedule, x, small_features, image_ids=[7]
        )
        assert taps[0][0].shape[0] == 1

    def test_per_image_mode_is_reproducible(self, backbone, small_features):
        x = torch.randn(2, 3, 32, 32)
        t1 = extract_taps(
            backbone.denoiser, backbone.schedule, x, small_features, image_ids=[0, 1]
        )
        t2 = extract_taps(
            backbone.denoiser, backbone.schedule, x, small_features, image_ids=[0, 1]
        )
        for a_t, b_t in zip(t1, t2):
            for a, b in zip(a_t, b_t):
                assert torch.equal(a, b)
        # different ids change the noise hence the features
        t3 = extract_taps(
            backbone.denoiser, backbone.schedule, x, small_features, image_ids=[2, 3]
        )
        assert not torch.equal(t1[0][0], t3[0][0])

    def test_random_mode_follows_generator(self, backbone):
        cfg = FeatureExtractionConfig(
            time_steps=2, save_steps=1, t_high=100, noise_mode="random"
        )
        x = torch.randn(1, 3, 32, 32)
        g1 = torch.Generator().manual_seed(11)
        g2 = torch.Generator().manual_seed(11)
        g3 = torch.Generator().manual_seed(12)
        a = extract_taps(backbone.denoiser, backbone.schedule, x, cfg, generator=g1)
        b = extract_taps(backbone.denoiser, backbone.schedule, x, cfg, generator=g2)
        c = extract_taps(backbone.denoiser, backbone.schedule, x, cfg, generator=g3)
        assert torch.equal(a[0][0], b[0][0])
        assert not torch.equal(a[0][0], c[0][0])

    def test_argument_validation(self, backbone, small_features):
        x = torch.randn(2, 3, 32, 32)
        with pytest.raises(ValueError, match="image_id"):
            extract_taps(backbone.denoiser, backbone.schedule, x, small_features)
        with pytest.raises(ValueError, match="image_id"):
            extract_taps(
                backbone.denoiser, backbone.schedule, x, small_features, image_ids=[0]
            )
        rand_cfg = FeatureExtractionConfig(
            time_steps=2, save_steps=1, t_high=100, noise_mode="random"
        )
        with pytest.raises(ValueError, match="Generator"):
            extract_taps(backbone.denoiser, backbone.schedule, x, rand_cfg)
        high = FeatureExtractionConfig(time_steps=2, save_steps=1, t_high=2000)
        with pytest.raises(ValueError, match="t_max"):
            extract_taps(
                backbone.denoiser, backbone.schedule, x, high, image_ids=[0, 1]
            )


class TestDiffusionBackbone:
    def test_pyramid_shapes_and_strides(self, backbone):
        x = torch.randn(2, 3, 32, 32)
        pyr = backbone(x, image_ids=[0, 1])
        assert isinstance(pyr, FeaturePyramid)
        assert pyr.strides == (4, 8, 16, 32)
        for k, level in enumerate(pyr.levels):
            stride = PYRAMID_STRIDES[k]
            assert tuple(level.shape) == (
                2,
                backbone.out_channels[k],
                32 // stride,
                32 // stride,
            )

    def test_denoiser_is_frozen_and_stays_eval(self, backbone):
        assert all(not p.requires_grad for p in backbone.denoiser.parameters())
        backbone.train()
        assert backbone.training
        assert not backbone.denoiser.training
        backbone.eval()

    def test_trainable_parameters_are_bottleneck_only(self, backbone):
        trainable = {
            n for n, p in backbone.named_parameters() if p.requires_grad
        }
        assert trainable
        assert all(n.startswith("fuse.") for n in trainable)
        fuse_total = sum(p.numel() for p in backbone.fuse.parameters())
        assert backbone.trainable_parameter_count() == fuse_total

    def test_default_bottleneck_stays_under_5_percent(self, schedule):
        torch.manual_seed(0)
        den = TinyUNet(DenoiserConfig())  # default full-size denoiser
        bb = DiffusionBackbone(den, schedule, FeatureExtractionConfig())
        ratio = bb.trainable_parameter_count() / den.parameter_count()
        assert ratio < 0.05, f"bottleneck is {ratio:.3%} of the denoiser"

    def test_frozen_checksum_survives_bottleneck_training(self, backbone):
        before = backbone.frozen_checksum()
        x = torch.randn(1, 3, 32, 32)
        pyr = backbone(x, image_ids=[0])
        loss = sum(level.square().mean() for level in pyr.levels)
        opt = torch.optim.SGD(
            [p for p in backbone.parameters() if p.requires_grad], lr=0.5
        )
        opt.zero_grad()
        loss.backward()
        opt.step()
        assert backbone.frozen_checksum() == before
        # and the trainable part did actually change
        assert module_checksum(backbone.fuse) != before

    def test_fuse_taps_matches_forward(self, backbone, small_features):
        x = torch.randn(2, 3, 32, 32)
        taps = extract_taps(
            backbone.denoiser, backbone.schedule, x, small_features, image_ids=[4, 5]
        )
        with torch.no_grad():
            via_cache = backbone.fuse_taps(taps, (32, 32))
            direct = backbone(x, image_ids=[4, 5])
        for a, b in zip(via_cache.levels, direct.levels):
            assert torch.equal(a, b)

    def test_rejects_wrong_out_channels(self, backbone, schedule, small_features):
        with pytest.raises(ValueError, match="4"):
            DiffusionBackbone(
                backbone.denoiser, schedule, small_features, out_channels=(8, 8)
            )


class TestConvBackbone:
    def test_same_pyramid_contract(self):
        torch.manual_seed(1)
        bb = ConvBackbone(stage_channels=(8, 16, 24, 32))
        x = torch.randn(2, 3, 64, 64)
        pyr = bb(x)
        assert pyr.channels() == [8, 16, 24, 32]
        for k, level in enumerate(pyr.levels):
            s = PYRAMID_STRIDES[k]
            assert level.shape[-2:] == (64 // s, 64 // s)

    def test_extractor_args_ignored(self):
        torch.manual_seed(1)
        bb = ConvBackbone(stage_channels=(8, 16, 24, 32))
        bb.eval()
        x = torch.randn(1, 3, 32, 32)
        with torch.no_grad():
            a = bb(x)
            b = bb(x, image_ids=[9], generator=torch.Generator().manual_seed(0))
        assert torch.equal(a.levels[0], b.levels[0])


class TestChecksum:
    def test_checksum_tracks_weights(self):
        torch.manual_seed(2)
        m = torch.nn.Linear(4, 4)
        c1 = module_checksum(m)
        assert c1 == module_checksum(m)
        with torch.no_grad():
            m.weight += 1.0
        assert module_checksum(m) != c1


class TestFeaturePyramid:
    def test_requires_four_levels(self):
        with pytest.raises(ValueError, match="4"):
            FeaturePyramid(levels=[torch.zeros(1, 2, 4, 4)] * 3)
