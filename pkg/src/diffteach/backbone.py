"""Feature backbones for the detector.

Two interchangeable backbones produce a 4-level feature pyramid (strides 4,
8, 16, 32 over the input image):

* DiffusionBackbone: runs a frozen denoiser at several noising steps, taps
  its decoder features, and fuses them with a small trainable bottleneck.
  Only the bottleneck receives gradients.
* ConvBackbone: an ordinary small CNN trained end to end.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .denoiser import TinyUNet, _norm_groups
from .schedules import NoiseSchedule, forward_diffuse
from .validation import check_positive_int

PYRAMID_STRIDES = (4, 8, 16, 32)


@dataclass(frozen=True)
class FeatureExtractionConfig:
    """How the frozen denoiser is probed.

    time_steps: number of noising steps probed, evenly spaced in
        [t_high / time_steps, t_high].
    save_steps: how many of the probed steps contribute features (spread
        evenly across the probed list, always including the last).
    t_high: largest probed step.
    noise_mode: "per_image" derives the noise draw from (image_id, t) so the
        features are a pure function of the image; "random" draws fresh noise
        from a caller-supplied torch.Generator.
    """

    time_steps: int = 5
    save_steps: int = 5
    t_high: int = 500
    noise_mode: str = "per_image"

    def __post_init__(self):
        check_positive_int("time_steps", self.time_steps)
        check_positive_int("save_steps", self.save_steps)
        check_positive_int("t_high", self.t_high)
        if self.save_steps > self.time_steps:
            raise ValueError("save_steps cannot exceed time_steps")
        if self.time_steps > self.t_high:
            raise ValueError("time_steps cannot exceed t_high")
        if self.noise_mode not in ("per_image", "random"):
            raise ValueError(f"unknown noise_mode {self.noise_mode!r}")

    def probed_timesteps(self):
        """The time_steps noising steps actually run, ascending."""
        ts = [
            max(1, round(self.t_high * (i + 1) / self.time_steps))
            for i in range(self.time_steps)
        ]
        if len(set(ts)) != len(ts):
            raise ValueError("probed timesteps collide; lower time_steps or raise t_high")
        return ts

    def kept_timesteps(self):
        """The save_steps probed steps whose taps are kept, ascending."""
        probed = self.probed_timesteps()
        idx = [
            (j + 1) * self.time_steps // self.save_steps - 1
            for j in range(self.save_steps)
        ]
        return [probed[i] for i in idx]


def _noise_seed(image_id, t):
    # splitmix-style mix so nearby (id, t) pairs decorrelate
    return ((int(image_id) + 1) * 0x9E3779B97F4A7C15 + int(t) * 0xBF58476D1CE4E5B9) % (
        2**63 - 1
    )


def deterministic_noise(image_id, t, shape, dtype=torch.float32):
    gen = torch.Generator().manual_seed(_noise_seed(image_id, t))
    return torch.randn(shape, generator=gen, dtype=dtype)


def extract_taps(denoiser, schedule, images, config, image_ids=None, generator=None):
    """Probe the frozen denoiser and collect decoder taps.

    images: (B, 3, H, W) float tensor in [-1, 1] (a single (3, H, W) image is
        accepted and treated as a batch of one).
    image_ids: required for noise_mode "per_image"; one id per image.
    generator: required for noise_mode "random".

    Returns a list with one entry per kept timestep (ascending t); each entry
    is the 4-list of detached tap tensors, deepest first.
    """
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4:
        raise ValueError(f"images must be (B, 3, H, W), got {tuple(images.shape)}")
    if config.t_high > schedule.t_max:
        raise ValueError(
            f"t_high={config.t_high} exceeds schedule t_max={schedule.t_max}"
        )
    batch = images.shape[0]
    if config.noise_mode == "per_image":
        if image_ids is None or len(image_ids) != batch:
            raise ValueError("per_image noise needs one image_id per image")
    elif generator is None:
        raise ValueError("random noise mode needs a torch.Generator")
    kept = set(config.kept_timesteps())
    out = []
    with torch.no_grad():
        for t in config.probed_timesteps():
            if config.noise_mode == "per_image":
                eps = torch.stack(
                    [
                        deterministic_noise(i, t, images.shape[1:], images.dtype)
                        for i in image_ids
                    ]
                )
            else:
                eps = torch.randn(images.shape, generator=generator, dtype=images.dtype)
            xt = forward_diffuse(images, int(t), eps, schedule)
            _, taps = denoiser(xt, torch.full((batch,), int(t)))
            if t in kept:
                out.append([tap.detach() for tap in taps])
    return out


@dataclass
class FeaturePyramid:
    """Levels P2..P5 in order, level k at stride PYRAMID_STRIDES[k]."""

    levels: list

    def __post_init__(self):
        if len(self.levels) != 4:
            raise ValueError("a feature pyramid has exactly 4 levels")

    @property
    def strides(self):
        return PYRAMID_STRIDES

    def channels(self):
        return [lv.shape[1] for lv in self.levels]


class BottleneckFuse(nn.Module):
    """Fuses kept taps into a pyramid level: concat over timesteps, 1x1
    projection, GroupNorm, ReLU, then bilinear resample to the level grid."""

    def __init__(self, tap_channels, save_steps, out_channels):
        super().__init__()
        self.proj = nn.Conv2d(tap_channels * save_steps, out_channels, 1)
        self.norm = nn.GroupNorm(_norm_groups(out_channels), out_channels)

    def forward(self, taps_over_time, out_hw):
        x = torch.cat(taps_over_time, dim=1)
        x = torch.relu(self.norm(self.proj(x)))
        if x.shape[-2:] != tuple(out_hw):
            x = nn.functional.interpolate(
                x, size=tuple(out_hw), mode="bilinear", align_corners=False
            )
        return x


class DiffusionBackbone(nn.Module):
    """Frozen denoiser + trainable per-level bottleneck.

    Tap k (deepest first, size H / 2**(3-k)) feeds pyramid level P(5-k), so
    every tap is resampled down by exactly 4. The default out_channels keep
    the bottleneck below 5% of the default denoiser's parameter count; the
    denoiser itself never trains here.
    """

    def __init__(
        self,
        denoiser: TinyUNet,
        schedule: NoiseSchedule,
        feature_config: FeatureExtractionConfig,
        out_channels=(24, 48, 96, 160),
    ):
        super().__init__()
        if len(out_channels) != 4:
            raise ValueError("out_channels must list 4 widths (P2..P5)")
        self.denoiser = denoiser
        self.schedule = schedule
        self.feature_config = feature_config
        self.out_channels = tuple(int(c) for c in out_channels)
        stage = denoiser.config.stage_channels
        # fuse[k] builds P(k+2); its tap is decoder stage 3-k (channels stage[k])
        self.fuse = nn.ModuleList(
            [
                BottleneckFuse(stage[k], feature_config.save_steps, self.out_channels[k])
                for k in range(4)
            ]
        )
        self.denoiser.requires_grad_(False)
        self.denoiser.eval()

    def train(self, mode=True):
        super().train(mode)
        self.denoiser.eval()  # the denoiser never leaves eval
        return self

    def trainable_parameter_count(self):
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    def frozen_checksum(self):
        """SHA-256 over the denoiser weights; constant across training."""
        h = hashlib.sha256()
        for name, tensor in sorted(self.denoiser.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def forward(self, images, image_ids=None, generator=None):
        taps = extract_taps(
            self.denoiser,
            self.schedule,
            images,
            self.feature_config,
            image_ids=image_ids,
            generator=generator,
        )
        return self.fuse_taps(taps, images.shape[-2:])

    def fuse_taps(self, taps, image_hw):
        """Build the pyramid from precomputed taps (used by tap caches)."""
        h, w = int(image_hw[0]), int(image_hw[1])
        levels = []
        for k in range(4):
            # taps are deepest first: P2 uses tap 3, P5 uses tap 0
            per_time = [taps_t[3 - k] for taps_t in taps]
            out_hw = (h // PYRAMID_STRIDES[k], w // PYRAMID_STRIDES[k])
            levels.append(self.fuse[k](per_time, out_hw))
        return FeaturePyramid(levels)


class _ConvStage(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.down = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)
        self.norm1 = nn.GroupNorm(_norm_groups(out_ch), out_ch)
        self.conv = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(_norm_groups(out_ch), out_ch)

    def forward(self, x):
        x = torch.relu(self.norm1(self.down(x)))
        return torch.relu(self.norm2(self.conv(x)))


class ConvBackbone(nn.Module):
    """Plain 4-stage CNN emitting the same pyramid contract."""

    def __init__(self, stage_channels=(32, 64, 128, 256), in_channels=3):
        super().__init__()
        if len(stage_channels) != 4:
            raise ValueError("stage_channels must list 4 widths")
        self.out_channels = tuple(int(c) for c in stage_channels)
        c = self.out_channels
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, c[0], 3, stride=2, padding=1),
            nn.GroupNorm(_norm_groups(c[0]), c[0]),
            nn.ReLU(),
        )
        self.stages = nn.ModuleList(
            [
                _ConvStage(c[0], c[0]),
                _ConvStage(c[0], c[1]),
                _ConvStage(c[1], c[2]),
                _ConvStage(c[2], c[3]),
            ]
        )

    def forward(self, images, image_ids=None, generator=None):
        # extra args keep the call signature interchangeable with the
        # diffusion backbone; they are ignored here
        x = self.stem(images)
        levels = []
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        return FeaturePyramid(levels)


def module_checksum(module: nn.Module):
    """SHA-256 over all parameters and buffers, order-stable."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()
