"""Miniature U-Net noise predictor with feature taps on the decoder path.

The network downsamples four times, runs a middle block, then upsamples four
times with skip connections. Each decoder stage output is exposed as a "tap";
taps are ordered deepest first, so tap k has spatial size side / 2**(3 - k)
and the stage channel width c[3 - k].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .schedules import NoiseSchedule, build_schedule
from .validation import check_positive_int

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    image_side: int = 96
    in_channels: int = 3
    stage_channels: tuple = (32, 64, 128, 256)
    time_dim: int = 64

    def __post_init__(self):
        check_positive_int("image_side", self.image_side)
        if self.image_side % 16 != 0:
            raise ValueError("image_side must be divisible by 16 (four downsamples)")
        if len(self.stage_channels) != 4:
            raise ValueError("stage_channels must list exactly 4 widths")
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))

    def tap_shapes(self):
        """(channels, height, width) per tap, deepest first."""
        side = self.image_side
        c = self.stage_channels
        return [(c[3 - k], side >> (3 - k), side >> (3 - k)) for k in range(4)]


def timestep_embedding(t, dim):
    """Sinusoidal embeddings of integer timesteps, shape (len(t), dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half
    )
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def _norm_groups(channels):
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, time_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_norm_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(_norm_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class TinyUNet(nn.Module):
    """Noise predictor; forward returns (eps_hat, taps)."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        c = config.stage_channels
        td = config.time_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(td, td * 2), nn.SiLU(), nn.Linear(td * 2, td)
        )
        self.stem = nn.Conv2d(config.in_channels, c[0], 3, padding=1)
        self.enc = nn.ModuleList(
            [
                ResBlock(c[0], c[0], td),
                ResBlock(c[0], c[1], td),
                ResBlock(c[1], c[2], td),
                ResBlock(c[2], c[3], td),
            ]
        )
        self.down = nn.ModuleList([nn.Conv2d(ch, ch, 3, stride=2, padding=1) for ch in c])
        self.mid = ResBlock(c[3], c[3], td)
        # decoder consumes upsampled deep features concatenated with the skip
        self.dec = nn.ModuleList(
            [
                ResBlock(c[3] + c[3], c[3], td),
                ResBlock(c[3] + c[2], c[2], td),
                ResBlock(c[2] + c[1], c[1], td),
                ResBlock(c[1] + c[0], c[0], td),
            ]
        )
        self.out_norm = nn.GroupNorm(_norm_groups(c[0]), c[0])
        self.out_conv = nn.Conv2d(c[0], config.in_channels, 3, padding=1)

    def forward(self, x, t):
        if x.ndim != 4:
            raise ValueError(f"expected (B, C, H, W) input, got shape {tuple(x.shape)}")
        if not torch.is_tensor(t):
            t = torch.as_tensor(t)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.config.time_dim))
        h = self.stem(x)
        skips = []
        for block, down in zip(self.enc, self.down):
            h = block(h, temb)
            skips.append(h)
            h = down(h)
        h = self.mid(h, temb)
        taps = []
        for block, skip in zip(self.dec, reversed(skips)):
            h = nn.functional.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skip], dim=1), temb)
            taps.append(h)
        eps_hat = self.out_conv(nn.functional.silu(self.out_norm(h)))
        return eps_hat, taps

    def parameter_count(self):
        return sum(p.numel() for p in self.parameters())


def denoise_with_taps(model: TinyUNet, xt, t):
    """Run the noise predictor without tracking gradients.

    Returns (eps_hat, taps) where taps is a 4-list ordered deepest first,
    tap k shaped (B, c, side / 2**(3-k), side / 2**(3-k)).
    """
    with torch.no_grad():
        eps_hat, taps = model(xt, t)
    expect = model.config.tap_shapes()
    for tap, (ch, hh, ww) in zip(taps, expect):
        assert tap.shape[1:] == (ch, hh, ww), (tap.shape, (ch, hh, ww))
    return eps_hat, taps


def save_denoiser(path, model: TinyUNet, schedule: NoiseSchedule):
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "architecture": {
                "image_side": model.config.image_side,
                "in_channels": model.config.in_channels,
                "stage_channels": list(model.config.stage_channels),
                "time_dim": model.config.time_dim,
            },
            "schedule": schedule.to_dict(),
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_denoiser(path):
    """Load a denoiser checkpoint; returns (model, schedule).

    Rejects unknown format versions and architecture descriptors that do not
    reproduce the stored tensor shapes.
    """
    blob = torch.load(path, map_location="cpu", weights_only=True)
    version = blob.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(
            f"unsupported denoiser checkpoint version {version!r}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    arch = blob["architecture"]
    config = DenoiserConfig(
        image_side=arch["image_side"],
        in_channels=arch["in_channels"],
        stage_channels=tuple(arch["stage_channels"]),
        time_dim=arch["time_dim"],
    )
    model = TinyUNet(config)
    try:
        model.load_state_dict(blob["state_dict"])
    except RuntimeError as exc:
        raise ValueError(f"checkpoint tensors do not match architecture: {exc}") from exc
    sched = blob["schedule"]
    schedule = build_schedule(sched["t_max"], sched["beta_start"], sched["beta_end"])
    return model, schedule
