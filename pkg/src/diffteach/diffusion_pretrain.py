"""Noise-prediction pretraining for the denoiser.

The denoiser is trained on an unlabeled image pool (typically the union of
both domains' training images) by sampling a timestep per image, noising with
the closed-form forward process, and regressing the added noise with MSE.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .denoiser import DenoiserConfig, TinyUNet
from .schedules import NoiseSchedule, forward_diffuse
from .validation import check_positive_int


@dataclass
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 2e-4
    log_every: int = 50

    def __post_init__(self):
        check_positive_int("steps", self.steps)
        check_positive_int("batch_size", self.batch_size)
        if self.lr <= 0:
            raise ValueError("lr must be positive")


def images_to_tensor(images):
    """Stack HWC uint8 images into a (N, 3, H, W) float tensor in [-1, 1]."""
    arr = np.stack([np.asarray(im) for im in images])
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected N x H x W x 3 uint8 images, got {arr.shape}")
    if arr.dtype != np.uint8:
        raise ValueError(f"expected uint8 images, got {arr.dtype}")
    x = torch.from_numpy(arr).permute(0, 3, 1, 2).float()
    return x / 127.5 - 1.0


def pretrain_denoiser(
    images,
    schedule: NoiseSchedule,
    config: PretrainConfig,
    denoiser_config: DenoiserConfig,
    seed: int = 0,
):
    """Train a TinyUNet from scratch on the image pool.

    Returns (model, history) where history is a list of
    {"step", "loss"} records suitable for dumping as a loss-curve artifact.
    Raises RuntimeError if the loss goes non-finite.
    """
    x_all = images_to_tensor(images)
    if x_all.shape[-1] != denoiser_config.image_side:
        raise ValueError(
            f"images are {x_all.shape[-1]} px but denoiser expects "
            f"{denoiser_config.image_side}"
        )
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)  # module init draws from the global generator
    model = TinyUNet(denoiser_config)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    n = len(x_all)
    history = []
    model.train()
    for step in range(1, config.steps + 1):
        idx = torch.randint(0, n, (config.batch_size,), generator=gen)
        x0 = x_all[idx]
        t = torch.randint(1, schedule.t_max + 1, (config.batch_size,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        xt = forward_diffuse(x0, t, eps, schedule)
        eps_hat, _ = model(xt, t)
        loss = torch.mean((eps_hat - eps) ** 2)
        if not torch.isfinite(loss):
            raise RuntimeError(
                f"denoiser pretraining diverged at step {step}: loss={loss.item()}"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % config.log_every == 0 or step == 1 or step == config.steps:
            history.append({"step": step, "loss": float(loss.item())})
    model.eval()
    return model, history
