"""Forward-diffusion noise schedule and the closed-form noising step.

The forward process corrupts a clean image x0 into

    x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps,  eps ~ N(0, I)

where alpha_t = 1 - beta_t and alpha_bar_t is the running product of alpha
up to step t. Steps are 1-based: t ranges over [1, t_max] and table entry
t - 1 holds the values for step t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .validation import check_positive_int


@dataclass(frozen=True)
class NoiseSchedule:
    t_max: int
    beta_start: float
    beta_end: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def check_step(self, t):
        t = np.asarray(t)
        if t.dtype.kind not in "iu":
            raise TypeError("timestep t must be integral")
        if (t < 1).any() or (t > self.t_max).any():
            raise ValueError(f"timestep out of range [1, {self.t_max}]")
        return t

    def signal_rate(self, t):
        """sqrt(alpha_bar_t), the surviving fraction of the clean signal."""
        t = self.check_step(t)
        return np.sqrt(self.alpha_bar[t - 1])

    def noise_rate(self, t):
        """sqrt(1 - alpha_bar_t), the standard deviation of the added noise."""
        t = self.check_step(t)
        return np.sqrt(1.0 - self.alpha_bar[t - 1])

    def to_dict(self):
        return {
            "t_max": self.t_max,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }


def build_schedule(t_max=1000, beta_start=1e-4, beta_end=0.02):
    """Linear beta schedule with float64 tables.

    Monotonicity falls out of the construction: beta increases linearly, so
    alpha decreases and alpha_bar is strictly decreasing in (0, 1).
    """
    t_max = check_positive_int("t_max", t_max)
    beta_start = float(beta_start)
    beta_end = float(beta_end)
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    beta = np.linspace(beta_start, beta_end, t_max, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sched = NoiseSchedule(
        t_max=t_max,
        beta_start=beta_start,
        beta_end=beta_end,
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
    )
    assert np.all(alpha_bar > 0) and np.all(alpha_bar < 1)
    assert np.all(np.diff(alpha_bar) < 0)
    return sched


def _broadcast_rates(schedule, t, x0):
    """Per-sample sqrt rates shaped to broadcast against x0."""
    sig = schedule.signal_rate(t)
    noi = schedule.noise_rate(t)
    if np.ndim(sig) == 0:
        return float(sig), float(noi)
    # batched t: x0 leading dim must match, rates broadcast over trailing dims
    if len(sig) != x0.shape[0]:
        raise ValueError(
            f"batched t has length {len(sig)} but x0 has leading dim {x0.shape[0]}"
        )
    extra = (1,) * (x0.ndim - 1)
    return sig.reshape(-1, *extra), noi.reshape(-1, *extra)


def forward_diffuse(x0, t, eps, schedule):
    """Noise x0 to step t with the given unit-normal draw eps.

    x0 and eps must have identical shapes; t is a scalar step or a 1-d array
    with one step per leading-dim sample. Accepts numpy arrays or torch
    tensors and returns the same kind.
    """
    is_torch = isinstance(x0, torch.Tensor)
    if is_torch != isinstance(eps, torch.Tensor):
        raise TypeError("x0 and eps must both be numpy or both be torch")
    if tuple(x0.shape) != tuple(eps.shape):
        raise ValueError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    sig, noi = _broadcast_rates(schedule, t, x0)
    if is_torch:
        if np.ndim(sig) > 0:
            sig = torch.as_tensor(sig, dtype=x0.dtype, device=x0.device)
            noi = torch.as_tensor(noi, dtype=x0.dtype, device=x0.device)
        return sig * x0 + noi * eps
    return sig * np.asarray(x0) + noi * np.asarray(eps)
