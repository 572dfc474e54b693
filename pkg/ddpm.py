# ddpm.py
"""
Denoising diffusion generator: linear noise schedule, closed-form forward
corruption, noise-prediction training and ancestral sampling, all
conditioned on the macroweather label.

Timestep indices run 1..T as in the usual notation; the network sees t/T.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import torch

from data import ConditionLabel, DirectionSet, Scaler, SpeedBins
from nn import (
    DTYPE, NonFiniteError, UNet1d, UNetConfig, backward, condition_tensors, crop_profiles,
    iter_batches, loss_mask, masked_mse,
)

logger = logging.getLogger(__name__)

DEFAULT_T = 500
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
SAMPLE_BATCH = 1024

# model(x_t, t in [0, 1], speed_bin, direction) -> predicted noise
NoiseModel = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)
    sigma: np.ndarray = field(init=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        if beta.ndim != 1 or beta.size < 1 or np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("beta must be a non-empty 1-D array with entries in (0, 1)")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", 1.0 - beta)
        object.__setattr__(self, "alpha_bar", np.cumprod(1.0 - beta))
        object.__setattr__(self, "sigma", np.sqrt(beta))

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def to_dict(self) -> Dict:
        return {"beta": self.beta.tolist()}

    @classmethod
    def from_dict(cls, raw: Dict) -> "NoiseSchedule":
        return cls(np.asarray(raw["beta"], dtype=float))


def linear_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA_START,
                    beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not 0 < beta_start < beta_end < 1:
        raise ValueError(f"need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})")
    schedule = NoiseSchedule(np.linspace(beta_start, beta_end, T))
    if schedule.alpha_bar[-1] >= 0.05:
        logger.warning("[linear_schedule] alpha_bar_T=%.4f; terminal state keeps signal", schedule.alpha_bar[-1])
    return schedule


def _per_sample(values: np.ndarray, t_index: torch.Tensor, ndim: int) -> torch.Tensor:
    picked = torch.as_tensor(values, dtype=DTYPE)[t_index]
    return picked.reshape(-1, *([1] * (ndim - 1)))


def forward_corrupt(x0, t, eps, schedule: NoiseSchedule):
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps for t in 1..T (scalar or per-sample)."""
    t_arr = np.asarray(t.cpu().numpy() if torch.is_tensor(t) else t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.T):
        raise ValueError(f"timestep outside [1, {schedule.T}]")
    if torch.is_tensor(x0):
        if eps.shape != x0.shape:
            raise ValueError("eps must match x0 in shape")
        index = torch.as_tensor(t_arr, dtype=torch.long).reshape(-1) - 1
        a_bar = _per_sample(schedule.alpha_bar, index, x0.dim())
        return torch.sqrt(a_bar) * x0 + torch.sqrt(1.0 - a_bar) * eps
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if eps.shape != x0.shape:
        raise ValueError("eps must match x0 in shape")
    a_bar = schedule.alpha_bar[t_arr.astype(int) - 1]
    if a_bar.ndim:
        a_bar = a_bar.reshape(-1, *([1] * (x0.ndim - 1)))
    return np.sqrt(a_bar) * x0 + np.sqrt(1.0 - a_bar) * eps


def ddpm_train_step(model: NoiseModel, x0: torch.Tensor, speed_bin: torch.Tensor, direction: torch.Tensor,
                    schedule: NoiseSchedule, generator: torch.Generator,
                    mask: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """Masked noise-regression loss on one normalized, padded batch, and its gradients."""
    batch = x0.shape[0]
    t = torch.randint(1, schedule.T + 1, (batch,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=DTYPE)
    x_t = forward_corrupt(x0, t, eps, schedule)
    pred = model(x_t, t.to(DTYPE) / schedule.T, speed_bin, direction)
    if mask is None:
        mask = torch.ones(1, 1, x0.shape[-1], dtype=DTYPE)
    loss = masked_mse(pred, eps, mask)
    if not torch.isfinite(loss):
        raise NonFiniteError(
            f"non-finite DDPM loss (batch={batch}, |x0|max={x0.abs().max().item():.3g}, t range={t.min().item()}..{t.max().item()})"
        )
    grads = backward(loss, model) if isinstance(model, torch.nn.Module) and loss.requires_grad else {}
    return loss.detach(), grads


@torch.no_grad()
def ddpm_sample(model: NoiseModel, schedule: NoiseSchedule, speed_bin: torch.Tensor, direction: torch.Tensor,
                shape: Tuple[int, ...], seed: int) -> torch.Tensor:
    """Ancestral sampling from x_T ~ N(0, I); the final step adds no noise. Returns normalized tensors."""
    generator = torch.Generator().manual_seed(int(seed))
    n = shape[0]
    out = []
    for chunk in iter_batches(n, SAMPLE_BATCH):
        size = chunk.stop - chunk.start
        x = torch.randn((size, *shape[1:]), generator=generator, dtype=DTYPE)
        sb, dr = speed_bin[chunk], direction[chunk]
        for t in range(schedule.T, 0, -1):
            i = t - 1
            t_in = torch.full((size,), t / schedule.T, dtype=DTYPE)
            eps = model(x, t_in, sb, dr)
            coef = schedule.beta[i] / np.sqrt(1.0 - schedule.alpha_bar[i])
            x = (x - coef * eps) / np.sqrt(schedule.alpha[i])
            if t > 1:
                x = x + schedule.sigma[i] * torch.randn(x.shape, generator=generator, dtype=DTYPE)
            if not torch.isfinite(x).all():
                raise NonFiniteError(f"non-finite DDPM state at t={t}")
        out.append(x)
    return torch.cat(out)


@dataclass(eq=False)
class DiffusionModel:
    """A trained conditional diffusion generator with its normalization and vocabularies."""

    unet: UNet1d
    schedule: NoiseSchedule
    scaler: Scaler
    altitudes: np.ndarray
    speed_bins: SpeedBins = field(default_factory=SpeedBins)
    directions: DirectionSet = field(default_factory=DirectionSet)
    kind: str = "ddpm"

    @property
    def config(self) -> UNetConfig:
        return self.unet.config

    def sample_labels(self, labels: Sequence[ConditionLabel], seed: int) -> np.ndarray:
        """One profile per label, (n, 2, A) in m/s."""
        self.unet.eval()
        speed, direction = condition_tensors(labels)
        shape = (len(labels), self.config.in_channels, self.config.padded_length)
        x = ddpm_sample(self.unet, self.schedule, speed, direction, shape, seed)
        return self.scaler.inverse(crop_profiles(x, self.config).numpy())

    def sample(self, condition: ConditionLabel, n: int, seed: int) -> np.ndarray:
        if condition.direction is None:
            raise ValueError("diffusion sampling needs a concrete direction; draw labels for marginals")
        return self.sample_labels([condition] * n, seed)
