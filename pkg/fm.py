# fm.py
"""
Flow matching generator: Gaussian probability paths whose mean interpolates
a source draw x0 ~ N(0, I) (t = 0) and a data sample x1 (t = 1), regression
of the conditional velocity x1 - x0, and fixed-step ODE integration.

The time convention runs opposite to the diffusion module: there t = T is
noise, here t = 0 is. The continuity equation that links the learned field
to the evolving density motivates the objective but is never evaluated.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import torch

from data import ConditionLabel, DirectionSet, Scaler, SpeedBins
from nn import DTYPE, NonFiniteError, UNet1d, UNetConfig, backward, condition_tensors, crop_profiles, iter_batches, masked_mse

logger = logging.getLogger(__name__)

INTEGRATORS = ("euler", "heun")
SAMPLE_BATCH = 1024

# model(x_t, t in [0, 1], speed_bin, direction) -> velocity
VelocityModel = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class FlowConfig:
    sigma: float = 0.01
    n_steps: int = 100
    integrator: str = "euler"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.integrator not in INTEGRATORS:
            raise ValueError(f"integrator must be one of {INTEGRATORS}, got {self.integrator!r}")

    def to_dict(self) -> Dict:
        return asdict(self)


def fm_path_sample(x0, x1, t, sigma: float, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """x_t = t x1 + (1 - t) x0 + sigma * eta with eta ~ N(0, I); t scalar or per-sample."""
    t = torch.as_tensor(t, dtype=DTYPE)
    if torch.any(t < 0) or torch.any(t > 1):
        raise ValueError("path time must lie in [0, 1]")
    if x0.shape != x1.shape:
        raise ValueError(f"source and target shapes differ: {tuple(x0.shape)} vs {tuple(x1.shape)}")
    if t.dim() > 0:
        t = t.reshape(-1, *([1] * (x0.dim() - 1)))
    mu = t * x1 + (1.0 - t) * x0
    if sigma == 0:
        return mu
    return mu + sigma * torch.randn(x0.shape, generator=generator, dtype=DTYPE)


def fm_train_step(model: VelocityModel, x1: torch.Tensor, speed_bin: torch.Tensor, direction: torch.Tensor,
                  config: FlowConfig, generator: torch.Generator,
                  mask: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """Masked velocity-regression loss on one normalized, padded batch, and its gradients."""
    batch = x1.shape[0]
    x0 = torch.randn(x1.shape, generator=generator, dtype=DTYPE)
    t = torch.rand((batch,), generator=generator, dtype=DTYPE)
    x_t = fm_path_sample(x0, x1, t, config.sigma, generator)
    pred = model(x_t, t, speed_bin, direction)
    if mask is None:
        mask = torch.ones(1, 1, x1.shape[-1], dtype=DTYPE)
    loss = masked_mse(pred, x1 - x0, mask)
    if not torch.isfinite(loss):
        raise NonFiniteError(f"non-finite FM loss (batch={batch}, |x1|max={x1.abs().max().item():.3g})")
    grads = backward(loss, model) if isinstance(model, torch.nn.Module) and loss.requires_grad else {}
    return loss.detach(), grads


@torch.no_grad()
def integrate(model: VelocityModel, x: torch.Tensor, speed_bin, direction, config: FlowConfig) -> torch.Tensor:
    dt = 1.0 / config.n_steps
    size = x.shape[0]
    for step in range(config.n_steps):
        t = torch.full((size,), step * dt, dtype=DTYPE)
        v = model(x, t, speed_bin, direction)
        if config.integrator == "heun":
            x_pred = x + dt * v
            v_next = model(x_pred, t + dt, speed_bin, direction)
            x = x + 0.5 * dt * (v + v_next)
        else:
            x = x + dt * v
        if not torch.isfinite(x).all():
            raise NonFiniteError(f"non-finite FM state at step {step + 1}/{config.n_steps}")
    return x


@torch.no_grad()
def fm_sample(model: VelocityModel, config: FlowConfig, speed_bin: torch.Tensor, direction: torch.Tensor,
              shape: Tuple[int, ...], seed: int) -> torch.Tensor:
    """Integrate x0 ~ N(0, I) from t = 0 to 1. Returns normalized tensors."""
    generator = torch.Generator().manual_seed(int(seed))
    out = []
    for chunk in iter_batches(shape[0], SAMPLE_BATCH):
        x0 = torch.randn((chunk.stop - chunk.start, *shape[1:]), generator=generator, dtype=DTYPE)
        out.append(integrate(model, x0, speed_bin[chunk], direction[chunk], config))
    return torch.cat(out)


@dataclass(eq=False)
class FlowModel:
    """A trained conditional flow-matching generator with its normalization and vocabularies."""

    unet: UNet1d
    flow: FlowConfig
    scaler: Scaler
    altitudes: np.ndarray
    speed_bins: SpeedBins = field(default_factory=SpeedBins)
    directions: DirectionSet = field(default_factory=DirectionSet)
    kind: str = "fm"

    @property
    def config(self) -> UNetConfig:
        return self.unet.config

    def sample_labels(self, labels: Sequence[ConditionLabel], seed: int, n_steps: Optional[int] = None) -> np.ndarray:
        self.unet.eval()
        flow = self.flow if n_steps is None else FlowConfig(self.flow.sigma, n_steps, self.flow.integrator)
        speed, direction = condition_tensors(labels)
        shape = (len(labels), self.config.in_channels, self.config.padded_length)
        x = fm_sample(self.unet, flow, speed, direction, shape, seed)
        return self.scaler.inverse(crop_profiles(x, self.config).numpy())

    def sample(self, condition: ConditionLabel, n: int, seed: int) -> np.ndarray:
        if condition.direction is None:
            raise ValueError("flow sampling needs a concrete direction; draw labels for marginals")
        return self.sample_labels([condition] * n, seed)
