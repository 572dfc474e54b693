# nn.py
"""
Conditioned 1D U-Net shared by the diffusion and flow-matching generators,
plus the reverse-mode gradient and Adam helpers the training loop uses.

Profiles enter as (batch, 2, A') tensors: u and v are channels, altitude is
the sequence axis, padded on the right to a multiple of 2**depth.
"""

import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

logger = logging.getLogger(__name__)

DTYPE = torch.float64
TIME_SCALE = 1000.0
MAX_PERIOD = 10000.0


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 2
    sequence_length: int = 47
    base_width: int = 32
    depth: int = 2
    cond_classes: Tuple[int, int] = (4, 16)
    time_embed_dim: int = 64
    groups: int = 8

    def __post_init__(self):
        object.__setattr__(self, "cond_classes", tuple(int(c) for c in self.cond_classes))
        if self.time_embed_dim % 2:
            raise ValueError(f"time_embed_dim must be even, got {self.time_embed_dim}")
        if self.depth < 0 or self.base_width < 1 or self.sequence_length < 1:
            raise ValueError(f"invalid U-Net config {self}")

    @property
    def padded_length(self) -> int:
        stride = 2 ** self.depth
        return int(math.ceil(self.sequence_length / stride) * stride)

    def width(self, stage: int) -> int:
        return self.base_width * 2 ** stage

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: Dict) -> "UNetConfig":
        return cls(**{**raw, "cond_classes": tuple(raw["cond_classes"])})


# ─── Padding ──────────────────────────────────────────

def pad_profiles(x: torch.Tensor, config: UNetConfig) -> torch.Tensor:
    """Replicate-pad the altitude axis up to the configured padded length."""
    extra = config.padded_length - x.shape[-1]
    if extra < 0:
        raise ShapeError(f"sequence length {x.shape[-1]} exceeds padded length {config.padded_length}")
    if extra == 0:
        return x
    return torch.cat([x, x[..., -1:].expand(*x.shape[:-1], extra)], dim=-1)


def crop_profiles(x, config: UNetConfig):
    return x[..., :config.sequence_length]


def loss_mask(config: UNetConfig) -> torch.Tensor:
    """1 on measured altitudes, 0 on padding; broadcastable over (batch, channel, A')."""
    mask = torch.zeros(1, 1, config.padded_length, dtype=DTYPE)
    mask[..., :config.sequence_length] = 1.0
    return mask


def masked_mse(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    weights = mask.expand_as(pred)
    return ((pred - target) ** 2 * weights).sum() / weights.sum()


# ─── Embeddings ───────────────────────────────────────

def time_embed(t, dim: int) -> torch.Tensor:
    """Interleaved sin/cos features of t in [0, 1] at geometrically spaced frequencies.

    Returns shape (dim,) for a scalar t and (batch, dim) for a 1-D tensor.
    """
    if dim % 2:
        raise ValueError(f"time embedding dimension must be even, got {dim}")
    scalar = not torch.is_tensor(t) or t.dim() == 0
    t = torch.as_tensor(t, dtype=DTYPE).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(MAX_PERIOD) * torch.arange(half, dtype=DTYPE) / half)
    args = TIME_SCALE * t[:, None] * freqs[None, :]
    emb = torch.stack([torch.sin(args), torch.cos(args)], dim=-1).reshape(t.shape[0], dim)
    return emb[0] if scalar else emb


def _groups(groups: int, channels: int) -> int:
    return math.gcd(groups, channels)


class ResBlock(nn.Module):
    """Two conv -> group-norm -> SiLU layers with an additive embedding and a residual path."""

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, groups: int):
        super().__init__()
        self.conv1 = nn.Conv1d(in_ch, out_ch, kernel_size=3, padding=1)
        self.norm1 = nn.GroupNorm(_groups(groups, out_ch), out_ch)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.conv2 = nn.Conv1d(out_ch, out_ch, kernel_size=3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(groups, out_ch), out_ch)
        self.skip = nn.Conv1d(in_ch, out_ch, kernel_size=1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = F.silu(self.norm1(self.conv1(x)))
        h = h + self.emb_proj(emb).unsqueeze(-1)
        h = F.silu(self.norm2(self.conv2(h)))
        return self.skip(x) + h


class UNet1d(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        tdim = config.time_embed_dim
        n_speed, n_dir = config.cond_classes
        self.time_mlp = nn.Sequential(nn.Linear(tdim, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.speed_embed = nn.Embedding(n_speed, tdim)
        self.direction_embed = nn.Embedding(n_dir, tdim)

        self.inp = nn.Conv1d(config.in_channels, config.base_width, kernel_size=3, padding=1)
        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        for i in range(config.depth):
            self.enc.append(ResBlock(config.width(i), config.width(i), tdim, config.groups))
            self.down.append(nn.Conv1d(config.width(i), config.width(i + 1), kernel_size=3, stride=2, padding=1))
        self.mid = ResBlock(config.width(config.depth), config.width(config.depth), tdim, config.groups)
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in reversed(range(config.depth)):
            self.up.append(nn.ConvTranspose1d(config.width(i + 1), config.width(i), kernel_size=2, stride=2))
            self.dec.append(ResBlock(2 * config.width(i), config.width(i), tdim, config.groups))
        self.out_norm = nn.GroupNorm(_groups(config.groups, config.base_width), config.base_width)
        self.out = nn.Conv1d(config.base_width, config.in_channels, kernel_size=3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def embedding(self, t, speed_bin, direction):
        t = torch.as_tensor(t, dtype=DTYPE).reshape(-1)
        return (self.time_mlp(time_embed(t, self.config.time_embed_dim))
                + self.speed_embed(speed_bin) + self.direction_embed(direction))

    def forward(self, x, t, speed_bin, direction):
        cfg = self.config
        if x.dim() != 3 or x.shape[1] != cfg.in_channels or x.shape[2] != cfg.padded_length:
            raise ShapeError(f"expected (batch, {cfg.in_channels}, {cfg.padded_length}), got {tuple(x.shape)}")
        if not torch.isfinite(x).all():
            raise NonFiniteError("U-Net input contains non-finite values")
        emb = self.embedding(t, speed_bin, direction)
        if emb.shape[0] == 1 and x.shape[0] > 1:
            emb = emb.expand(x.shape[0], -1)

        h = self.inp(x)
        skips = []
        for block, down in zip(self.enc, self.down):
            h = block(h, emb)
            skips.append(h)
            h = down(h)
        h = self.mid(h, emb)
        for up, block in zip(self.up, self.dec):
            h = block(torch.cat([up(h), skips.pop()], dim=1), emb)
        out = self.out(F.silu(self.out_norm(h)))
        if not torch.isfinite(out).all():
            raise NonFiniteError("U-Net output contains non-finite values")
        return out


def build_unet(config: UNetConfig, seed: int) -> UNet1d:
    """Deterministic float64 U-Net for a given config and seed."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = UNet1d(config).to(DTYPE)
    logger.info("[build_unet] %d parameters (base_width=%d, depth=%d, A'=%d)",
                parameter_count(model), config.base_width, config.depth, config.padded_length)
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def condition_tensors(labels: Sequence) -> Tuple[torch.Tensor, torch.Tensor]:
    speed = torch.tensor([lbl.speed_bin for lbl in labels], dtype=torch.long)
    direction = torch.tensor([lbl.direction for lbl in labels], dtype=torch.long)
    return speed, direction


def unet_forward(params: UNet1d, x, t, speed_bin, direction) -> torch.Tensor:
    return params(x, t, speed_bin, direction)


# ─── Gradients and optimisation ───────────────────────

def backward(loss: torch.Tensor, model: nn.Module) -> "OrderedDict[str, torch.Tensor]":
    """Gradients of a scalar loss for every named parameter; unused parameters get exact zeros."""
    if not torch.is_tensor(loss) or loss.dim() != 0:
        raise ValueError("backward needs a scalar loss tensor")
    if loss.grad_fn is None:
        raise RuntimeError("loss has no recorded forward computation")
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return OrderedDict(
        (name, torch.zeros_like(p) if g is None else g.detach())
        for name, p, g in zip(names, params, grads)
    )


@dataclass
class AdamState:
    optimizer: torch.optim.Adam
    steps: int = 0


def adam_init(model: nn.Module, lr: float = 1e-3, betas: Tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> AdamState:
    return AdamState(torch.optim.Adam(model.parameters(), lr=lr, betas=betas, eps=eps))


def adam_step(state: AdamState, model: nn.Module, grads: Dict[str, torch.Tensor],
              lr: Optional[float] = None) -> Tuple[nn.Module, AdamState]:
    """One bias-corrected Adam update from a name-keyed gradient dict."""
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient in layer {name}")
    if lr is not None:
        for group in state.optimizer.param_groups:
            group["lr"] = lr
    for name, p in model.named_parameters():
        g = grads.get(name)
        p.grad = torch.zeros_like(p) if g is None else g.clone()
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    state.steps += 1
    return model, state


def named_arrays(model: nn.Module) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((name, t.detach().cpu().numpy()) for name, t in model.state_dict().items())


def load_arrays(model: nn.Module, arrays: Dict[str, np.ndarray]) -> nn.Module:
    expected = set(model.state_dict())
    missing = expected - set(arrays)
    if missing:
        raise ValueError(f"checkpoint is missing layers {sorted(missing)[:5]}")
    model.load_state_dict(OrderedDict((k, torch.from_numpy(np.array(arrays[k]))) for k in model.state_dict()))
    return model


def iter_batches(n: int, batch_size: int) -> Iterable[slice]:
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))
