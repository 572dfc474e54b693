# trainer.py

import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import torch

from data import Dataset, EmptyDatasetError, fit_scaler
from ddpm import DiffusionModel, ddpm_train_step, linear_schedule
from fm import FlowConfig, FlowModel, fm_train_step
from gmm import GmmPipeline, fit_pipeline
from nn import DTYPE, UNetConfig, adam_init, adam_step, build_unet, condition_tensors, loss_mask, pad_profiles

logger = logging.getLogger(__name__)

TrainedModel = Union[GmmPipeline, DiffusionModel, FlowModel]
# step(model, x, speed_bin, direction, generator, mask) -> (loss, grads)
StepFn = Callable[..., Tuple[torch.Tensor, Dict[str, torch.Tensor]]]


@dataclass(frozen=True)
class TrainSettings:
    steps: int = 5000
    batch_size: int = 128
    learning_rate: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    log_every: int = 250

    @classmethod
    def from_run_config(cls, config) -> "TrainSettings":
        return cls(
            steps=config.train_steps,
            batch_size=config.batch_size,
            learning_rate=config.learning_rate,
            betas=(config.adam_beta1, config.adam_beta2),
            eps=config.adam_eps,
            log_every=config.log_every,
        )


def derive_seeds(seed: int, count: int) -> List[int]:
    """Independent integer seeds for model init, batching, and so on."""
    return [int(s) for s in np.random.SeedSequence(int(seed)).generate_state(count)]


def unet_config_for(dataset: Dataset, config) -> UNetConfig:
    return UNetConfig(
        in_channels=2,
        sequence_length=dataset.n_altitudes,
        base_width=config.unet_base_width,
        depth=config.unet_depth,
        cond_classes=(dataset.speed_bins.n_bins, len(dataset.directions)),
        time_embed_dim=config.unet_time_embed_dim,
    )


def prepare_tensors(dataset: Dataset, scaler, unet_config: UNetConfig):
    """Normalized, padded (N, 2, A') profiles plus their condition index tensors."""
    x = torch.from_numpy(scaler.transform(dataset.to_array())).to(DTYPE)
    speed, direction = condition_tensors(dataset.labels())
    return pad_profiles(x, unet_config), speed, direction


def train_loop(model: torch.nn.Module, step_fn: StepFn, x: torch.Tensor, speed: torch.Tensor,
               direction: torch.Tensor, settings: TrainSettings, seed: int,
               mask: Optional[torch.Tensor] = None, tag: str = "train") -> List[float]:
    """Minibatch training with replacement; returns the per-step loss history."""
    n = x.shape[0]
    if n == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    generator = torch.Generator().manual_seed(int(seed))
    state = adam_init(model, settings.learning_rate, settings.betas, settings.eps)
    batch = min(settings.batch_size, n)
    history = []
    started = time.monotonic()
    model.train()
    for step in range(1, settings.steps + 1):
        idx = torch.randint(0, n, (batch,), generator=generator)
        loss, grads = step_fn(model, x[idx], speed[idx], direction[idx], generator, mask)
        adam_step(state, model, grads)
        history.append(float(loss))
        if step % settings.log_every == 0 or step == settings.steps:
            window = history[-settings.log_every:]
            logger.info("[%s] step=%d/%d loss=%.5f (mean of last %d) elapsed=%.1fs",
                        tag, step, settings.steps, float(np.mean(window)), len(window), time.monotonic() - started)
    model.eval()
    return history


def train_diffusion(dataset: Dataset, config, seed: Optional[int] = None) -> DiffusionModel:
    seed = config.seed if seed is None else seed
    init_seed, batch_seed = derive_seeds(seed, 2)
    scaler = dataset.scaler if dataset.scaler is not None else fit_scaler(dataset)
    unet_config = unet_config_for(dataset, config)
    unet = build_unet(unet_config, init_seed)
    schedule = linear_schedule(config.ddpm_t, config.ddpm_beta_start, config.ddpm_beta_end)
    x, speed, direction = prepare_tensors(dataset, scaler, unet_config)

    def step(model, xb, sb, db, generator, mask):
        return ddpm_train_step(model, xb, sb, db, schedule, generator, mask)

    train_loop(unet, step, x, speed, direction, TrainSettings.from_run_config(config), batch_seed,
               mask=loss_mask(unet_config), tag="train ddpm")
    return DiffusionModel(unet, schedule, scaler, dataset.altitudes, dataset.speed_bins, dataset.directions)


def train_flow(dataset: Dataset, config, seed: Optional[int] = None) -> FlowModel:
    seed = config.seed if seed is None else seed
    init_seed, batch_seed = derive_seeds(seed, 2)
    scaler = dataset.scaler if dataset.scaler is not None else fit_scaler(dataset)
    unet_config = unet_config_for(dataset, config)
    unet = build_unet(unet_config, init_seed)
    flow = FlowConfig(config.fm_sigma, config.fm_steps, config.fm_integrator)
    x, speed, direction = prepare_tensors(dataset, scaler, unet_config)

    def step(model, xb, sb, db, generator, mask):
        return fm_train_step(model, xb, sb, db, flow, generator, mask)

    train_loop(unet, step, x, speed, direction, TrainSettings.from_run_config(config), batch_seed,
               mask=loss_mask(unet_config), tag="train fm")
    return FlowModel(unet, flow, scaler, dataset.altitudes, dataset.speed_bins, dataset.directions)


def train_gmm(dataset: Dataset, config, seed: Optional[int] = None) -> GmmPipeline:
    seed = config.seed if seed is None else seed
    return fit_pipeline(
        dataset,
        n_components=config.pca_components,
        k_grid=range(config.gmm_k_min, config.gmm_k_max + 1),
        seed=seed,
        tol=config.gmm_tol,
        max_iter=config.gmm_max_iter,
        restarts=config.gmm_restarts,
    )


TRAINERS = {
    "gmm": train_gmm,
    "ddpm": train_diffusion,
    "fm": train_flow,
}


def train_model(kind: str, dataset: Dataset, config, seed: Optional[int] = None) -> TrainedModel:
    """Train a generator of the given kind from scratch on `dataset`."""
    trainer = TRAINERS.get(kind)
    if trainer is None:
        logger.error("Model kind '%s' is not implemented", kind)
        raise ValueError(f"unknown model kind {kind!r}; expected one of {sorted(TRAINERS)}")
    if len(dataset) == 0:
        raise EmptyDatasetError("training split is empty")
    logger.info("[train_model] kind=%s profiles=%d altitudes=%d seed=%s",
                kind, len(dataset), dataset.n_altitudes, config.seed if seed is None else seed)
    return trainer(dataset, config, seed)
