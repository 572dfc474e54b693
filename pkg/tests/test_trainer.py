import dataclasses

import numpy as np
import pytest
import torch

from data import Dataset, DirectionSet, EmptyDatasetError, Scaler, SynthConfig, fit_scaler, synth_generate
from ddpm import DiffusionModel
from evaluation import marginal_sample
from fm import FlowModel
from gmm import GmmPipeline
from nn import DTYPE, backward, named_arrays
from trainer import TrainSettings, derive_seeds, prepare_tensors, train_loop, train_model, unet_config_for


def _synth(config):
    return synth_generate(config.synth, dirs=DirectionSet())


def test_unknown_kind_is_rejected(tiny_run_config, caplog):
    with pytest.raises(ValueError, match="vae"):
        train_model("vae", _synth(tiny_run_config), tiny_run_config)
    assert "not implemented" in caplog.text


def test_empty_dataset_is_rejected(tiny_run_config):
    empty = Dataset((), np.arange(1.0, 7.0))
    with pytest.raises(EmptyDatasetError):
        train_model("ddpm", empty, tiny_run_config)


def test_derive_seeds_are_stable_and_distinct():
    assert derive_seeds(5, 2) == derive_seeds(5, 2)
    a, b = derive_seeds(5, 2)
    assert a != b
    assert derive_seeds(6, 2) != [a, b]


def test_prepare_tensors_pads_and_normalizes(tiny_run_config):
    dataset = _synth(tiny_run_config)
    unet_config = unet_config_for(dataset, tiny_run_config)
    assert unet_config.cond_classes == (4, 16)
    x, speed, direction = prepare_tensors(dataset, fit_scaler(dataset), unet_config)
    assert x.shape == (160, 2, unet_config.padded_length)
    assert x.dtype == DTYPE
    assert speed.shape == direction.shape == (160,)


@pytest.mark.parametrize("kind,expected", [("ddpm", DiffusionModel), ("fm", FlowModel), ("gmm", GmmPipeline)])
def test_tiny_models_train_and_sample(tiny_run_config, kind, expected):
    dataset = _synth(tiny_run_config)
    model = train_model(kind, dataset, tiny_run_config)
    assert isinstance(model, expected)
    label = dataset.labels()[0]
    x = model.sample(label, 4, seed=0)
    assert x.shape == (4, 2, 6)
    assert np.all(np.isfinite(x))


@pytest.mark.parametrize("kind", ["ddpm", "fm"])
def test_training_is_deterministic_for_a_seed(tiny_run_config, kind):
    dataset = _synth(tiny_run_config)
    a = named_arrays(train_model(kind, dataset, tiny_run_config).unet)
    b = named_arrays(train_model(kind, dataset, tiny_run_config).unet)
    c = named_arrays(train_model(kind, dataset, tiny_run_config, seed=99).unet)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_train_loop_history_has_one_loss_per_step():
    model = torch.nn.Linear(3, 1).to(DTYPE)
    x = torch.randn((50, 3), generator=torch.Generator().manual_seed(0), dtype=DTYPE)
    zeros = torch.zeros(50, dtype=torch.long)

    def step(m, xb, sb, db, generator, mask):
        loss = ((m(xb).squeeze(-1) - xb @ torch.tensor([1.0, -1.0, 2.0], dtype=DTYPE)) ** 2).mean()
        return loss.detach(), backward(loss, m)

    settings = TrainSettings(steps=200, batch_size=16, learning_rate=0.05, log_every=50)
    history = train_loop(model, step, x, zeros, zeros, settings, seed=0)
    assert len(history) == 200
    assert history[-1] < 0.1 * history[0]


@pytest.mark.parametrize("kind", ["ddpm", "fm"])
def test_pinned_scaler_is_reused(tiny_run_config, kind):
    dataset = _synth(tiny_run_config)
    pinned = Scaler(np.ones((2, 6)), np.full((2, 6), 2.0))
    assert train_model(kind, dataset.with_scaler(pinned), tiny_run_config).scaler is pinned
    fitted = train_model(kind, dataset, tiny_run_config).scaler
    assert np.array_equal(fitted.mean, fit_scaler(dataset).mean)


def _speed(x):
    return np.hypot(x[:, 0], x[:, 1])


@pytest.mark.slow
@pytest.mark.parametrize("kind", ["ddpm", "fm"])
def test_generators_track_per_bin_mean_speed(tiny_run_config, kind):
    """Per speed bin, generated mean speed stays within 15% of the data at every altitude, in bin order."""
    config = dataclasses.replace(
        tiny_run_config,
        synth=SynthConfig(n_samples=6000, altitude_count=47, seed=1),
        unet_base_width=32, unet_depth=2, unet_time_embed_dim=32,
        train_steps=4000, batch_size=128, log_every=500,
        ddpm_t=500, fm_steps=100,
    )
    dataset = _synth(config)
    assert dataset.n_altitudes == 47
    model = train_model(kind, dataset, config)
    bins = sorted({lbl.speed_bin for lbl in dataset.labels()})
    assert len(bins) == 4
    fake_levels = []
    for b in bins:
        real = dataset.subset([lbl.speed_bin == b for lbl in dataset.labels()]).to_array()
        fake = marginal_sample(model, dataset, 1000, seed=b, speed_bin=b)
        real_mean, fake_mean = _speed(real).mean(axis=0), _speed(fake).mean(axis=0)
        assert np.all(np.abs(fake_mean / real_mean - 1.0) < 0.15), (b, fake_mean / real_mean)
        fake_levels.append(fake_mean.mean())
    assert fake_levels == sorted(fake_levels)
