import pytest

from config import RunConfig
from data import SynthConfig, synth_generate
from helpers import mixture_samples


@pytest.fixture
def mixture_data():
    return mixture_samples(10_000, seed=11)


@pytest.fixture(scope="session")
def small_synth():
    return synth_generate(SynthConfig(n_samples=400, altitude_count=8, seed=3))


@pytest.fixture
def tiny_run_config():
    return RunConfig(
        synth=SynthConfig(n_samples=160, altitude_count=6, seed=5),
        model_kind="ddpm",
        seed=5,
        pca_components=3,
        gmm_k_max=3,
        gmm_restarts=1,
        unet_base_width=8,
        unet_depth=1,
        unet_time_embed_dim=8,
        train_steps=3,
        batch_size=16,
        log_every=1,
        ddpm_t=5,
        fm_steps=3,
        eval_samples_per_condition=12,
    )
