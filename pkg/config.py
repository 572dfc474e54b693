# config.py
import hashlib
import json
import os
from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Optional, Tuple

from dotenv import dotenv_values, load_dotenv

from data import (
    COMPASS_TOKENS, DEFAULT_SPEED_EDGES, EXPERIMENT_DIRECTIONS, REFERENCE_ALTITUDES, Regime,
    SynthConfig, default_regimes,
)

MODEL_KINDS = ("gmm", "ddpm", "fm")


class ConfigError(ValueError):
    def __init__(self, problems: List[str]):
        super().__init__("; ".join(problems))
        self.problems = list(problems)


def load_config():
    """Process-level settings from the environment (and a .env file when present)."""
    load_dotenv()
    return {
        'LOG_FILE': os.getenv("LOG_FILE", "/tmp/windgen.log"),
        'LOG_LEVEL': os.getenv("LOG_LEVEL", "INFO"),
        'THREADS': int(os.getenv("WINDGEN_THREADS", 1)),
        'DATA_TZ': os.getenv("WINDGEN_DATA_TZ", "UTC"),
    }


@dataclass(frozen=True)
class RunConfig:
    dataset_path: Optional[str] = None
    synth: Optional[SynthConfig] = None
    model_kind: str = "ddpm"
    seed: int = 0
    out_dir: str = "runs"
    threads: Optional[int] = None
    speed_bin_edges: Tuple[float, ...] = DEFAULT_SPEED_EDGES
    directions: Tuple[str, ...] = EXPERIMENT_DIRECTIONS
    # gmm
    pca_components: int = 7
    gmm_k_min: int = 1
    gmm_k_max: int = 40
    gmm_tol: float = 1e-6
    gmm_max_iter: int = 500
    gmm_restarts: int = 3
    gmm_max_draws: int = 10 ** 8
    # shared U-Net training
    unet_base_width: int = 32
    unet_depth: int = 2
    unet_time_embed_dim: int = 64
    train_steps: int = 5000
    batch_size: int = 128
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    log_every: int = 250
    # ddpm
    ddpm_t: int = 500
    ddpm_beta_start: float = 1e-4
    ddpm_beta_end: float = 0.02
    # fm
    fm_sigma: float = 0.01
    fm_steps: int = 100
    fm_integrator: str = "euler"
    # eval
    kl_neighbors: int = 1
    eval_samples_per_condition: int = 500
    min_support: int = 30

    def to_dict(self) -> Dict:
        raw = asdict(self)
        raw["synth"] = None if self.synth is None else {
            **asdict(self.synth), "regimes": [asdict(r) for r in self.synth.regimes]
        }
        return raw

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# KEY -> RunConfig field; everything not listed here is rejected.
_SCALAR_KEYS = {
    "DATASET_PATH": ("dataset_path", str),
    "MODEL_KIND": ("model_kind", str),
    "SEED": ("seed", int),
    "OUT_DIR": ("out_dir", str),
    "THREADS": ("threads", int),
    "PCA_COMPONENTS": ("pca_components", int),
    "GMM_K_MIN": ("gmm_k_min", int),
    "GMM_K_MAX": ("gmm_k_max", int),
    "GMM_TOL": ("gmm_tol", float),
    "GMM_MAX_ITER": ("gmm_max_iter", int),
    "GMM_RESTARTS": ("gmm_restarts", int),
    "GMM_MAX_DRAWS": ("gmm_max_draws", int),
    "UNET_BASE_WIDTH": ("unet_base_width", int),
    "UNET_DEPTH": ("unet_depth", int),
    "UNET_TIME_EMBED_DIM": ("unet_time_embed_dim", int),
    "TRAIN_STEPS": ("train_steps", int),
    "BATCH_SIZE": ("batch_size", int),
    "LEARNING_RATE": ("learning_rate", float),
    "ADAM_BETA1": ("adam_beta1", float),
    "ADAM_BETA2": ("adam_beta2", float),
    "ADAM_EPS": ("adam_eps", float),
    "LOG_EVERY": ("log_every", int),
    "DDPM_T": ("ddpm_t", int),
    "DDPM_BETA_START": ("ddpm_beta_start", float),
    "DDPM_BETA_END": ("ddpm_beta_end", float),
    "FM_SIGMA": ("fm_sigma", float),
    "FM_STEPS": ("fm_steps", int),
    "FM_INTEGRATOR": ("fm_integrator", str),
    "KL_NEIGHBORS": ("kl_neighbors", int),
    "EVAL_SAMPLES_PER_CONDITION": ("eval_samples_per_condition", int),
    "MIN_SUPPORT": ("min_support", int),
}
_SYNTH_KEYS = (
    "SYNTH_N_SAMPLES", "SYNTH_REGIMES", "SYNTH_NOISE_STD",
    "SYNTH_ALTITUDE_COUNT", "SYNTH_ALTITUDE_MIN", "SYNTH_ALTITUDE_MAX",
)


def _parse_int(raw: str) -> int:
    value = float(raw)
    if not value.is_integer():
        raise ValueError(f"{raw!r} is not an integer")
    return int(value)


def _parse_regimes(raw: str) -> Tuple[Regime, ...]:
    """`weight:u_star:direction_mean:direction_spread:z0` entries separated by `;`, angles in radians."""
    regimes = []
    for chunk in [c for c in raw.split(";") if c.strip()]:
        parts = [float(p) for p in chunk.split(":")]
        if len(parts) != 5:
            raise ValueError(f"regime {chunk!r} needs 5 fields")
        weight, u_star, mean, spread, z0 = parts
        regimes.append(Regime(weight, u_star, mean, spread, z0))
    if not regimes:
        raise ValueError("no regimes given")
    return tuple(regimes)


def _format_regimes(regimes) -> str:
    return ";".join(
        f"{r.weight!r}:{r.friction_speed!r}:{r.direction_mean!r}:{r.direction_spread!r}:{r.roughness!r}"
        for r in regimes
    )


def parse_run_config(values: Dict[str, Optional[str]]) -> RunConfig:
    problems: List[str] = []
    kwargs = {}
    synth_values = {}
    for key, raw in values.items():
        raw = "" if raw is None else str(raw).strip()
        if key in _SCALAR_KEYS:
            name, kind = _SCALAR_KEYS[key]
            try:
                kwargs[name] = _parse_int(raw) if kind is int else kind(raw)
            except ValueError as exc:
                problems.append(f"{key}: {exc}")
        elif key in _SYNTH_KEYS:
            synth_values[key] = raw
        elif key == "SPEED_BIN_EDGES":
            try:
                kwargs["speed_bin_edges"] = tuple(float(x) for x in raw.split(",") if x.strip())
            except ValueError as exc:
                problems.append(f"{key}: {exc}")
        elif key == "DIRECTIONS":
            kwargs["directions"] = tuple(x.strip().upper() for x in raw.split(",") if x.strip())
        else:
            problems.append(f"unknown key {key}")

    synth = None
    if synth_values:
        defaults = SynthConfig()
        try:
            synth = SynthConfig(
                n_samples=_parse_int(synth_values.get("SYNTH_N_SAMPLES", str(defaults.n_samples))),
                regimes=(_parse_regimes(synth_values["SYNTH_REGIMES"])
                         if "SYNTH_REGIMES" in synth_values else default_regimes()),
                noise_std=float(synth_values.get("SYNTH_NOISE_STD", defaults.noise_std)),
                altitude_count=_parse_int(synth_values.get("SYNTH_ALTITUDE_COUNT", str(defaults.altitude_count))),
                altitude_range=(
                    float(synth_values.get("SYNTH_ALTITUDE_MIN", REFERENCE_ALTITUDES[0])),
                    float(synth_values.get("SYNTH_ALTITUDE_MAX", REFERENCE_ALTITUDES[1])),
                ),
                seed=kwargs.get("seed", 0),
            )
            problems.extend(f"synth: {p}" for p in synth.validate())
        except (ValueError, KeyError) as exc:
            problems.append(f"synth: {exc}")

    config = RunConfig(synth=synth, **kwargs)
    problems.extend(validate_run_config(config))
    if problems:
        raise ConfigError(problems)
    return config


def validate_run_config(config: RunConfig) -> List[str]:
    problems = []
    if (config.dataset_path is None) == (config.synth is None):
        problems.append("exactly one data source is required: DATASET_PATH or SYNTH_* keys")
    if config.model_kind not in MODEL_KINDS:
        problems.append(f"MODEL_KIND must be one of {MODEL_KINDS}, got {config.model_kind!r}")
    if config.fm_integrator not in ("euler", "heun"):
        problems.append(f"FM_INTEGRATOR must be euler or heun, got {config.fm_integrator!r}")
    unknown = [d for d in config.directions if d not in COMPASS_TOKENS]
    if unknown or not config.directions:
        problems.append(f"DIRECTIONS must be compass tokens, got {list(config.directions)}")
    edges = config.speed_bin_edges
    if len(edges) < 2 or edges[0] != 0.0 or any(b <= a for a, b in zip(edges, edges[1:])):
        problems.append(f"SPEED_BIN_EDGES must start at 0 and increase strictly, got {list(edges)}")
    if config.threads is not None and config.threads < 1:
        problems.append(f"THREADS must be >= 1, got {config.threads}")
    positive = ("pca_components", "gmm_k_min", "gmm_max_iter", "gmm_restarts", "gmm_max_draws",
                "unet_base_width", "unet_time_embed_dim", "train_steps", "batch_size", "log_every",
                "fm_steps", "kl_neighbors", "eval_samples_per_condition")
    for name in positive:
        if getattr(config, name) < 1:
            problems.append(f"{name.upper()} must be >= 1, got {getattr(config, name)}")
    if config.gmm_k_max < config.gmm_k_min:
        problems.append("GMM_K_MAX must be >= GMM_K_MIN")
    if config.unet_depth < 0:
        problems.append(f"UNET_DEPTH must be >= 0, got {config.unet_depth}")
    if config.unet_time_embed_dim % 2:
        problems.append("UNET_TIME_EMBED_DIM must be even")
    if config.ddpm_t < 2 or not 0 < config.ddpm_beta_start < config.ddpm_beta_end < 1:
        problems.append("DDPM schedule needs DDPM_T >= 2 and 0 < DDPM_BETA_START < DDPM_BETA_END < 1")
    for name in ("gmm_tol", "learning_rate", "adam_eps", "fm_sigma"):
        if not getattr(config, name) > 0:
            problems.append(f"{name.upper()} must be > 0")
    for name in ("adam_beta1", "adam_beta2"):
        if not 0 <= getattr(config, name) < 1:
            problems.append(f"{name.upper()} must lie in [0, 1)")
    return problems


def load_run_config(path, **overrides) -> RunConfig:
    """Strictly parse a KEY=VALUE run file; every violation is reported in one ConfigError."""
    if not os.path.exists(path):
        raise ConfigError([f"config file {path} does not exist"])
    config = parse_run_config(dotenv_values(path, interpolate=False))
    return apply_overrides(config, **overrides)


def apply_overrides(config: RunConfig, **overrides) -> RunConfig:
    updates = {k: v for k, v in overrides.items() if v is not None}
    if not updates:
        return config
    config = replace(config, **updates)
    if config.synth is not None and "seed" in updates:
        config = replace(config, synth=replace(config.synth, seed=config.seed))
    problems = validate_run_config(config)
    if problems:
        raise ConfigError(problems)
    return config


def dump_run_config(config: RunConfig) -> str:
    """The KEY=VALUE text that parses back to `config`."""
    lines = []
    for key, (name, _) in _SCALAR_KEYS.items():
        value = getattr(config, name)
        if value is not None:
            lines.append(f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}")
    lines.append("SPEED_BIN_EDGES=" + ",".join(repr(e) for e in config.speed_bin_edges))
    lines.append("DIRECTIONS=" + ",".join(config.directions))
    if config.synth is not None:
        s = config.synth
        lines += [
            f"SYNTH_N_SAMPLES={s.n_samples}",
            f"SYNTH_REGIMES={_format_regimes(s.regimes)}",
            f"SYNTH_NOISE_STD={s.noise_std!r}",
            f"SYNTH_ALTITUDE_COUNT={s.altitude_count}",
            f"SYNTH_ALTITUDE_MIN={s.altitude_range[0]!r}",
            f"SYNTH_ALTITUDE_MAX={s.altitude_range[1]!r}",
        ]
    return "\n".join(lines) + "\n"
