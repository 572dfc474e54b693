# evaluation.py
"""
Model comparison: per-altitude KL curves, conditional mean/std speed
profiles, the condition-holdout grid, and plot-ready report files.

Generators are duck-typed. Anything with `sample(condition, n, seed)`
returning (n, 2, A) velocities in m/s plus `speed_bins`, `directions` and
`altitudes` attributes can be evaluated; `sample_labels(labels, seed)` is
used for marginal draws when present.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from data import ConditionLabel, Dataset, DirectionSet, InputError, SpeedBins, split_holdout
from gmm import DEFAULT_MAX_DRAWS, GmmPipeline, NoMassError
from stats import InsufficientSamplesError, ProfileStats, speed_stats, symmetrized_kl

logger = logging.getLogger(__name__)

MISSING = "missing"
LOW_SUPPORT = 30
REPORT_SCHEMA_VERSION = 1


class HoldoutLeakError(RuntimeError):
    pass


@dataclass
class ConditionResult:
    model: str
    condition: ConditionLabel
    real_count: int
    generated_count: int
    low_support: bool
    real_stats: Optional[ProfileStats]
    generated_stats: Optional[ProfileStats]
    kl: Optional[np.ndarray]
    note: str = ""


@dataclass
class FoldResult:
    condition: ConditionLabel
    status: str
    kl: Optional[float]
    train_count: int
    test_count: int
    generated_count: int = 0
    error: str = ""


@dataclass
class EvalReport:
    altitudes: np.ndarray
    speed_bins: SpeedBins = field(default_factory=SpeedBins)
    directions: DirectionSet = field(default_factory=DirectionSet)
    kl_by_altitude: Dict[str, Optional[np.ndarray]] = field(default_factory=dict)
    conditional: List[ConditionResult] = field(default_factory=list)
    kfold_grid: List[FoldResult] = field(default_factory=list)
    bivariate: Dict[str, np.ndarray] = field(default_factory=dict)
    metadata: Dict = field(default_factory=dict)


def condition_seed(seed: int, label: Optional[ConditionLabel]) -> int:
    """Seed derived from (seed, label) alone, so grid order does not matter."""
    key = [int(seed)]
    if label is not None:
        key += [label.speed_bin, 0 if label.direction is None else label.direction + 1]
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def _as_array(profiles) -> np.ndarray:
    if isinstance(profiles, np.ndarray):
        return profiles
    if len(profiles) == 0:
        return np.zeros((0, 2, 0))
    return np.stack([np.stack([p.u, p.v]) for p in profiles])


def _speed_stats(x: np.ndarray) -> ProfileStats:
    return speed_stats(np.hypot(x[:, 0, :], x[:, 1, :]))


def altitude_mean(x: np.ndarray) -> np.ndarray:
    """(n, 2) altitude-averaged (u, v)."""
    return _as_array(x).mean(axis=2)


def kl_by_altitude(real, generated, k: int = 1, workers: int = 1) -> np.ndarray:
    """Symmetrized KL of the 2-D (u, v) point clouds at every altitude."""
    real = real.to_array() if isinstance(real, Dataset) else _as_array(real)
    generated = _as_array(generated)
    if real.shape[0] == 0 or generated.shape[0] == 0:
        raise InsufficientSamplesError("both sample sets must be non-empty")
    if real.shape[1:] != generated.shape[1:]:
        raise InputError(f"altitude layouts differ: {real.shape[1:]} vs {generated.shape[1:]}")
    return np.array([
        symmetrized_kl(real[:, :, a], generated[:, :, a], k=k, workers=workers)
        for a in range(real.shape[2])
    ])


def _check_vocabulary(model, dataset: Dataset):
    if tuple(model.speed_bins.edges) != tuple(dataset.speed_bins.edges):
        raise InputError(f"model speed bins {model.speed_bins.edges} differ from dataset {dataset.speed_bins.edges}")
    if tuple(model.directions.tokens) != tuple(dataset.directions.tokens):
        raise InputError("model direction vocabulary differs from the dataset's")
    if np.asarray(model.altitudes).size != dataset.n_altitudes:
        raise InputError(f"model has {np.asarray(model.altitudes).size} altitudes, dataset has {dataset.n_altitudes}")


def marginal_sample(model, dataset: Dataset, n: int, seed: int, speed_bin: Optional[int] = None) -> np.ndarray:
    """Draws with labels mixed by their empirical frequency (optionally within one speed bin)."""
    query = None if speed_bin is None else ConditionLabel(speed_bin, None)
    if isinstance(model, GmmPipeline):
        return model.sample(query, n, seed)
    pool = [lbl for lbl in dataset.labels() if query is None or query.matches(lbl)]
    if not pool:
        raise InputError(f"no profiles with speed bin {speed_bin} to draw labels from")
    rng = np.random.default_rng(seed)
    labels = [pool[i] for i in rng.integers(len(pool), size=n)]
    if hasattr(model, "sample_labels"):
        return model.sample_labels(labels, seed)
    counts: Dict[ConditionLabel, int] = {}
    for lbl in labels:
        counts[lbl] = counts.get(lbl, 0) + 1
    parts = [model.sample(lbl, c, condition_seed(seed, lbl)) for lbl, c in sorted(counts.items())]
    return np.concatenate(parts)


def sample_profiles(model, condition: Optional[ConditionLabel], n: int, seed: int,
                    dataset: Optional[Dataset] = None, max_draws: int = DEFAULT_MAX_DRAWS) -> np.ndarray:
    if isinstance(model, GmmPipeline):
        return model.sample(condition, n, seed, max_draws)
    if condition is None or condition.direction is None:
        if dataset is None:
            raise InputError("marginal draws from a deep generator need a dataset for label frequencies")
        return marginal_sample(model, dataset, n, seed, None if condition is None else condition.speed_bin)
    return model.sample(condition, n, seed)


def unconditional_report(models: Dict[str, object], dataset: Dataset, seed: int, n: Optional[int] = None,
                         k: int = 1, workers: int = 1) -> EvalReport:
    """KL-by-altitude and altitude-averaged scatter for every model against the whole dataset."""
    n = len(dataset) if n is None else n
    report = EvalReport(altitudes=dataset.altitudes, speed_bins=dataset.speed_bins, directions=dataset.directions)
    report.bivariate["data"] = altitude_mean(dataset.to_array())
    for name, model in models.items():
        _check_vocabulary(model, dataset)
        try:
            x = marginal_sample(model, dataset, n, seed)
        except NoMassError as exc:
            logger.warning("[unconditional_report] %s produced no samples: %s", name, exc)
            report.kl_by_altitude[name] = None
            continue
        report.kl_by_altitude[name] = kl_by_altitude(dataset, x, k=k, workers=workers)
        report.bivariate[name] = altitude_mean(x)
        logger.info("[unconditional_report] %s mean KL=%.4f over %d altitudes",
                    name, float(report.kl_by_altitude[name].mean()), dataset.n_altitudes)
    return report


def conditional_report(model, dataset: Dataset, conditions: Sequence[ConditionLabel], n_per_condition: int,
                       seed: int, name: str = "model", k: int = 1, workers: int = 1,
                       min_support: int = LOW_SUPPORT, max_draws: int = DEFAULT_MAX_DRAWS) -> List[ConditionResult]:
    _check_vocabulary(model, dataset)
    real_all = dataset.to_array()
    labels = dataset.labels()
    results = []
    for condition in conditions:
        keep = np.array([condition.matches(lbl) for lbl in labels], dtype=bool)
        real = real_all[keep] if keep.size else real_all[:0]
        low = real.shape[0] < min_support
        if low:
            logger.warning("[conditional_report] %s: only %d real profiles for %s",
                           name, real.shape[0], condition.format(dataset.directions))
        real_stats = _speed_stats(real) if real.shape[0] else None
        try:
            generated = sample_profiles(model, condition, n_per_condition, condition_seed(seed, condition),
                                        dataset=dataset, max_draws=max_draws)
        except NoMassError as exc:
            results.append(ConditionResult(name, condition, real.shape[0], 0, low, real_stats, None, None, str(exc)))
            continue
        kl, note = None, ""
        try:
            kl = kl_by_altitude(real, generated, k=k, workers=workers)
        except InsufficientSamplesError as exc:
            note = str(exc)
        results.append(ConditionResult(name, condition, real.shape[0], generated.shape[0], low,
                                       real_stats, _speed_stats(generated), kl, note))
    return results


def kfold_generalization(trainer: Callable[[Dataset, int], object], dataset: Dataset,
                         grid: Sequence[ConditionLabel], seed: int, k: int = 1, workers: int = 1,
                         max_draws: int = DEFAULT_MAX_DRAWS) -> List[FoldResult]:
    """Hold out each grid label in turn, retrain from scratch, and score samples for the unseen label."""
    results = []
    for i, label in enumerate(grid):
        tag = label.format(dataset.directions)
        fold_seed = condition_seed(seed, label)
        split = split_holdout(dataset, label)
        leaked = sum(label.matches(p.condition) for p in split.train.profiles)
        if leaked:
            raise HoldoutLeakError(f"{leaked} profiles labelled {tag} reached the training split")
        result = FoldResult(label, "ok", None, len(split.train), len(split.test))
        logger.info("[kfold] fold %d/%d holdout=%s train=%d test=%d seed=%d",
                    i + 1, len(grid), tag, len(split.train), len(split.test), fold_seed)
        try:
            if split.test_missing:
                raise InputError(f"held-out label {tag} has no profiles")
            model = trainer(split.train, fold_seed)
            generated = sample_profiles(model, label, len(split.test), fold_seed, dataset=split.train,
                                        max_draws=max_draws)
            result.generated_count = generated.shape[0]
            result.kl = symmetrized_kl(altitude_mean(split.test.to_array()), altitude_mean(generated),
                                       k=k, workers=workers)
        except (NoMassError, InsufficientSamplesError) as exc:
            result.status, result.error = MISSING, str(exc)
            logger.warning("[kfold] %s: no usable samples: %s", tag, exc)
        except Exception as exc:
            result.status, result.error = "failed", f"{type(exc).__name__}: {exc}"
            logger.error("[kfold] %s: fold failed: %s", tag, result.error, exc_info=True)
        results.append(result)
    return results


# ─── Report files ─────────────────────────────────────

def _cell(value):
    return None if value is None else float(value)


def _direction_token(label: ConditionLabel, dirs: DirectionSet) -> str:
    return "*" if label.direction is None else dirs.tokens[label.direction]


def _frame(rows: List[Dict], columns: List[str]) -> pd.DataFrame:
    return pd.DataFrame(rows, columns=columns)


def _write_csv(frame: pd.DataFrame, path: str):
    frame.to_csv(path, index=False, na_rep=MISSING, float_format="%.17g")


def kl_frame(report: EvalReport) -> pd.DataFrame:
    rows = []
    for model, kl in report.kl_by_altitude.items():
        for a, altitude in enumerate(report.altitudes):
            rows.append({"model": model, "altitude_index": a, "altitude": float(altitude),
                         "kl": None if kl is None else float(kl[a])})
    return _frame(rows, ["model", "altitude_index", "altitude", "kl"])


def conditional_frame(report: EvalReport) -> pd.DataFrame:
    columns = ["model", "condition", "speed_bin", "direction", "altitude_index", "altitude", "real_count",
               "generated_count", "low_support", "real_mean", "real_std", "generated_mean", "generated_std", "kl"]
    rows = []
    for r in report.conditional:
        for a, altitude in enumerate(report.altitudes):
            rows.append({
                "model": r.model,
                "condition": r.condition.format(report.directions),
                "speed_bin": r.condition.speed_bin,
                "direction": _direction_token(r.condition, report.directions),
                "altitude_index": a,
                "altitude": float(altitude),
                "real_count": r.real_count,
                "generated_count": r.generated_count,
                "low_support": r.low_support,
                "real_mean": _cell(r.real_stats.mean[a]) if r.real_stats else None,
                "real_std": _cell(r.real_stats.std[a]) if r.real_stats else None,
                "generated_mean": _cell(r.generated_stats.mean[a]) if r.generated_stats else None,
                "generated_std": _cell(r.generated_stats.std[a]) if r.generated_stats else None,
                "kl": _cell(r.kl[a]) if r.kl is not None else None,
            })
    return _frame(rows, columns)


def kfold_frame(report: EvalReport) -> pd.DataFrame:
    columns = ["condition", "speed_bin", "direction", "status", "kl", "train_count", "test_count",
               "generated_count", "error"]
    rows = [{
        "condition": f.condition.format(report.directions),
        "speed_bin": f.condition.speed_bin,
        "direction": _direction_token(f.condition, report.directions),
        "status": f.status,
        "kl": _cell(f.kl),
        "train_count": f.train_count,
        "test_count": f.test_count,
        "generated_count": f.generated_count,
        "error": f.error,
    } for f in report.kfold_grid]
    return _frame(rows, columns)


def bivariate_frame(report: EvalReport) -> pd.DataFrame:
    rows = [{"model": name, "u_mean": float(uv[0]), "v_mean": float(uv[1])}
            for name, points in report.bivariate.items() for uv in points]
    return _frame(rows, ["model", "u_mean", "v_mean"])


def _summary(report: EvalReport) -> Dict:
    kl_mean = {name: (MISSING if kl is None else float(np.mean(kl))) for name, kl in report.kl_by_altitude.items()}
    statuses: Dict[str, int] = {}
    for f in report.kfold_grid:
        statuses[f.status] = statuses.get(f.status, 0) + 1
    return {
        "mean_kl_by_model": kl_mean,
        "conditions_evaluated": len(report.conditional),
        "kfold_status_counts": statuses,
        "kfold_kl": {f.condition.format(report.directions): (MISSING if f.kl is None else f.kl)
                     for f in report.kfold_grid},
    }


def emit_report(report: EvalReport, out_dir) -> List[str]:
    """Write the CSV tables and report.json under out_dir; returns the written paths."""
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"output directory {out_dir} is not writable")
    tables = {
        "kl_by_altitude.csv": kl_frame(report),
        "conditional_profiles.csv": conditional_frame(report),
        "kfold_grid.csv": kfold_frame(report),
        "bivariate_samples.csv": bivariate_frame(report),
    }
    paths = []
    for filename, frame in tables.items():
        path = os.path.join(out_dir, filename)
        _write_csv(frame, path)
        paths.append(path)
    doc = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "metadata": report.metadata,
        "speed_bin_edges": list(report.speed_bins.edges),
        "directions": list(report.directions.tokens),
        "altitudes": np.asarray(report.altitudes, dtype=float).tolist(),
        "summary": _summary(report),
    }
    path = os.path.join(out_dir, "report.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2, allow_nan=False)
    paths.append(path)
    logger.info("[emit_report] Wrote %d files to %s", len(paths), out_dir)
    return paths


def emit_gmm_curves(pipeline: GmmPipeline, out_dir) -> List[str]:
    """Explained-variance and BIC curves of a fitted pipeline."""
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    variance = pd.DataFrame({
        "components": np.arange(1, len(pipeline.variance_curve) + 1),
        "cumulative_explained_variance": pipeline.variance_curve,
    })
    bic = pd.DataFrame(sorted(pipeline.bic_curve.items()), columns=["k", "bic"])
    paths = [os.path.join(out_dir, "pca_variance.csv"), os.path.join(out_dir, "bic_curve.csv")]
    _write_csv(variance, paths[0])
    _write_csv(bic, paths[1])
    return paths
