# data.py
"""
Wind profile datasets: CSV ingestion, macroweather condition encoding,
normalization, the log-law synthetic oracle and condition-holdout splits.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import pytz
from dateutil import parser

logger = logging.getLogger(__name__)

COMPASS_TOKENS = (
    "N", "NNE", "NE", "ENE", "E", "ESE", "SE", "SSE",
    "S", "SSW", "SW", "WSW", "W", "WNW", "NW", "NNW",
)
# Directions accounting for most of the reference campaign's observations.
EXPERIMENT_DIRECTIONS = ("SW", "W", "WNW", "WSW")
DEFAULT_SPEED_EDGES = (0.0, 2.23, 5.36, 8.05, 15.65)
VON_KARMAN = 0.4
SCALE_FLOOR = 1e-8
REFERENCE_ALTITUDES = (20.0, 250.0)


class SchemaError(ValueError):
    pass


class EmptyDatasetError(ValueError):
    pass


class RowError(ValueError):
    def __init__(self, row_index, message):
        super().__init__(f"row {row_index}: {message}")
        self.row_index = row_index


class InputError(ValueError):
    pass


# ─── Conditions ───────────────────────────────────────

@dataclass(frozen=True)
class SpeedBins:
    edges: Tuple[float, ...] = DEFAULT_SPEED_EDGES

    def __post_init__(self):
        edges = tuple(float(e) for e in self.edges)
        if len(edges) < 2:
            raise InputError("speed bins need at least two edges")
        if edges[0] != 0.0:
            raise InputError(f"first speed bin edge must be 0.0, got {edges[0]}")
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise InputError(f"speed bin edges must be strictly increasing: {edges}")
        object.__setattr__(self, "edges", edges)

    @property
    def n_bins(self) -> int:
        return len(self.edges) - 1

    def index(self, speed: float) -> int:
        """Left-closed bins; anything at or above the last edge lands in the last bin."""
        if not math.isfinite(speed) or speed < 0:
            raise InputError(f"speed must be a finite value >= 0, got {speed}")
        i = int(np.searchsorted(self.edges, speed, side="right")) - 1
        return min(i, self.n_bins - 1)

    def representative(self, speed_bin: int) -> float:
        return 0.5 * (self.edges[speed_bin] + self.edges[speed_bin + 1])

    def describe(self) -> List[str]:
        return [
            f"{i}: [{lo:.2f}, {hi:.2f}) m/s" + (" and above" if i == self.n_bins - 1 else "")
            for i, (lo, hi) in enumerate(zip(self.edges, self.edges[1:]))
        ]


@dataclass(frozen=True)
class DirectionSet:
    tokens: Tuple[str, ...] = COMPASS_TOKENS

    def __post_init__(self):
        tokens = tuple(str(t).strip().upper() for t in self.tokens)
        unknown = [t for t in tokens if t not in COMPASS_TOKENS]
        if unknown or not tokens or len(set(tokens)) != len(tokens):
            raise InputError(f"invalid direction set {self.tokens}")
        object.__setattr__(self, "tokens", tokens)

    def __len__(self):
        return len(self.tokens)

    def index(self, token: str) -> int:
        key = str(token).strip().upper()
        try:
            return self.tokens.index(key)
        except ValueError:
            raise InputError(f"unknown direction token {token!r}") from None

    def bearing(self, direction: int) -> float:
        """Compass bearing (degrees clockwise from north) the wind blows from."""
        return 22.5 * COMPASS_TOKENS.index(self.tokens[direction])

    def nearest(self, bearing_deg: float) -> int:
        bearings = np.array([self.bearing(i) for i in range(len(self.tokens))])
        gap = np.abs((bearings - bearing_deg + 180.0) % 360.0 - 180.0)
        return int(np.argmin(gap))


@dataclass(frozen=True, order=True)
class ConditionLabel:
    speed_bin: int
    direction: Optional[int] = None

    def matches(self, other: "ConditionLabel") -> bool:
        """True when `other` satisfies this label; a None direction accepts any direction."""
        if self.speed_bin != other.speed_bin:
            return False
        return self.direction is None or self.direction == other.direction

    def format(self, dirs: DirectionSet) -> str:
        token = "*" if self.direction is None else dirs.tokens[self.direction]
        return f"{token}:{self.speed_bin}"

    @classmethod
    def parse(cls, text: str, bins: SpeedBins, dirs: DirectionSet) -> "ConditionLabel":
        """Parse the `DIRECTION:SPEED_BIN_INDEX` form, e.g. `SW:2` (`*:2` for any direction)."""
        try:
            token, raw_bin = str(text).split(":")
            speed_bin = int(raw_bin)
        except ValueError:
            raise InputError(f"condition must look like DIRECTION:SPEED_BIN, got {text!r}") from None
        if not 0 <= speed_bin < bins.n_bins:
            raise InputError(f"speed bin {speed_bin} outside [0, {bins.n_bins})")
        direction = None if token.strip() == "*" else dirs.index(token)
        return cls(speed_bin, direction)


def encode_condition(speed, direction, bins: SpeedBins, dirs: DirectionSet) -> ConditionLabel:
    if speed is None or speed < 0:
        raise InputError(f"macroweather speed must be >= 0, got {speed}")
    return ConditionLabel(bins.index(float(speed)), dirs.index(direction))


def condition_to_uv(speed: float, direction: int, dirs: DirectionSet) -> Tuple[float, float]:
    """Macro velocity vector for a wind blowing from `direction` at `speed`."""
    theta = math.radians(270.0 - dirs.bearing(direction))
    return speed * math.cos(theta), speed * math.sin(theta)


def uv_to_codes(u, v, bins: SpeedBins, dirs: DirectionSet) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised inverse of condition_to_uv: (speed bin, direction index) arrays."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    speed = np.hypot(u, v)
    bearing = (270.0 - np.degrees(np.arctan2(v, u))) % 360.0
    speed_bins = np.clip(np.searchsorted(bins.edges, speed, side="right") - 1, 0, bins.n_bins - 1)
    set_bearings = np.array([dirs.bearing(i) for i in range(len(dirs))])
    gap = np.abs((set_bearings[None, :] - bearing[:, None] + 180.0) % 360.0 - 180.0)
    return speed_bins, np.argmin(gap, axis=1)


def uv_to_condition(u, v, bins: SpeedBins, dirs: DirectionSet) -> List[ConditionLabel]:
    speed_bins, directions = uv_to_codes(u, v, bins, dirs)
    return [ConditionLabel(int(b), int(d)) for b, d in zip(speed_bins, directions)]


def condition_grid(bins: SpeedBins, dirs: DirectionSet, tokens: Iterable[str] = EXPERIMENT_DIRECTIONS) -> List[ConditionLabel]:
    return [ConditionLabel(b, dirs.index(t)) for b in range(bins.n_bins) for t in tokens]


# ─── Profiles and datasets ────────────────────────────

@dataclass(frozen=True, eq=False)
class WindProfile:
    u: np.ndarray
    v: np.ndarray
    condition: ConditionLabel
    macro_speed: float = float("nan")
    timestamp: Optional[datetime] = None

    def __post_init__(self):
        if self.u.shape != self.v.shape or self.u.ndim != 1 or self.u.size < 1:
            raise InputError(f"u and v must share one length >= 1, got {self.u.shape} and {self.v.shape}")

    @property
    def speed(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


@dataclass(frozen=True, eq=False)
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Scaler":
        x = np.asarray(x, dtype=float)
        if x.shape[0] == 0:
            raise EmptyDatasetError("cannot fit a scaler on an empty dataset")
        return cls(mean=x.mean(axis=0), std=np.maximum(x.std(axis=0), SCALE_FLOOR))

    def transform(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def inverse(self, x):
        return np.asarray(x, dtype=float) * self.std + self.mean

    def to_dict(self) -> Dict:
        return {"shape": list(self.mean.shape), "mean": self.mean.ravel().tolist(), "std": self.std.ravel().tolist()}

    @classmethod
    def from_dict(cls, raw: Dict) -> "Scaler":
        shape = tuple(raw["shape"])
        return cls(np.asarray(raw["mean"], dtype=float).reshape(shape), np.asarray(raw["std"], dtype=float).reshape(shape))


@dataclass(frozen=True, eq=False)
class Dataset:
    profiles: Tuple[WindProfile, ...]
    altitudes: np.ndarray
    scaler: Optional[Scaler] = None
    speed_bins: SpeedBins = field(default_factory=SpeedBins)
    directions: DirectionSet = field(default_factory=DirectionSet)
    dropped_count: int = 0

    def __post_init__(self):
        object.__setattr__(self, "profiles", tuple(self.profiles))
        altitudes = np.asarray(self.altitudes, dtype=float)
        if altitudes.ndim != 1 or np.any(np.diff(altitudes) <= 0):
            raise InputError("altitudes must be strictly increasing")
        object.__setattr__(self, "altitudes", altitudes)
        bad = [i for i, p in enumerate(self.profiles) if p.u.size != altitudes.size]
        if bad:
            raise InputError(f"profiles {bad[:5]} do not match {altitudes.size} altitudes")

    def __len__(self):
        return len(self.profiles)

    @property
    def n_altitudes(self) -> int:
        return int(self.altitudes.size)

    def to_array(self) -> np.ndarray:
        """Velocities as an (N, 2, A) array, channel 0 = u, channel 1 = v."""
        if not self.profiles:
            return np.zeros((0, 2, self.n_altitudes))
        return np.stack([np.stack([p.u, p.v]) for p in self.profiles])

    def labels(self) -> List[ConditionLabel]:
        return [p.condition for p in self.profiles]

    def macro_uv(self) -> np.ndarray:
        return np.array(
            [condition_to_uv(p.macro_speed, p.condition.direction, self.directions) for p in self.profiles]
        ).reshape(-1, 2)

    def subset(self, keep: Sequence[bool]) -> "Dataset":
        return replace(self, profiles=tuple(p for p, k in zip(self.profiles, keep) if k), dropped_count=0)

    def with_scaler(self, scaler: Scaler) -> "Dataset":
        return replace(self, scaler=scaler)

    def count_by_label(self) -> Dict[ConditionLabel, int]:
        counts: Dict[ConditionLabel, int] = {}
        for label in self.labels():
            counts[label] = counts.get(label, 0) + 1
        return counts


def profiles_from_array(x: np.ndarray, condition: ConditionLabel, macro_speed=float("nan")) -> List[WindProfile]:
    return [WindProfile(u=row[0].copy(), v=row[1].copy(), condition=condition, macro_speed=macro_speed) for row in x]


# ─── Normalization ────────────────────────────────────

def fit_scaler(dataset: Dataset) -> Scaler:
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot fit a scaler on an empty dataset")
    return Scaler.fit(dataset.to_array())


def apply_scaler(x, scaler: Scaler, direction: str = "forward"):
    if direction == "forward":
        return scaler.transform(x)
    if direction == "inverse":
        return scaler.inverse(x)
    raise InputError(f"scaler direction must be 'forward' or 'inverse', got {direction!r}")


# ─── CSV ingestion ────────────────────────────────────

@dataclass(frozen=True)
class ColumnSchema:
    timestamp: str = "timestamp"
    u_prefix: str = "u_"
    v_prefix: str = "v_"
    macro_speed: str = "macro_speed"
    macro_direction: str = "macro_direction"
    altitudes: Optional[Tuple[float, ...]] = None
    altitude_range: Tuple[float, float] = REFERENCE_ALTITUDES


def _profile_columns(columns: Sequence[str], prefix: str) -> List[str]:
    count = 0
    while f"{prefix}{count + 1}" in columns:
        count += 1
    return [f"{prefix}{i}" for i in range(1, count + 1)]


def _parse_timestamp(raw, tz) -> Optional[datetime]:
    if raw is None or (isinstance(raw, float) and math.isnan(raw)) or str(raw).strip() == "":
        return None
    ts = parser.parse(str(raw).strip())
    if ts.tzinfo is None:
        ts = tz.localize(ts)
    return ts.astimezone(pytz.utc)


def load_dataset(path, schema: Optional[ColumnSchema] = None, bins: Optional[SpeedBins] = None,
                 dirs: Optional[DirectionSet] = None, data_tz: str = "UTC") -> Dataset:
    schema = schema or ColumnSchema()
    bins = bins or SpeedBins()
    dirs = dirs or DirectionSet()
    tz = pytz.timezone(data_tz)

    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise EmptyDatasetError(f"{path} is empty") from None
    columns = list(frame.columns)
    u_cols = _profile_columns(columns, schema.u_prefix)
    v_cols = _profile_columns(columns, schema.v_prefix)
    if not u_cols:
        raise SchemaError(f"missing column '{schema.u_prefix}1'")
    if len(v_cols) < len(u_cols):
        raise SchemaError(f"missing column '{schema.v_prefix}{len(v_cols) + 1}'")
    for required in (schema.timestamp, schema.macro_speed, schema.macro_direction):
        if required not in columns:
            raise SchemaError(f"missing column '{required}'")
    if frame.empty:
        raise EmptyDatasetError(f"{path} has a header but no rows")

    n_alt = len(u_cols)
    altitudes = (np.asarray(schema.altitudes, dtype=float) if schema.altitudes is not None
                 else np.linspace(schema.altitude_range[0], schema.altitude_range[1], n_alt))

    velocities = frame[u_cols + v_cols].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
    macro_speed = pd.to_numeric(frame[schema.macro_speed], errors="coerce").to_numpy(dtype=float)
    finite = np.isfinite(velocities).all(axis=1) & np.isfinite(macro_speed)

    profiles = []
    for i in np.flatnonzero(finite):
        token = frame.at[i, schema.macro_direction]
        try:
            label = encode_condition(macro_speed[i], token, bins, dirs)
            stamp = _parse_timestamp(frame.at[i, schema.timestamp], tz)
        except (InputError, ValueError, OverflowError) as exc:
            raise RowError(int(i), str(exc)) from None
        profiles.append(WindProfile(
            u=velocities[i, :n_alt].copy(),
            v=velocities[i, n_alt:].copy(),
            condition=label,
            macro_speed=float(macro_speed[i]),
            timestamp=stamp,
        ))

    dropped = int((~finite).sum())
    if dropped:
        logger.warning("[load_dataset] Dropped %d of %d rows with non-finite values in %s", dropped, len(frame), path)
    logger.info("[load_dataset] Loaded %d profiles, A=%d, d=%d from %s", len(profiles), n_alt, 2 * n_alt, path)
    return Dataset(profiles=tuple(profiles), altitudes=altitudes, speed_bins=bins, directions=dirs, dropped_count=dropped)


def dataset_frame(dataset: Dataset, include_timestamp: bool = True) -> pd.DataFrame:
    """The ingestion CSV layout for a dataset (timestamps optional, as in sample output)."""
    n_alt = dataset.n_altitudes
    x = dataset.to_array()
    columns = {}
    if include_timestamp:
        columns["timestamp"] = [p.timestamp.isoformat() if p.timestamp else "" for p in dataset.profiles]
    for a in range(n_alt):
        columns[f"u_{a + 1}"] = x[:, 0, a]
    for a in range(n_alt):
        columns[f"v_{a + 1}"] = x[:, 1, a]
    columns["macro_speed"] = [p.macro_speed for p in dataset.profiles]
    columns["macro_direction"] = [
        "" if p.condition.direction is None else dataset.directions.tokens[p.condition.direction]
        for p in dataset.profiles
    ]
    return pd.DataFrame(columns)


def write_dataset(dataset: Dataset, path, include_timestamp: bool = True):
    dataset_frame(dataset, include_timestamp).to_csv(path, index=False, float_format="%.17g")
    logger.info("[write_dataset] Wrote %d profiles to %s", len(dataset), path)


# ─── Synthetic oracle ─────────────────────────────────

@dataclass(frozen=True)
class Regime:
    weight: float
    friction_speed: float
    direction_mean: float
    direction_spread: float
    roughness: float


def default_regimes() -> Tuple[Regime, ...]:
    """Four regimes whose altitude-averaged speeds fall in the four default speed bins."""
    def flow_angle(token):
        return math.radians(270.0 - 22.5 * COMPASS_TOKENS.index(token))

    return (
        Regime(0.25, 0.06, flow_angle("W"), 0.35, 0.1),
        Regime(0.25, 0.21, flow_angle("WSW"), 0.25, 0.1),
        Regime(0.25, 0.38, flow_angle("SW"), 0.2, 0.1),
        Regime(0.25, 0.60, flow_angle("WNW"), 0.15, 0.1),
    )


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int = 6000
    regimes: Tuple[Regime, ...] = field(default_factory=default_regimes)
    noise_std: float = 0.5
    altitude_count: int = 47
    altitude_range: Tuple[float, float] = REFERENCE_ALTITUDES
    seed: int = 0

    def validate(self) -> List[str]:
        problems = []
        if self.n_samples < 1:
            problems.append(f"n_samples must be >= 1, got {self.n_samples}")
        if not self.regimes:
            problems.append("at least one regime is required")
        weights = np.array([r.weight for r in self.regimes], dtype=float)
        if np.any(weights <= 0) or (weights.size and abs(weights.sum() - 1.0) > 1e-9):
            problems.append(f"regime weights must be positive and sum to 1, got {weights.tolist()}")
        for i, r in enumerate(self.regimes):
            if r.roughness <= 0:
                problems.append(f"regime {i}: roughness z0 must be > 0")
            elif self.altitude_range[0] <= r.roughness:
                problems.append(f"regime {i}: lowest altitude must exceed z0={r.roughness}")
            if r.friction_speed < 0 or r.direction_spread < 0:
                problems.append(f"regime {i}: friction speed and direction spread must be >= 0")
        if self.noise_std < 0:
            problems.append(f"noise_std must be >= 0, got {self.noise_std}")
        if self.altitude_count < 1:
            problems.append(f"altitude_count must be >= 1, got {self.altitude_count}")
        lo, hi = self.altitude_range
        if self.altitude_count > 1 and not lo < hi:
            problems.append(f"altitude range must be increasing, got {self.altitude_range}")
        return problems


def log_law(z, friction_speed, roughness, kappa=VON_KARMAN):
    """Neutral boundary-layer wind speed s(z) = (u*/kappa) ln(z / z0)."""
    return (np.asarray(friction_speed, dtype=float) / kappa) * np.log(np.asarray(z, dtype=float) / roughness)


def synth_altitudes(config: SynthConfig) -> np.ndarray:
    if config.altitude_count == 1:
        return np.array([float(config.altitude_range[0])])
    return np.linspace(config.altitude_range[0], config.altitude_range[1], config.altitude_count)


def synth_generate(config: SynthConfig, bins: Optional[SpeedBins] = None, dirs: Optional[DirectionSet] = None) -> Dataset:
    problems = config.validate()
    if problems:
        raise InputError("invalid synthetic config: " + "; ".join(problems))
    bins = bins or SpeedBins()
    dirs = dirs or DirectionSet()
    rng = np.random.default_rng(config.seed)
    z = synth_altitudes(config)
    n = config.n_samples

    weights = np.array([r.weight for r in config.regimes], dtype=float)
    regime = rng.choice(len(config.regimes), size=n, p=weights / weights.sum())
    u_star = np.array([r.friction_speed for r in config.regimes])[regime]
    z0 = np.array([r.roughness for r in config.regimes])[regime]
    theta = rng.normal(
        np.array([r.direction_mean for r in config.regimes])[regime],
        np.array([r.direction_spread for r in config.regimes])[regime],
    )
    speed = log_law(z[None, :], u_star[:, None], z0[:, None])
    u = speed * np.cos(theta)[:, None] + rng.normal(0.0, config.noise_std, size=speed.shape)
    v = speed * np.sin(theta)[:, None] + rng.normal(0.0, config.noise_std, size=speed.shape)

    macro_speed = speed.mean(axis=1)
    bearing = (270.0 - np.degrees(theta)) % 360.0
    start = datetime(2023, 1, 1, tzinfo=timezone.utc)
    profiles = tuple(
        WindProfile(
            u=u[i], v=v[i],
            condition=ConditionLabel(bins.index(float(macro_speed[i])), dirs.nearest(float(bearing[i]))),
            macro_speed=float(macro_speed[i]),
            timestamp=start + timedelta(minutes=2 * i),
        )
        for i in range(n)
    )
    logger.info("[synth_generate] Generated %d profiles over %d altitudes (seed=%s)", n, z.size, config.seed)
    return Dataset(profiles=profiles, altitudes=z, speed_bins=bins, directions=dirs)


# ─── Condition holdout ────────────────────────────────

class HoldoutSplit(NamedTuple):
    train: Dataset
    test: Dataset
    test_missing: bool


def split_holdout(dataset: Dataset, holdout: ConditionLabel) -> HoldoutSplit:
    in_test = [holdout.matches(p.condition) for p in dataset.profiles]
    train = dataset.subset([not t for t in in_test])
    test = dataset.subset(in_test)
    if len(test) == 0:
        logger.warning("[split_holdout] Holdout %s not present; test split is empty", holdout)
    return HoldoutSplit(train, test, len(test) == 0)
