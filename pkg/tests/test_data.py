import math
from datetime import datetime

import numpy as np
import pytest
import pytz
from numpy.testing import assert_allclose

from data import (
    ConditionLabel, Dataset, DirectionSet, EmptyDatasetError, InputError, Regime, RowError, Scaler, SchemaError,
    SpeedBins, SynthConfig, WindProfile, apply_scaler, condition_grid, condition_to_uv, encode_condition,
    fit_scaler, load_dataset, log_law, split_holdout, synth_generate, uv_to_condition, write_dataset,
)

BINS = SpeedBins()
DIRS = DirectionSet()


def _write_csv(path, rows, n_alt=5):
    header = ["timestamp"] + [f"u_{i}" for i in range(1, n_alt + 1)] + [f"v_{i}" for i in range(1, n_alt + 1)]
    header += ["macro_speed", "macro_direction"]
    lines = [",".join(header)] + [",".join(str(x) for x in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def _row(stamp="2023-01-01T00:00:00Z", u=1.0, v=0.5, speed=3.0, token="SW", n_alt=5):
    return [stamp] + [u] * n_alt + [v] * n_alt + [speed, token]


def _labelled(labels, n_alt=3):
    profiles = [WindProfile(np.full(n_alt, float(i)), np.zeros(n_alt), lbl) for i, lbl in enumerate(labels)]
    return Dataset(profiles, np.arange(1.0, n_alt + 1.0))


# --- conditions ---

def test_encode_condition_bin_boundaries():
    assert encode_condition(0.0, "SW", BINS, DIRS) == ConditionLabel(0, DIRS.index("SW"))
    assert encode_condition(2.23, "W", BINS, DIRS).speed_bin == 1
    assert encode_condition(3.0, "W", BINS, DIRS).speed_bin == 1
    assert encode_condition(20.0, "WNW", BINS, DIRS).speed_bin == 3


def test_encode_condition_rejects_negative_speed_and_unknown_token():
    with pytest.raises(InputError):
        encode_condition(-0.1, "SW", BINS, DIRS)
    with pytest.raises(InputError):
        encode_condition(1.0, "XYZ", BINS, DIRS)


def test_speed_bins_validate_edges():
    with pytest.raises(InputError):
        SpeedBins((0.0, 2.0, 1.0))
    with pytest.raises(InputError):
        SpeedBins((1.0, 2.0))


def test_condition_uv_follows_blowing_from_convention():
    u, v = condition_to_uv(3.0, DIRS.index("SW"), DIRS)
    assert u > 0 and v > 0
    assert_allclose(math.hypot(u, v), 3.0)
    u, v = condition_to_uv(2.0, DIRS.index("N"), DIRS)
    assert_allclose([u, v], [0.0, -2.0], atol=1e-12)
    assert uv_to_condition([u], [v], BINS, DIRS) == [ConditionLabel(0, DIRS.index("N"))]


def test_condition_label_parse_and_format():
    label = ConditionLabel.parse("SW:2", BINS, DIRS)
    assert label == ConditionLabel(2, DIRS.index("SW"))
    assert label.format(DIRS) == "SW:2"
    assert ConditionLabel.parse("*:1", BINS, DIRS) == ConditionLabel(1, None)
    for bad in ("SW", "SW:9", "QQ:1", "SW:x"):
        with pytest.raises(InputError):
            ConditionLabel.parse(bad, BINS, DIRS)


def test_speed_only_label_matches_any_direction():
    query = ConditionLabel(1, None)
    assert query.matches(ConditionLabel(1, 3))
    assert not query.matches(ConditionLabel(2, 3))
    assert not ConditionLabel(1, 2).matches(ConditionLabel(1, 3))


def test_condition_grid_covers_experiment_directions():
    grid = condition_grid(BINS, DIRS)
    assert len(grid) == 16
    assert len(set(grid)) == 16


# --- ingestion ---

def test_load_dataset_drops_non_finite_rows(tmp_path):
    rows = [_row(), _row(), _row()]
    rows[1][5] = "NaN"  # u_5
    ds = load_dataset(_write_csv(tmp_path / "d.csv", rows))
    assert len(ds) == 2
    assert ds.dropped_count == 1
    assert ds.n_altitudes == 5
    assert_allclose(ds.altitudes, np.linspace(20.0, 250.0, 5))
    assert ds.profiles[0].condition == ConditionLabel(1, DIRS.index("SW"))


def test_load_dataset_missing_column_names_it(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("timestamp,u_1,v_1,macro_speed\n2023-01-01,1,1,3\n")
    with pytest.raises(SchemaError, match="macro_direction"):
        load_dataset(path)


def test_load_dataset_empty_file(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    with pytest.raises(EmptyDatasetError):
        load_dataset(path)


def test_load_dataset_unknown_token_reports_row(tmp_path):
    rows = [_row(), _row(token="BOGUS")]
    with pytest.raises(RowError) as info:
        load_dataset(_write_csv(tmp_path / "d.csv", rows))
    assert info.value.row_index == 1


def test_load_dataset_localizes_naive_timestamps(tmp_path):
    rows = [_row(stamp="2023-01-01T00:00:00")]
    ds = load_dataset(_write_csv(tmp_path / "d.csv", rows), data_tz="America/Denver")
    assert ds.profiles[0].timestamp == datetime(2023, 1, 1, 7, 0, tzinfo=pytz.utc)


def test_load_dataset_accepts_non_iso_timestamps(tmp_path):
    rows = [_row(stamp="01/02/2023 10:00"), _row(stamp="")]
    ds = load_dataset(_write_csv(tmp_path / "d.csv", rows))
    assert ds.profiles[0].timestamp == datetime(2023, 1, 2, 10, 0, tzinfo=pytz.utc)
    assert ds.profiles[1].timestamp is None
    assert ds.profiles[0].condition == encode_condition(3.0, "SW", BINS, DIRS)


def test_write_then_load_preserves_profiles(tmp_path, small_synth):
    path = tmp_path / "synth.csv"
    write_dataset(small_synth, path)
    loaded = load_dataset(path)
    assert len(loaded) == len(small_synth)
    assert_allclose(loaded.to_array(), small_synth.to_array(), rtol=0, atol=0)
    assert loaded.labels() == small_synth.labels()


# --- normalization ---

def test_scaler_standardizes_training_set(small_synth):
    scaler = fit_scaler(small_synth)
    z = apply_scaler(small_synth.to_array(), scaler, "forward")
    assert_allclose(z.mean(axis=0), 0.0, atol=1e-9)
    assert_allclose(z.std(axis=0), 1.0, atol=1e-6)
    x = np.random.default_rng(0).normal(size=small_synth.to_array().shape[1:])
    assert_allclose(apply_scaler(apply_scaler(x, scaler, "inverse"), scaler, "forward"), x, rtol=1e-10)


def test_scaler_constant_column_and_single_profile():
    ds = _labelled([ConditionLabel(0, 0)])
    scaler = fit_scaler(ds)
    assert np.all(scaler.std >= 1e-8)
    assert_allclose(scaler.transform(ds.to_array()), 0.0)


def test_scaler_rejects_empty_dataset_and_bad_direction():
    with pytest.raises(EmptyDatasetError):
        fit_scaler(Dataset((), np.array([1.0, 2.0])))
    scaler = Scaler(np.zeros(2), np.ones(2))
    with pytest.raises(InputError):
        apply_scaler(np.zeros(2), scaler, "sideways")


# --- synthetic oracle ---

def test_log_law_value():
    assert_allclose(log_law(100.0, 0.4, 0.1), math.log(1000.0), rtol=1e-12)
    assert_allclose(log_law(100.0, 0.4, 0.1), 6.9078, atol=1e-4)


def test_synth_degenerate_config_yields_identical_profiles():
    config = SynthConfig(n_samples=20, regimes=(Regime(1.0, 0.4, 0.3, 0.0, 0.1),), noise_std=0.0,
                         altitude_count=5, seed=1)
    x = synth_generate(config).to_array()
    assert_allclose(x, np.broadcast_to(x[0], x.shape), rtol=0, atol=0)


def test_synth_is_reproducible_for_a_seed():
    config = SynthConfig(n_samples=50, altitude_count=4, seed=42)
    a, b = synth_generate(config), synth_generate(config)
    assert np.array_equal(a.to_array(), b.to_array())
    assert a.labels() == b.labels()
    c = synth_generate(SynthConfig(n_samples=50, altitude_count=4, seed=43))
    assert not np.array_equal(a.to_array(), c.to_array())


def test_synth_opposite_regimes_are_bimodal():
    regimes = (Regime(0.5, 0.3, 0.0, 0.05, 0.1), Regime(0.5, 0.3, math.pi, 0.05, 0.1))
    config = SynthConfig(n_samples=2000, regimes=regimes, noise_std=0.5, altitude_count=10, seed=7)
    ds = synth_generate(config)
    uv = ds.to_array().mean(axis=2)
    east = uv[:, 0] > 0
    assert 0.4 < east.mean() < 0.6
    expected = log_law(np.linspace(20.0, 250.0, 10), 0.3, 0.1).mean()
    assert abs(uv[east, 0].mean() - expected) < 0.3
    assert abs(uv[~east, 0].mean() + expected) < 0.3


def test_synth_labels_track_macro_speed():
    ds = synth_generate(SynthConfig(n_samples=300, altitude_count=6, seed=2))
    for p in ds.profiles:
        assert p.condition.speed_bin == BINS.index(p.macro_speed)


def test_synth_invalid_config_rejected_before_sampling():
    bad = SynthConfig(n_samples=10, regimes=(Regime(0.7, 0.3, 0.0, 0.1, 0.1),))
    assert bad.validate()
    with pytest.raises(InputError):
        synth_generate(bad)
    low = SynthConfig(regimes=(Regime(1.0, 0.3, 0.0, 0.1, 30.0),))
    assert any("z0" in p for p in low.validate())


# --- holdout ---

def test_split_holdout_counts():
    sw, w = DIRS.index("SW"), DIRS.index("W")
    ds = _labelled([ConditionLabel(0, sw)] * 5 + [ConditionLabel(1, w)] * 3)
    split = split_holdout(ds, ConditionLabel(1, w))
    assert (len(split.train), len(split.test), split.test_missing) == (5, 3, False)
    assert all(p.condition == ConditionLabel(1, w) for p in split.test.profiles)


def test_split_holdout_absent_label_is_flagged():
    ds = _labelled([ConditionLabel(0, 0)] * 4)
    split = split_holdout(ds, ConditionLabel(3, 5))
    assert split.test_missing
    assert len(split.train) == 4 and len(split.test) == 0


def test_holdout_folds_partition_the_dataset(small_synth):
    labels = sorted(set(small_synth.labels()))
    total = 0
    for label in labels:
        split = split_holdout(small_synth, label)
        assert len(split.train) + len(split.test) == len(small_synth)
        assert not any(label.matches(p.condition) for p in split.train.profiles)
        total += len(split.test)
    assert total == len(small_synth)
