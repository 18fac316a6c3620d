"""
Synthetic farm generator.

Groups:
  1. Layout and configuration validation
  2. Wake geometry
  3. Generated records: determinism, event rates, flag consistency
  4. Files on disk
"""

import numpy as np
import pandas as pd
import pytest

from errors import DataError
from preprocessing import expected_power
from scada_data import Flag, TurbineSpec, load_records, UNKNOWN_FLAGS
from synthetic_farm import (
    FarmLayout, GeneratorConfig, directional_truth, generate, grid_layout, sibling_paths, wake_deficit,
)


def _single_turbine():
    return FarmLayout(('T1',), np.array([[0.0, 0.0]]), (TurbineSpec(),))


# ---------------------------------------------------------------------------
# 1. Validation
# ---------------------------------------------------------------------------

def test_grid_layout_naming_and_positions():
    layout = grid_layout()
    assert layout.n_turbines == 9
    assert layout.turbine_ids[:3] == ('T11', 'T12', 'T13')
    assert tuple(layout.positions[layout.index('T11')]) == (0.0, 0.0)
    assert tuple(layout.positions[layout.index('T13')]) == (1000.0, 0.0)
    assert tuple(layout.positions[layout.index('T31')]) == (0.0, 1000.0)


def test_layout_rejects_duplicates():
    with pytest.raises(DataError):
        FarmLayout(('A', 'A'), np.array([[0.0, 0.0], [1.0, 0.0]]), (TurbineSpec(),) * 2)
    with pytest.raises(DataError):
        FarmLayout(('A', 'B'), np.array([[0.0, 0.0], [0.0, 0.0]]), (TurbineSpec(),) * 2)
    with pytest.raises(DataError):
        FarmLayout(('A', 'B'), np.array([[0.0, 0.0]]), (TurbineSpec(),) * 2)


@pytest.mark.parametrize('kwargs', [
    {'shutdown_rate': -0.1},
    {'shutdown_rate': 0.5, 'curtailment_rate': 0.4, 'boost_rate': 0.2},
    {'wake_deficit': 1.0},
    {'n_samples': 0},
    {'weibull_scale': 0.0},
    {'direction_modes': ((0.0, 10.0, 0.0),)},
])
def test_generator_config_validation(kwargs):
    with pytest.raises(DataError):
        GeneratorConfig(**kwargs)


# ---------------------------------------------------------------------------
# 2. Wake geometry
# ---------------------------------------------------------------------------

def test_southerly_wind_wakes_the_northern_rows():
    layout, config = grid_layout(), GeneratorConfig()
    deficits = dict(zip(layout.turbine_ids, wake_deficit(layout, 180.0, config)))
    assert all(deficits[f"T1{c}"] == 0.0 for c in (1, 2, 3))
    assert all(deficits[f"T{r}{c}"] == config.wake_deficit for r in (2, 3) for c in (1, 2, 3))


def test_corner_turbine_is_free_in_a_south_westerly():
    layout, config = grid_layout(), GeneratorConfig()
    deficits = dict(zip(layout.turbine_ids, wake_deficit(layout, 225.0, config)))
    assert deficits['T11'] == 0.0
    assert deficits['T22'] == config.wake_deficit
    assert deficits['T33'] == config.wake_deficit
    assert deficits['T12'] == 0.0


def test_recovery_length_limits_the_wake():
    layout = FarmLayout(('A', 'B'), np.array([[0.0, 0.0], [0.0, 2500.0]]), (TurbineSpec(),) * 2)
    assert np.all(wake_deficit(layout, 180.0, GeneratorConfig()) == 0.0)
    assert wake_deficit(layout, 180.0, GeneratorConfig(wake_recovery=3000.0))[1] > 0


def test_directional_truth_table():
    layout = grid_layout()
    table = directional_truth(layout, GeneratorConfig())
    assert len(table) == 360 * 9
    corner = table[table['turbine_id'] == 'T11'].set_index('direction')['deficit']
    assert corner.loc[225.0] == 0.0
    assert corner.loc[45.0] > 0.0
    # the centre turbine is waked from every grid diagonal and axis
    centre = table[table['turbine_id'] == 'T22'].set_index('direction')['deficit']
    assert all(centre.loc[float(d)] > 0 for d in range(0, 360, 45))


# ---------------------------------------------------------------------------
# 3. Records
# ---------------------------------------------------------------------------

def test_generation_is_deterministic_and_prefix_stable():
    layout = grid_layout()
    a, truth_a = generate(layout, GeneratorConfig(n_samples=20, seed=5))
    b, _ = generate(layout, GeneratorConfig(n_samples=20, seed=5))
    prefix, _ = generate(layout, GeneratorConfig(n_samples=10, seed=5))
    other, _ = generate(layout, GeneratorConfig(n_samples=20, seed=6))
    assert a == b
    assert a[:len(prefix)] == prefix
    assert a != other
    assert truth_a.records['record_id'].tolist() == list(range(len(a)))


def test_timestamps_are_ten_minutes_apart(small_farm):
    records = small_farm['records']
    stamps = sorted({r.timestamp for r in records})
    assert stamps[0] == small_farm['config'].start_timestamp
    assert set(np.diff(stamps)) == {600}
    assert all(0.0 <= r.yaw_angle < 360.0 and r.wind_speed >= 0 for r in records)


def test_shutdown_count_matches_rate():
    config = GeneratorConfig(n_samples=10000, weibull_shape=20.0, weibull_scale=10.0, shutdown_rate=0.05,
                             curtailment_rate=0.0, boost_rate=0.0, seed=1)
    records, truth = generate(_single_turbine(), config)
    shutdowns = int((truth.records['true_flag'] == Flag.SHUTDOWN.value).sum())
    assert abs(shutdowns - 500) <= 65


def test_shutdown_rate_applies_to_operating_samples_only():
    config = GeneratorConfig(n_samples=10000, shutdown_rate=0.05, curtailment_rate=0.0, boost_rate=0.0, seed=2)
    records, truth = generate(_single_turbine(), config)
    spec = TurbineSpec()
    operating = np.array([spec.cut_in_speed < r.wind_speed < spec.cut_out_speed for r in records])
    flags = truth.records['true_flag'].to_numpy()
    assert operating.sum() < len(records)
    assert not np.any(flags[~operating] == Flag.SHUTDOWN.value)
    shutdowns = int((flags == Flag.SHUTDOWN.value).sum())
    expected = 0.05 * operating.sum()
    assert abs(shutdowns - expected) <= 4 * np.sqrt(expected * 0.95)


def test_flags_explain_every_deviation(small_farm):
    records, truth = small_farm['records'], small_farm['truth'].records
    config = small_farm['config']
    spec = TurbineSpec()
    for record, row in zip(records, truth.itertuples()):
        nominal = expected_power(record.wind_speed, spec)
        flag = row.true_flag
        assert record.flags == frozenset({Flag(flag)})
        if flag == Flag.NOMINAL.value:
            assert abs(record.power - nominal) <= 5 * config.power_noise * nominal + 1e-9
        elif flag == Flag.SHUTDOWN.value:
            assert record.power == 0.0 and nominal > 0
        elif flag == Flag.CURTAILED.value:
            assert record.power < 0.8 * nominal
        else:
            assert record.power > spec.boost_limit
            assert record.wind_speed >= spec.rated_speed


def test_truth_columns_describe_the_wake(small_farm):
    records, truth = small_farm['records'], small_farm['truth'].records
    speeds = np.array([r.wind_speed for r in records])
    assert np.allclose(speeds, truth['freestream_speed'] * (1 - truth['wake_deficit']))
    yaw_error = np.abs((np.array([r.yaw_angle for r in records]) - truth['direction'] + 180.0) % 360.0 - 180.0)
    assert np.max(yaw_error) < 5 * small_farm['config'].yaw_noise
    counts = truth['true_flag'].value_counts()
    assert counts['Nominal'] > 0.85 * len(truth)


def test_feathered_pitch_on_shutdown():
    config = GeneratorConfig(n_samples=200, weibull_shape=20.0, weibull_scale=10.0, shutdown_rate=0.5,
                             curtailment_rate=0.0, boost_rate=0.0)
    records, truth = generate(_single_turbine(), config)
    flags = truth.records['true_flag'].to_numpy()
    pitch = np.array([r.pitch_angle for r in records])
    assert np.all(pitch[flags == 'Shutdown'] > 80.0)
    assert np.all(pitch[flags == 'Nominal'] < 5.0)


# ---------------------------------------------------------------------------
# 4. Files
# ---------------------------------------------------------------------------

def test_sibling_paths():
    paths = sibling_paths('/data/farm.csv')
    assert paths['truth'] == '/data/farm_truth.csv'
    assert paths['directional'] == '/data/farm_directional.csv'


def test_written_files_reload(small_farm):
    paths = small_farm['paths']
    loaded = load_records(paths['data'])
    assert len(loaded) == len(small_farm['records'])
    assert all(r.flags == UNKNOWN_FLAGS for r in loaded)
    assert [r.power for r in loaded] == [r.power for r in small_farm['records']]
    truth = pd.read_csv(paths['truth'])
    assert {'record_id', 'timestamp', 'turbine_id', 'true_flag', 'wake_deficit', 'unwaked_power'} <= set(truth.columns)
    assert len(pd.read_csv(paths['directional'])) == 360 * 9
