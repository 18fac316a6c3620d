"""
Pipeline orchestration: targets, training, gridded prediction, the component
decomposition, evaluation and exploration tables.

Groups:
  1. Targets and dataset preparation
  2. Training on a generated farm
  3. Prediction grid and decomposition
  4. Evaluation and exploration
  5. End-to-end acceptance checks (slow)
"""

import time

import numpy as np
import pandas as pd
import pytest

from errors import DataError
from gp_core import Dataset, fit, predict_pair_mean
from hyperopt import OptimizerConfig
from kernels import HyperParams, KernelSpec
from pipeline import (
    FEATURE_COLUMNS, GridSpec, SamplingConfig, Target, TrainingOptions, build_target_frame,
    decompose_model, evaluate_arrays, evaluate_model, explore, polar_peak, predict_frame,
    prediction_grid, prepare_dataset, train_model,
)
from preprocessing import LinkSpec, apply_filters, inverse_link, score_filter
from scada_data import ScadaRecord, TurbineSpec
from synthetic_farm import GeneratorConfig, directional_truth, generate, grid_layout
from telemetry import PipelineTelemetry

QUICK = TrainingOptions(sampling=SamplingConfig(n_samples=150, seed=2),
                        optimizer=OptimizerConfig(restarts=1, max_iterations=15, seed=2))


def _two_turbines():
    return [
        ScadaRecord(600, 'T1', 8.0, 500.0, 200.0, 0.0),
        ScadaRecord(600, 'T2', 9.0, 600.0, 210.0, 0.0),
        ScadaRecord(1200, 'T1', 7.0, 400.0, 100.0, 0.0),
        ScadaRecord(1200, 'T2', 10.0, 800.0, 110.0, 0.0),
    ]


def _angular_distance(a, b):
    return np.abs((np.asarray(a) - b + 180.0) % 360.0 - 180.0)


# ---------------------------------------------------------------------------
# 1. Targets and datasets
# ---------------------------------------------------------------------------

def test_target_labels_round_trip():
    assert Target().label == 'farm'
    assert Target.parse('turbine:T11') == Target('turbine', 'T11')
    assert Target.parse('farm').kind == 'farm'
    with pytest.raises(DataError):
        Target('turbine')
    with pytest.raises(DataError):
        Target('park')


def test_farm_target_uses_complete_timestamps_only():
    reference = _two_turbines()
    retained = reference[:3]
    frame = build_target_frame(retained, Target(), reference=reference)
    assert frame['timestamp'].tolist() == [600]
    row = frame.iloc[0]
    assert row['freestream_wind'] == 9.0
    assert row['yaw'] == 210.0
    assert row['power'] == 1100.0
    assert row['yaw_sin'] ** 2 + row['yaw_cos'] ** 2 == pytest.approx(1.0)
    with pytest.raises(DataError, match='complete'):
        build_target_frame(reference[2:3], Target(), reference=reference)


def test_turbine_freestream_comes_from_the_unfiltered_farm():
    reference = _two_turbines()
    frame = build_target_frame(reference[:3], Target('turbine', 'T1'), reference=reference)
    assert frame['freestream_wind'].tolist() == [9.0, 10.0]
    assert frame['power'].tolist() == [500.0, 400.0]
    with pytest.raises(DataError):
        build_target_frame(reference, Target('turbine', 'T9'))


def test_prepare_dataset_subsamples_and_links():
    rng = np.random.default_rng(0)
    n = 500
    yaw = rng.uniform(0, 360, n)
    frame = pd.DataFrame({
        'freestream_wind': rng.uniform(0, 15, n),
        'yaw': yaw,
        'yaw_sin': np.sin(np.deg2rad(yaw)),
        'yaw_cos': np.cos(np.deg2rad(yaw)),
        'power': np.r_[np.zeros(20), rng.uniform(10, 1900, n - 20)],
    })
    link = LinkSpec(normalizer=2000.0)
    dataset, clipped = prepare_dataset(frame, link, SamplingConfig(n_samples=100, seed=1))
    assert dataset.n_rows == 100
    assert dataset.columns == FEATURE_COLUMNS
    assert np.all(np.abs(dataset.y) <= 9.22)
    again, _ = prepare_dataset(frame, link, SamplingConfig(n_samples=100, seed=1))
    assert np.array_equal(dataset.X, again.X)
    _, all_clipped = prepare_dataset(frame, link, SamplingConfig(n_samples=n))
    assert all_clipped == 20


# ---------------------------------------------------------------------------
# 2. Training
# ---------------------------------------------------------------------------

def test_train_turbine_model(small_farm):
    telemetry = PipelineTelemetry()
    records = small_farm['records']
    model, report, result = train_model(records, Target('turbine', 'T22'), QUICK, telemetry)
    assert model.dataset.n_rows == 150
    assert model.metadata['target'] == 'turbine:T22'
    assert model.metadata['turbine_spec']['rated_power'] == 2000.0
    assert report['n_records'] == len(records)
    assert report['filter']['input_count'] == len(records)
    assert report['final_nlml'] == result.nlml
    assert set(report['theta']) == set(FEATURE_COLUMNS)
    assert report['theta']['freestream_wind']['units'] == 'm/s'
    assert model.offset == pytest.approx(float(np.mean(model.dataset.y)))
    assert telemetry.registry.get_sample_value('windgam_nlml_evaluations_total') > 0


def test_train_farm_model_without_filter(small_farm):
    options = TrainingOptions(skip_filter=True, sampling=SamplingConfig(n_samples=100),
                              optimizer=OptimizerConfig(restarts=1, max_iterations=10))
    model, report, _ = train_model(small_farm['records'], Target(), options)
    assert report['filter'] is None
    assert model.metadata['target'] == 'farm'
    assert model.dataset.n_rows == 100
    # farm power is normalised by a percentile of the summed output
    assert model.link.normalizer > TurbineSpec().rated_power


def test_training_is_deterministic(small_farm):
    a, _, _ = train_model(small_farm['records'], Target('turbine', 'T11'), QUICK)
    b, _, _ = train_model(small_farm['records'], Target('turbine', 'T11'), QUICK)
    assert np.array_equal(a.theta.to_log_vector(a.spec), b.theta.to_log_vector(b.spec))
    assert np.array_equal(a.dataset.X, b.dataset.X)


# ---------------------------------------------------------------------------
# 3. Prediction and decomposition
# ---------------------------------------------------------------------------

def test_grid_spec():
    grid = GridSpec(n_speed=5, n_direction=8)
    assert grid.speeds(TurbineSpec()).tolist() == pytest.approx([0.0, 3.6, 7.2, 10.8, 14.4])
    assert grid.directions().tolist() == [0.0, 45.0, 90.0, 135.0, 180.0, 225.0, 270.0, 315.0]
    points = prediction_grid(grid, TurbineSpec())
    assert len(points) == 40
    assert points['freestream_wind'].iloc[:8].nunique() == 1
    with pytest.raises(DataError):
        GridSpec(n_direction=0)


def test_predict_frame_columns(wind_model):
    points = prediction_grid(GridSpec(n_speed=4, n_direction=4), TurbineSpec())
    frame = predict_frame(wind_model, points, level=0.8)
    assert {'mean', 'variance', 'power_mean', 'power_variance', 'power_lower', 'power_upper',
            'direction'} <= set(frame.columns)
    slope = frame['power_mean'] * (1 - frame['power_mean'] / 2000.0)
    assert np.allclose(frame['power_variance'], slope ** 2 * frame['variance'])
    assert np.all(frame['power_lower'] <= frame['power_mean'])
    assert np.all(frame['power_mean'] <= frame['power_upper'])
    assert np.allclose(frame['power_mean'], inverse_link(frame['mean'].to_numpy(), wind_model.link))
    with pytest.raises(DataError, match='yaw_cos'):
        predict_frame(wind_model, points.drop(columns=['yaw_cos']))


def test_decomposition_adds_up_to_the_prediction(wind_model):
    grid = GridSpec(n_speed=20, n_direction=72)
    result = decompose_model(wind_model, grid)
    assert set(result.components) == set(FEATURE_COLUMNS)
    assert len(result.polar) == 72
    assert len(result.polar_grid) == 20 * 72
    assert result.pairs == {}

    points = prediction_grid(grid, TurbineSpec())
    predicted = predict_frame(wind_model, points)['mean'].to_numpy()
    wind = np.repeat(result.components['freestream_wind']['mean'].to_numpy(), 72)
    sin_part = np.tile(result.components['yaw_sin']['mean'].to_numpy(), 20)
    cos_part = np.tile(result.components['yaw_cos']['mean'].to_numpy(), 20)
    assert np.max(np.abs(predicted - (result.offset + wind + sin_part + cos_part))) <= 1e-10
    assert np.allclose(result.polar['mean'], result.components['yaw_sin']['mean']
                       + result.components['yaw_cos']['mean'], atol=1e-12)

    for frame in list(result.components.values()) + [result.polar]:
        assert frame['normalized'].min() == 0.0 and frame['normalized'].max() == 1.0
        assert np.all(frame['variance'] >= 0)


def test_decomposition_recovers_the_directional_peak(wind_model):
    result = decompose_model(wind_model)
    assert _angular_distance(polar_peak(result), 225.0) <= 15.0
    wind = result.components['freestream_wind']
    ramp = wind[(wind['freestream_wind'] >= 3.0) & (wind['freestream_wind'] <= 12.0)]['mean'].to_numpy()
    assert np.all(np.diff(ramp) >= 0)


def test_second_order_decomposition_includes_pairs(wind_model):
    spec = KernelSpec.second_order(3)
    theta = HyperParams([4.0, 0.5, 0.5], [2.5, 0.8, 0.8], 0.01, {p: 0.1 for p in spec.pairs})
    model = fit(wind_model.dataset, theta, spec, center=True, link=wind_model.link,
                metadata=wind_model.metadata)
    grid = GridSpec(n_speed=6, n_direction=12)
    result = decompose_model(model, grid)
    assert set(result.pairs) == {'freestream_wind__yaw_sin', 'freestream_wind__yaw_cos', 'yaw_sin__yaw_cos'}

    points = prediction_grid(grid, TurbineSpec())
    X = points[list(FEATURE_COLUMNS)].to_numpy()
    pairs = sum(predict_pair_mean(model, p, X[:, list(p)]) for p in spec.pairs)
    first = (np.repeat(result.components['freestream_wind']['mean'].to_numpy(), 12)
             + np.tile(result.polar['mean'].to_numpy(), 6))
    assert np.allclose(predict_frame(model, points)['mean'], model.offset + first + pairs, atol=1e-10)
    assert np.allclose(sum(frame['mean'] for frame in result.pairs.values()), pairs)


def test_decomposition_requires_wind_yaw_columns():
    model = fit(Dataset(np.random.default_rng(0).standard_normal((5, 3)), np.arange(5.0)),
                HyperParams.unit(3), KernelSpec.first_order(3))
    with pytest.raises(DataError):
        decompose_model(model)


# ---------------------------------------------------------------------------
# 4. Evaluation and exploration
# ---------------------------------------------------------------------------

def test_evaluate_arrays_on_training_points(wind_model):
    X = wind_model.dataset.X
    power = inverse_link(wind_model.dataset.y, wind_model.link)
    metrics = evaluate_arrays(wind_model, X, power)
    assert metrics['n'] == len(X)
    assert metrics['mae'] <= metrics['rmse'] < 100.0
    assert np.isfinite(metrics['nlpd'])


def test_evaluate_model_on_holdout(small_farm):
    model, _, _ = train_model(small_farm['records'], Target('turbine', 'T13'), QUICK)
    holdout, _ = generate(small_farm['layout'], GeneratorConfig(n_samples=40, seed=99))
    metrics = evaluate_model(model, holdout)
    assert metrics['target'] == 'turbine:T13'
    assert metrics['n'] == 40
    assert np.isfinite(metrics['rmse']) and np.isfinite(metrics['nlpd'])


def test_explore_tables(small_farm):
    records = small_farm['records']
    power_curve, wind_rose = explore(records, TurbineSpec())
    n_timestamps = len({r.timestamp for r in records})
    assert len(power_curve) == len(records) + n_timestamps
    farm = power_curve[power_curve['turbine_id'] == 'farm']
    assert len(farm) == n_timestamps
    assert farm['normalised_power'].max() <= 1.2
    speed = np.hypot(wind_rose['u_east'], wind_rose['v_north'])
    assert np.allclose(speed, wind_rose['wind_speed'])


# ---------------------------------------------------------------------------
# 5. Acceptance (slow)
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_filters_separate_events_from_nominal_operation(turbine_spec):
    # 5556 timestamps of a 3x3 farm is just over 50,000 records
    records, truth = generate(grid_layout(), GeneratorConfig(n_samples=5556, seed=7))
    _, report, audit = apply_filters(records, turbine_spec)
    scores = score_filter(audit, records, truth.records)
    assert report.input_count == len(records) >= 50_000
    assert scores['event_removed_fraction'] >= 0.90
    assert scores['nominal_retained_fraction'] >= 0.95


@pytest.mark.slow
def test_edge_turbine_directional_component():
    layout, config = grid_layout(), GeneratorConfig(n_samples=6000, seed=3)
    records, _ = generate(layout, config)
    options = TrainingOptions(sampling=SamplingConfig(n_samples=5000),
                              optimizer=OptimizerConfig(restarts=1, max_iterations=40))
    started = time.perf_counter()
    model, _, _ = train_model(records, Target('turbine', 'T11'), options)
    result = decompose_model(model)
    elapsed = time.perf_counter() - started
    assert model.dataset.n_rows == 5000
    assert elapsed < 600.0

    deficits = directional_truth(layout, config)
    corner = deficits[deficits['turbine_id'] == 'T11']
    free = corner[corner['deficit'] == 0.0]['direction'].to_numpy()
    peak = polar_peak(result)
    assert np.min(_angular_distance(free, peak)) <= 30.0
    polar = result.polar.set_index('direction')['mean']
    assert polar.loc[peak] > polar.loc[45.0]

    wind = result.components['freestream_wind']
    ramp = wind[(wind['freestream_wind'] >= 3.0) & (wind['freestream_wind'] <= 12.0)]['mean'].to_numpy()
    tolerance = 0.01 * (ramp.max() - ramp.min())
    assert np.all(np.maximum.accumulate(ramp) - ramp <= tolerance)
