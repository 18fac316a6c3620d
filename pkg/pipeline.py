#!/usr/bin/env python3
"""
End-to-end orchestration shared by the CLI and the model server:
target construction, training-set preparation, model training, gridded
prediction, per-dimension decomposition, evaluation and data exploration.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import DataError
from gp_core import (
    Dataset, TrainedModel, fit, nlpd, predict, predict_pair_mean, predict_subset_mean,
    predict_subset_variance,
)
from hyperopt import OptimizationResult, OptimizerConfig, optimize
from kernels import KernelOrder, KernelSpec
from preprocessing import (
    FeatureVector, FilterConfig, FilterReport, LinkSpec, apply_filters, count_clipped, link_transform,
    normalise_power, stratified_indices, yaw_to_features, zonal_meridional,
)
from scada_data import ScadaRecord, TurbineSpec, aggregate_farm

logger = logging.getLogger(__name__)

FEATURE_COLUMNS = ('freestream_wind', 'yaw_sin', 'yaw_cos')
FEATURE_UNITS = ('m/s', '', '')
WIND, YAW_SIN, YAW_COS = 0, 1, 2
FARM = 'farm'
TURBINE = 'turbine'


@dataclass(frozen=True)
class Target:
    kind: str = FARM
    turbine_id: Optional[str] = None

    def __post_init__(self):
        if self.kind not in (FARM, TURBINE):
            raise DataError(f"target must be '{FARM}' or '{TURBINE}', got {self.kind!r}")
        if self.kind == TURBINE and not self.turbine_id:
            raise DataError('a turbine target needs a turbine id')

    @property
    def label(self) -> str:
        return FARM if self.kind == FARM else f"{TURBINE}:{self.turbine_id}"

    @classmethod
    def parse(cls, label: str) -> 'Target':
        kind, _, turbine_id = label.partition(':')
        return cls(kind, turbine_id or None)


@dataclass(frozen=True)
class SamplingConfig:
    n_samples: int = 5000
    n_bins: int = 36
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 2:
            raise DataError(f"n_samples must be >= 2, got {self.n_samples}")


@dataclass(frozen=True)
class GridSpec:
    n_speed: int = 50
    speed_max_factor: float = 1.2
    n_direction: int = 72

    def __post_init__(self):
        if self.n_speed < 1 or self.n_direction < 1:
            raise DataError('grid needs at least one speed and one direction')
        if not self.speed_max_factor > 0:
            raise DataError(f"speed_max_factor must be positive, got {self.speed_max_factor}")

    def speeds(self, spec: TurbineSpec) -> np.ndarray:
        return np.linspace(0.0, self.speed_max_factor * spec.rated_speed, self.n_speed)

    def directions(self) -> np.ndarray:
        return np.arange(self.n_direction) * (360.0 / self.n_direction)


@dataclass(frozen=True)
class TrainingOptions:
    turbine: TurbineSpec = TurbineSpec()
    filter: FilterConfig = FilterConfig()
    skip_filter: bool = False
    link_percentile: float = 99.9
    clip_epsilon: float = 1e-4
    sampling: SamplingConfig = SamplingConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    kernel_order: KernelOrder = KernelOrder.FIRST_ORDER_ADDITIVE


@dataclass
class DecompositionResult:
    """Component curves on the prediction grid; `offset` is the centring constant."""
    offset: float
    components: Dict[str, pd.DataFrame]
    polar: pd.DataFrame
    polar_grid: pd.DataFrame
    pairs: Dict[str, pd.DataFrame] = field(default_factory=dict)


def _freestream_by_timestamp(records: Sequence[ScadaRecord]) -> Dict[int, float]:
    freestream: Dict[int, float] = {}
    for r in records:
        if r.wind_speed > freestream.get(r.timestamp, -math.inf):
            freestream[r.timestamp] = r.wind_speed
    return freestream


def build_target_frame(records: Sequence[ScadaRecord], target: Target,
                       reference: Optional[Sequence[ScadaRecord]] = None) -> pd.DataFrame:
    """One row per timestamp: freestream wind, yaw and its sin/cos encoding, target power.

    The freestream proxy is the farm-wide maximum measured speed, taken from
    `reference` (all loaded records) so that filtering one turbine never
    changes another's feature. A farm target keeps only timestamps at which
    every turbine in `reference` survived.
    """
    reference = records if reference is None else reference
    if not records:
        raise DataError('no records to build a target from')

    if target.kind == FARM:
        n_turbines = len({r.turbine_id for r in reference})
        series = [s for s in aggregate_farm(records, n_turbines) if not s.partial]
        if not series:
            raise DataError('no timestamp has a complete set of turbines; cannot build a farm target')
        freestream = _freestream_by_timestamp(reference)
        timestamps = [s.timestamp for s in series]
        wind = [freestream[s.timestamp] for s in series]
        yaw = [s.reference_yaw for s in series]
        power = [s.total_power for s in series]
    else:
        rows = [r for r in records if r.turbine_id == target.turbine_id]
        if not rows:
            raise DataError(f"no records for turbine {target.turbine_id!r}")
        freestream = _freestream_by_timestamp(reference)
        timestamps = [r.timestamp for r in rows]
        wind = [freestream[r.timestamp] for r in rows]
        yaw = [r.yaw_angle for r in rows]
        power = [r.power for r in rows]

    features = np.array([FeatureVector.from_yaw(w, a).as_array() for w, a in zip(wind, yaw)]).reshape(-1, 3)
    return pd.DataFrame({
        'timestamp': timestamps,
        'freestream_wind': features[:, 0],
        'yaw': np.asarray(yaw, dtype=float),
        'yaw_sin': features[:, 1],
        'yaw_cos': features[:, 2],
        'power': np.asarray(power, dtype=float),
    })


def prepare_dataset(frame: pd.DataFrame, link: LinkSpec,
                    sampling: SamplingConfig = SamplingConfig()) -> Tuple[Dataset, int]:
    """Yaw-stratified subsample mapped through the link; returns (dataset, clipped count)."""
    idx = stratified_indices(frame['yaw'].to_numpy(), sampling.n_samples, sampling.n_bins, sampling.seed)
    sub = frame.iloc[idx]
    clipped = count_clipped(sub['power'].to_numpy(), link)
    if clipped:
        logger.warning(f"{clipped} of {len(sub)} training targets clipped to the link's open interval")
    X = sub[list(FEATURE_COLUMNS)].to_numpy(dtype=float)
    y = link_transform(sub['power'].to_numpy(), link)
    return Dataset(X, np.atleast_1d(y), FEATURE_COLUMNS, FEATURE_UNITS), clipped


def _kernel_spec(order: KernelOrder, n_dims: int) -> KernelSpec:
    if order is KernelOrder.SECOND_ORDER_ADDITIVE:
        return KernelSpec.second_order(n_dims)
    return KernelSpec.first_order(n_dims)


def training_report(model: TrainedModel, result: OptimizationResult, filter_report: Optional[FilterReport],
                    n_records: int, clipped: int) -> dict:
    theta = model.theta
    return {
        'target': model.metadata.get('target'),
        'final_nlml': result.nlml,
        'optimizer': result.to_dict(),
        'theta': {
            column: {
                'process_variance': float(theta.process_variance[i]),
                'length_scale': float(theta.length_scale[i]),
                'units': model.dataset.units[i],
            }
            for i, column in enumerate(model.dataset.columns)
        },
        'pair_variance': {f"{model.dataset.columns[i]}*{model.dataset.columns[j]}": v
                          for (i, j), v in sorted(theta.pair_variance.items())},
        'noise_variance': theta.noise_variance,
        'offset': model.offset,
        'jitter': model.jitter,
        'link': model.link.to_dict() if model.link is not None else None,
        'n_records': n_records,
        'n_training_rows': model.dataset.n_rows,
        'clipped_targets': clipped,
        'filter': filter_report.to_dict() if filter_report is not None else None,
    }


def train_model(records: Sequence[ScadaRecord], target: Target, options: TrainingOptions = TrainingOptions(),
                telemetry=None) -> Tuple[TrainedModel, dict, OptimizationResult]:
    """Filter, build the target, subsample, tune hyperparameters and fit.

    Returns the fitted model, a JSON-ready training report and the optimizer result.
    """
    filter_report = None
    retained = list(records)
    if not options.skip_filter:
        retained, filter_report, _ = apply_filters(records, options.turbine, options.filter)
        if telemetry is not None:
            telemetry.record_filter(filter_report)

    frame = build_target_frame(retained, target, reference=records)
    link = LinkSpec.from_power(frame['power'].to_numpy(), options.link_percentile, options.clip_epsilon)
    dataset, clipped = prepare_dataset(frame, link, options.sampling)
    spec = _kernel_spec(options.kernel_order, dataset.n_dims)
    logger.info(f"Training {target.label}: {dataset.n_rows} rows from {len(frame)} timestamps, "
                f"{spec.order.value}-order kernel")

    on_evaluation = telemetry.record_nlml if telemetry is not None else None
    result = optimize(dataset, spec, options.optimizer, center=True, on_evaluation=on_evaluation)
    if telemetry is not None:
        telemetry.record_optimization(result)
    if not result.converged:
        logger.warning(f"Optimizer stopped after {result.iterations} iterations without meeting tolerance")

    metadata = {
        'target': target.label,
        'turbine_spec': asdict(options.turbine),
        'sampling': asdict(options.sampling),
        'link_percentile': options.link_percentile,
    }
    model = fit(dataset, result.theta, spec, center=True, link=link, metadata=metadata)
    return model, training_report(model, result, filter_report, len(records), clipped), result


def model_turbine_spec(model: TrainedModel) -> TurbineSpec:
    stored = model.metadata.get('turbine_spec')
    return TurbineSpec(**stored) if stored else TurbineSpec()


def _require_features(model: TrainedModel):
    if tuple(model.dataset.columns) != FEATURE_COLUMNS:
        raise DataError(f"model columns {list(model.dataset.columns)} are not {list(FEATURE_COLUMNS)}; "
                        f"gridded prediction needs a wind/yaw model")


def prediction_grid(grid: GridSpec, spec: TurbineSpec) -> pd.DataFrame:
    """Speed-major (speed, direction) grid with the sin/cos yaw encoding."""
    speeds, directions = np.meshgrid(grid.speeds(spec), grid.directions(), indexing='ij')
    speeds, directions = speeds.ravel(), directions.ravel()
    yaw_sin, yaw_cos = yaw_to_features(directions)
    return pd.DataFrame({
        'freestream_wind': speeds,
        'direction': directions,
        'yaw_sin': yaw_sin,
        'yaw_cos': yaw_cos,
    })


def with_yaw_features(points: pd.DataFrame) -> pd.DataFrame:
    """Add yaw_sin/yaw_cos from a `direction` column (degrees) when they are absent."""
    if 'direction' not in points.columns or {'yaw_sin', 'yaw_cos'} <= set(points.columns):
        return points
    points = points.copy()
    points['yaw_sin'], points['yaw_cos'] = yaw_to_features(points['direction'].to_numpy(dtype=float))
    return points


def predict_frame(model: TrainedModel, points: pd.DataFrame, level: float = 0.95) -> pd.DataFrame:
    """Predict at the model's feature columns of `points`; extra columns are carried through.

    Points may give wind direction in degrees instead of the sin/cos pair.
    """
    points = with_yaw_features(points)
    missing = [c for c in model.dataset.columns if c not in points.columns]
    if missing:
        raise DataError(f"prediction points lack column(s) {', '.join(missing)}")
    X = points[list(model.dataset.columns)].to_numpy(dtype=float)
    result = predict(model, X, level=level)
    out = points.copy()
    out['mean'] = result.mean
    out['variance'] = result.variance
    if result.power_mean is not None:
        out['power_mean'] = result.power_mean
        out['power_variance'] = result.power_variance
        out['power_lower'] = result.power_lower
        out['power_upper'] = result.power_upper
    return out


def _min_max(values: np.ndarray) -> np.ndarray:
    span = float(np.max(values) - np.min(values)) if values.size else 0.0
    if span == 0:
        return np.zeros_like(values)
    return (values - np.min(values)) / span


def decompose_model(model: TrainedModel, grid: GridSpec = GridSpec()) -> DecompositionResult:
    """Per-dimension component curves plus the summed sin+cos directional curve.

    Wind-speed components are evaluated on the grid's speed axis and the yaw
    components on the direction axis, so for any grid point
    mean = offset + wind(speed) + sin-part(direction) + cos-part(direction)
    (+ pair terms for a second-order model).
    """
    _require_features(model)
    spec = model_turbine_spec(model)
    speeds = grid.speeds(spec)
    directions = grid.directions()
    yaw_sin, yaw_cos = yaw_to_features(directions)

    components = {}
    wind_mean = predict_subset_mean(model, [WIND], speeds)
    components['freestream_wind'] = pd.DataFrame({
        'freestream_wind': speeds,
        'mean': wind_mean,
        'variance': predict_subset_variance(model, [WIND], speeds),
        'normalized': _min_max(wind_mean),
    })
    for dim, values in ((YAW_SIN, yaw_sin), (YAW_COS, yaw_cos)):
        column = FEATURE_COLUMNS[dim]
        mean = predict_subset_mean(model, [dim], values)
        components[column] = pd.DataFrame({
            'direction': directions,
            column: values,
            'mean': mean,
            'variance': predict_subset_variance(model, [dim], values),
            'normalized': _min_max(mean),
        })

    both = np.column_stack([yaw_sin, yaw_cos])
    polar_mean = predict_subset_mean(model, [YAW_SIN, YAW_COS], both)
    polar = pd.DataFrame({
        'direction': directions,
        'mean': polar_mean,
        'variance': predict_subset_variance(model, [YAW_SIN, YAW_COS], both),
        'normalized': _min_max(polar_mean),
    })

    points = prediction_grid(grid, spec)
    wind_part = np.repeat(wind_mean, len(directions))
    direction_part = np.tile(polar_mean, len(speeds))
    polar_grid = points[['freestream_wind', 'direction']].copy()
    polar_grid['wind_component'] = wind_part
    polar_grid['direction_component'] = direction_part
    polar_grid['wind_normalized'] = _min_max(wind_part)
    polar_grid['direction_normalized'] = _min_max(direction_part)

    pairs = {}
    X = points[list(FEATURE_COLUMNS)].to_numpy(dtype=float)
    for i, j in model.spec.pairs:
        name = f"{FEATURE_COLUMNS[i]}__{FEATURE_COLUMNS[j]}"
        frame = points[['freestream_wind', 'direction']].copy()
        frame['mean'] = predict_pair_mean(model, (i, j), X[:, [i, j]])
        pairs[name] = frame

    return DecompositionResult(offset=model.offset, components=components, polar=polar,
                               polar_grid=polar_grid, pairs=pairs)


def evaluate_arrays(model: TrainedModel, X, power) -> dict:
    """RMSE/MAE in power space and NLPD in the transformed space.

    Without a link all three are computed on the raw target.
    """
    power = np.asarray(power, dtype=float).reshape(-1)
    result = predict(model, X)
    if model.link is not None:
        predicted, y = result.power_mean, link_transform(power, model.link)
    else:
        predicted, y = result.mean, power
    error = predicted - power
    return {
        'n': int(power.size),
        'rmse': float(np.sqrt(np.mean(error ** 2))),
        'mae': float(np.mean(np.abs(error))),
        'nlpd': nlpd(model, X, np.atleast_1d(y)),
    }


def evaluate_model(model: TrainedModel, records: Sequence[ScadaRecord]) -> dict:
    """Score a trained wind/yaw model on holdout SCADA records for the model's own target."""
    _require_features(model)
    target = Target.parse(model.metadata.get('target', FARM))
    frame = build_target_frame(records, target)
    metrics = evaluate_arrays(model, frame[list(FEATURE_COLUMNS)].to_numpy(dtype=float),
                              frame['power'].to_numpy())
    metrics['target'] = target.label
    return metrics


def explore(records: Sequence[ScadaRecord], spec: TurbineSpec) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Exploration tables: normalised power curves and zonal/meridional wind components.

    Both tables hold every turbine plus a `farm` aggregate row per timestamp.
    """
    n_turbines = len({r.turbine_id for r in records})
    turbine_ids = [r.turbine_id for r in records]
    speeds = np.array([r.wind_speed for r in records])
    yaws = np.array([r.yaw_angle for r in records])
    power = np.array([r.power for r in records])

    farm = aggregate_farm(records, n_turbines)
    farm_ids = [FARM] * len(farm)
    farm_speeds = np.array([s.median_wind_speed for s in farm])
    farm_yaws = np.array([s.reference_yaw for s in farm])
    farm_power = np.array([s.total_power for s in farm])

    power_curve = pd.DataFrame({
        'timestamp': [r.timestamp for r in records] + [s.timestamp for s in farm],
        'turbine_id': turbine_ids + farm_ids,
        'wind_speed': np.concatenate([speeds, farm_speeds]),
        'normalised_power': np.concatenate([
            normalise_power(power, spec.rated_power),
            normalise_power(farm_power, n_turbines * spec.rated_power),
        ]),
        'partial': [False] * len(records) + [s.partial for s in farm],
    })

    u, v = zonal_meridional(np.concatenate([speeds, farm_speeds]), np.concatenate([yaws, farm_yaws]))
    wind_rose = pd.DataFrame({
        'timestamp': power_curve['timestamp'],
        'turbine_id': power_curve['turbine_id'],
        'wind_speed': power_curve['wind_speed'],
        'direction': np.concatenate([yaws, farm_yaws]),
        'u_east': u,
        'v_north': v,
    })
    return power_curve, wind_rose


def polar_peak(decomposition: DecompositionResult) -> float:
    """Direction (degrees) at which the summed yaw component is largest."""
    polar = decomposition.polar
    return float(polar['direction'].iloc[int(np.argmax(polar['mean'].to_numpy()))])
