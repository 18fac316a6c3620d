#!/usr/bin/env python3
"""
Synthetic wind-farm SCADA generator with known ground truth.

Each ten-minute timestamp draws a freestream speed (Weibull) and direction
(mixture of wrapped Gaussians). Turbines inside a top-hat wake cone of an
upwind neighbour see a fixed fractional speed deficit. Power follows the
nominal curve, then curtailment, shutdown and boost events and measurement
noise are injected. Draws for timestamp t come from the substream (seed, t),
so any subset of timestamps can be regenerated independently.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import DataError
from preprocessing import expected_power
from scada_data import Flag, ScadaRecord, TurbineSpec, normalise_yaw, write_records

logger = logging.getLogger(__name__)

EPOCH_2021 = 1609459200  # 2021-01-01T00:00:00Z
TEN_MINUTES = 600
SAMPLES_PER_YEAR = 365 * 24 * 6
FEATHERED_PITCH = 85.0


@dataclass(frozen=True)
class FarmLayout:
    turbine_ids: Tuple[str, ...]
    positions: np.ndarray  # (east, north) metres
    specs: Tuple[TurbineSpec, ...]

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        object.__setattr__(self, 'positions', positions)
        n = len(self.turbine_ids)
        if n < 1 or positions.shape[0] != n or len(self.specs) != n:
            raise DataError(f"layout needs one position and spec per turbine ({n} ids, "
                            f"{positions.shape[0]} positions, {len(self.specs)} specs)")
        if len(set(self.turbine_ids)) != n:
            raise DataError('turbine ids must be unique')
        if len({tuple(p) for p in positions.tolist()}) != n:
            raise DataError('turbine positions must be distinct')

    @property
    def n_turbines(self) -> int:
        return len(self.turbine_ids)

    def index(self, turbine_id: str) -> int:
        return self.turbine_ids.index(turbine_id)


def grid_layout(rows: int = 3, cols: int = 3, spacing: float = 500.0,
                spec: TurbineSpec = TurbineSpec()) -> FarmLayout:
    """Rectangular farm; T{row}{col} with row counted from the south and col from the west."""
    ids, positions = [], []
    for r in range(rows):
        for c in range(cols):
            ids.append(f"T{r + 1}{c + 1}")
            positions.append((c * spacing, r * spacing))
    return FarmLayout(tuple(ids), np.array(positions), (spec,) * len(ids))


@dataclass(frozen=True)
class GeneratorConfig:
    n_samples: int = SAMPLES_PER_YEAR
    start_timestamp: int = EPOCH_2021
    interval: int = TEN_MINUTES
    weibull_shape: float = 2.2
    weibull_scale: float = 9.0
    # (mean direction deg, std deg, weight); directions are where the wind blows from
    direction_modes: Tuple[Tuple[float, float, float], ...] = ((225.0, 45.0, 0.6), (90.0, 50.0, 0.4))
    wake_deficit: float = 0.3
    wake_half_angle: float = 10.0
    wake_recovery: float = 2000.0
    # event rates are per operating sample (cut_in < speed < cut_out), not per record
    curtailment_rate: float = 0.03
    shutdown_rate: float = 0.02
    boost_rate: float = 0.02
    curtail_level: Tuple[float, float] = (0.2, 0.7)
    boost_level: Tuple[float, float] = (1.08, 1.15)
    power_noise: float = 0.01
    yaw_noise: float = 2.0
    pitch_noise: float = 0.3
    pitch_gain: float = 1.8
    curtail_pitch: Tuple[float, float] = (5.0, 15.0)
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise DataError(f"n_samples must be >= 1, got {self.n_samples}")
        rates = (self.curtailment_rate, self.shutdown_rate, self.boost_rate)
        if any(not 0 <= r <= 1 for r in rates) or sum(rates) > 1:
            raise DataError(f"event rates must lie in [0, 1] and sum to at most 1, got {rates}")
        if not 0 <= self.wake_deficit < 1:
            raise DataError(f"wake deficit fraction must lie in [0, 1), got {self.wake_deficit}")
        if self.weibull_shape <= 0 or self.weibull_scale <= 0:
            raise DataError('Weibull shape and scale must be positive')
        if not self.direction_modes or any(w < 0 or s < 0 for _, s, w in self.direction_modes):
            raise DataError('direction modes need non-negative weights and spreads')
        if sum(w for _, _, w in self.direction_modes) <= 0:
            raise DataError('direction mode weights must not all be zero')
        if min(self.power_noise, self.yaw_noise, self.pitch_noise) < 0:
            raise DataError('noise standard deviations must be non-negative')


@dataclass
class GeneratorTruth:
    records: pd.DataFrame      # one row per generated record
    directional: pd.DataFrame  # turbine_id, direction, deficit


def wake_deficit(layout: FarmLayout, direction: float, config: GeneratorConfig) -> np.ndarray:
    """Per-turbine fractional speed deficit for wind blowing from `direction`.

    A turbine is waked when some other turbine lies upwind within the
    recovery length and inside the cone half-angle; the strongest deficit wins.
    """
    theta = math.radians(direction)
    downwind = np.array([-math.sin(theta), -math.cos(theta)])
    offsets = layout.positions[:, None, :] - layout.positions[None, :, :]  # [i, j] = p_i - p_j
    distance = np.linalg.norm(offsets, axis=2)
    along = offsets @ downwind
    cos_half = math.cos(math.radians(config.wake_half_angle))
    inside = (along > 0) & (distance <= config.wake_recovery) & (along >= distance * cos_half)
    np.fill_diagonal(inside, False)
    return np.where(inside.any(axis=1), config.wake_deficit, 0.0)


def directional_truth(layout: FarmLayout, config: GeneratorConfig, resolution: float = 1.0) -> pd.DataFrame:
    directions = np.arange(0.0, 360.0, resolution)
    rows = []
    for direction in directions:
        deficits = wake_deficit(layout, direction, config)
        rows.extend({'turbine_id': tid, 'direction': float(direction), 'deficit': float(d)}
                    for tid, d in zip(layout.turbine_ids, deficits))
    return pd.DataFrame(rows)


def nominal_pitch(wind_speed, spec: TurbineSpec, gain: float):
    """Zero below rated, rising linearly above rated, feathered beyond cut-out."""
    v = np.asarray(wind_speed, dtype=float)
    pitch = gain * np.maximum(v - spec.rated_speed, 0.0)
    return np.where(v >= spec.cut_out_speed, FEATHERED_PITCH, pitch)


def _draw_direction(rng: np.random.Generator, config: GeneratorConfig) -> float:
    weights = np.array([w for _, _, w in config.direction_modes], dtype=float)
    mode = rng.choice(len(weights), p=weights / weights.sum())
    mean, spread, _ = config.direction_modes[mode]
    return normalise_yaw(mean + spread * rng.standard_normal())


def _draw_timestamp(layout: FarmLayout, config: GeneratorConfig, t: int):
    """Everything for one timestamp; a fixed number of draws from substream (seed, t)."""
    rng = np.random.default_rng([config.seed, t])
    n = layout.n_turbines
    freestream = config.weibull_scale * rng.weibull(config.weibull_shape)
    direction = _draw_direction(rng, config)
    event_u = rng.random(n)
    level_u = rng.random(n)
    power_eps = rng.standard_normal(n)
    yaw_eps = rng.standard_normal(n)
    pitch_eps = rng.standard_normal(n)
    pitch_u = rng.random(n)

    deficits = wake_deficit(layout, direction, config)
    timestamp = config.start_timestamp + t * config.interval
    records, truth = [], []
    for k in range(n):
        spec = layout.specs[k]
        speed = freestream * (1.0 - deficits[k])
        nominal = float(expected_power(speed, spec))
        power = nominal * (1.0 + config.power_noise * power_eps[k])
        pitch = float(nominal_pitch(speed, spec, config.pitch_gain)) + config.pitch_noise * pitch_eps[k]
        flag = Flag.NOMINAL

        operating = spec.cut_in_speed < speed < spec.cut_out_speed
        u = event_u[k]
        shutdown_edge = config.shutdown_rate
        curtail_edge = shutdown_edge + config.curtailment_rate
        boost_edge = curtail_edge + config.boost_rate
        if u < shutdown_edge and operating and nominal > 0:
            power = 0.0
            pitch = FEATHERED_PITCH + config.pitch_noise * pitch_eps[k]
            flag = Flag.SHUTDOWN
        elif shutdown_edge <= u < curtail_edge and operating:
            lo, hi = config.curtail_level
            power = nominal * (lo + (hi - lo) * level_u[k]) * (1.0 + config.power_noise * power_eps[k])
            lo_p, hi_p = config.curtail_pitch
            pitch += lo_p + (hi_p - lo_p) * pitch_u[k]
            flag = Flag.CURTAILED
        elif curtail_edge <= u < boost_edge and spec.rated_speed <= speed < spec.cut_out_speed:
            lo, hi = config.boost_level
            power = spec.rated_power * (lo + (hi - lo) * level_u[k])
            flag = Flag.BOOSTED

        records.append(ScadaRecord(
            timestamp=timestamp,
            turbine_id=layout.turbine_ids[k],
            wind_speed=speed,
            power=power,
            yaw_angle=normalise_yaw(direction + config.yaw_noise * yaw_eps[k]),
            pitch_angle=pitch,
            flags=frozenset({flag}),
        ))
        truth.append({
            'timestamp': timestamp,
            'turbine_id': layout.turbine_ids[k],
            'unwaked_power': float(expected_power(freestream, spec)),
            'true_flag': flag.value,
            'wake_deficit': float(deficits[k]),
            'freestream_speed': freestream,
            'direction': direction,
        })
    return records, truth


def generate(layout: FarmLayout, config: GeneratorConfig) -> Tuple[List[ScadaRecord], GeneratorTruth]:
    records: List[ScadaRecord] = []
    truth_rows: List[dict] = []
    for t in range(config.n_samples):
        recs, truth = _draw_timestamp(layout, config, t)
        records.extend(recs)
        truth_rows.extend(truth)

    truth_frame = pd.DataFrame(truth_rows)
    truth_frame.insert(0, 'record_id', np.arange(len(truth_frame)))
    flags = truth_frame['true_flag'].value_counts().to_dict()
    logger.info(f"Generated {len(records)} records over {config.n_samples} timestamps "
                f"for {layout.n_turbines} turbines: {flags}")
    return records, GeneratorTruth(truth_frame, directional_truth(layout, config))


def sibling_paths(path: str) -> Dict[str, str]:
    p = Path(path)
    return {
        'data': str(p),
        'truth': str(p.with_name(f"{p.stem}_truth.csv")),
        'directional': str(p.with_name(f"{p.stem}_directional.csv")),
    }


def write_generated(records: Sequence[ScadaRecord], truth: GeneratorTruth, path: str) -> Dict[str, str]:
    """Data CSV (no flags column, same schema the loader ingests) plus truth siblings."""
    paths = sibling_paths(path)
    write_records(records, paths['data'], include_flags=False)
    truth.records.to_csv(paths['truth'], index=False, encoding='utf-8')
    truth.directional.to_csv(paths['directional'], index=False, encoding='utf-8')
    return paths
