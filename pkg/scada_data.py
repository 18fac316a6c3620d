#!/usr/bin/env python3
"""
SCADA data model, CSV ingestion and farm-level aggregation.

Records are ten-minute turbine observations. Ingestion validates ranges,
normalises yaw into [0, 360) and reports (never silently drops) bad rows.
"""

import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd

from errors import DataError, RecordValidationError

logger = logging.getLogger(__name__)

FLAG_SEPARATOR = '|'


class Flag(enum.Enum):
    CURTAILED = 'Curtailed'
    SHUTDOWN = 'Shutdown'
    BOOSTED = 'Boosted'
    NOMINAL = 'Nominal'
    UNKNOWN = 'Unknown'


UNKNOWN_FLAGS: FrozenSet[Flag] = frozenset({Flag.UNKNOWN})
NOMINAL_FLAGS: FrozenSet[Flag] = frozenset({Flag.NOMINAL})

# logical field -> CSV column; `flags` is optional on input
DEFAULT_SCHEMA: Dict[str, str] = {
    'timestamp': 'timestamp',
    'turbine_id': 'turbine_id',
    'wind_speed': 'wind_speed',
    'power': 'power',
    'yaw_angle': 'yaw_angle',
    'pitch_angle': 'pitch_angle',
    'flags': 'flags',
}
REQUIRED_FIELDS = ('timestamp', 'turbine_id', 'wind_speed', 'power', 'yaw_angle', 'pitch_angle')


@dataclass(frozen=True)
class TurbineSpec:
    cut_in_speed: float = 3.0
    rated_speed: float = 12.0
    cut_out_speed: float = 25.0
    rated_power: float = 2000.0
    boost_limit: float = 2100.0

    def __post_init__(self):
        if not 0 < self.cut_in_speed < self.rated_speed < self.cut_out_speed:
            raise DataError(
                f"turbine speeds must satisfy 0 < cut_in < rated < cut_out, got "
                f"{self.cut_in_speed}, {self.rated_speed}, {self.cut_out_speed}")
        if not 0 < self.rated_power <= self.boost_limit:
            raise DataError(
                f"turbine powers must satisfy 0 < rated_power <= boost_limit, got "
                f"{self.rated_power}, {self.boost_limit}")


@dataclass(frozen=True, slots=True)
class ScadaRecord:
    timestamp: int
    turbine_id: str
    wind_speed: float
    power: float
    yaw_angle: float
    pitch_angle: float
    flags: FrozenSet[Flag] = field(default=UNKNOWN_FLAGS)

    def __post_init__(self):
        if not self.wind_speed >= 0:
            raise DataError(f"wind_speed must be >= 0, got {self.wind_speed}")
        if not 0 <= self.yaw_angle < 360:
            raise DataError(f"yaw_angle must lie in [0, 360), got {self.yaw_angle}")


@dataclass(frozen=True)
class FarmSeries:
    timestamp: int
    median_wind_speed: float
    total_power: float
    reference_yaw: float
    max_wind_speed: float
    n_turbines: int
    partial: bool = False


def normalise_yaw(yaw: float) -> float:
    """Map any finite angle into [0, 360)."""
    wrapped = math.fmod(yaw, 360.0)
    if wrapped < 0:
        wrapped += 360.0
    # fmod of values just below 0 can round up to exactly 360.0
    return 0.0 if wrapped >= 360.0 else wrapped


def format_flags(flags: Iterable[Flag]) -> str:
    return FLAG_SEPARATOR.join(sorted(f.value for f in flags))


def parse_flags(text: str) -> FrozenSet[Flag]:
    text = (text or '').strip()
    if not text:
        return UNKNOWN_FLAGS
    return frozenset(Flag(part.strip()) for part in text.split(FLAG_SEPARATOR) if part.strip())


def load_schema(path: Optional[str]) -> Dict[str, str]:
    """Read a key=column-name mapping; lines starting with # are comments.

    A `[columns]` header is accepted so the mapping can live inside a run config.
    """
    schema = dict(DEFAULT_SCHEMA)
    if path is None:
        return schema
    try:
        with open(path, 'r', encoding='utf-8') as f:
            lines = f.readlines()
    except FileNotFoundError:
        raise DataError(f"schema file not found: {path}")

    for line in lines:
        line = line.strip()
        if not line or line.startswith('#') or line.startswith('['):
            continue
        if '=' not in line:
            raise DataError(f"schema line is not key=column: {line!r}")
        key, column = (part.strip() for part in line.split('=', 1))
        if key not in DEFAULT_SCHEMA:
            raise DataError(f"unknown schema key {key!r}")
        schema[key] = column
    return schema


def _to_float(text: str) -> float:
    try:
        return float(text)
    except (TypeError, ValueError):
        return math.nan


def _parse_timestamp(text: str) -> Optional[int]:
    """Integer epoch seconds take precedence; otherwise ISO-8601."""
    text = (text or '').strip()
    if not text:
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        stamp = pd.Timestamp(text)
    except (ValueError, TypeError):
        return None
    if stamp is pd.NaT:
        return None
    if stamp.tzinfo is None:
        stamp = stamp.tz_localize('UTC')
    return int(stamp.timestamp())


def read_csv_table(path: str, **options) -> pd.DataFrame:
    """pd.read_csv as UTF-8; malformed files surface as DataError with pandas' line number."""
    try:
        return pd.read_csv(path, encoding='utf-8', **options)
    except pd.errors.EmptyDataError:
        raise DataError(f"{path} is empty: no header row")
    except pd.errors.ParserError as e:
        raise DataError(f"malformed CSV {path}: {str(e).strip()}")
    except UnicodeDecodeError as e:
        raise DataError(f"{path} is not UTF-8 text (bad byte at offset {e.start})")


def load_records(path: str, schema: Optional[Dict[str, str]] = None,
                 on_invalid: str = 'raise') -> List[ScadaRecord]:
    """Load and validate SCADA records from a CSV file with a header row.

    on_invalid='raise' collects every bad row into one RecordValidationError;
    on_invalid='skip' logs each bad row and continues.
    """
    schema = schema or DEFAULT_SCHEMA
    if on_invalid not in ('raise', 'skip'):
        raise ValueError(f"on_invalid must be 'raise' or 'skip', got {on_invalid!r}")
    if not Path(path).is_file():
        raise DataError(f"input file not found: {path}")

    frame = read_csv_table(path, dtype=str, keep_default_na=False)
    missing = [schema[name] for name in REQUIRED_FIELDS if schema[name] not in frame.columns]
    if missing:
        raise DataError(f"missing column(s) {', '.join(missing)} in {path}")
    has_flags = schema.get('flags') in frame.columns

    columns = {name: frame[schema[name]].tolist() for name in REQUIRED_FIELDS}
    flag_texts = frame[schema['flags']].tolist() if has_flags else None

    records: List[ScadaRecord] = []
    problems = []
    last_seen: Dict[str, int] = {}
    wrapped_count = 0

    for idx in range(len(frame)):
        timestamp = _parse_timestamp(columns['timestamp'][idx])
        turbine_id = str(columns['turbine_id'][idx]).strip()
        values = {name: _to_float(columns[name][idx])
                  for name in ('wind_speed', 'power', 'yaw_angle', 'pitch_angle')}

        reason = None
        if timestamp is None:
            reason = f"unparseable timestamp {columns['timestamp'][idx]!r}"
        elif not turbine_id:
            reason = 'empty turbine_id'
        else:
            bad = [name for name, value in values.items() if not math.isfinite(value)]
            if bad:
                reason = f"unparseable or non-finite {', '.join(bad)}"
            elif values['wind_speed'] < 0:
                reason = f"wind_speed {values['wind_speed']} < 0"

        flags = UNKNOWN_FLAGS
        if reason is None and flag_texts is not None:
            try:
                flags = parse_flags(flag_texts[idx])
            except ValueError:
                reason = f"unknown flag in {flag_texts[idx]!r}"

        if reason is None and turbine_id in last_seen and timestamp <= last_seen[turbine_id]:
            reason = f"timestamp {timestamp} not after {last_seen[turbine_id]} for turbine {turbine_id}"

        if reason is not None:
            problems.append((idx, reason))
            if on_invalid == 'skip':
                logger.warning(f"Skipping row {idx} of {path}: {reason}")
            continue

        yaw = values['yaw_angle']
        if not 0 <= yaw < 360:
            yaw = normalise_yaw(yaw)
            wrapped_count += 1
            logger.warning(f"Row {idx}: yaw {values['yaw_angle']} normalised to {yaw}")

        last_seen[turbine_id] = timestamp
        records.append(ScadaRecord(
            timestamp=timestamp,
            turbine_id=turbine_id,
            wind_speed=values['wind_speed'],
            power=values['power'],
            yaw_angle=yaw,
            pitch_angle=values['pitch_angle'],
            flags=flags,
        ))

    if problems and on_invalid == 'raise':
        raise RecordValidationError(problems, path=path)

    logger.info(f"Loaded {len(records)} records from {path} "
                f"({len(problems)} invalid, {wrapped_count} yaw values normalised)")
    return records


def records_to_frame(records: Sequence[ScadaRecord], schema: Optional[Dict[str, str]] = None) -> pd.DataFrame:
    schema = schema or DEFAULT_SCHEMA
    return pd.DataFrame({
        schema['timestamp']: [r.timestamp for r in records],
        schema['turbine_id']: [r.turbine_id for r in records],
        schema['wind_speed']: [r.wind_speed for r in records],
        schema['power']: [r.power for r in records],
        schema['yaw_angle']: [r.yaw_angle for r in records],
        schema['pitch_angle']: [r.pitch_angle for r in records],
        schema['flags']: [format_flags(r.flags) for r in records],
    })


def write_records(records: Sequence[ScadaRecord], path: str,
                  schema: Optional[Dict[str, str]] = None, include_flags: bool = True) -> None:
    """Write records with full-precision floats so they reload bit-identically."""
    frame = records_to_frame(records, schema)
    if not include_flags:
        frame = frame.drop(columns=[(schema or DEFAULT_SCHEMA)['flags']])
    frame.to_csv(path, index=False, encoding='utf-8')


def aggregate_farm(records: Sequence[ScadaRecord],
                   expected_turbines: Optional[int] = None) -> List[FarmSeries]:
    """Aggregate turbine records to one FarmSeries per timestamp.

    Timestamps with fewer turbines than expected are still aggregated over the
    turbines present and marked partial. The reference yaw is the yaw of the
    turbine reporting the highest wind speed (first in input order on ties).
    """
    if not records:
        raise DataError('cannot aggregate an empty record list')
    if expected_turbines is None:
        expected_turbines = len({r.turbine_id for r in records})

    groups: Dict[int, List[ScadaRecord]] = {}
    for record in records:
        groups.setdefault(record.timestamp, []).append(record)

    series = []
    for timestamp in sorted(groups):
        group = groups[timestamp]
        speeds = np.array([r.wind_speed for r in group])
        powers = np.array([r.power for r in group])
        # sorted summation keeps the total independent of turbine order
        total = math.fsum(sorted(powers.tolist()))
        leader = int(np.argmax(speeds))
        series.append(FarmSeries(
            timestamp=timestamp,
            median_wind_speed=float(np.median(speeds)),
            total_power=total,
            reference_yaw=group[leader].yaw_angle,
            max_wind_speed=float(speeds[leader]),
            n_turbines=len(group),
            partial=len(group) < expected_turbines,
        ))

    partial = sum(1 for s in series if s.partial)
    if partial:
        logger.info(f"{partial} of {len(series)} timestamps aggregated over a partial farm")
    return series
