#!/usr/bin/env python3
"""
SCADA preprocessing: rule-based and Mahalanobis filtering, yaw encoding,
the logit link between power and the modelling space, and yaw-stratified
subsampling.
"""

import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit, logit
from scipy.stats import chi2

from errors import DataError
from scada_data import (
    DEFAULT_SCHEMA, NOMINAL_FLAGS, Flag, ScadaRecord, TurbineSpec, records_to_frame,
)

logger = logging.getLogger(__name__)

ABOVE_CUT_OUT = 'above-cut-out'
BELOW_CUT_IN = 'below-cut-in'
SHUTDOWN = 'shutdown'
BOOSTED = 'boosted'
CURTAILED = 'curtailed'
MAHALANOBIS_OUTLIER = 'mahalanobis-outlier'
REMOVAL_REASONS = (BELOW_CUT_IN, SHUTDOWN, CURTAILED, BOOSTED, ABOVE_CUT_OUT, MAHALANOBIS_OUTLIER)

REASON_FLAGS = {
    SHUTDOWN: frozenset({Flag.SHUTDOWN}),
    BOOSTED: frozenset({Flag.BOOSTED}),
    CURTAILED: frozenset({Flag.CURTAILED}),
}

# 99th percentile of chi-squared with 2 degrees of freedom (~9.21)
DEFAULT_MAHALANOBIS_THRESHOLD = float(chi2.ppf(0.99, df=2))


@dataclass
class FilterReport:
    input_count: int = 0
    retained_count: int = 0
    removed: Dict[str, int] = field(default_factory=lambda: {reason: 0 for reason in REMOVAL_REASONS})
    clipped: int = 0

    def __post_init__(self):
        for reason in REMOVAL_REASONS:
            self.removed.setdefault(reason, 0)

    @property
    def removed_count(self) -> int:
        return sum(self.removed.values())

    def check(self):
        if self.removed_count + self.retained_count != self.input_count:
            raise AssertionError(
                f"filter accounting broken: {self.removed_count} removed + "
                f"{self.retained_count} retained != {self.input_count} input")

    def merge(self, other: 'FilterReport') -> 'FilterReport':
        """Chain a later filter stage whose input was this stage's output."""
        removed = {reason: self.removed[reason] + other.removed[reason] for reason in REMOVAL_REASONS}
        return FilterReport(
            input_count=self.input_count,
            retained_count=other.retained_count,
            removed=removed,
            clipped=self.clipped + other.clipped,
        )

    def to_dict(self) -> dict:
        return {
            'input_count': self.input_count,
            'retained_count': self.retained_count,
            'removed': {reason: self.removed[reason] for reason in REMOVAL_REASONS},
            'removed_count': self.removed_count,
            'clipped': self.clipped,
        }


@dataclass(frozen=True)
class FilterConfig:
    curtail_fraction: float = 0.8
    mahalanobis_threshold: float = DEFAULT_MAHALANOBIS_THRESHOLD
    drop_below_cut_in: bool = False
    per_turbine: bool = True

    def __post_init__(self):
        if not 0 < self.curtail_fraction <= 1:
            raise DataError(f"curtail_fraction must lie in (0, 1], got {self.curtail_fraction}")
        if not self.mahalanobis_threshold > 0:
            raise DataError(f"mahalanobis_threshold must be positive, got {self.mahalanobis_threshold}")


@dataclass(frozen=True)
class FeatureVector:
    freestream_wind: float
    yaw_sin: float
    yaw_cos: float

    def __post_init__(self):
        if not (math.isfinite(self.freestream_wind) and self.freestream_wind >= 0):
            raise DataError(f"freestream_wind must be finite and >= 0, got {self.freestream_wind}")
        if abs(self.yaw_sin ** 2 + self.yaw_cos ** 2 - 1.0) > 1e-12:
            raise DataError(f"yaw features ({self.yaw_sin}, {self.yaw_cos}) are not a unit vector")

    @classmethod
    def from_yaw(cls, freestream_wind: float, yaw_angle: float) -> 'FeatureVector':
        yaw_sin, yaw_cos = yaw_to_features(yaw_angle)
        return cls(float(freestream_wind), float(yaw_sin), float(yaw_cos))

    def as_array(self) -> np.ndarray:
        return np.array([self.freestream_wind, self.yaw_sin, self.yaw_cos])


@dataclass(frozen=True)
class LinkSpec:
    clip_epsilon: float = 1e-4
    normalizer: float = 1.0

    def __post_init__(self):
        if not 0 < self.clip_epsilon < 0.5:
            raise DataError(f"clip_epsilon must lie in (0, 0.5), got {self.clip_epsilon}")
        if not self.normalizer > 0:
            raise DataError(f"power normalizer must be positive, got {self.normalizer}")

    @classmethod
    def from_power(cls, power, percentile: float = 99.9, clip_epsilon: float = 1e-4) -> 'LinkSpec':
        """Normalise by a high percentile of the target power."""
        normalizer = float(np.percentile(np.asarray(power, dtype=float), percentile))
        if not normalizer > 0:
            raise DataError(f"{percentile}th percentile of target power is {normalizer}; cannot normalise")
        return cls(clip_epsilon=clip_epsilon, normalizer=normalizer)

    def to_dict(self) -> dict:
        return {'clip_epsilon': self.clip_epsilon, 'normalizer': self.normalizer}


def expected_power(wind_speed, spec: TurbineSpec):
    """Nominal power curve: cubic from cut-in to rated, flat to cut-out, zero elsewhere."""
    v = np.asarray(wind_speed, dtype=float)
    ci, rated = spec.cut_in_speed, spec.rated_speed
    ramp = spec.rated_power * (v ** 3 - ci ** 3) / (rated ** 3 - ci ** 3)
    power = np.where(v < rated, ramp, spec.rated_power)
    power = np.where((v < ci) | (v >= spec.cut_out_speed), 0.0, power)
    return power if power.ndim else float(power)


def classify_rules(wind_speed, power, spec: TurbineSpec, config: FilterConfig = FilterConfig()) -> np.ndarray:
    """Return the removal reason per row ('' when the row passes every rule).

    Rules are tried in a fixed order and the first match wins.
    """
    v = np.asarray(wind_speed, dtype=float)
    p = np.asarray(power, dtype=float)
    expected = np.asarray(expected_power(v, spec))
    operating = (v > spec.cut_in_speed) & (v < spec.cut_out_speed)

    reasons = np.full(v.shape, '', dtype=object)
    rules = [
        (ABOVE_CUT_OUT, v >= spec.cut_out_speed),
        (BELOW_CUT_IN, (v < spec.cut_in_speed) if config.drop_below_cut_in else np.zeros(v.shape, bool)),
        (SHUTDOWN, (p <= 0) & (v >= spec.cut_in_speed)),
        (BOOSTED, p > spec.boost_limit),
        (CURTAILED, operating & (p < config.curtail_fraction * expected)),
    ]
    for reason, hit in rules:
        reasons[(reasons == '') & hit] = reason
    return reasons


def rule_filter(records: Sequence[ScadaRecord], spec: TurbineSpec,
                config: FilterConfig = FilterConfig()) -> Tuple[List[ScadaRecord], FilterReport]:
    """Drop controlled deviations from the nominal power curve.

    Retained records come back flagged Nominal.
    """
    reasons = classify_rules([r.wind_speed for r in records], [r.power for r in records], spec, config)
    retained = [replace(r, flags=NOMINAL_FLAGS) for r, reason in zip(records, reasons) if reason == '']
    counts = Counter(reason for reason in reasons if reason)
    report = FilterReport(input_count=len(records), retained_count=len(retained), removed=dict(counts))
    report.check()
    return retained, report


def mahalanobis_distances(points) -> np.ndarray:
    """Squared Mahalanobis distance of each row from the cloud's sample mean."""
    x = np.asarray(points, dtype=float)
    if x.ndim != 2 or x.shape[0] < 3:
        raise DataError(f"need at least 3 points for a covariance estimate, got shape {x.shape}")
    centered = x - x.mean(axis=0)
    cov = np.cov(x, rowvar=False)
    if np.linalg.matrix_rank(cov) < x.shape[1]:
        raise DataError('sample covariance is singular (points are collinear)')
    solved = np.linalg.solve(cov, centered.T)
    return np.einsum('ij,ji->i', centered, solved)


def mahalanobis_filter(points, threshold: float = DEFAULT_MAHALANOBIS_THRESHOLD) -> Tuple[np.ndarray, FilterReport]:
    """Single-pass squared-distance screen over (pitch_angle, power) pairs."""
    d2 = mahalanobis_distances(points)
    mask = d2 <= threshold
    retained = int(mask.sum())
    report = FilterReport(input_count=len(mask), retained_count=retained,
                          removed={MAHALANOBIS_OUTLIER: len(mask) - retained})
    return mask, report


def yaw_to_features(yaw_angle):
    theta = np.deg2rad(yaw_angle)
    return np.sin(theta), np.cos(theta)


def features_to_direction(yaw_sin, yaw_cos):
    return np.mod(np.rad2deg(np.arctan2(yaw_sin, yaw_cos)), 360.0)


def zonal_meridional(wind_speed, direction):
    """Split a speed blowing *from* `direction` (degrees) into east and north components."""
    theta = np.deg2rad(direction)
    s = np.asarray(wind_speed, dtype=float)
    return -s * np.sin(theta), -s * np.cos(theta)


def normalise_power(power, rated_power: float):
    return np.asarray(power, dtype=float) / rated_power


def count_clipped(power, link: LinkSpec) -> int:
    p = np.asarray(power, dtype=float) / link.normalizer
    return int(np.count_nonzero((p < link.clip_epsilon) | (p > 1 - link.clip_epsilon)))


def link_transform(power, link: LinkSpec):
    p = np.clip(np.asarray(power, dtype=float) / link.normalizer, link.clip_epsilon, 1 - link.clip_epsilon)
    z = logit(p)
    return z if z.ndim else float(z)


def inverse_link(z, link: LinkSpec):
    power = link.normalizer * expit(np.asarray(z, dtype=float))
    return power if power.ndim else float(power)


def largest_remainder(counts: Sequence[int], n_target: int) -> np.ndarray:
    """Allocate n_target across bins proportionally to counts (ties go to the lower bin)."""
    counts = np.asarray(counts, dtype=np.int64)
    total = int(counts.sum())
    exact = counts * n_target / total
    quota = np.floor(exact).astype(np.int64)
    leftover = n_target - int(quota.sum())
    order = sorted(range(len(counts)), key=lambda b: (-(exact[b] - quota[b]), b))
    for b in order[:leftover]:
        quota[b] += 1
    return np.minimum(quota, counts)


def stratified_indices(yaw, n_target: int, n_bins: int = 36, seed: int = 0) -> np.ndarray:
    """Indices of a yaw-stratified subsample, returned in ascending order."""
    yaw = np.asarray(yaw, dtype=float)
    n = len(yaw)
    if n == 0:
        raise DataError('cannot sample from an empty record set')
    if n_bins < 1:
        raise DataError(f"n_bins must be >= 1, got {n_bins}")
    if n_target < 0:
        raise DataError(f"n_target must be >= 0, got {n_target}")
    if n_target >= n:
        if n_target > n:
            logger.warning(f"Requested {n_target} samples but only {n} records available; using all")
        return np.arange(n)

    bins = np.minimum((yaw / (360.0 / n_bins)).astype(np.int64), n_bins - 1)
    counts = np.bincount(bins, minlength=n_bins)
    quota = largest_remainder(counts, n_target)

    rng = np.random.default_rng(seed)
    chosen = []
    for b in range(n_bins):
        if quota[b] == 0:
            continue
        members = np.flatnonzero(bins == b)
        chosen.append(rng.choice(members, size=int(quota[b]), replace=False))
    if not chosen:
        return np.empty(0, dtype=np.int64)
    return np.sort(np.concatenate(chosen))


def stratified_sample(records: Sequence, n_target: int, n_bins: int = 36, seed: int = 0,
                      key: Callable = lambda r: r.yaw_angle) -> list:
    idx = stratified_indices([key(r) for r in records], n_target, n_bins, seed)
    return [records[i] for i in idx]


def apply_filters(records: Sequence[ScadaRecord], spec: TurbineSpec,
                  config: FilterConfig = FilterConfig()):
    """Rule filter, then a per-turbine Mahalanobis screen on (pitch, power).

    Returns (retained records, combined FilterReport, audit list of (record, reason)).
    """
    reasons = classify_rules([r.wind_speed for r in records], [r.power for r in records], spec, config)
    audit = [(r, reason) for r, reason in zip(records, reasons) if reason]
    survivors = [i for i, reason in enumerate(reasons) if reason == '']
    rule_report = FilterReport(input_count=len(records), retained_count=len(survivors),
                               removed=dict(Counter(reason for reason in reasons if reason)))

    if config.per_turbine:
        groups: Dict[str, List[int]] = {}
        for i in survivors:
            groups.setdefault(records[i].turbine_id, []).append(i)
    else:
        groups = {'*': survivors}

    keep = np.zeros(len(records), dtype=bool)
    for turbine_id in sorted(groups):
        members = groups[turbine_id]
        if len(members) < 3:
            logger.warning(f"Turbine {turbine_id}: only {len(members)} rows after rule filter; "
                           f"skipping Mahalanobis screen")
            keep[members] = True
            continue
        points = [(records[i].pitch_angle, records[i].power) for i in members]
        mask, _ = mahalanobis_filter(points, config.mahalanobis_threshold)
        keep[np.asarray(members)[mask]] = True
        audit.extend((records[i], MAHALANOBIS_OUTLIER) for i, ok in zip(members, mask) if not ok)

    retained = [replace(records[i], flags=NOMINAL_FLAGS) for i in range(len(records)) if keep[i]]
    maha_report = FilterReport(input_count=len(survivors), retained_count=len(retained),
                               removed={MAHALANOBIS_OUTLIER: len(survivors) - len(retained)})
    report = rule_report.merge(maha_report)
    report.check()
    logger.info(f"Filtered {report.input_count} records: {report.retained_count} retained, "
                + ', '.join(f"{k}={v}" for k, v in report.removed.items() if v))
    audit.sort(key=lambda item: (item[0].timestamp, item[0].turbine_id))
    return retained, report, audit


def write_audit(audit, path: str, schema: Optional[Dict[str, str]] = None) -> None:
    """Removed rows plus their `filter_reason`."""
    frame = records_to_frame([record for record, _ in audit], schema)
    frame['filter_reason'] = [reason for _, reason in audit]
    frame.to_csv(path, index=False, encoding='utf-8')


def score_filter(audit, records: Sequence[ScadaRecord], truth: pd.DataFrame) -> dict:
    """Compare removals against generator truth (columns timestamp, turbine_id, true_flag)."""
    removed = {(r.timestamp, r.turbine_id) for r, _ in audit}
    truth_flags = {(int(t), str(tid)): flag
                   for t, tid, flag in zip(truth['timestamp'], truth['turbine_id'], truth['true_flag'])}
    totals, hits = Counter(), Counter()
    for record in records:
        key = (record.timestamp, record.turbine_id)
        flag = truth_flags.get(key)
        if flag is None:
            continue
        totals[flag] += 1
        if key in removed:
            hits[flag] += 1

    scores = {}
    for flag in sorted(totals):
        scores[flag] = {
            'total': totals[flag],
            'removed': hits[flag],
            'removed_fraction': hits[flag] / totals[flag],
        }
    events = [Flag.SHUTDOWN.value, Flag.BOOSTED.value, Flag.CURTAILED.value]
    event_total = sum(totals[f] for f in events)
    nominal_total = totals[Flag.NOMINAL.value]
    scores['event_removed_fraction'] = (sum(hits[f] for f in events) / event_total) if event_total else math.nan
    scores['nominal_retained_fraction'] = (
        (nominal_total - hits[Flag.NOMINAL.value]) / nominal_total if nominal_total else math.nan)
    return scores


__all__ = [
    'FilterReport', 'FilterConfig', 'FeatureVector', 'LinkSpec', 'REMOVAL_REASONS',
    'expected_power', 'classify_rules', 'rule_filter', 'mahalanobis_distances', 'mahalanobis_filter',
    'yaw_to_features', 'features_to_direction', 'zonal_meridional', 'normalise_power',
    'link_transform', 'inverse_link', 'count_clipped', 'largest_remainder', 'stratified_indices',
    'stratified_sample', 'apply_filters', 'write_audit', 'score_filter', 'DEFAULT_SCHEMA',
]
