#!/usr/bin/env python3
"""
Pipeline telemetry: Prometheus counters, gauges and stage-duration histograms
plus process memory sampled with psutil at stage boundaries.

Metrics live on a private CollectorRegistry per PipelineTelemetry so that
runs (and tests) never share counters. Nothing recorded here is written to
the deterministic pipeline outputs; it only reaches --metrics-file and the
server's /metrics/prometheus endpoint.
"""

import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional

import psutil
from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, generate_latest, write_to_textfile

logger = logging.getLogger(__name__)

STAGE_BUCKETS = (0.01, 0.05, 0.1, 0.5, 1.0, 5.0, 15.0, 60.0, 300.0, 900.0)


@dataclass
class StageMetrics:
    stage: str
    duration: float
    rss_bytes: int
    status: str


class PipelineTelemetry:
    def __init__(self, registry: Optional[CollectorRegistry] = None):
        self.registry = registry or CollectorRegistry()
        self.records_ingested = Counter('windgam_records_ingested_total', 'SCADA records loaded',
                                        registry=self.registry)
        self.records_removed = Counter('windgam_records_removed_total', 'Records removed by filters',
                                       ['reason'], registry=self.registry)
        self.nlml_evaluations = Counter('windgam_nlml_evaluations_total', 'NLML/gradient evaluations',
                                        registry=self.registry)
        self.restarts = Counter('windgam_optimizer_restarts_total', 'Optimizer restarts',
                                ['status'], registry=self.registry)
        self.predictions = Counter('windgam_predictions_total', 'Points predicted', registry=self.registry)
        self.stage_duration = Histogram('windgam_stage_duration_seconds', 'Pipeline stage duration',
                                        ['stage'], buckets=STAGE_BUCKETS, registry=self.registry)
        self.peak_memory = Gauge('windgam_peak_rss_bytes', 'Peak resident memory seen at a stage boundary',
                                 registry=self.registry)
        self.final_nlml = Gauge('windgam_final_nlml', 'NLML of the selected hyperparameters',
                                registry=self.registry)
        self.stages: List[StageMetrics] = []
        self._process = psutil.Process()
        self._peak_rss = 0

    def _sample_rss(self) -> int:
        try:
            rss = self._process.memory_info().rss
        except psutil.Error:
            return 0
        if rss > self._peak_rss:
            self._peak_rss = rss
            self.peak_memory.set(rss)
        return rss

    @contextmanager
    def stage(self, name: str):
        """Time a pipeline stage and sample memory when it ends."""
        start = time.perf_counter()
        self._sample_rss()
        status = 'ok'
        try:
            yield self
        except Exception:
            status = 'failed'
            raise
        finally:
            duration = time.perf_counter() - start
            self.stage_duration.labels(stage=name).observe(duration)
            rss = self._sample_rss()
            self.stages.append(StageMetrics(name, duration, rss, status))
            logger.debug(f"Stage {name} {status} in {duration:.3f}s (rss {rss / 2**20:.1f} MiB)")

    def record_ingest(self, n: int):
        self.records_ingested.inc(n)

    def record_filter(self, report):
        for reason, count in report.removed.items():
            if count:
                self.records_removed.labels(reason=reason).inc(count)

    def record_nlml(self):
        self.nlml_evaluations.inc()

    def record_restart(self, summary):
        if summary.message.startswith('failed'):
            status = 'failed'
        else:
            status = 'converged' if summary.converged else 'stopped'
        self.restarts.labels(status=status).inc()

    def record_optimization(self, result):
        for summary in result.restarts:
            self.record_restart(summary)
        self.final_nlml.set(result.nlml)

    def record_predictions(self, n: int):
        self.predictions.inc(n)

    def exposition(self) -> bytes:
        return generate_latest(self.registry)

    def write_metrics(self, path: str):
        write_to_textfile(path, self.registry)
        logger.info(f"Metrics written to {path}")

    def summary(self) -> dict:
        return {
            'stages': [asdict(s) for s in self.stages],
            'peak_rss_bytes': self._peak_rss,
            'system_health': system_health(),
        }


def system_health() -> Dict[str, object]:
    """Current host load, as reported by the server's /health endpoint."""
    try:
        cpu_percent = psutil.cpu_percent()
        memory = psutil.virtual_memory()
        return {
            'cpu_percent': cpu_percent,
            'memory_percent': memory.percent,
            'status': 'healthy' if cpu_percent < 80 and memory.percent < 80 else 'warning',
        }
    except psutil.Error:
        return {'status': 'unknown'}
