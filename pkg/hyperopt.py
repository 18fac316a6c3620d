#!/usr/bin/env python3
"""
Type-II maximum likelihood: minimise the GP negative log marginal likelihood
over log-hyperparameters with a BFGS quasi-Newton method and a backtracking
(Armijo) line search, restarted from several seeded initialisations.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
import pandas as pd

from errors import DataError, NumericalError, OptimizationError
from gp_core import Dataset, nlml_and_grad
from kernels import HyperParams, KernelSpec

logger = logging.getLogger(__name__)

ARMIJO_C1 = 1e-4
MAX_BACKTRACKS = 40
MAX_LOG_STEP = 3.0


@dataclass(frozen=True)
class OptimizerConfig:
    max_iterations: int = 200
    tolerance: float = 1e-6
    restarts: int = 5
    seed: int = 0
    length_scale_range: Tuple[float, float] = (0.1, 1.0)
    signal_spread: float = 0.5
    noise_fraction: float = 0.1
    noise_spread: float = 0.5
    workers: int = 1

    def __post_init__(self):
        if self.restarts < 1:
            raise DataError(f"restarts must be >= 1, got {self.restarts}")
        if not self.tolerance > 0:
            raise DataError(f"tolerance must be positive, got {self.tolerance}")
        if self.max_iterations < 1:
            raise DataError(f"max_iterations must be >= 1, got {self.max_iterations}")
        lo, hi = self.length_scale_range
        if not 0 < lo <= hi:
            raise DataError(f"length_scale_range must satisfy 0 < low <= high, got {self.length_scale_range}")


@dataclass(frozen=True)
class TraceEntry:
    restart: int
    iteration: int
    nlml: float
    grad_norm: float


@dataclass
class RestartSummary:
    index: int
    initial_nlml: float
    final_nlml: float
    iterations: int
    converged: bool
    message: str
    log_theta: Optional[np.ndarray] = None
    trace: List[TraceEntry] = field(default_factory=list)


@dataclass
class OptimizationResult:
    theta: HyperParams
    nlml: float
    converged: bool
    iterations: int
    best_restart: int
    restarts: List[RestartSummary]
    trace: List[TraceEntry]

    @property
    def max_iterations_reached(self) -> bool:
        return not self.converged

    def to_dict(self) -> dict:
        return {
            'nlml': self.nlml,
            'converged': self.converged,
            'iterations': self.iterations,
            'best_restart': self.best_restart,
            'restarts': [{
                'index': r.index,
                'initial_nlml': r.initial_nlml,
                'final_nlml': r.final_nlml,
                'iterations': r.iterations,
                'converged': r.converged,
                'message': r.message,
            } for r in self.restarts],
        }


def initial_log_theta(dataset: Dataset, spec: KernelSpec, config: OptimizerConfig, restart: int) -> np.ndarray:
    """Seeded starting point; restart k always draws from substream (seed, k)."""
    rng = np.random.default_rng([config.seed, restart])
    D = dataset.n_dims
    y_std = float(np.std(dataset.y)) or 1.0
    span = np.ptp(dataset.X, axis=0)
    span = np.where(span > 0, span, 1.0)
    lo, hi = config.length_scale_range

    n_terms = len(spec.active_dims) + len(spec.pairs)
    log_sf = np.log(y_std / np.sqrt(n_terms)) + rng.uniform(-config.signal_spread, config.signal_spread, D)
    log_l = rng.uniform(np.log(lo * span), np.log(hi * span))
    log_pair = (np.log(y_std / np.sqrt(n_terms))
                + rng.uniform(-config.signal_spread, config.signal_spread, len(spec.pairs)))
    log_sn = np.log(config.noise_fraction * y_std) + rng.uniform(-config.noise_spread, config.noise_spread)
    return np.concatenate([log_sf, log_l, log_pair, [log_sn]])


def minimize_bfgs(objective: Callable[[np.ndarray], Tuple[float, np.ndarray]], x0: np.ndarray,
                  max_iterations: int, tolerance: float, restart: int = 0) -> RestartSummary:
    """BFGS on the inverse Hessian with Armijo backtracking.

    `objective` returns (value, gradient) and may raise NumericalError, which
    the line search treats as an infinite value.
    """
    x = np.array(x0, dtype=float)
    f, g = objective(x)
    initial = f
    H = np.eye(x.size)
    trace = [TraceEntry(restart, 0, f, float(np.max(np.abs(g))))]
    message = 'max iterations reached'
    converged = False
    iteration = 0

    for iteration in range(1, max_iterations + 1):
        if np.max(np.abs(g)) <= tolerance:
            converged = True
            message = 'gradient tolerance reached'
            iteration -= 1
            break

        direction = -H @ g
        slope = float(g @ direction)
        if slope >= 0:
            H = np.eye(x.size)
            direction = -g
            slope = float(g @ direction)

        step = min(1.0, MAX_LOG_STEP / float(np.max(np.abs(direction))))
        accepted = False
        for _ in range(MAX_BACKTRACKS):
            candidate = x + step * direction
            try:
                f_new, g_new = objective(candidate)
            except NumericalError:
                f_new, g_new = np.inf, None
            if np.isfinite(f_new) and f_new <= f + ARMIJO_C1 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            message = 'line search could not decrease the objective'
            iteration -= 1
            break

        s = candidate - x
        yv = g_new - g
        sy = float(s @ yv)
        if sy > 1e-12:
            if iteration == 1:
                H = np.eye(x.size) * sy / float(yv @ yv)
            rho = 1.0 / sy
            I = np.eye(x.size)
            H = (I - rho * np.outer(s, yv)) @ H @ (I - rho * np.outer(yv, s)) + rho * np.outer(s, s)

        x, f, g = candidate, f_new, g_new
        trace.append(TraceEntry(restart, iteration, f, float(np.max(np.abs(g)))))
    else:
        converged = bool(np.max(np.abs(g)) <= tolerance)
        if converged:
            message = 'gradient tolerance reached'
        iteration = max_iterations

    return RestartSummary(index=restart, initial_nlml=initial, final_nlml=f, iterations=iteration,
                          converged=converged, message=message, log_theta=x, trace=trace)


def optimize(dataset: Dataset, spec: KernelSpec, config: OptimizerConfig = OptimizerConfig(),
             center: bool = False, on_evaluation: Optional[Callable[[], None]] = None) -> OptimizationResult:
    """Multi-restart type-II ML; the best restart is chosen by (NLML, restart index)."""
    dataset.validate()
    spec.validate(dataset.n_dims)
    D = dataset.n_dims

    def objective(log_theta):
        if on_evaluation is not None:
            on_evaluation()
        try:
            theta = HyperParams.from_log_vector(log_theta, spec, D)
        except DataError as e:
            # exp() over- or underflowed
            raise NumericalError(str(e))
        return nlml_and_grad(dataset, theta, spec, center=center)

    def run(restart: int):
        x0 = initial_log_theta(dataset, spec, config, restart)
        try:
            summary = minimize_bfgs(objective, x0, config.max_iterations, config.tolerance, restart)
        except NumericalError as e:
            logger.warning(f"Restart {restart} failed at its starting point: {e}")
            return RestartSummary(index=restart, initial_nlml=np.inf, final_nlml=np.inf, iterations=0,
                                  converged=False, message=f"failed: {e}", log_theta=x0)
        logger.info(f"Restart {restart}: NLML {summary.initial_nlml:.4f} -> {summary.final_nlml:.4f} "
                    f"in {summary.iterations} iterations ({summary.message})")
        return summary

    if config.workers > 1 and config.restarts > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            summaries = list(pool.map(run, range(config.restarts)))
    else:
        summaries = [run(k) for k in range(config.restarts)]

    usable = [s for s in summaries if np.isfinite(s.final_nlml)]
    if not usable:
        raise OptimizationError(
            f"all {config.restarts} restarts failed to factorise",
            diagnostics=[{'restart': s.index, 'message': s.message, 'log_theta': s.log_theta.tolist()}
                         for s in summaries])
    best = min(usable, key=lambda s: (s.final_nlml, s.index))
    trace = [entry for s in summaries for entry in s.trace]
    theta = HyperParams.from_log_vector(best.log_theta, spec, D)
    logger.info(f"Best restart {best.index}: NLML {best.final_nlml:.4f}, converged={best.converged}")
    return OptimizationResult(theta=theta, nlml=best.final_nlml, converged=best.converged,
                              iterations=best.iterations, best_restart=best.index,
                              restarts=summaries, trace=trace)


def write_trace(result: OptimizationResult, path: str) -> None:
    pd.DataFrame([{
        'restart': e.restart,
        'iteration': e.iteration,
        'nlml': e.nlml,
        'grad_norm': e.grad_norm,
    } for e in result.trace]).to_csv(path, index=False)
