"""
Type-II maximum likelihood with seeded BFGS restarts.

Groups:
  1. Configuration and seeded initialisation
  2. The BFGS minimiser on a known quadratic
  3. optimize(): recovery, determinism, traces, restarts, workers
  4. Failure reporting
"""

import numpy as np
import pandas as pd
import pytest

import hyperopt
from errors import DataError, FactorizationError, OptimizationError
from gp_core import Dataset, nlml_grad
from hyperopt import OptimizerConfig, initial_log_theta, minimize_bfgs, optimize, write_trace
from kernels import HyperParams, KernelSpec, kernel_matrix

TRUE_THETA = HyperParams([1.0], [1.0], 0.01)


def _gp_sample(seed, n=200, theta=TRUE_THETA):
    rng = np.random.default_rng(seed)
    X = np.sort(rng.uniform(0.0, 20.0, n)).reshape(-1, 1)
    K = kernel_matrix(X, X, KernelSpec.first_order(1), theta) + theta.noise_variance * np.eye(n)
    y = np.linalg.cholesky(K) @ rng.standard_normal(n)
    return Dataset(X, y)


def _small_problem(seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-2, 2, (40, 2))
    y = np.sin(2 * X[:, 0]) + 0.5 * X[:, 1] ** 2 + 0.1 * rng.standard_normal(40)
    return Dataset(X, y)


# ---------------------------------------------------------------------------
# 1. Configuration
# ---------------------------------------------------------------------------

@pytest.mark.parametrize('kwargs', [
    {'restarts': 0}, {'tolerance': 0.0}, {'max_iterations': 0}, {'length_scale_range': (1.0, 0.5)},
])
def test_config_validation(kwargs):
    with pytest.raises(DataError):
        OptimizerConfig(**kwargs)


def test_initial_points_are_seeded_per_restart():
    dataset, spec = _small_problem(), KernelSpec.second_order(2)
    config = OptimizerConfig(seed=3)
    a = initial_log_theta(dataset, spec, config, 0)
    assert np.array_equal(a, initial_log_theta(dataset, spec, config, 0))
    assert not np.array_equal(a, initial_log_theta(dataset, spec, config, 1))
    assert a.shape == (2 * 2 + 1 + 1,)


# ---------------------------------------------------------------------------
# 2. BFGS
# ---------------------------------------------------------------------------

def test_bfgs_solves_a_quadratic():
    Q = np.array([[3.0, 0.5, 0.0], [0.5, 2.0, 0.3], [0.0, 0.3, 1.0]])
    b = np.array([1.0, -2.0, 0.5])

    def objective(x):
        return 0.5 * x @ Q @ x - b @ x, Q @ x - b

    summary = minimize_bfgs(objective, np.zeros(3), max_iterations=100, tolerance=1e-7)
    assert summary.converged
    assert np.allclose(summary.log_theta, np.linalg.solve(Q, b), atol=1e-6)
    values = [entry.nlml for entry in summary.trace]
    assert all(later <= earlier for earlier, later in zip(values, values[1:]))


def test_bfgs_reports_the_iteration_limit():
    def objective(x):
        return float(np.sum(np.cosh(x))), np.sinh(x)

    summary = minimize_bfgs(objective, np.full(2, 2.0), max_iterations=1, tolerance=1e-12)
    assert not summary.converged
    assert summary.iterations == 1
    assert summary.message == 'max iterations reached'


# ---------------------------------------------------------------------------
# 3. optimize()
# ---------------------------------------------------------------------------

def test_recovers_known_hyperparameters_in_most_trials():
    spec = KernelSpec.first_order(1)
    truth = TRUE_THETA.to_log_vector(spec)
    config = OptimizerConfig(restarts=3, length_scale_range=(0.02, 0.5))
    recovered = 0
    for seed in range(5):
        result = optimize(_gp_sample(seed), spec, config)
        if np.all(np.abs(result.theta.to_log_vector(spec) - truth) <= 0.5):
            recovered += 1
    assert recovered >= 4


def test_optimize_is_deterministic():
    dataset, spec = _small_problem(), KernelSpec.first_order(2)
    config = OptimizerConfig(restarts=2, max_iterations=60, seed=11)
    a = optimize(dataset, spec, config, center=True)
    b = optimize(dataset, spec, config, center=True)
    assert np.array_equal(a.theta.to_log_vector(spec), b.theta.to_log_vector(spec))
    assert a.nlml == b.nlml
    assert a.trace == b.trace


def test_trace_is_non_increasing_and_final_gradient_is_small():
    dataset, spec = _small_problem(1), KernelSpec.first_order(2)
    config = OptimizerConfig(restarts=3, max_iterations=200, tolerance=1e-5)
    result = optimize(dataset, spec, config, center=True)
    for restart in result.restarts:
        values = [entry.nlml for entry in restart.trace]
        assert all(later <= earlier for earlier, later in zip(values, values[1:]))
    best = result.restarts[result.best_restart]
    assert result.nlml == best.final_nlml == min(r.final_nlml for r in result.restarts)
    grad = nlml_grad(dataset, result.theta, spec, center=True)
    if result.converged:
        assert np.max(np.abs(grad)) <= config.tolerance
    else:
        assert result.max_iterations_reached


def test_more_restarts_never_do_worse():
    dataset, spec = _small_problem(2), KernelSpec.first_order(2)
    two = optimize(dataset, spec, OptimizerConfig(restarts=2, max_iterations=50))
    four = optimize(dataset, spec, OptimizerConfig(restarts=4, max_iterations=50))
    assert four.nlml <= two.nlml
    assert [r.final_nlml for r in four.restarts[:2]] == [r.final_nlml for r in two.restarts]


def test_parallel_restarts_match_serial():
    dataset, spec = _small_problem(3), KernelSpec.second_order(2)
    serial = optimize(dataset, spec, OptimizerConfig(restarts=3, max_iterations=40))
    threaded = optimize(dataset, spec, OptimizerConfig(restarts=3, max_iterations=40, workers=3))
    assert [r.index for r in threaded.restarts] == [0, 1, 2]
    assert threaded.nlml == pytest.approx(serial.nlml, rel=1e-10)
    assert np.allclose(threaded.theta.to_log_vector(spec), serial.theta.to_log_vector(spec), atol=1e-8)


def test_evaluation_callback_and_trace_file(tmp_path):
    dataset, spec = _small_problem(4), KernelSpec.first_order(2)
    calls = []
    result = optimize(dataset, spec, OptimizerConfig(restarts=2, max_iterations=10),
                      on_evaluation=lambda: calls.append(1))
    assert len(calls) >= len(result.trace)
    path = tmp_path / 'trace.csv'
    write_trace(result, str(path))
    frame = pd.read_csv(path)
    assert list(frame.columns) == ['restart', 'iteration', 'nlml', 'grad_norm']
    assert len(frame) == len(result.trace)
    assert set(frame['restart']) == {0, 1}
    assert result.to_dict()['best_restart'] == result.best_restart


def test_optimize_requires_two_rows():
    with pytest.raises(DataError):
        optimize(Dataset([[0.0]], [1.0]), KernelSpec.first_order(1))


# ---------------------------------------------------------------------------
# 4. Failures
# ---------------------------------------------------------------------------

def test_all_restarts_failing_raises_with_diagnostics(monkeypatch):
    def failing(*args, **kwargs):
        raise FactorizationError('Cholesky factorization failed')

    monkeypatch.setattr(hyperopt, 'nlml_and_grad', failing)
    with pytest.raises(OptimizationError) as excinfo:
        optimize(_small_problem(), KernelSpec.first_order(2), OptimizerConfig(restarts=3))
    assert excinfo.value.exit_code == 3
    assert [d['restart'] for d in excinfo.value.diagnostics] == [0, 1, 2]
    assert all(len(d['log_theta']) == 5 for d in excinfo.value.diagnostics)


def test_one_failed_restart_is_skipped(monkeypatch):
    real = hyperopt.nlml_and_grad
    dataset, spec = _small_problem(5), KernelSpec.first_order(2)
    poisoned = initial_log_theta(dataset, spec, OptimizerConfig(), 0)

    def sometimes(ds, theta, sp, center=False, with_grad=True):
        if np.allclose(theta.to_log_vector(sp), poisoned):
            raise FactorizationError('Cholesky factorization failed')
        return real(ds, theta, sp, center=center, with_grad=with_grad)

    monkeypatch.setattr(hyperopt, 'nlml_and_grad', sometimes)
    result = optimize(dataset, spec, OptimizerConfig(restarts=2, max_iterations=30))
    assert result.restarts[0].message.startswith('failed')
    assert result.best_restart == 1


@pytest.mark.slow
def test_tuned_model_recovers_additive_components():
    from gp_core import fit, predict_component_mean

    rng = np.random.default_rng(22)
    truth = (lambda x: np.sin(1.5 * x), lambda x: 0.5 * x ** 2, lambda x: np.tanh(x))
    X = rng.uniform(-2, 2, (2000, 3))
    signal = sum(f(X[:, i]) for i, f in enumerate(truth))
    y = signal + np.sqrt(np.var(signal) / 10) * rng.standard_normal(2000)
    dataset, spec = Dataset(X, y), KernelSpec.first_order(3)
    result = optimize(dataset, spec, OptimizerConfig(restarts=1, max_iterations=40), center=True)
    model = fit(dataset, result.theta, spec, center=True)
    lo, hi = np.percentile(X, [5, 95], axis=0)
    for i, f in enumerate(truth):
        grid = np.linspace(lo[i], hi[i], 100)
        recovered = predict_component_mean(model, i, grid)
        assert np.corrcoef(recovered - recovered.mean(), f(grid) - f(grid).mean())[0, 1] >= 0.95
