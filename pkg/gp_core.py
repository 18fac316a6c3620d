#!/usr/bin/env python3
"""
Exact zero-mean Gaussian process regression with an additive kernel.

Fitting factorises A = K_add + sn^2 I (+ jitter) once; the overall posterior
mean and every per-dimension component mean reuse the same weight vector
alpha = A^-1 y, which is what makes the model decomposable.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, lapack, solve_triangular
from scipy.stats import norm

from errors import DataError, FactorizationError, ModelFileError, ModelVersionError
from kernels import (
    HyperParams, KernelSpec, component_kernel_matrix, contract_kernel_grad, kernel_diag,
    kernel_from_units, kernel_matrix, pair_kernel_matrix, unit_matrices,
)
from preprocessing import LinkSpec, inverse_link

logger = logging.getLogger(__name__)

MODEL_FORMAT = 'windgam-model'
MODEL_FORMAT_VERSION = '1.0'
MAX_TRAINING_ROWS = 10_000
JITTER_START = 1e-8
JITTER_LIMIT = 1e-4
VARIANCE_TOLERANCE = 1e-10
LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    columns: Tuple[str, ...] = ()
    units: Tuple[str, ...] = ()

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise DataError(f"X rows ({X.shape}) and y length ({y.shape[0]}) disagree")
        if X.shape[0] < 1:
            raise DataError('dataset is empty')
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DataError('dataset contains non-finite entries')
        columns = tuple(self.columns) or tuple(f"x{i}" for i in range(X.shape[1]))
        units = tuple(self.units) or ('',) * X.shape[1]
        if len(columns) != X.shape[1] or len(units) != X.shape[1]:
            raise DataError(f"{len(columns)} column names / {len(units)} units for {X.shape[1]} columns")
        object.__setattr__(self, 'X', X)
        object.__setattr__(self, 'y', y)
        object.__setattr__(self, 'columns', columns)
        object.__setattr__(self, 'units', units)

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def n_dims(self) -> int:
        return self.X.shape[1]

    def validate(self):
        """Training-time requirement: at least two rows, no more than the exact-GP cap."""
        if self.n_rows < 2:
            raise DataError(f"need at least 2 training rows, got {self.n_rows}")
        if self.n_rows > MAX_TRAINING_ROWS:
            raise DataError(f"{self.n_rows} rows exceeds the exact-GP limit of {MAX_TRAINING_ROWS}; "
                            f"subsample first")


@dataclass(frozen=True)
class TrainedModel:
    dataset: Dataset
    theta: HyperParams
    spec: KernelSpec
    L: np.ndarray
    alpha: np.ndarray
    offset: float = 0.0
    jitter: float = 0.0
    link: Optional[LinkSpec] = None
    metadata: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PredictionResult:
    mean: np.ndarray
    variance: np.ndarray
    power_mean: Optional[np.ndarray] = None
    power_lower: Optional[np.ndarray] = None
    power_upper: Optional[np.ndarray] = None
    power_variance: Optional[np.ndarray] = None
    level: float = 0.95


def _factorize(K: np.ndarray, noise_variance: float) -> Tuple[np.ndarray, float]:
    """Cholesky of K + sn^2 I + jitter I, escalating jitter tenfold on failure."""
    n = K.shape[0]
    scale = float(np.mean(np.diag(K))) if n else 1.0
    scale = scale if scale > 0 else 1.0
    A = np.array(K, dtype=float)
    diagonal = np.diag_indices(n)
    base = np.diag(K) + noise_variance
    relative = JITTER_START
    while relative <= JITTER_LIMIT * (1 + 1e-9):
        jitter = relative * scale
        A[diagonal] = base + jitter
        try:
            L = cholesky(A, lower=True, check_finite=False)
            if relative > JITTER_START:
                logger.warning(f"Cholesky needed relative jitter {relative:.0e}")
            return L, jitter
        except LinAlgError:
            relative *= 10
    raise FactorizationError(f"Cholesky factorization failed for N={n} even with relative jitter "
                             f"{JITTER_LIMIT:.0e} (noise variance {noise_variance:.3e})")


def _cholesky_inverse(L: np.ndarray) -> np.ndarray:
    """A^-1 from the lower Cholesky factor via LAPACK potri, symmetrised in place."""
    inverse, info = lapack.dpotri(L, lower=1)
    if info != 0:
        raise FactorizationError(f"inverting the Cholesky factor failed (LAPACK info={info})")
    inverse = np.tril(inverse)
    inverse += np.tril(inverse, -1).T
    return inverse


def _check_theta(dataset: Dataset, theta: HyperParams, spec: KernelSpec):
    if theta.n_dims != dataset.n_dims:
        raise DataError(f"hyperparameters for D={theta.n_dims} but dataset has D={dataset.n_dims}")
    spec.validate(dataset.n_dims)


def _assemble(dataset: Dataset, theta: HyperParams, spec: KernelSpec, offset: float,
              link: Optional[LinkSpec], metadata: Optional[dict]) -> TrainedModel:
    _check_theta(dataset, theta, spec)
    if dataset.n_rows > MAX_TRAINING_ROWS:
        dataset.validate()
    K = kernel_matrix(dataset.X, dataset.X, spec, theta)
    L, jitter = _factorize(K, theta.noise_variance)
    alpha = cho_solve((L, True), dataset.y - offset, check_finite=False)
    return TrainedModel(dataset=dataset, theta=theta, spec=spec, L=L, alpha=alpha, offset=float(offset),
                        jitter=jitter, link=link, metadata=dict(metadata or {}))


def fit(dataset: Dataset, theta: HyperParams, spec: KernelSpec, center: bool = False,
        link: Optional[LinkSpec] = None, metadata: Optional[dict] = None) -> TrainedModel:
    """Factorise and solve for alpha; with center=True the target mean is stored as an offset."""
    offset = float(np.mean(dataset.y)) if center else 0.0
    return _assemble(dataset, theta, spec, offset, link, metadata)


def nlml_and_grad(dataset: Dataset, theta: HyperParams, spec: KernelSpec,
                  center: bool = False, with_grad: bool = True):
    """Negative log marginal likelihood and its gradient over the log-parameter vector."""
    _check_theta(dataset, theta, spec)
    y = dataset.y - (np.mean(dataset.y) if center else 0.0)
    n = dataset.n_rows
    units = unit_matrices(dataset.X, spec, theta)
    K = kernel_from_units(units, n, spec, theta)
    L, _ = _factorize(K, theta.noise_variance)
    del K
    alpha = cho_solve((L, True), y, check_finite=False)
    value = 0.5 * float(y @ alpha) + float(np.sum(np.log(np.diag(L)))) + 0.5 * n * LOG_2PI
    if not with_grad:
        return value, None

    # dNLML/d eta = 0.5 tr((A^-1 - alpha alpha^T) dA/d eta)
    W = _cholesky_inverse(L)
    W -= np.outer(alpha, alpha)
    grad = np.zeros(2 * theta.n_dims + len(spec.pairs) + 1)
    grad[:-1] = contract_kernel_grad(dataset.X, spec, theta, W, units)
    grad[-1] = theta.noise_variance * float(np.trace(W))
    return value, grad


def nlml(dataset: Dataset, theta: HyperParams, spec: KernelSpec, center: bool = False) -> float:
    return nlml_and_grad(dataset, theta, spec, center, with_grad=False)[0]


def nlml_grad(dataset: Dataset, theta: HyperParams, spec: KernelSpec, center: bool = False) -> np.ndarray:
    return nlml_and_grad(dataset, theta, spec, center)[1]


def _check_inputs(model: TrainedModel, X_star) -> np.ndarray:
    X_star = np.atleast_2d(np.asarray(X_star, dtype=float))
    if X_star.shape[1] != model.dataset.n_dims:
        raise DataError(f"prediction inputs have {X_star.shape[1]} columns, model expects {model.dataset.n_dims}")
    return X_star


def _check_dim(model: TrainedModel, i: int):
    if not 0 <= i < model.dataset.n_dims:
        raise DataError(f"dimension index {i} out of range for D={model.dataset.n_dims}")


def _clamp(variance: np.ndarray, prior_scale: float) -> np.ndarray:
    tolerance = VARIANCE_TOLERANCE * max(1.0, prior_scale)
    worst = float(np.min(variance)) if variance.size else 0.0
    if worst < -tolerance:
        logger.warning(f"Predictive variance {worst:.3e} below tolerance; clamped to 0")
    return np.maximum(variance, 0.0)


def _posterior_variance(model: TrainedModel, K_cross: np.ndarray, prior: np.ndarray) -> np.ndarray:
    V = solve_triangular(model.L, K_cross, lower=True, check_finite=False)
    return _clamp(prior - np.sum(V * V, axis=0), float(np.max(prior)) if prior.size else 1.0)


def predict_mean(model: TrainedModel, X_star) -> np.ndarray:
    X_star = _check_inputs(model, X_star)
    return kernel_matrix(X_star, model.dataset.X, model.spec, model.theta) @ model.alpha + model.offset


def predict_variance(model: TrainedModel, X_star, observation_noise: bool = False) -> np.ndarray:
    """Latent-function variance; observation_noise adds sn^2."""
    X_star = _check_inputs(model, X_star)
    K_cross = kernel_matrix(model.dataset.X, X_star, model.spec, model.theta)
    variance = _posterior_variance(model, K_cross, kernel_diag(X_star, model.spec, model.theta))
    if observation_noise:
        variance = variance + model.theta.noise_variance
    return variance


def _component_columns(model: TrainedModel, dims: Sequence[int], X_sub) -> np.ndarray:
    X_sub = np.asarray(X_sub, dtype=float)
    if X_sub.ndim == 1:
        X_sub = X_sub.reshape(-1, 1) if len(dims) == 1 else X_sub.reshape(1, -1)
    if X_sub.shape[1] != len(dims):
        raise DataError(f"expected {len(dims)} column(s) for dimensions {list(dims)}, got {X_sub.shape[1]}")
    for i in dims:
        _check_dim(model, i)
    return X_sub


def predict_subset_mean(model: TrainedModel, dims: Sequence[int], X_sub) -> np.ndarray:
    """Posterior mean of the sum of the first-order components in `dims` (no offset)."""
    X_sub = _component_columns(model, dims, X_sub)
    mean = np.zeros(X_sub.shape[0])
    for k, i in enumerate(dims):
        if i in model.spec.active_dims:
            mean += component_kernel_matrix(X_sub[:, k], model.dataset.X[:, i], i, model.theta) @ model.alpha
    return mean


def predict_subset_variance(model: TrainedModel, dims: Sequence[int], X_sub) -> np.ndarray:
    X_sub = _component_columns(model, dims, X_sub)
    active = [(k, i) for k, i in enumerate(dims) if i in model.spec.active_dims]
    K_cross = np.zeros((model.dataset.n_rows, X_sub.shape[0]))
    prior = 0.0
    for k, i in active:
        K_cross += component_kernel_matrix(model.dataset.X[:, i], X_sub[:, k], i, model.theta)
        prior += model.theta.process_variance[i]
    return _posterior_variance(model, K_cross, np.full(X_sub.shape[0], prior))


def predict_component_mean(model: TrainedModel, i: int, x_star) -> np.ndarray:
    return predict_subset_mean(model, [i], np.asarray(x_star, dtype=float).reshape(-1, 1))


def predict_component_variance(model: TrainedModel, i: int, x_star) -> np.ndarray:
    return predict_subset_variance(model, [i], np.asarray(x_star, dtype=float).reshape(-1, 1))


def predict_pair_mean(model: TrainedModel, pair: Tuple[int, int], X_pair) -> np.ndarray:
    """Posterior mean of one second-order interaction term."""
    pair = tuple(sorted(pair))
    if pair not in model.spec.pairs:
        raise DataError(f"pair {pair} is not part of this model's kernel")
    X_pair = _component_columns(model, pair, X_pair)
    full = np.zeros((X_pair.shape[0], model.dataset.n_dims))
    full[:, pair[0]], full[:, pair[1]] = X_pair[:, 0], X_pair[:, 1]
    return pair_kernel_matrix(full, model.dataset.X, pair, model.theta) @ model.alpha


def predict(model: TrainedModel, X_star, observation_noise: bool = False, level: float = 0.95) -> PredictionResult:
    """Mean and variance in the transformed space, mapped to power when the model has a link.

    The power-space mean is the plug-in inverse link of the transformed mean;
    the band is the inverse link of the Gaussian quantiles, exact because the
    link is monotone. power_variance is the first-order (delta method)
    propagation of the transformed variance.
    """
    mean = predict_mean(model, X_star)
    variance = predict_variance(model, X_star, observation_noise)
    if model.link is None:
        return PredictionResult(mean=mean, variance=variance, level=level)
    z = norm.ppf(0.5 + level / 2)
    sd = np.sqrt(variance)
    power_mean = inverse_link(mean, model.link)
    slope = power_mean * (1.0 - power_mean / model.link.normalizer)
    return PredictionResult(
        mean=mean, variance=variance, level=level,
        power_mean=power_mean,
        power_variance=slope ** 2 * variance,
        power_lower=inverse_link(mean - z * sd, model.link),
        power_upper=inverse_link(mean + z * sd, model.link),
    )


def nlpd(model: TrainedModel, X, y) -> float:
    """Mean negative log predictive density, observation noise included."""
    y = np.asarray(y, dtype=float).reshape(-1)
    mean = predict_mean(model, X)
    variance = predict_variance(model, X, observation_noise=True)
    return float(np.mean(0.5 * (LOG_2PI + np.log(variance)) + 0.5 * (y - mean) ** 2 / variance))


def model_to_dict(model: TrainedModel) -> dict:
    return {
        'format': MODEL_FORMAT,
        'version': MODEL_FORMAT_VERSION,
        'theta': model.theta.to_dict(),
        'log_theta': model.theta.to_log_vector(model.spec).tolist(),
        'kernel': model.spec.to_dict(),
        'offset': model.offset,
        'link': model.link.to_dict() if model.link is not None else None,
        'metadata': model.metadata,
        'dataset': {
            'columns': list(model.dataset.columns),
            'units': list(model.dataset.units),
            'X': model.dataset.X.tolist(),
            'y': model.dataset.y.tolist(),
        },
    }


def save_model(model: TrainedModel, path: str) -> None:
    """JSON container; floats are written with repr precision so they reload exactly."""
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(model_to_dict(model), f, sort_keys=True, separators=(',', ':'))
        f.write('\n')


def model_from_dict(data: dict) -> TrainedModel:
    if not isinstance(data, dict) or data.get('format') != MODEL_FORMAT:
        raise ModelFileError(f"not a {MODEL_FORMAT} file")
    version = str(data.get('version', ''))
    if version.split('.')[0] != MODEL_FORMAT_VERSION.split('.')[0]:
        raise ModelVersionError(version or '<missing>', MODEL_FORMAT_VERSION)
    try:
        ds = data['dataset']
        dataset = Dataset(np.asarray(ds['X'], dtype=float), np.asarray(ds['y'], dtype=float),
                          tuple(ds['columns']), tuple(ds['units']))
        theta = HyperParams.from_dict(data['theta'])
        spec = KernelSpec.from_dict(data['kernel'])
        link = LinkSpec(**data['link']) if data.get('link') else None
        offset = float(data['offset'])
        metadata = data.get('metadata') or {}
    except (KeyError, TypeError, ValueError) as e:
        raise ModelFileError(f"model file is missing or has malformed fields: {e}")
    return _assemble(dataset, theta, spec, offset, link, metadata)


def load_model(path: str) -> TrainedModel:
    if not Path(path).is_file():
        raise ModelFileError(f"model file not found: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ModelFileError(f"corrupt model file {path}: {e}")
    return model_from_dict(data)
