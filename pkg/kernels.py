#!/usr/bin/env python3
"""
Covariance functions for additive Gaussian processes.

Per-dimension squared-exponential kernels are summed into a first-order
additive kernel; a second-order variant adds one product kernel per pair
of active dimensions, each with its own shared variance. Hyperparameters
are optimised in log space: [log sf_1..D, log l_1..D, log sf_pairs.., log sn].
"""

import enum
import itertools
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from errors import DataError

Pair = Tuple[int, int]


class KernelOrder(enum.Enum):
    FIRST_ORDER_ADDITIVE = 'first'
    SECOND_ORDER_ADDITIVE = 'second'


@dataclass(frozen=True)
class KernelSpec:
    order: KernelOrder = KernelOrder.FIRST_ORDER_ADDITIVE
    active_dims: Tuple[int, ...] = (0,)

    def __post_init__(self):
        if not self.active_dims:
            raise DataError('kernel needs at least one active dimension')
        if len(set(self.active_dims)) != len(self.active_dims) or min(self.active_dims) < 0:
            raise DataError(f"active dimensions must be distinct non-negative indices, got {self.active_dims}")

    @classmethod
    def first_order(cls, n_dims: int) -> 'KernelSpec':
        return cls(KernelOrder.FIRST_ORDER_ADDITIVE, tuple(range(n_dims)))

    @classmethod
    def second_order(cls, n_dims: int) -> 'KernelSpec':
        return cls(KernelOrder.SECOND_ORDER_ADDITIVE, tuple(range(n_dims)))

    @property
    def pairs(self) -> List[Pair]:
        if self.order is not KernelOrder.SECOND_ORDER_ADDITIVE:
            return []
        return list(itertools.combinations(sorted(self.active_dims), 2))

    def validate(self, n_dims: int):
        if max(self.active_dims) >= n_dims:
            raise DataError(f"active dimension {max(self.active_dims)} out of range for D={n_dims}")

    def to_dict(self) -> dict:
        return {'order': self.order.value, 'active_dims': list(self.active_dims)}

    @classmethod
    def from_dict(cls, data: dict) -> 'KernelSpec':
        return cls(KernelOrder(data['order']), tuple(int(i) for i in data['active_dims']))


@dataclass(frozen=True)
class HyperParams:
    """Per-dimension process variance and length scale plus noise variance."""
    process_variance: np.ndarray
    length_scale: np.ndarray
    noise_variance: float
    pair_variance: Dict[Pair, float] = field(default_factory=dict)

    def __post_init__(self):
        pv = np.atleast_1d(np.asarray(self.process_variance, dtype=float))
        ls = np.atleast_1d(np.asarray(self.length_scale, dtype=float))
        object.__setattr__(self, 'process_variance', pv)
        object.__setattr__(self, 'length_scale', ls)
        object.__setattr__(self, 'noise_variance', float(self.noise_variance))
        object.__setattr__(self, 'pair_variance',
                           {tuple(sorted(k)): float(v) for k, v in dict(self.pair_variance).items()})
        if pv.ndim != 1 or pv.shape != ls.shape or pv.size < 1:
            raise DataError(f"process_variance and length_scale must be equal-length vectors, "
                            f"got {pv.shape} and {ls.shape}")
        values = np.concatenate([pv, ls, [self.noise_variance], list(self.pair_variance.values())])
        if not np.all(np.isfinite(values)) or np.any(values <= 0):
            raise DataError('hyperparameters must be finite and strictly positive')

    @property
    def n_dims(self) -> int:
        return self.process_variance.size

    @property
    def signal_std(self) -> np.ndarray:
        return np.sqrt(self.process_variance)

    @property
    def noise_std(self) -> float:
        return float(np.sqrt(self.noise_variance))

    @classmethod
    def unit(cls, n_dims: int, noise_variance: float = 1.0, spec: Optional[KernelSpec] = None) -> 'HyperParams':
        pairs = spec.pairs if spec is not None else []
        return cls(np.ones(n_dims), np.ones(n_dims), noise_variance, {p: 1.0 for p in pairs})

    def pair(self, pair: Pair) -> float:
        key = tuple(sorted(pair))
        if key not in self.pair_variance:
            raise DataError(f"no second-order variance for pair {key}")
        return self.pair_variance[key]

    def to_log_vector(self, spec: KernelSpec) -> np.ndarray:
        return np.concatenate([
            0.5 * np.log(self.process_variance),
            np.log(self.length_scale),
            [0.5 * np.log(self.pair(p)) for p in spec.pairs],
            [0.5 * np.log(self.noise_variance)],
        ])

    @classmethod
    def from_log_vector(cls, vector, spec: KernelSpec, n_dims: int) -> 'HyperParams':
        v = np.asarray(vector, dtype=float)
        pairs = spec.pairs
        if v.size != 2 * n_dims + len(pairs) + 1:
            raise DataError(f"log-parameter vector of length {v.size} does not match D={n_dims}, "
                            f"{len(pairs)} pair(s)")
        return cls(
            process_variance=np.exp(2 * v[:n_dims]),
            length_scale=np.exp(v[n_dims:2 * n_dims]),
            noise_variance=float(np.exp(2 * v[-1])),
            pair_variance={p: float(np.exp(2 * v[2 * n_dims + k])) for k, p in enumerate(pairs)},
        )

    def to_dict(self) -> dict:
        return {
            'process_variance': self.process_variance.tolist(),
            'length_scale': self.length_scale.tolist(),
            'noise_variance': self.noise_variance,
            'pair_variance': [[i, j, v] for (i, j), v in sorted(self.pair_variance.items())],
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'HyperParams':
        return cls(
            process_variance=np.asarray(data['process_variance'], dtype=float),
            length_scale=np.asarray(data['length_scale'], dtype=float),
            noise_variance=data['noise_variance'],
            pair_variance={(int(i), int(j)): v for i, j, v in data.get('pair_variance', [])},
        )


def parameter_names(spec: KernelSpec, n_dims: int) -> List[str]:
    return ([f"log_sigma_f_{i}" for i in range(n_dims)]
            + [f"log_length_{i}" for i in range(n_dims)]
            + [f"log_sigma_f_{i}_{j}" for i, j in spec.pairs]
            + ['log_sigma_n'])


def sq_exp(x, x2, sigma_f, length):
    """sigma_f^2 * exp(-(x - x')^2 / (2 l^2))"""
    d = np.asarray(x, dtype=float) - np.asarray(x2, dtype=float)
    return sigma_f ** 2 * np.exp(-0.5 * d ** 2 / length ** 2)


def _check_point(x, theta: HyperParams) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (theta.n_dims,):
        raise DataError(f"input of dimension {x.shape} does not match hyperparameters for D={theta.n_dims}")
    return x


def additive_kernel(x, x2, theta: HyperParams, spec: Optional[KernelSpec] = None) -> float:
    x, x2 = _check_point(x, theta), _check_point(x2, theta)
    dims = spec.active_dims if spec is not None else range(theta.n_dims)
    value = sum(float(sq_exp(x[i], x2[i], theta.signal_std[i], theta.length_scale[i])) for i in dims)
    if spec is not None:
        value += sum(product_kernel(x, x2, theta, pair) for pair in spec.pairs)
    return value


def product_kernel(x, x2, theta: HyperParams, pair: Pair) -> float:
    """Second-order term: one shared variance times two unit-variance SE factors."""
    i, j = pair
    if i == j:
        raise DataError(f"product kernel needs two distinct dimensions, got ({i}, {j})")
    x, x2 = _check_point(x, theta), _check_point(x2, theta)
    return float(theta.pair(pair)
                 * sq_exp(x[i], x2[i], 1.0, theta.length_scale[i])
                 * sq_exp(x[j], x2[j], 1.0, theta.length_scale[j]))


def _as_column(values) -> np.ndarray:
    return np.asarray(values, dtype=float).reshape(-1, 1)


def squared_distances(x_col, x_col2) -> np.ndarray:
    return cdist(_as_column(x_col), _as_column(x_col2), 'sqeuclidean')


def _unit_component(x_col, x_col2, length: float) -> np.ndarray:
    unit = squared_distances(x_col, x_col2)
    unit *= -0.5 / length ** 2
    return np.exp(unit, out=unit)


def _check_matrices(X, X2, theta: HyperParams, spec: KernelSpec) -> Tuple[np.ndarray, np.ndarray]:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    if X.shape[1] != X2.shape[1]:
        raise DataError(f"dimension mismatch: {X.shape[1]} vs {X2.shape[1]} columns")
    if X.shape[1] != theta.n_dims:
        raise DataError(f"inputs have {X.shape[1]} columns but hyperparameters describe D={theta.n_dims}")
    spec.validate(X.shape[1])
    return X, X2


def component_kernel_matrix(x_col, x_col2, i: int, theta: HyperParams) -> np.ndarray:
    if not 0 <= i < theta.n_dims:
        raise DataError(f"dimension index {i} out of range for D={theta.n_dims}")
    return theta.process_variance[i] * _unit_component(x_col, x_col2, theta.length_scale[i])


def pair_kernel_matrix(X, X2, pair: Pair, theta: HyperParams) -> np.ndarray:
    i, j = pair
    if i == j:
        raise DataError(f"product kernel needs two distinct dimensions, got ({i}, {j})")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    return (theta.pair(pair)
            * _unit_component(X[:, i], X2[:, i], theta.length_scale[i])
            * _unit_component(X[:, j], X2[:, j], theta.length_scale[j]))


def kernel_matrix(X, X2, spec: KernelSpec, theta: HyperParams) -> np.ndarray:
    X, X2 = _check_matrices(X, X2, theta, spec)
    K = np.zeros((X.shape[0], X2.shape[0]))
    for i in spec.active_dims:
        K += component_kernel_matrix(X[:, i], X2[:, i], i, theta)
    for pair in spec.pairs:
        K += pair_kernel_matrix(X, X2, pair, theta)
    return K


def kernel_diag(X, spec: KernelSpec, theta: HyperParams) -> np.ndarray:
    """diag(K(X, X)); stationary kernels make it the prior variance everywhere."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    prior = sum(theta.process_variance[i] for i in spec.active_dims)
    prior += sum(theta.pair(p) for p in spec.pairs)
    return np.full(X.shape[0], float(prior))


def iter_kernel_grad(X, spec: KernelSpec, theta: HyperParams) -> Iterator[Tuple[int, np.ndarray]]:
    """Yield (parameter index, dK/d log-parameter) for every parameter with a nonzero derivative.

    The noise parameter is not part of K and is never yielded.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    D = theta.n_dims
    spec.validate(D)
    sq = {i: squared_distances(X[:, i], X[:, i]) for i in spec.active_dims}
    unit = {i: np.exp(-0.5 * sq[i] / theta.length_scale[i] ** 2) for i in spec.active_dims}
    pair_terms = {p: theta.pair(p) * unit[p[0]] * unit[p[1]] for p in spec.pairs}

    for i in spec.active_dims:
        yield i, 2.0 * theta.process_variance[i] * unit[i]

    for i in spec.active_dims:
        scaled = sq[i] / theta.length_scale[i] ** 2
        grad = theta.process_variance[i] * unit[i] * scaled
        for p, term in pair_terms.items():
            if i in p:
                grad += term * scaled
        yield D + i, grad

    for k, p in enumerate(spec.pairs):
        yield 2 * D + k, 2.0 * pair_terms[p]


def kernel_grad(X, spec: KernelSpec, theta: HyperParams) -> List[np.ndarray]:
    """dK/d log-parameter for every entry of the log vector except the noise term."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    grads = [np.zeros((n, n)) for _ in range(2 * theta.n_dims + len(spec.pairs))]
    for index, matrix in iter_kernel_grad(X, spec, theta):
        grads[index] = matrix
    return grads


def unit_matrices(X, spec: KernelSpec, theta: HyperParams) -> Dict[int, np.ndarray]:
    """Unit-variance SE matrix of every active dimension over the training inputs."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    spec.validate(theta.n_dims)
    return {i: _unit_component(X[:, i], X[:, i], theta.length_scale[i]) for i in spec.active_dims}


def kernel_from_units(units: Dict[int, np.ndarray], n: int, spec: KernelSpec, theta: HyperParams) -> np.ndarray:
    """K(X, X) assembled from precomputed unit matrices; equals kernel_matrix(X, X, ...)."""
    K = np.zeros((n, n))
    for i in spec.active_dims:
        K += theta.process_variance[i] * units[i]
    for pair in spec.pairs:
        K += theta.pair(pair) * units[pair[0]] * units[pair[1]]
    return K


def contract_kernel_grad(X, spec: KernelSpec, theta: HyperParams, W: np.ndarray,
                         units: Optional[Dict[int, np.ndarray]] = None) -> np.ndarray:
    """0.5 * sum(W * dK/d eta) for every kernel log-parameter, without forming any dK.

    W must be symmetric.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    D = theta.n_dims
    if units is None:
        units = unit_matrices(X, spec, theta)
    grad = np.zeros(2 * D + len(spec.pairs))

    def scaled(i):
        sq = squared_distances(X[:, i], X[:, i])
        sq /= theta.length_scale[i] ** 2
        return sq

    for i in spec.active_dims:
        weighted = W * units[i]
        grad[i] = theta.process_variance[i] * float(weighted.sum())
        grad[D + i] = 0.5 * theta.process_variance[i] * float(np.vdot(weighted, scaled(i)))
        del weighted

    for k, (a, b) in enumerate(spec.pairs):
        weighted = W * units[a]
        weighted *= units[b]
        weighted *= theta.pair((a, b))
        grad[2 * D + k] = float(weighted.sum())
        grad[D + a] += 0.5 * float(np.vdot(weighted, scaled(a)))
        grad[D + b] += 0.5 * float(np.vdot(weighted, scaled(b)))
    return grad
