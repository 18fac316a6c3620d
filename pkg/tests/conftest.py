import numpy as np
import pandas as pd
import pytest

from gp_core import Dataset, fit
from kernels import HyperParams, KernelSpec
from pipeline import FEATURE_COLUMNS, FEATURE_UNITS
from preprocessing import LinkSpec, yaw_to_features
from scada_data import TurbineSpec
from synthetic_farm import GeneratorConfig, generate, grid_layout, write_generated


@pytest.fixture
def turbine_spec():
    return TurbineSpec()


@pytest.fixture
def make_instance():
    """Factory for random (Dataset, HyperParams, KernelSpec) triples."""

    def _make(rng, n, d, order='first', noise=None):
        X = rng.uniform(-2.0, 2.0, size=(n, d))
        y = rng.standard_normal(n)
        spec = KernelSpec.second_order(d) if order == 'second' and d > 1 else KernelSpec.first_order(d)
        theta = HyperParams(
            process_variance=rng.uniform(0.5, 2.0, d),
            length_scale=rng.uniform(0.4, 2.0, d),
            noise_variance=noise if noise is not None else rng.uniform(0.05, 0.5),
            pair_variance={p: rng.uniform(0.2, 1.0) for p in spec.pairs},
        )
        return Dataset(X, y), theta, spec

    return _make


@pytest.fixture
def write_csv(tmp_path):
    def _write(rows, name='scada.csv', columns=None):
        path = tmp_path / name
        pd.DataFrame(rows, columns=columns).to_csv(path, index=False)
        return str(path)

    return _write


@pytest.fixture(scope='session')
def small_farm(tmp_path_factory):
    """300 timestamps of a 3x3 farm written to disk with its truth files."""
    layout = grid_layout()
    config = GeneratorConfig(n_samples=300, seed=3)
    records, truth = generate(layout, config)
    path = tmp_path_factory.mktemp('farm') / 'farm.csv'
    paths = write_generated(records, truth, str(path))
    return {'layout': layout, 'config': config, 'records': records, 'truth': truth, 'paths': paths}


@pytest.fixture(scope='session')
def wind_model():
    """Wind/yaw model fitted to a noiseless additive target peaking for south-westerlies."""
    rng = np.random.default_rng(7)
    n = 150
    wind = rng.uniform(0.0, 16.0, n)
    yaw = rng.uniform(0.0, 360.0, n)
    yaw_sin, yaw_cos = yaw_to_features(yaw)
    z = 4.0 * np.tanh((wind - 7.0) / 3.0) + 0.8 * np.cos(np.deg2rad(yaw - 225.0))
    link = LinkSpec(normalizer=2000.0)
    X = np.column_stack([wind, yaw_sin, yaw_cos])
    dataset = Dataset(X, z, FEATURE_COLUMNS, FEATURE_UNITS)
    theta = HyperParams([4.0, 0.5, 0.5], [2.5, 0.8, 0.8], 0.01)
    return fit(dataset, theta, KernelSpec.first_order(3), center=True, link=link,
               metadata={'target': 'turbine:T11', 'turbine_spec': {
                   'cut_in_speed': 3.0, 'rated_speed': 12.0, 'cut_out_speed': 25.0,
                   'rated_power': 2000.0, 'boost_limit': 2100.0}})
