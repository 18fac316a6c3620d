#!/usr/bin/env python3
"""
Run configuration: an INI file of key=value sections layered under
command-line flags. Precedence is flag > file > built-in default.

    [turbine]
    rated_power = 2000
    [optimizer]
    restarts = 3
    length_scale_range = 0.1, 1.0
    [generator]
    direction_modes = 225:45:0.6, 90:50:0.4
"""

import configparser
import dataclasses
import enum
import logging
from pathlib import Path
from typing import Any, Dict, Optional

from errors import DataError, UsageError
from hyperopt import OptimizerConfig
from kernels import KernelOrder
from pipeline import GridSpec, SamplingConfig, TrainingOptions
from preprocessing import FilterConfig
from scada_data import DEFAULT_SCHEMA, TurbineSpec
from synthetic_farm import FarmLayout, GeneratorConfig, grid_layout

logger = logging.getLogger(__name__)

BOOST_MARGIN = 1.05
LINK_KEYS = {'percentile': 99.9, 'clip_epsilon': 1e-4}
LAYOUT_KEYS = {'rows': 3, 'cols': 3, 'spacing': 500.0}
MODEL_KEYS = {'kernel_order': KernelOrder.FIRST_ORDER_ADDITIVE, 'skip_filter': False}
SERVER_KEYS = {'host': '127.0.0.1', 'port': 5080}

SECTIONS: Dict[str, Dict[str, Any]] = {
    'columns': dict(DEFAULT_SCHEMA),
    'turbine': {f.name: f.default for f in dataclasses.fields(TurbineSpec)},
    'filter': {f.name: f.default for f in dataclasses.fields(FilterConfig)},
    'link': LINK_KEYS,
    'sampling': {f.name: f.default for f in dataclasses.fields(SamplingConfig)},
    'optimizer': {f.name: f.default for f in dataclasses.fields(OptimizerConfig)},
    'model': MODEL_KEYS,
    'generator': {**{f.name: f.default for f in dataclasses.fields(GeneratorConfig)}, **LAYOUT_KEYS},
    'grid': {f.name: f.default for f in dataclasses.fields(GridSpec)},
    'server': SERVER_KEYS,
}


def _convert(text: str, default: Any) -> Any:
    """Parse `text` into the type of `default`."""
    text = text.strip()
    if isinstance(default, bool):
        lowered = text.lower()
        if lowered not in configparser.ConfigParser.BOOLEAN_STATES:
            raise ValueError(f"not a boolean: {text!r}")
        return configparser.ConfigParser.BOOLEAN_STATES[lowered]
    if isinstance(default, enum.Enum):
        return type(default)(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        parts = [p.strip() for p in text.split(',') if p.strip()]
        if default and isinstance(default[0], tuple):
            return tuple(tuple(float(v) for v in p.split(':')) for p in parts)
        return tuple(float(p) for p in parts)
    return text


class RunConfig:
    def __init__(self, parser: Optional[configparser.ConfigParser] = None, source: Optional[str] = None):
        self.parser = parser or configparser.ConfigParser(delimiters=('=',), comment_prefixes=('#', ';'))
        self.source = source
        self._overrides: Dict[tuple, Any] = {}
        self._check_keys()

    def _check_keys(self):
        for section in self.parser.sections():
            if section not in SECTIONS:
                raise UsageError(f"unknown config section [{section}] in {self.source}")
            for key in self.parser[section]:
                if key not in SECTIONS[section]:
                    raise UsageError(f"unknown key {key!r} in [{section}] of {self.source}")

    def override(self, section: str, key: str, value: Any):
        """Set a value from the command line; `None` leaves the file/default value in place."""
        if section not in SECTIONS or key not in SECTIONS[section]:
            raise UsageError(f"unknown setting [{section}] {key}")
        if value is not None:
            self._overrides[(section, key)] = value

    def has(self, section: str, key: str) -> bool:
        return (section, key) in self._overrides or self.parser.has_option(section, key)

    def get(self, section: str, key: str) -> Any:
        if (section, key) in self._overrides:
            return self._overrides[(section, key)]
        default = SECTIONS[section][key]
        if not self.parser.has_option(section, key):
            return default
        text = self.parser.get(section, key)
        try:
            return _convert(text, default)
        except ValueError as e:
            raise UsageError(f"[{section}] {key} = {text!r}: {e}")

    def section(self, name: str, keys=None) -> Dict[str, Any]:
        return {key: self.get(name, key) for key in (keys or SECTIONS[name])}

    def _build(self, cls, name: str):
        keys = [f.name for f in dataclasses.fields(cls)]
        try:
            return cls(**self.section(name, keys))
        except DataError as e:
            raise UsageError(f"invalid [{name}] settings: {e}")

    def schema(self) -> Dict[str, str]:
        return self.section('columns')

    def turbine(self) -> TurbineSpec:
        values = self.section('turbine')
        if not self.has('turbine', 'boost_limit'):
            values['boost_limit'] = BOOST_MARGIN * values['rated_power']
        try:
            return TurbineSpec(**values)
        except DataError as e:
            raise UsageError(f"invalid [turbine] settings: {e}")

    def filter(self) -> FilterConfig:
        return self._build(FilterConfig, 'filter')

    def sampling(self) -> SamplingConfig:
        return self._build(SamplingConfig, 'sampling')

    def optimizer(self) -> OptimizerConfig:
        return self._build(OptimizerConfig, 'optimizer')

    def grid(self) -> GridSpec:
        return self._build(GridSpec, 'grid')

    def generator(self) -> GeneratorConfig:
        return self._build(GeneratorConfig, 'generator')

    def layout(self) -> FarmLayout:
        values = self.section('generator', LAYOUT_KEYS)
        try:
            return grid_layout(int(values['rows']), int(values['cols']), float(values['spacing']), self.turbine())
        except DataError as e:
            raise UsageError(f"invalid farm layout: {e}")

    def training(self) -> TrainingOptions:
        link = self.section('link')
        model = self.section('model')
        return TrainingOptions(
            turbine=self.turbine(),
            filter=self.filter(),
            skip_filter=bool(model['skip_filter']),
            link_percentile=float(link['percentile']),
            clip_epsilon=float(link['clip_epsilon']),
            sampling=self.sampling(),
            optimizer=self.optimizer(),
            kernel_order=model['kernel_order'],
        )

    def server(self) -> Dict[str, Any]:
        return self.section('server')


def load_config(path: Optional[str] = None) -> RunConfig:
    """Read a run config; no path means built-in defaults."""
    parser = configparser.ConfigParser(delimiters=('=',), comment_prefixes=('#', ';'))
    if path is None:
        return RunConfig(parser)
    if not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            parser.read_file(f)
    except configparser.Error as e:
        raise UsageError(f"cannot parse config file {path}: {e}")
    logger.info(f"Loaded run config from {path}")
    return RunConfig(parser, source=path)
