#!/usr/bin/env python3
"""
windgam command line: generate -> filter -> train -> predict / decompose /
evaluate, plus explore and serve.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Settings resolve as command-line flag > --config file > built-in default.
"""

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import List, Optional

from config import RunConfig, load_config
from errors import UsageError, WindGamError
from gp_core import load_model, save_model
from hyperopt import write_trace
from kernels import KernelOrder
from pipeline import (
    Target, decompose_model, evaluate_model, explore, model_turbine_spec, polar_peak, predict_frame,
    prediction_grid, train_model,
)
from preprocessing import apply_filters, score_filter, write_audit
from scada_data import load_records, load_schema, read_csv_table, write_records
from synthetic_farm import generate, write_generated
from telemetry import PipelineTelemetry

logger = logging.getLogger('windgam')


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises UsageError instead of exiting with status 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _json_ready(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_ready(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_ready(v) for v in value]
    return value


def write_json(data: dict, path: Optional[str]):
    text = json.dumps(_json_ready(data), indent=2, sort_keys=True) + '\n'
    if path is None:
        sys.stdout.write(text)
        return
    with open(path, 'w', encoding='utf-8') as f:
        f.write(text)


def _require_file(path: str, what: str):
    if not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")


def _require_parent(path: Optional[str]):
    if path is not None and not Path(path).resolve().parent.is_dir():
        raise UsageError(f"output directory does not exist: {Path(path).parent}")


def _output_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _schema(args, config: RunConfig):
    if getattr(args, 'schema', None):
        _require_file(args.schema, 'schema file')
        return load_schema(args.schema)
    return config.schema()


def _load_input(args, config: RunConfig, telemetry: PipelineTelemetry):
    _require_file(args.input, 'input file')
    with telemetry.stage('load'):
        records = load_records(args.input, _schema(args, config), on_invalid=args.on_invalid)
    telemetry.record_ingest(len(records))
    return records


def cmd_generate(args, config: RunConfig, telemetry: PipelineTelemetry) -> int:
    _require_parent(args.output)
    config.override('generator', 'seed', args.seed)
    config.override('generator', 'n_samples', args.n)
    config.override('generator', 'shutdown_rate', args.shutdown_rate)
    config.override('generator', 'curtailment_rate', args.curtailment_rate)
    config.override('generator', 'boost_rate', args.boost_rate)
    config.override('generator', 'wake_deficit', args.wake_deficit)
    with telemetry.stage('generate'):
        records, truth = generate(config.layout(), config.generator())
    paths = write_generated(records, truth, args.output)
    logger.info(f"Wrote {len(records)} records to {paths['data']} (truth: {paths['truth']})")
    return 0


def cmd_filter(args, config: RunConfig, telemetry: PipelineTelemetry) -> int:
    for path in (args.output, args.report, args.audit):
        _require_parent(path)
    records = _load_input(args, config, telemetry)
    with telemetry.stage('filter'):
        retained, report, audit = apply_filters(records, config.turbine(), config.filter())
    telemetry.record_filter(report)

    schema = _schema(args, config)
    write_records(retained, args.output, schema)
    if args.audit:
        write_audit(audit, args.audit, schema)
    result = report.to_dict()
    if args.truth:
        _require_file(args.truth, 'truth file')
        result['score'] = score_filter(audit, records, read_csv_table(args.truth))
    write_json(result, args.report)
    return 0


def cmd_train(args, config: RunConfig, telemetry: PipelineTelemetry) -> int:
    for path in (args.model, args.report, args.trace_file):
        _require_parent(path)
    if args.target == 'turbine' and not args.turbine_id:
        raise UsageError('--target turbine needs --turbine-id')
    target = Target(args.target, args.turbine_id if args.target == 'turbine' else None)

    config.override('sampling', 'seed', args.seed)
    config.override('optimizer', 'seed', args.seed)
    config.override('sampling', 'n_samples', args.n_samples)
    config.override('optimizer', 'restarts', args.restarts)
    config.override('optimizer', 'max_iterations', args.max_iterations)
    config.override('optimizer', 'workers', args.workers)
    config.override('model', 'kernel_order', KernelOrder(args.kernel_order) if args.kernel_order else None)
    config.override('model', 'skip_filter', True if args.skip_filter else None)

    records = _load_input(args, config, telemetry)
    with telemetry.stage('train'):
        model, report, result = train_model(records, target, config.training(), telemetry)
    save_model(model, args.model)
    write_json(report, args.report)
    if args.trace_file:
        write_trace(result, args.trace_file)
    logger.info(f"Model for {target.label} written to {args.model} (NLML {report['final_nlml']:.4f})")
    return 0


def _grid(args, config: RunConfig):
    config.override('grid', 'n_speed', args.n_speed)
    config.override('grid', 'n_direction', args.n_direction)
    return config.grid()


def cmd_predict(args, config: RunConfig, telemetry: PipelineTelemetry) -> int:
    _require_parent(args.output)
    _require_file(args.model, 'model file')
    model = load_model(args.model)
    if args.points:
        _require_file(args.points, 'points file')
        points = read_csv_table(args.points)
    else:
        points = prediction_grid(_grid(args, config), model_turbine_spec(model))
    with telemetry.stage('predict'):
        frame = predict_frame(model, points, level=args.level)
    telemetry.record_predictions(len(frame))
    frame.to_csv(args.output, index=False, encoding='utf-8')
    return 0


def cmd_decompose(args, config: RunConfig, telemetry: PipelineTelemetry) -> int:
    _require_file(args.model, 'model file')
    model = load_model(args.model)
    with telemetry.stage('decompose'):
        result = decompose_model(model, _grid(args, config))
    out = _output_dir(args.output_dir)

    files = {}
    for name, frame in result.components.items():
        files[name] = f"component_{name}.csv"
        frame.to_csv(out / files[name], index=False, encoding='utf-8')
    for name, frame in result.pairs.items():
        files[name] = f"pair_{name}.csv"
        frame.to_csv(out / files[name], index=False, encoding='utf-8')
    result.polar.to_csv(out / 'polar_direction.csv', index=False, encoding='utf-8')
    result.polar_grid.to_csv(out / 'polar_grid.csv', index=False, encoding='utf-8')
    write_json({
        'offset': result.offset,
        'target': model.metadata.get('target'),
        'components': files,
        'polar': 'polar_direction.csv',
        'polar_grid': 'polar_grid.csv',
        'polar_peak_direction': polar_peak(result),
        'normalization': 'normalized = (mean - min) / (max - min) over the emitted curve',
    }, str(out / 'decomposition.json'))
    return 0


def cmd_evaluate(args, config: RunConfig, telemetry: PipelineTelemetry) -> int:
    _require_parent(args.output)
    _require_file(args.model, 'model file')
    model = load_model(args.model)
    args.input = args.holdout
    records = _load_input(args, config, telemetry)
    with telemetry.stage('evaluate'):
        metrics = evaluate_model(model, records)
    write_json(metrics, args.output)
    return 0


def cmd_explore(args, config: RunConfig, telemetry: PipelineTelemetry) -> int:
    records = _load_input(args, config, telemetry)
    with telemetry.stage('explore'):
        power_curve, wind_rose = explore(records, config.turbine())
    out = _output_dir(args.output_dir)
    power_curve.to_csv(out / 'power_curve.csv', index=False, encoding='utf-8')
    wind_rose.to_csv(out / 'wind_rose.csv', index=False, encoding='utf-8')
    return 0


def cmd_serve(args, config: RunConfig, telemetry: PipelineTelemetry) -> int:
    from model_server import create_app

    _require_file(args.model, 'model file')
    config.override('server', 'host', args.host)
    config.override('server', 'port', args.port)
    server = config.server()
    app = create_app(load_model(args.model), telemetry, config.grid())
    logger.info(f"Serving {args.model} on {server['host']}:{server['port']}")
    app.run(host=server['host'], port=int(server['port']))
    return 0


def _add_input(parser):
    parser.add_argument('--input', required=True, help='SCADA CSV with a header row')
    parser.add_argument('--schema', help='key=column mapping file overriding [columns]')
    parser.add_argument('--on-invalid', choices=['raise', 'skip'], default='raise',
                        help='reject the file on any bad row (default) or skip bad rows')


def _add_grid(parser):
    parser.add_argument('--n-speed', type=int, help='wind-speed grid points (default 50)')
    parser.add_argument('--n-direction', type=int, help='direction grid points (default 72, i.e. 5 degrees)')


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog='windgam', description='Additive GP power modelling for wind farms')
    parser.add_argument('--config', help='INI run config (flags override it)')
    parser.add_argument('--metrics-file', help='write Prometheus text metrics here after the run')
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument('--verbose', '-v', action='store_true', help='debug logging')
    verbosity.add_argument('--quiet', '-q', action='store_true', help='warnings and errors only')
    sub = parser.add_subparsers(dest='command', required=True, parser_class=ArgumentParser)

    p = sub.add_parser('generate', help='synthetic farm SCADA with ground truth')
    p.add_argument('--output', required=True, help='data CSV; truth files are written beside it')
    p.add_argument('--seed', type=int)
    p.add_argument('--n', type=int, help='number of ten-minute timestamps')
    p.add_argument('--shutdown-rate', type=float)
    p.add_argument('--curtailment-rate', type=float)
    p.add_argument('--boost-rate', type=float)
    p.add_argument('--wake-deficit', type=float)
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser('filter', help='rule and Mahalanobis filtering')
    _add_input(p)
    p.add_argument('--output', required=True, help='filtered CSV')
    p.add_argument('--report', required=True, help='FilterReport JSON')
    p.add_argument('--audit', help='CSV of removed rows with their filter_reason')
    p.add_argument('--truth', help='generator truth CSV; adds a score section to the report')
    p.set_defaults(handler=cmd_filter)

    p = sub.add_parser('train', help='tune and fit an additive GP')
    _add_input(p)
    p.add_argument('--target', choices=['farm', 'turbine'], default='farm')
    p.add_argument('--turbine-id')
    p.add_argument('--model', required=True, help='model file to write')
    p.add_argument('--report', help='training report JSON (stdout when omitted)')
    p.add_argument('--trace-file', help='optimizer trace CSV')
    p.add_argument('--seed', type=int)
    p.add_argument('--n-samples', type=int, help='stratified subset size (default 5000)')
    p.add_argument('--restarts', type=int)
    p.add_argument('--max-iterations', type=int)
    p.add_argument('--workers', type=int, help='threads for optimizer restarts')
    p.add_argument('--kernel-order', choices=[o.value for o in KernelOrder])
    p.add_argument('--skip-filter', action='store_true', help='train on the input as given')
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('predict', help='gridded predictions')
    p.add_argument('--model', required=True)
    p.add_argument('--output', required=True)
    p.add_argument('--points', help='CSV of points with the model feature columns instead of a grid')
    p.add_argument('--level', type=float, default=0.95, help='power-space band level')
    _add_grid(p)
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser('decompose', help='per-dimension component curves')
    p.add_argument('--model', required=True)
    p.add_argument('--output-dir', required=True)
    _add_grid(p)
    p.set_defaults(handler=cmd_decompose)

    p = sub.add_parser('evaluate', help='holdout metrics')
    p.add_argument('--model', required=True)
    p.add_argument('--holdout', required=True)
    p.add_argument('--schema')
    p.add_argument('--on-invalid', choices=['raise', 'skip'], default='raise')
    p.add_argument('--output', help='metrics JSON (stdout when omitted)')
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser('explore', help='power-curve and wind-rose tables')
    _add_input(p)
    p.add_argument('--output-dir', required=True)
    p.set_defaults(handler=cmd_explore)

    p = sub.add_parser('serve', help='HTTP model service')
    p.add_argument('--model', required=True)
    p.add_argument('--host')
    p.add_argument('--port', type=int)
    p.set_defaults(handler=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    telemetry = PipelineTelemetry()
    metrics_file = None
    try:
        args = build_parser().parse_args(argv)
        level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
        logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s')
        _require_parent(args.metrics_file)
        metrics_file = args.metrics_file
        config = load_config(args.config)
        return args.handler(args, config, telemetry)
    except WindGamError as e:
        logger.error(str(e))
        return e.exit_code
    finally:
        if metrics_file:
            telemetry.write_metrics(metrics_file)


if __name__ == '__main__':
    sys.exit(main())
