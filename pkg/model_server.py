#!/usr/bin/env python3
"""
HTTP service around a trained model: point predictions, the component
decomposition and Prometheus metrics.
"""

import logging

import pandas as pd
from flask import Flask, jsonify, request

from errors import DataError, NumericalError, WindGamError
from gp_core import TrainedModel, load_model
from pipeline import GridSpec, decompose_model, polar_peak, predict_frame, with_yaw_features
from telemetry import PipelineTelemetry, system_health

logger = logging.getLogger(__name__)


def _points_frame(payload) -> pd.DataFrame:
    if not isinstance(payload, dict) or not isinstance(payload.get('points'), list) or not payload['points']:
        raise DataError("request body must be JSON with a non-empty 'points' list")
    return with_yaw_features(pd.DataFrame(payload['points']))


def create_app(model: TrainedModel, telemetry: PipelineTelemetry = None, grid: GridSpec = GridSpec()) -> Flask:
    app = Flask(__name__)
    telemetry = telemetry or PipelineTelemetry()

    @app.errorhandler(WindGamError)
    def handle_error(e):
        status = 422 if isinstance(e, NumericalError) else 400
        logger.warning(f"Request failed ({status}): {e}")
        return jsonify({'error': str(e), 'type': type(e).__name__}), status

    @app.route('/health')
    def health():
        return jsonify({
            'status': 'healthy',
            'service': 'windgam-model',
            'target': model.metadata.get('target'),
            'columns': list(model.dataset.columns),
            'n_training_rows': model.dataset.n_rows,
            'system': system_health(),
        })

    @app.route('/predict', methods=['POST'])
    def predict_endpoint():
        payload = request.get_json(silent=True)
        level = float((payload or {}).get('level', 0.95))
        if not 0 < level < 1:
            raise DataError(f"level must lie in (0, 1), got {level}")
        frame = _points_frame(payload)
        with telemetry.stage('serve-predict'):
            result = predict_frame(model, frame, level=level)
        telemetry.record_predictions(len(result))
        return jsonify({'level': level, 'predictions': result.to_dict(orient='records')})

    @app.route('/decompose')
    def decompose_endpoint():
        request_grid = GridSpec(
            n_speed=request.args.get('n_speed', grid.n_speed, type=int),
            speed_max_factor=request.args.get('speed_max_factor', grid.speed_max_factor, type=float),
            n_direction=request.args.get('n_direction', grid.n_direction, type=int),
        )
        with telemetry.stage('serve-decompose'):
            result = decompose_model(model, request_grid)
        return jsonify({
            'offset': result.offset,
            'polar_peak_direction': polar_peak(result),
            'components': {name: frame.to_dict(orient='records') for name, frame in result.components.items()},
            'polar': result.polar.to_dict(orient='records'),
        })

    @app.route('/metrics/prometheus')
    def prometheus_metrics():
        return telemetry.exposition(), 200, {'Content-Type': 'text/plain; charset=utf-8'}

    return app


def serve(model_path: str, host: str = '127.0.0.1', port: int = 5080, telemetry: PipelineTelemetry = None):
    model = load_model(model_path)
    app = create_app(model, telemetry)
    logger.info(f"Serving {model.metadata.get('target', 'model')} from {model_path} on {host}:{port}")
    app.run(host=host, port=port)


if __name__ == '__main__':
    import sys

    logging.basicConfig(level=logging.INFO)
    serve(sys.argv[1] if len(sys.argv) > 1 else 'model.json')
