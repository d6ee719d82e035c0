#!/usr/bin/env python3
"""
HTTP news-count feed. Every GET /counts advances the synthetic stream by one
tick and answers `source_id,count` lines, the format HttpNewsClient reads.
"""

import logging
import threading
from datetime import datetime
from functools import wraps

from flask import Flask, Response, jsonify, request

from data_generators import NewsStreamSpec, SyntheticNewsStream

logger = logging.getLogger(__name__)

DEFAULT_PORT = 5050


def error_handler(f):
    """Decorator to handle endpoint errors gracefully"""
    @wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except Exception as e:
            logger.error(f"Error in {f.__name__}: {e}", exc_info=True)
            return jsonify({
                'error': 'Internal server error',
                'endpoint': f.__name__,
                'timestamp': datetime.now().isoformat()
            }), 500
    return wrapper


def create_app(stream: SyntheticNewsStream) -> Flask:
    app = Flask(__name__)
    lock = threading.Lock()
    served = {'ticks': 0, 'last': None}

    @app.route('/counts')
    @error_handler
    def counts():
        """Next tick of per-source counts as text lines"""
        with lock:
            values = stream.tick()
            served['ticks'] += 1
            served['last'] = values
        body = "".join(f"{source},{count}\n" for source, count in enumerate(values))
        logger.debug(f"served tick {served['ticks']} to {request.remote_addr}")
        return Response(body, mimetype='text/plain')

    @app.route('/status')
    @error_handler
    def status():
        with lock:
            return jsonify({
                'status': 'OPERATIONAL',
                'sources': stream.spec.num_sources,
                'ticks_served': served['ticks'],
                'last_total': sum(served['last']) if served['last'] else None,
                'timestamp': datetime.now().isoformat(),
            })

    return app


def serve(spec: NewsStreamSpec, host: str = '127.0.0.1', port: int = DEFAULT_PORT):
    app = create_app(SyntheticNewsStream(spec))
    logger.info(f"Starting news feed with {spec.num_sources} sources on {host}:{port}")
    app.run(host=host, port=port, debug=False, threaded=True)
