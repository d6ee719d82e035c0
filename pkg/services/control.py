"""
Control-plane message codes shared by the services and the experiment
drivers, plus the JSON/vector body helpers they all use.
"""

import base64
import json
from enum import IntEnum
from typing import Any

import numpy as np


class ControlType(IntEnum):
    CHANGE = 400          # driver -> service agent: weight change, leave
    CHANGE_ACK = 401      # service agent -> driver
    SERVICE_LIVE = 402    # service agent -> driver: running with data loaded
    DEVICE_UPDATE = 403   # driver -> application agent: new raw value, states, plans, rejoin


def encode_body(payload: Any) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")


def decode_body(body: bytes) -> Any:
    return json.loads(body.decode("utf-8"))


def encode_vector(values: np.ndarray) -> str:
    """Exact float64 transport of a vector"""
    return base64.b64encode(np.asarray(values, dtype=">f8").tobytes()).decode("ascii")


def decode_vector(text: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype=">f8").astype(np.float64)
