"""Parameter checkpoints: JSON mapping name -> shape + row-major float values.

Floats are serialized with Python's shortest round-trip repr, so
load(save(params)) reproduces every value bit-exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError
from .tensor import Tensor

FORMAT = "coarse2fine-params-v1"


def save_params(path, params, header=None):
    """Write parameters (name -> Tensor or ndarray) with an optional header dict."""
    blob = {"format": FORMAT, "header": header, "params": {}}
    for name, p in params.items():
        arr = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
        blob["params"][name] = {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
    Path(path).write_text(json.dumps(blob, sort_keys=True))


def load_params(path):
    """Read a checkpoint; returns (dict name -> float64 ndarray, header)."""
    try:
        blob = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON ({e})")
    if not isinstance(blob, dict) or blob.get("format") != FORMAT:
        raise FormatError(f"{path}: not a {FORMAT} checkpoint")
    params = {}
    for name, entry in blob["params"].items():
        shape = tuple(entry["shape"])
        arr = np.asarray(entry["data"], dtype=np.float64)
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"{path}: parameter {name} has {arr.size} values for shape {shape}")
        params[name] = arr.reshape(shape)
    return params, blob.get("header")
