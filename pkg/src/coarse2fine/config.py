"""Flat JSON run configuration with dotted keys and a strict schema.

Unknown keys are hard errors so a typo cannot silently fall back to a
default. A top-level --seed overrides every *.seed key not explicitly set.
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import ConfigError

_INT, _FLOAT, _STR, _BOOL, _INT_LIST, _STR_LIST = range(6)

SCHEMA = {
    # data source (synthetic hierarchy or CIFAR-100 binaries)
    "data.kind": (_STR, "synthetic"),
    "data.path": (_STR, ""),
    "data.num_super": (_INT, 5),
    "data.fine_per_super": (_INT, 4),
    "data.per_class": (_INT, 60),
    "data.per_class_train": (_INT, 30),
    "data.dim": (_INT, 8),
    "data.sigma_fine": (_FLOAT, 1.0),
    "data.sigma_super": (_FLOAT, 6.0),
    "data.seed": (_INT, 0),
    "data.train_path": (_STR, ""),
    "data.test_path": (_STR, ""),
    # coarse set construction
    "sets.task": (_STR, "most_frequent"),
    "sets.count": (_INT, 500),
    "sets.size_min": (_INT, 6),
    "sets.size_max": (_INT, 10),
    "sets.seed": (_INT, 0),
    # pretraining
    "pretrain.method": (_STR, "facile_fsp"),
    "pretrain.loss": (_STR, "ce"),
    "pretrain.epochs": (_INT, 30),
    "pretrain.batch_size": (_INT, 16),
    "pretrain.lr": (_FLOAT, 0.01),
    "pretrain.momentum": (_FLOAT, 0.9),
    "pretrain.weight_decay": (_FLOAT, 1e-4),
    "pretrain.augmentation": (_STR, "none"),
    "pretrain.noise_sigma": (_FLOAT, 0.1),
    "pretrain.temperature": (_FLOAT, 0.07),
    "pretrain.seed": (_INT, 0),
    # model shapes
    "encoder.hidden_dims": (_INT_LIST, [64, 32]),
    "encoder.embed_dim": (_INT, 32),
    "aggregator.kind": (_STR, "deepset_mean"),
    "aggregator.hidden_dim": (_INT, 64),
    "aggregator.output_dim": (_INT, 32),
    "aggregator.heads": (_INT, 4),
    "aggregator.inducing_points": (_INT, 3),
    "projection.hidden_dim": (_INT, 64),
    "projection.out_dim": (_INT, 32),
    # fine predictor
    "predictor.kind": (_STR, "nearest_centroid"),
    "predictor.regularization": (_FLOAT, 1.0),
    "predictor.latent_augmentation": (_BOOL, False),
    "predictor.la_count": (_INT, 100),
    # evaluation protocol
    "eval.checkpoint": (_STR, ""),
    "eval.c_way": (_INT, 5),
    "eval.k_shot": (_INT, 5),
    "eval.num_tasks": (_INT, 200),
    "eval.q": (_INT, 15),
    "eval.arms": (_STR_LIST, ["nc", "lr", "rc"]),
    "eval.lr_lambda": (_FLOAT, 1.0),
    "eval.rc_alpha": (_FLOAT, 1.0),
    "eval.la_prototypes": (_INT, 16),
    "eval.la_count": (_INT, 100),
    "eval.threads": (_INT, 1),
    "eval.seed": (_INT, 0),
    # risk-curve experiment
    "risk.growth": (_STR, "linear"),
    "risk.n_grid": (_INT_LIST, [10, 20, 40]),
    "risk.replicates": (_INT, 3),
    "risk.seed": (_INT, 0),
    "risk.task": (_STR, "most_frequent"),
    "risk.num_super": (_INT, 4),
    "risk.fine_per_super": (_INT, 4),
    "risk.per_class_train": (_INT, 60),
    "risk.per_class_test": (_INT, 30),
    "risk.dim": (_INT, 8),
    "risk.sigma_fine": (_FLOAT, 1.0),
    "risk.sigma_super": (_FLOAT, 6.0),
    "risk.set_min": (_INT, 2),
    "risk.set_max": (_INT, 4),
    "risk.m0": (_INT, 10),
    "risk.c_way": (_INT, 5),
    "risk.q": (_INT, 15),
    "risk.num_tasks": (_INT, 50),
    "risk.epochs": (_INT, 8),
    "risk.batch_size": (_INT, 16),
    "risk.lr": (_FLOAT, 0.05),
    "risk.hidden_dims": (_INT_LIST, [32]),
    "risk.embed_dim": (_INT, 16),
    "risk.aggregator_hidden": (_INT, 32),
    # theory diagnostics
    "diagnose.eta": (_FLOAT, 1.0),
    "diagnose.num_pairs": (_INT, 200),
    "diagnose.tol": (_FLOAT, 1e-9),
    "diagnose.seed": (_INT, 0),
}

_SEED_KEYS = ("data.seed", "sets.seed", "pretrain.seed", "eval.seed", "risk.seed", "diagnose.seed")


def _coerce(key, value, kind):
    if kind == _INT:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected integer, got {value!r}")
        return value
    if kind == _FLOAT:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected number, got {value!r}")
        return float(value)
    if kind == _STR:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected string, got {value!r}")
        return value
    if kind == _BOOL:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected boolean, got {value!r}")
        return value
    if kind == _INT_LIST:
        if not isinstance(value, list) or not all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        ):
            raise ConfigError(f"{key}: expected list of integers, got {value!r}")
        return list(value)
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ConfigError(f"{key}: expected list of strings, got {value!r}")
    return list(value)


def default_config():
    return {key: (list(v) if isinstance(v, list) else v) for key, (_, v) in SCHEMA.items()}


def load_config(path=None, overrides=None, seed=None):
    """Merge defaults, a JSON file, and overrides; apply a global seed last."""
    cfg = default_config()
    explicit = set()
    documents = []
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: invalid JSON ({e})")
        if not isinstance(doc, dict):
            raise ConfigError(f"{p}: config must be a flat JSON object")
        documents.append(doc)
    if overrides:
        documents.append(dict(overrides))
    for doc in documents:
        for key, value in doc.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = _coerce(key, value, SCHEMA[key][0])
            explicit.add(key)
    if seed is not None:
        for i, key in enumerate(_SEED_KEYS):
            if key not in explicit:
                cfg[key] = seed + i
    return cfg
