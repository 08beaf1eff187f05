"""Built-in property suite behind the ``selftest`` CLI subcommand.

Each check is small enough to run in seconds; the pytest suite covers the
same ground (and much more) with full acceptance tolerances.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .checkpoint import load_params, save_params
from .datasets import HierarchySpec, build_most_frequent_sets, gen_synthetic_hierarchy
from .fewshot import (
    LatentAugmenter,
    NearestCentroidClassifier,
    RidgeClassifier,
    macro_f1,
)
from .gradcheck import assert_gradients_close
from .losses import ContrastiveBatch, simclr_loss, supcon_loss
from .models import AggregatorConfig, Encoder, EncoderConfig, make_aggregator
from .optim import SgdConfig, cosine_lr
from .pipeline import PretrainSpec, pretrain_coarse


def _unit_rows(rng, n, d):
    z = rng.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def _simclr_reference(z, tau):
    n = len(z)
    total = 0.0
    for i in range(n):
        denom = sum(math.exp(z[i] @ z[a] / tau) for a in range(n) if a != i)
        total += -math.log(math.exp(z[i] @ z[i ^ 1] / tau) / denom)
    return total


def _supcon_reference(z, row_labels, tau):
    n = len(z)
    total = 0.0
    for i in range(n):
        pos = [p for p in range(n) if p != i and row_labels[p] == row_labels[i]]
        if not pos:
            continue
        denom = sum(math.exp(z[i] @ z[a] / tau) for a in range(n) if a != i)
        total += -sum(math.log(math.exp(z[i] @ z[p] / tau) / denom) for p in pos) / len(pos)
    return total


def check_primitive_gradients():
    rng = np.random.default_rng(0)
    x = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = T.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    assert_gradients_close(lambda: T.sum(T.matmul(x, w)), {"x": x, "w": w})
    y = T.Tensor(rng.normal(size=(2, 5)) + 3.0, requires_grad=True)
    assert_gradients_close(lambda: T.sum(T.log(y)), {"y": y})
    assert_gradients_close(lambda: T.sum(T.mul(T.softmax(x, axis=-1), T.tanh(x))), {"x": x})
    assert_gradients_close(lambda: T.mean(T.l2_normalize(x, axis=-1)), {"x": x})


def check_softmax_identities():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(6, 9)) * 5
    s = T.softmax(T.Tensor(x), axis=-1).data
    assert np.abs(s.sum(axis=-1) - 1.0).max() < 1e-12
    ls = T.log_softmax(T.Tensor(x), axis=-1).data
    assert np.abs(ls - np.log(s)).max() < 1e-10


def check_cosine_schedule():
    cfg = SgdConfig(lr0=0.4, total_steps=100)
    assert cosine_lr(cfg, 0) == 0.4
    assert abs(cosine_lr(cfg, 50) - 0.2) < 1e-15
    assert abs(cosine_lr(cfg, 100)) < 1e-16


def check_permutation_invariance():
    rng = np.random.default_rng(2)
    h = rng.normal(size=(6, 8))
    for kind in ("deepset_mean", "deepset_sum", "deepset_max", "attn_mil", "set_transformer"):
        agg = make_aggregator(AggregatorConfig(kind, hidden_dim=8, output_dim=3), 8, seed=3)
        base = agg.forward_set(h).data
        for _ in range(5):
            perm = rng.permutation(6)
            assert np.abs(agg.forward_set(h[perm]).data - base).max() <= 1e-8, kind


def check_contrastive_oracles():
    rng = np.random.default_rng(3)
    for trial in range(10):
        n_src = int(rng.integers(1, 5))
        z = _unit_rows(rng, 2 * n_src, 6)
        batch = ContrastiveBatch(T.Tensor(z), temperature=0.07)
        ours = float(simclr_loss(batch, reduction="sum").data)
        assert abs(ours - _simclr_reference(z, 0.07)) < 1e-10
        labels = rng.integers(0, 2, size=n_src)
        sup = ContrastiveBatch(T.Tensor(z), labels=labels, temperature=0.07)
        ours = float(supcon_loss(sup, reduction="sum").data)
        assert abs(ours - _supcon_reference(z, np.repeat(labels, 2), 0.07)) < 1e-10
    # all-identical rows with one shared label: loss is log(2N - 1) per anchor
    z = np.tile(_unit_rows(np.random.default_rng(4), 1, 5), (6, 1))
    batch = ContrastiveBatch(T.Tensor(z), labels=np.zeros(3, dtype=int), temperature=0.07)
    assert abs(float(supcon_loss(batch).data) - math.log(5)) < 1e-10


def check_classifiers():
    rng = np.random.default_rng(5)
    X = np.concatenate([rng.normal(i * 4, 0.3, size=(12, 3)) for i in range(3)])
    y = np.repeat(np.arange(3), 12)
    nc = NearestCentroidClassifier().fit(X, y)
    assert (nc.predict(X) == y).all()
    rc = RidgeClassifier(alpha=1.0).fit(X, y)
    Xb = np.concatenate([X, np.ones((len(X), 1))], axis=1)
    targets = np.where(y[:, None] == np.arange(3)[None, :], 1.0, -1.0)
    penalty = np.eye(4)
    penalty[3, 3] = 0.0
    resid = (Xb.T @ Xb + penalty) @ rc.weights_ - Xb.T @ targets
    assert np.abs(resid).max() < 1e-8
    assert macro_f1(np.array([0, 0, 1, 1]), np.array([0, 0, 1, 1]), 2) == 1.0


def check_latent_augmentation():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(64, 4))
    la = LatentAugmenter(n_prototypes=4, random_state=0).fit(X)
    expanded, labels = la.expand(X[:3], np.arange(3), count=10, rng=0)
    assert expanded.shape == (3 + 30, 4) and labels.shape == (33,)
    a = la.sample(X[0], count=5, rng=np.random.default_rng(9))
    b = la.sample(X[0], count=5, rng=np.random.default_rng(9))
    assert np.array_equal(a, b)


def check_checkpoint_roundtrip(tmpdir="/tmp"):
    import os
    import tempfile

    rng = np.random.default_rng(7)
    params = {"w": T.Tensor(rng.normal(size=(3, 2)) * 1e-7), "b": T.Tensor(rng.normal(size=2))}
    fd, path = tempfile.mkstemp(suffix=".json")
    os.close(fd)
    try:
        save_params(path, params)
        loaded, _ = load_params(path)
        for name, p in params.items():
            assert np.array_equal(loaded[name], p.data)
    finally:
        os.unlink(path)


def check_pipeline_determinism():
    data = gen_synthetic_hierarchy(HierarchySpec(3, 2), 20, 4, 0.5, 4.0, seed=0)
    sets = build_most_frequent_sets(data, 24, size_range=(2, 3), seed=1)
    spec = PretrainSpec(method="facile_fsp", loss="ce", epochs=2, batch_size=8, seed=5)
    enc_cfg = EncoderConfig(4, (8,), 4)
    agg_cfg = AggregatorConfig("deepset_mean", hidden_dim=8)
    r1 = pretrain_coarse(spec, sets, enc_cfg, agg_cfg)
    r2 = pretrain_coarse(spec, sets, enc_cfg, agg_cfg)
    for (n1, p1), (n2, p2) in zip(sorted(r1.encoder.params().items()), sorted(r2.encoder.params().items())):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)


CHECKS = [
    ("primitive gradients vs finite differences", check_primitive_gradients),
    ("softmax identities", check_softmax_identities),
    ("cosine schedule endpoints", check_cosine_schedule),
    ("aggregator permutation invariance", check_permutation_invariance),
    ("contrastive losses vs double-loop oracle", check_contrastive_oracles),
    ("classifier fixtures and ridge residual", check_classifiers),
    ("latent augmentation counts and determinism", check_latent_augmentation),
    ("checkpoint bit-exact round trip", check_checkpoint_roundtrip),
    ("pretraining determinism", check_pipeline_determinism),
]


def run_selftest() -> int:
    """Run every check; print one PASS/FAIL line each plus totals; return #failures."""
    failures = 0
    for name, fn in CHECKS:
        try:
            fn()
        except Exception as e:  # report and keep going
            failures += 1
            print(f"FAIL {name}: {type(e).__name__}: {e}")
        else:
            print(f"PASS {name}")
    print(f"{len(CHECKS) - failures} passed, {failures} failed")
    return failures
