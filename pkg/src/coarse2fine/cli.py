"""Config-driven command line: gen-data, pretrain, evaluate, risk-curve,
diagnose, selftest.

Exit codes: 0 success, 1 configuration problem (including usage errors),
2 runtime failure. Summary JSON files are byte-deterministic for a fixed
config and seed; wall-clock timestamps appear only in manifest.json.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy
import sklearn

from . import __version__
from .config import load_config
from .datasets import (
    HierarchySpec,
    InstanceDataset,
    build_most_frequent_sets,
    build_unique_count_sets,
    flatten_sets,
    gen_synthetic_hierarchy,
    load_cifar100,
    split_per_class,
)
from .diagnostics import (
    RiskExperimentConfig,
    estimate_central_condition,
    estimate_relative_lipschitz,
    run_risk_experiment,
)
from .errors import ConfigError
from .fewshot import LatentAugmenter, LogisticRegressionClassifier, evaluate_protocol
from .models import (
    AggregatorConfig,
    EncoderConfig,
    ProjectionConfig,
    SetModel,
    load_encoder,
    save_encoder,
)
from .pipeline import PretrainSpec, embed_fine, embedder, pretrain_coarse


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


COMMANDS = ("gen-data", "pretrain", "evaluate", "risk-curve", "diagnose", "selftest")


def build_parser():
    parser = _Parser(prog="coarse2fine", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None, help="flat JSON config file")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override all unset *.seed keys")
        sp.add_argument("--threads", type=int, default=1)
    return parser


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _dataset_digest(*datasets):
    h = hashlib.sha256()
    for d in datasets:
        h.update(np.ascontiguousarray(d.features).tobytes())
        h.update(np.ascontiguousarray(d.fine_labels).tobytes())
        h.update(np.ascontiguousarray(d.super_labels).tobytes())
    return h.hexdigest()


def _manifest(command, cfg, extra=None):
    doc = {
        "command": command,
        "config": cfg,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "versions": {
            "coarse2fine": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "scikit-learn": sklearn.__version__,
        },
    }
    if extra:
        doc.update(extra)
    return doc


def _save_dataset(path, data: InstanceDataset):
    np.savez(
        path,
        features=data.features,
        fine_labels=data.fine_labels,
        super_labels=data.super_labels,
        image_shape=np.asarray(data.image_shape if data.image_shape else (), dtype=np.int64),
    )


def _load_dataset(path):
    with np.load(path) as z:
        shape = tuple(int(v) for v in z["image_shape"])
        return InstanceDataset(
            z["features"], z["fine_labels"], z["super_labels"], image_shape=shape or None
        )


def _load_data(cfg):
    """(train, test) per the data.* config block."""
    kind = cfg["data.kind"]
    if kind == "cifar100":
        if not cfg["data.train_path"] or not cfg["data.test_path"]:
            raise ConfigError("data.kind=cifar100 needs data.train_path and data.test_path")
        return load_cifar100(cfg["data.train_path"], cfg["data.test_path"])
    if kind != "synthetic":
        raise ConfigError(f"unknown data.kind {cfg['data.kind']!r}")
    if cfg["data.path"]:
        base = Path(cfg["data.path"])
        train_file, test_file = base / "train.npz", base / "test.npz"
        if not train_file.exists() or not test_file.exists():
            raise ConfigError(f"data.path {base} is missing train.npz/test.npz")
        return _load_dataset(train_file), _load_dataset(test_file)
    spec = HierarchySpec(cfg["data.num_super"], cfg["data.fine_per_super"])
    data = gen_synthetic_hierarchy(
        spec,
        cfg["data.per_class"],
        cfg["data.dim"],
        cfg["data.sigma_fine"],
        cfg["data.sigma_super"],
        seed=cfg["data.seed"],
    )
    return split_per_class(data, cfg["data.per_class_train"])


def _build_sets(cfg, train):
    task = cfg["sets.task"]
    if task == "most_frequent":
        build = build_most_frequent_sets
    elif task == "unique_count":
        build = build_unique_count_sets
    else:
        raise ConfigError(f"unknown sets.task {task!r}")
    return build(
        train,
        cfg["sets.count"],
        size_range=(cfg["sets.size_min"], cfg["sets.size_max"]),
        seed=cfg["sets.seed"],
    )


def _pretrain_from_config(cfg, train):
    sets = _build_sets(cfg, train)
    spec = PretrainSpec(
        method=cfg["pretrain.method"],
        loss=cfg["pretrain.loss"],
        epochs=cfg["pretrain.epochs"],
        batch_size=cfg["pretrain.batch_size"],
        lr=cfg["pretrain.lr"],
        momentum=cfg["pretrain.momentum"],
        weight_decay=cfg["pretrain.weight_decay"],
        augmentation=cfg["pretrain.augmentation"],
        noise_sigma=cfg["pretrain.noise_sigma"],
        temperature=cfg["pretrain.temperature"],
        seed=cfg["pretrain.seed"],
    )
    if spec.method in ("facile_fsp", "facile_supcon"):
        data = sets
    elif spec.method == "fsp_patch":
        data = flatten_sets(sets)
    else:
        data = flatten_sets(sets)[0]  # self-supervised arms ignore the set labels
    result = pretrain_coarse(
        spec,
        data,
        EncoderConfig(train.dim, tuple(cfg["encoder.hidden_dims"]), cfg["encoder.embed_dim"]),
        AggregatorConfig(
            kind=cfg["aggregator.kind"],
            hidden_dim=cfg["aggregator.hidden_dim"],
            output_dim=cfg["aggregator.output_dim"],
            heads=cfg["aggregator.heads"],
            inducing_points=cfg["aggregator.inducing_points"],
        ),
        ProjectionConfig(cfg["projection.hidden_dim"], cfg["projection.out_dim"]),
        image_shape=train.image_shape,
    )
    return result, sets


def cmd_gen_data(cfg, out, args):
    train, test = _load_data(cfg)
    sets = _build_sets(cfg, train)
    _save_dataset(out / "train.npz", train)
    _save_dataset(out / "test.npz", test)
    np.savez(
        out / "coarse_sets.npz",
        features=np.concatenate([s.features for s in sets]),
        sizes=np.array([s.size for s in sets]),
        member_super_labels=np.concatenate([s.member_super_labels for s in sets]),
        labels=np.array([s.label for s in sets]),
    )
    _write_json(
        out / "manifest.json",
        _manifest(
            "gen-data",
            cfg,
            {
                "dataset_digest": _dataset_digest(train, test),
                "num_train": len(train),
                "num_test": len(test),
                "num_sets": len(sets),
            },
        ),
    )
    print(f"wrote {len(train)} train / {len(test)} test instances and {len(sets)} sets to {out}")
    return 0


def cmd_pretrain(cfg, out, args):
    train, test = _load_data(cfg)
    result, sets = _pretrain_from_config(cfg, train)
    checkpoint = out / "checkpoint.json"
    save_encoder(checkpoint, result.encoder)
    _write_json(
        out / "manifest.json",
        _manifest(
            "pretrain",
            cfg,
            {
                "dataset_digest": _dataset_digest(train, test),
                "checkpoint": str(checkpoint),
                "final_coarse_loss": result.final_loss,
                "epoch_losses": result.epoch_losses,
            },
        ),
    )
    loss_str = "n/a" if result.final_loss is None else f"{result.final_loss:.4f}"
    print(f"pretrained {cfg['pretrain.method']} on {len(sets)} sets; final loss {loss_str}")
    return 0


def cmd_evaluate(cfg, out, args):
    if not cfg["eval.checkpoint"]:
        raise ConfigError("eval.checkpoint must point at a pretrain checkpoint")
    encoder = load_encoder(cfg["eval.checkpoint"])
    train, test = _load_data(cfg)
    augmenter = None
    if any(arm.endswith("+la") for arm in cfg["eval.arms"]):
        corpus, _ = flatten_sets(_build_sets(cfg, train))
        augmenter = LatentAugmenter(
            n_prototypes=cfg["eval.la_prototypes"], random_state=cfg["eval.seed"]
        ).fit(embed_fine(encoder, corpus))
    report = evaluate_protocol(
        embedder(encoder),
        test,
        c_way=cfg["eval.c_way"],
        k_shot=cfg["eval.k_shot"],
        num_tasks=cfg["eval.num_tasks"],
        arms=tuple(cfg["eval.arms"]),
        q=cfg["eval.q"],
        seed=cfg["eval.seed"],
        augmenter=augmenter,
        la_count=cfg["eval.la_count"],
        lr_lambda=cfg["eval.lr_lambda"],
        rc_alpha=cfg["eval.rc_alpha"],
        threads=max(args.threads, cfg["eval.threads"]),
    )
    report.to_csv(out / "eval_tasks.csv")
    summary = report.summary()
    _write_json(out / "summary.json", summary)
    _write_json(
        out / "manifest.json",
        _manifest("evaluate", cfg, {"dataset_digest": _dataset_digest(train, test)}),
    )
    for arm, stats in summary.items():
        print(
            f"{arm}: F1 {stats['mean_f1']:.4f} +/- {stats['ci95']:.4f}  "
            f"ACC {stats['mean_acc']:.4f} +/- {stats['ci95_acc']:.4f}"
        )
    return 0


def _risk_config(cfg):
    return RiskExperimentConfig(
        num_super=cfg["risk.num_super"],
        fine_per_super=cfg["risk.fine_per_super"],
        per_class_train=cfg["risk.per_class_train"],
        per_class_test=cfg["risk.per_class_test"],
        dim=cfg["risk.dim"],
        sigma_fine=cfg["risk.sigma_fine"],
        sigma_super=cfg["risk.sigma_super"],
        task=cfg["risk.task"],
        set_size=(cfg["risk.set_min"], cfg["risk.set_max"]),
        m0=cfg["risk.m0"],
        c_way=cfg["risk.c_way"],
        q=cfg["risk.q"],
        num_tasks=cfg["risk.num_tasks"],
        epochs=cfg["risk.epochs"],
        batch_size=cfg["risk.batch_size"],
        lr=cfg["risk.lr"],
        hidden_dims=tuple(cfg["risk.hidden_dims"]),
        embed_dim=cfg["risk.embed_dim"],
        aggregator_hidden=cfg["risk.aggregator_hidden"],
    )


def cmd_risk_curve(cfg, out, args):
    rc = _risk_config(cfg)
    growth = cfg["risk.growth"]
    curves = [
        run_risk_experiment(growth, cfg["risk.n_grid"], rc, seed=cfg["risk.seed"] + r, threads=args.threads)
        for r in range(cfg["risk.replicates"])
    ]
    lines = ["n,m,error,replicate,growth"]
    for r, curve in enumerate(curves):
        for n, m, err in curve.points:
            lines.append(f"{n},{m},{err!r},{r},{growth}")
    (out / "risk_curve.csv").write_text("\n".join(lines) + "\n")
    gammas = [c.gamma for c in curves]
    summary = {
        "growth": growth,
        "gamma_mean": float(np.mean(gammas)),
        "replicates": [
            {
                "gamma": c.gamma,
                "log_c": c.log_c,
                "residual_rms": c.residual_rms,
                "points": [list(p) for p in c.points],
            }
            for c in curves
        ],
    }
    _write_json(out / "summary.json", summary)
    _write_json(out / "manifest.json", _manifest("risk-curve", cfg))
    print(f"{growth} growth: gamma = {summary['gamma_mean']:.3f} over {len(curves)} replicates")
    return 0


def cmd_diagnose(cfg, out, args):
    train, test = _load_data(cfg)
    seed = cfg["diagnose.seed"]
    rng = np.random.default_rng(seed)

    # Two coarse-pretrained encoders with their trained set heads.
    results = []
    for offset in (0, 1):
        run_cfg = dict(cfg)
        run_cfg["pretrain.seed"] = cfg["pretrain.seed"] + offset
        results.append(_pretrain_from_config(run_cfg, train)[0])
    if any(r.aggregator is None for r in results):
        raise ConfigError("diagnose needs a set-level pretrain.method (facile_fsp/facile_supcon)")
    set_models = [SetModel(r.encoder, r.aggregator) for r in results]

    # A shared fine predictor with a per-example cross-entropy loss.
    z_fit = embed_fine(results[0].encoder, train.features)
    predictor = LogisticRegressionClassifier(lam=cfg["predictor.regularization"])
    predictor.fit(z_fit, train.fine_labels)

    def fine_loss(z_row, y):
        probs = predictor.predict_proba(z_row[None, :])[0]
        cls = int(np.searchsorted(predictor.classes_, y))
        return float(-np.log(max(probs[cls], 1e-300)))

    lo, hi = cfg["sets.size_min"], cfg["sets.size_max"]
    pairs = []
    for _ in range(cfg["diagnose.num_pairs"]):
        a = int(rng.integers(lo, hi + 1))
        idx = rng.integers(0, len(test), size=a)
        member = int(rng.integers(0, a))
        pairs.append((test.features[idx], member, int(test.fine_labels[idx[member]])))
    lipschitz = estimate_relative_lipschitz(
        results[0].encoder,
        results[1].encoder,
        fine_loss,
        set_models[0],
        set_models[1],
        pairs,
        tol=cfg["diagnose.tol"],
    )

    # Central condition over a family of shrunken fine predictors.
    z_eval = embed_fine(results[0].encoder, test.features)
    yz = test.fine_labels

    def per_example_losses(clf):
        probs = clf.predict_proba(z_eval)
        cols = np.searchsorted(clf.classes_, yz)
        return -np.log(np.maximum(probs[np.arange(len(yz)), cols], 1e-300))

    f_star = LogisticRegressionClassifier(lam=1.0).fit(z_fit, train.fine_labels)
    candidates = [f_star] + [
        LogisticRegressionClassifier(lam=lam).fit(z_fit, train.fine_labels) for lam in (10.0, 100.0)
    ]
    central = estimate_central_condition(
        per_example_losses(f_star),
        [per_example_losses(c) for c in candidates],
        eta=cfg["diagnose.eta"],
    )

    doc = {
        "preamble": (
            "Empirical estimates only. The Lipschitz number is a lower-bound "
            "surrogate: trained set heads stand in for the (uncomputable) "
            "risk-minimizing heads. Rate exponents and parameter-class "
            "constants from the excess-risk bound are theory-side quantities "
            "with no empirical analogue and are intentionally not computed."
        ),
        "central_condition": {
            "eta": central.eta,
            "epsilon": central.epsilon,
            "candidate_values": central.candidate_values,
        },
        "relative_lipschitz": {
            "value": lipschitz.value,
            "sample_count": lipschitz.sample_count,
            "disagreement_count": lipschitz.disagreement_count,
            "violation_count": lipschitz.violation_count,
            "tol": lipschitz.tol,
        },
    }
    _write_json(out / "diagnostics.json", doc)
    _write_json(out / "manifest.json", _manifest("diagnose", cfg))
    lip = "absent" if lipschitz.value is None else f"{lipschitz.value:.4f}"
    print(f"central-condition epsilon = {central.epsilon:.4f}; Lipschitz surrogate = {lip}")
    return 0


def cmd_selftest(cfg, out, args):
    from .selftest import run_selftest

    failures = run_selftest()
    return 0 if failures == 0 else 2


def cli_main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    handlers = {
        "gen-data": cmd_gen_data,
        "pretrain": cmd_pretrain,
        "evaluate": cmd_evaluate,
        "risk-curve": cmd_risk_curve,
        "diagnose": cmd_diagnose,
        "selftest": cmd_selftest,
    }
    try:
        cfg = load_config(args.config, seed=args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return handlers[args.command](cfg, out, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
