"""Empirical counterparts of the theory: log-linear risk curves over the
fine-label budget, the exponential-moment (central) condition, and the
relative-Lipschitz link between coarse-task agreement and downstream loss.

Rate exponents and parameter-class constants from the excess-risk bound have
no empirical analogue and deliberately stay out of code; reports label the
Lipschitz number a lower-bound surrogate because the exact minimizing set
heads are not computable.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .datasets import (
    HierarchySpec,
    build_most_frequent_sets,
    build_unique_count_sets,
    gen_synthetic_hierarchy,
    split_per_class,
)
from .errors import ConfigError, ContractError, DomainError
from .fewshot import evaluate_protocol
from .models import AggregatorConfig, EncoderConfig
from .pipeline import PretrainSpec, embedder, pretrain_coarse

GROWTHS = ("linear", "quadratic", "constant")


@dataclass
class RiskCurve:
    """Error-vs-n points with a power-law fit: log error = log_c - gamma * log n."""

    points: list = field(default_factory=list)  # (n, m, error)
    gamma: float | None = None
    log_c: float | None = None
    residual_rms: float | None = None

    def fitted(self):
        return self.gamma is not None


def fit_risk_curve(points) -> RiskCurve:
    """Least squares on (log n, log error); gamma > 0 means error shrinks with n."""
    points = [(int(n), int(m), float(e)) for n, m, e in points]
    if len(points) < 3:
        raise ContractError(f"need >= 3 points to fit, got {len(points)}")
    errors = np.array([e for _, _, e in points])
    if np.any(errors <= 0):
        raise DomainError("risk-curve errors must be positive (log undefined)")
    x = np.log([n for n, _, _ in points])
    y = np.log(errors)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    return RiskCurve(
        points=points,
        gamma=float(-slope),
        log_c=float(intercept),
        residual_rms=float(np.sqrt(np.mean(resid**2))),
    )


@dataclass(frozen=True)
class RiskExperimentConfig:
    """Desk-scale settings for one risk-curve run on the synthetic hierarchy."""

    num_super: int = 4
    fine_per_super: int = 4
    per_class_train: int = 60
    per_class_test: int = 30
    dim: int = 8
    sigma_fine: float = 1.0
    sigma_super: float = 6.0
    task: str = "most_frequent"  # most_frequent | unique_count
    set_size: tuple = (2, 4)
    m0: int = 10
    c_way: int = 5
    q: int = 15
    num_tasks: int = 50
    epochs: int = 8
    batch_size: int = 16
    lr: float = 0.05
    hidden_dims: tuple = (32,)
    embed_dim: int = 16
    aggregator_hidden: int = 32

    def __post_init__(self):
        if self.task not in ("most_frequent", "unique_count"):
            raise ConfigError(f"unknown coarse task {self.task!r}")
        if self.num_super * self.fine_per_super < self.c_way:
            raise ConfigError("hierarchy has fewer fine classes than c_way")


def _coarse_label_count(growth, m0, n):
    if growth == "linear":
        return m0 * n
    if growth == "quadratic":
        return m0 * n * n
    if growth == "constant":
        return m0
    raise ConfigError(f"unknown growth regime {growth!r}")


def run_risk_experiment(growth, n_grid, config: RiskExperimentConfig, seed=0, threads=1) -> RiskCurve:
    """Pretrain at m(n) coarse sets for each n, score 1 - mean ACC, fit the curve.

    n is the total fine-label budget; each task uses n / c_way supports per
    class. Errors are floored at half a query count so a perfect desk-scale
    run cannot produce log(0).
    """
    if growth not in GROWTHS:
        raise ConfigError(f"growth must be one of {GROWTHS}, got {growth!r}")
    n_grid = [int(n) for n in n_grid]
    if sorted(n_grid) != n_grid:
        raise ConfigError("n_grid must be ascending")
    for n in n_grid:
        if n % config.c_way:
            raise ConfigError(f"n={n} is not divisible by c_way={config.c_way}")
    spec = HierarchySpec(config.num_super, config.fine_per_super)
    data = gen_synthetic_hierarchy(
        spec,
        config.per_class_train + config.per_class_test,
        config.dim,
        config.sigma_fine,
        config.sigma_super,
        seed=seed,
    )
    train, test = split_per_class(data, config.per_class_train)

    def run_point(i):
        n = n_grid[i]
        m = _coarse_label_count(growth, config.m0, n)
        point_seed = (seed << 8) ^ (i + 1)
        build = build_most_frequent_sets if config.task == "most_frequent" else build_unique_count_sets
        sets = build(train, m, size_range=config.set_size, seed=point_seed)
        result = pretrain_coarse(
            PretrainSpec(
                method="facile_fsp",
                loss="ce" if config.task == "most_frequent" else "l1",
                epochs=config.epochs,
                batch_size=config.batch_size,
                lr=config.lr,
                seed=point_seed,
            ),
            sets,
            EncoderConfig(config.dim, config.hidden_dims, config.embed_dim),
            AggregatorConfig("deepset_mean", hidden_dim=config.aggregator_hidden),
        )
        report = evaluate_protocol(
            embedder(result.encoder),
            test,
            c_way=config.c_way,
            k_shot=n // config.c_way,
            num_tasks=config.num_tasks,
            arms=("nc",),
            q=config.q,
            seed=point_seed,
        )
        acc = report.summary()["nc"]["mean_acc"]
        floor = 0.5 / (config.num_tasks * config.c_way * config.q)
        return n, m, max(1.0 - acc, floor)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            points = list(pool.map(run_point, range(len(n_grid))))
    else:
        points = [run_point(i) for i in range(len(n_grid))]
    return fit_risk_curve(points)


# ---------------------------------------------------------------------------
# central condition


@dataclass
class CentralConditionEstimate:
    eta: float
    epsilon: float
    candidate_values: list


def _log_mean_exp(v):
    m = v.max()
    return m + np.log(np.mean(np.exp(v - m)))


def estimate_central_condition(losses_fstar, losses_candidates, eta) -> CentralConditionEstimate:
    """epsilon-hat = max over candidates f of (1/eta) log E[exp(eta (l_f* - l_f))].

    Computed with max-subtraction; including f* itself among the candidates
    pins the estimate at >= 0.
    """
    if eta <= 0:
        raise ContractError(f"eta must be positive, got {eta}")
    losses_fstar = np.asarray(losses_fstar, dtype=np.float64)
    if losses_fstar.ndim != 1 or losses_fstar.size == 0:
        raise ContractError("losses_fstar must be a nonempty 1-D array")
    if len(losses_candidates) == 0:
        raise ContractError("no candidate models supplied")
    values = []
    for i, lf in enumerate(losses_candidates):
        lf = np.asarray(lf, dtype=np.float64)
        if lf.shape != losses_fstar.shape:
            raise ContractError(
                f"candidate {i} has {lf.shape} losses, expected {losses_fstar.shape}"
            )
        values.append(float(_log_mean_exp(eta * (losses_fstar - lf)) / eta))
    return CentralConditionEstimate(eta=eta, epsilon=max(values), candidate_values=values)


# ---------------------------------------------------------------------------
# relative Lipschitzness


@dataclass
class LipschitzEstimate:
    """Max downstream-loss gap over pairs whose set predictions disagree.

    ``value`` is None when no pair disagrees (the ratio is undefined, not
    zero); pairs that agree but move the downstream loss more than tol count
    as violations of the Lipschitz relation.
    """

    value: float | None
    sample_count: int
    disagreement_count: int
    violation_count: int
    tol: float


def relative_lipschitz_from_losses(disagree, loss_a, loss_b, tol=1e-9) -> LipschitzEstimate:
    disagree = np.asarray(disagree, dtype=bool)
    gaps = np.abs(np.asarray(loss_a, dtype=np.float64) - np.asarray(loss_b, dtype=np.float64))
    if disagree.shape != gaps.shape:
        raise ContractError(f"shape mismatch: {disagree.shape} vs {gaps.shape}")
    value = float(gaps[disagree].max()) if disagree.any() else None
    violations = int(np.count_nonzero(~disagree & (gaps > tol)))
    return LipschitzEstimate(
        value=value,
        sample_count=int(disagree.size),
        disagreement_count=int(disagree.sum()),
        violation_count=violations,
        tol=tol,
    )


def estimate_relative_lipschitz(
    encoder_a,
    encoder_b,
    fine_loss,
    set_model_a,
    set_model_b,
    pairs,
    tol=1e-9,
) -> LipschitzEstimate:
    """Empirical surrogate of the relative-Lipschitz bound on paired samples.

    Each pair is (set features, member index, fine label); the member's
    downstream loss is compared across the two encoders, gated by whether the
    two trained set heads disagree on the set (categorical 0/1 coarse loss).
    ``fine_loss(z_row, y)`` scores one embedded instance.
    """
    from .pipeline import embed_fine  # local import avoids cycle at module load

    if len(pairs) == 0:
        raise ContractError("no (set, instance, label) pairs supplied")
    disagree = np.zeros(len(pairs), dtype=bool)
    loss_a = np.zeros(len(pairs))
    loss_b = np.zeros(len(pairs))
    for i, (set_features, member_index, y) in enumerate(pairs):
        set_features = np.asarray(set_features, dtype=np.float64)
        if not 0 <= member_index < set_features.shape[0]:
            raise ContractError(f"pair {i}: member index {member_index} outside the set")
        wa = int(np.argmax(set_model_a.forward_set(set_features).data))
        wb = int(np.argmax(set_model_b.forward_set(set_features).data))
        disagree[i] = wa != wb
        x = set_features[member_index : member_index + 1]
        loss_a[i] = fine_loss(embed_fine(encoder_a, x)[0], y)
        loss_b[i] = fine_loss(embed_fine(encoder_b, x)[0], y)
    return relative_lipschitz_from_losses(disagree, loss_a, loss_b, tol=tol)
