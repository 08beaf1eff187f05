"""Few-shot evaluation: frozen-feature classifiers, latent augmentation, and
the meta-task protocol (mean macro-F1 / accuracy with 95% confidence bands).

The classifiers follow the sklearn estimator contract (fit/predict,
get_params) so they drop into pipelines and grid searches, but their solvers
are local: nearest centroid, full-batch gradient descent with backtracking
for the logistic model, and a Cholesky solve for the ridge model.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from sklearn.base import BaseEstimator, ClassifierMixin

from .datasets import InstanceDataset, sample_meta_task
from .errors import ConfigError, ContractError
from .validation import check_X_y, check_array, check_fitted


class NearestCentroidClassifier(BaseEstimator, ClassifierMixin):
    """Class centroids in embedding space; ties go to the lowest class index."""

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_ = np.unique(y)
        self.centroids_ = np.stack([X[y == c].mean(axis=0) for c in self.classes_])
        return self

    def predict(self, X):
        check_fitted(self, "centroids_")
        X = check_array(X)
        d2 = ((X[:, None, :] - self.centroids_[None, :, :]) ** 2).sum(axis=-1)
        # argmin returns the first minimum; classes_ is sorted ascending.
        return self.classes_[np.argmin(d2, axis=1)]


class LogisticRegressionClassifier(BaseEstimator, ClassifierMixin):
    """Multinomial logistic regression with an unpenalized bias.

    Minimizes mean cross-entropy + (lam/2) * ||W||^2 by full-batch gradient
    descent with Armijo backtracking; stops when the gradient infinity-norm
    drops below tol. Non-convergence sets converged_ = False, not an error.
    """

    def __init__(self, lam=1.0, max_iter=200, tol=1e-6):
        self.lam = lam
        self.max_iter = max_iter
        self.tol = tol

    def _objective(self, X, onehot, W, b):
        logits = X @ W + b
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        ce = -(onehot * log_probs).sum(axis=1).mean()
        return ce + 0.5 * self.lam * (W * W).sum(), np.exp(log_probs)

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_ = np.unique(y)
        k = self.classes_.size
        if k < 2:
            raise ContractError("logistic regression needs at least 2 classes")
        n, d = X.shape
        onehot = np.zeros((n, k))
        onehot[np.arange(n), np.searchsorted(self.classes_, y)] = 1.0
        W = np.zeros((d, k))
        b = np.zeros(k)
        obj, probs = self._objective(X, onehot, W, b)
        self.converged_ = False
        self.n_iter_ = 0
        for it in range(self.max_iter):
            gw = X.T @ (probs - onehot) / n + self.lam * W
            gb = (probs - onehot).mean(axis=0)
            gnorm = max(np.abs(gw).max(), np.abs(gb).max())
            if gnorm < self.tol:
                self.converged_ = True
                break
            step = 1.0
            g2 = (gw * gw).sum() + (gb * gb).sum()
            for _ in range(60):
                new_obj, new_probs = self._objective(X, onehot, W - step * gw, b - step * gb)
                if new_obj <= obj - 1e-4 * step * g2:
                    break
                step *= 0.5
            W -= step * gw
            b -= step * gb
            obj, probs = new_obj, new_probs
            self.n_iter_ = it + 1
        self.coef_ = W
        self.intercept_ = b
        self.objective_ = obj
        return self

    def decision_function(self, X):
        check_fitted(self, "coef_")
        return check_array(X) @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        logits = self.decision_function(X)
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


class RidgeClassifier(BaseEstimator, ClassifierMixin):
    """One-vs-rest ridge regression onto +/-1 targets, solved by Cholesky.

    The bias enters as a column of ones excluded from the penalty.
    """

    def __init__(self, alpha=1.0):
        self.alpha = alpha

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_ = np.unique(y)
        if self.classes_.size < 2:
            raise ContractError("ridge classifier needs at least 2 classes")
        n, d = X.shape
        Xb = np.concatenate([X, np.ones((n, 1))], axis=1)
        targets = np.where(y[:, None] == self.classes_[None, :], 1.0, -1.0)
        penalty = np.eye(d + 1) * self.alpha
        penalty[d, d] = 0.0  # bias unpenalized
        gram = Xb.T @ Xb + penalty
        try:
            self.weights_ = cho_solve(cho_factor(gram), Xb.T @ targets)
        except np.linalg.LinAlgError as e:
            raise ContractError(f"ridge system not positive definite (alpha={self.alpha}): {e}")
        return self

    def decision_function(self, X):
        check_fitted(self, "weights_")
        X = check_array(X)
        Xb = np.concatenate([X, np.ones((X.shape[0], 1))], axis=1)
        return Xb @ self.weights_

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


@dataclass(frozen=True)
class FinePredictorSpec:
    kind: str = "nearest_centroid"  # nearest_centroid | logistic_regression | ridge
    regularization: float = 1.0
    latent_augmentation: bool = False
    la_count: int = 100

    def __post_init__(self):
        if self.kind not in ("nearest_centroid", "logistic_regression", "ridge"):
            raise ConfigError(f"unknown classifier kind {self.kind!r}")
        if self.regularization < 0:
            raise ConfigError("regularization must be >= 0")


def make_classifier(spec: FinePredictorSpec):
    if spec.kind == "nearest_centroid":
        return NearestCentroidClassifier()
    if spec.kind == "logistic_regression":
        return LogisticRegressionClassifier(lam=spec.regularization)
    return RidgeClassifier(alpha=spec.regularization)


# ---------------------------------------------------------------------------
# latent augmentation


@dataclass
class BaseDictionary:
    """Cluster prototypes with per-cluster covariances and cached Cholesky factors."""

    prototypes: np.ndarray  # (k, d)
    covariances: np.ndarray  # (k, d, d)
    cholesky: np.ndarray  # (k, d, d) lower factors of covariance + eps*I

    def nearest(self, z):
        return int(np.argmin(((self.prototypes - np.asarray(z)) ** 2).sum(axis=1)))


def _kmeans_pp(X, k, rng):
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(len(X))]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(len(X), p=d2 / total)
        else:
            idx = rng.integers(len(X))
        centers[i] = X[idx]
        d2 = np.minimum(d2, ((X - centers[i]) ** 2).sum(axis=1))
    return centers


def _lloyd(X, k, rng, max_iter, tol):
    centers = _kmeans_pp(X, k, rng)
    assign = None
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
        assign = np.argmin(d2, axis=1)
        new_centers = centers.copy()
        for j in range(k):
            members = X[assign == j]
            if len(members) == 0:
                # Reseed from the point farthest from its assigned centroid.
                farthest = np.argmax(d2[np.arange(len(X)), assign])
                new_centers[j] = X[farthest]
                assign[farthest] = j
            else:
                new_centers[j] = members.mean(axis=0)
        shift = np.linalg.norm(new_centers - centers, axis=1).max()
        centers = new_centers
        if shift < tol:
            break
    d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
    return centers, np.argmin(d2, axis=1)


class LatentAugmenter(BaseEstimator):
    """Additive Gaussian augmentation from a k-means base dictionary.

    Fit on pretraining-corpus embeddings; sampling adds noise drawn from the
    covariance of the cluster nearest to each query embedding.
    """

    def __init__(self, n_prototypes=16, max_iter=300, tol=1e-6, eps=1e-6, random_state=0):
        self.n_prototypes = n_prototypes
        self.max_iter = max_iter
        self.tol = tol
        self.eps = eps
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X)
        if X.shape[0] < self.n_prototypes:
            raise ContractError(
                f"need at least {self.n_prototypes} rows to build the dictionary, got {X.shape[0]}"
            )
        rng = np.random.default_rng(self.random_state)
        centers, assign = _lloyd(X, self.n_prototypes, rng, self.max_iter, self.tol)
        d = X.shape[1]
        covs = np.empty((self.n_prototypes, d, d))
        chols = np.empty_like(covs)
        for j in range(self.n_prototypes):
            members = X[assign == j]
            cov = np.cov(members.T, ddof=0) if len(members) > 1 else np.zeros((d, d))
            covs[j] = cov + self.eps * np.eye(d)
            chols[j] = np.linalg.cholesky(covs[j])
        self.dictionary_ = BaseDictionary(centers, covs, chols)
        return self

    def sample(self, z, count=100, rng=None):
        """``count`` draws of z + delta, delta ~ N(0, cov of the nearest cluster)."""
        check_fitted(self, "dictionary_")
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        z = np.asarray(z, dtype=np.float64)
        L = self.dictionary_.cholesky[self.dictionary_.nearest(z)]
        eta = rng.standard_normal((count, z.size))
        return z[None, :] + eta @ L.T

    def expand(self, X, y, count=100, rng=None):
        """Originals plus ``count`` augmented rows per original (labels copied)."""
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        X = check_array(X)
        y = np.asarray(y)
        blocks = [X]
        labels = [y]
        for i in range(X.shape[0]):
            blocks.append(self.sample(X[i], count=count, rng=rng))
            labels.append(np.full(count, y[i]))
        return np.concatenate(blocks), np.concatenate(labels)


# ---------------------------------------------------------------------------
# metrics and the evaluation protocol


def accuracy(preds, labels):
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    return float((preds == labels).mean())


def macro_f1(preds, labels, num_classes):
    """Unweighted mean of per-class F1; classes with no true instances are skipped."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ContractError(f"preds/labels length mismatch: {preds.shape} vs {labels.shape}")
    scores = []
    for c in range(num_classes):
        support = (labels == c).sum()
        if support == 0:
            continue
        tp = ((preds == c) & (labels == c)).sum()
        denom = 2 * tp + ((preds == c) & (labels != c)).sum() + ((preds != c) & (labels == c)).sum()
        scores.append(2.0 * tp / denom if denom > 0 else 0.0)
    return float(np.mean(scores))


def _ci95(scores):
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size < 2:
        return 0.0
    return float(1.96 * scores.std(ddof=1) / np.sqrt(scores.size))


@dataclass
class EvalReport:
    """Per-task scores for each classifier arm plus aggregate statistics."""

    c_way: int
    k_shot: int
    num_tasks: int
    rows: list = field(default_factory=list)  # (task_id, arm, la_flag, f1, acc)

    def scores(self, arm, metric):
        col = 3 if metric == "f1" else 4
        return np.array([r[col] for r in self.rows if r[1] == arm])

    def arms(self):
        seen = []
        for r in self.rows:
            if r[1] not in seen:
                seen.append(r[1])
        return seen

    def summary(self):
        out = {}
        for arm in self.arms():
            f1 = self.scores(arm, "f1")
            acc = self.scores(arm, "acc")
            out[arm] = {
                "mean_f1": float(f1.mean()),
                "ci95": _ci95(f1),
                "mean_acc": float(acc.mean()),
                "ci95_acc": _ci95(acc),
            }
        return out

    def to_csv(self, path):
        lines = ["task_id,classifier,la_flag,f1,acc"]
        for task_id, arm, la_flag, f1, acc in self.rows:
            base = arm.replace("+la", "")
            lines.append(f"{task_id},{base},{int(la_flag)},{f1!r},{acc!r}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


ARM_KINDS = {"nc": "nearest_centroid", "lr": "logistic_regression", "rc": "ridge"}


def parse_arm(arm):
    """'lr+la' -> (classifier kind, la flag)."""
    base, _, suffix = arm.partition("+")
    if base not in ARM_KINDS or (suffix and suffix != "la"):
        raise ConfigError(f"unknown classifier arm {arm!r}")
    return ARM_KINDS[base], suffix == "la"


def evaluate_protocol(
    transform,
    data: InstanceDataset,
    c_way=5,
    k_shot=5,
    num_tasks=1000,
    arms=("nc", "lr", "rc"),
    q=15,
    seed=0,
    augmenter: LatentAugmenter | None = None,
    la_count=100,
    lr_lambda=1.0,
    rc_alpha=1.0,
    threads=1,
) -> EvalReport:
    """Score classifier arms over ``num_tasks`` sampled meta-tasks.

    ``transform`` maps raw features to (l2-normalized) embeddings; it is
    applied once to the whole dataset, then tasks index into the embedded
    rows. Per-task seeds are seed XOR task index, so any execution order
    (or thread count) produces the identical report.
    """
    parsed = [(arm, *parse_arm(arm)) for arm in arms]
    if any(la for _, _, la in parsed) and augmenter is None:
        raise ConfigError("latent-augmentation arm requested without a fitted dictionary")
    embedded = InstanceDataset(
        transform(data.features), data.fine_labels, data.super_labels
    )

    def run_task(t):
        task = sample_meta_task(embedded, c_way, k_shot, q=q, seed=seed ^ t)
        task_rows = []
        for arm, kind, la in parsed:
            spec = FinePredictorSpec(
                kind=kind,
                regularization=lr_lambda if kind == "logistic_regression" else rc_alpha,
            )
            clf = make_classifier(spec)
            sx, sy = task.support_x, task.support_y
            if la:
                sx, sy = augmenter.expand(sx, sy, count=la_count, rng=np.random.default_rng(seed ^ t))
            clf.fit(sx, sy)
            preds = clf.predict(task.query_x)
            task_rows.append(
                (t, arm, la, macro_f1(preds, task.query_y, c_way), accuracy(preds, task.query_y))
            )
        return task_rows

    report = EvalReport(c_way=c_way, k_shot=k_shot, num_tasks=num_tasks)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for task_rows in pool.map(run_task, range(num_tasks)):
                report.rows.extend(task_rows)
    else:
        for t in range(num_tasks):
            report.rows.extend(run_task(t))
    return report
