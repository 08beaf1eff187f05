"""Two-stage pipeline: pretrain an instance encoder from set-level coarse
labels, then fit and apply few-shot fine-grained classifiers on its frozen
embeddings.

Pretraining methods under one interface:

- facile_fsp:    sets -> encoder -> aggregator, cross-entropy or L1 on the set label
- facile_supcon: sets -> encoder -> aggregator -> projection, supervised contrastive
- fsp_patch:     instances inherit their set's label, instance-level cross-entropy
- simclr:        instance-level contrastive on two augmented views, labels ignored
- simsiam:       instance-level non-contrastive with stop-gradient, labels ignored
- random_init:   untrained control arm

Fine labels never enter pretraining; fine fitting never touches encoder
parameters (the encoder is embedded once, as a frozen snapshot).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import tensor as T
from .datasets import CoarseSetExample, augment_simple, augment_strong
from .errors import ConfigError, ContractError, DivergenceError
from .fewshot import FinePredictorSpec, LatentAugmenter, make_classifier
from .losses import ContrastiveBatch, cross_entropy_loss, l1_loss, simclr_loss, simsiam_loss, supcon_loss
from .models import (
    AggregatorConfig,
    Encoder,
    EncoderConfig,
    ProjectionConfig,
    ProjectionHead,
    SetModel,
    make_aggregator,
)
from .optim import Sgd, SgdConfig
from .validation import check_array

METHODS = ("facile_fsp", "facile_supcon", "fsp_patch", "simclr", "simsiam", "random_init")
_METHOD_LOSSES = {
    "facile_fsp": ("ce", "l1"),
    "facile_supcon": ("supcon",),
    "fsp_patch": ("ce",),
    "simclr": ("simclr",),
    "simsiam": ("simsiam",),
    "random_init": ("none",),
}
AUGMENTATIONS = ("none", "noise", "simple", "strong")


@dataclass(frozen=True)
class PretrainSpec:
    method: str = "facile_fsp"
    loss: str = "ce"
    epochs: int = 50
    batch_size: int = 16
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    augmentation: str = "none"
    noise_sigma: float = 0.1
    temperature: float = 0.07
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown pretraining method {self.method!r}")
        if self.loss not in _METHOD_LOSSES[self.method]:
            raise ConfigError(
                f"method {self.method!r} works with losses {_METHOD_LOSSES[self.method]}, "
                f"got {self.loss!r}"
            )
        if self.augmentation not in AUGMENTATIONS:
            raise ConfigError(f"unknown augmentation policy {self.augmentation!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class PretrainResult:
    encoder: Encoder
    aggregator: object = None
    projection: object = None
    spec: PretrainSpec | None = None
    epoch_losses: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)

    @property
    def initial_loss(self):
        return self.step_losses[0] if self.step_losses else None

    @property
    def final_loss(self):
        return self.epoch_losses[-1] if self.epoch_losses else None


def _is_set_data(data):
    return isinstance(data, (list, tuple)) and len(data) > 0 and isinstance(data[0], CoarseSetExample)


def _instance_data(data, method):
    """Instance-level methods take (features, labels) or bare features."""
    if _is_set_data(data):
        raise ConfigError(f"method {method!r} needs instance-level data, got set examples")
    if isinstance(data, tuple) and len(data) == 2:
        feats, labels = data
        return check_array(np.asarray(feats), "features"), np.asarray(labels, dtype=np.int64)
    return check_array(np.asarray(data), "features"), None


def _augment(feats, spec: PretrainSpec, image_shape, rng):
    if spec.augmentation == "none":
        return feats
    if spec.augmentation == "noise":
        return feats + rng.normal(0.0, spec.noise_sigma, size=feats.shape)
    if image_shape is None:
        raise ConfigError(f"augmentation {spec.augmentation!r} needs image-shaped data")
    h, w, c = image_shape
    fn = augment_simple if spec.augmentation == "simple" else augment_strong
    return np.stack([fn(row, h, w, c, rng) for row in feats])


def _check_finite(loss_value, step):
    if not np.isfinite(loss_value):
        raise DivergenceError(step, loss_value)


class _TrainLoop:
    """Shared minibatch scaffolding: shuffling, cosine-schedule SGD, loss history."""

    def __init__(self, spec, params, num_examples):
        self.spec = spec
        self.steps_per_epoch = max(1, -(-num_examples // spec.batch_size))
        total = max(1, spec.epochs * self.steps_per_epoch)
        self.opt = Sgd(
            params,
            SgdConfig(
                lr0=spec.lr,
                momentum=spec.momentum,
                weight_decay=spec.weight_decay,
                total_steps=total,
            ),
        )
        self.rng = np.random.default_rng(spec.seed)
        self.num_examples = num_examples
        self.step_losses = []
        self.epoch_losses = []

    def run(self, batch_loss_fn):
        for _ in range(self.spec.epochs):
            order = self.rng.permutation(self.num_examples)
            epoch = []
            for lo in range(0, self.num_examples, self.spec.batch_size):
                idx = order[lo : lo + self.spec.batch_size]
                with T.Tape():
                    loss = batch_loss_fn(idx, self.rng)
                    value = float(loss.data)
                    _check_finite(value, len(self.step_losses))
                    T.backward(loss)
                self.opt.step()
                self.opt.zero_grad()
                self.step_losses.append(value)
                epoch.append(value)
            self.epoch_losses.append(float(np.mean(epoch)))


def pretrain_coarse(
    spec: PretrainSpec,
    data,
    encoder_config: EncoderConfig,
    aggregator_config: AggregatorConfig | None = None,
    projection_config: ProjectionConfig | None = None,
    image_shape=None,
) -> PretrainResult:
    """Train (or initialize) the instance feature map from coarse data.

    Set-level methods take a list of CoarseSetExample; instance-level methods
    take (features, labels) — labels are the inherited set labels for
    fsp_patch and are ignored by the self-supervised methods. Only the
    encoder matters downstream; auxiliary heads ride along in the result.
    """
    encoder = Encoder(encoder_config, seed=spec.seed)
    if spec.method == "random_init":
        return PretrainResult(encoder=encoder, spec=spec)

    if spec.method in ("facile_fsp", "facile_supcon"):
        if not _is_set_data(data):
            raise ConfigError(f"method {spec.method!r} needs a list of CoarseSetExample")
        return _pretrain_on_sets(spec, data, encoder, aggregator_config, projection_config, image_shape)
    feats, labels = _instance_data(data, spec.method)
    if spec.method == "fsp_patch":
        if labels is None:
            raise ConfigError("fsp_patch needs (features, set-inherited labels)")
        return _pretrain_fsp_patch(spec, feats, labels, encoder, image_shape)
    return _pretrain_self_supervised(spec, feats, encoder, projection_config, image_shape)


def _pretrain_on_sets(spec, sets, encoder, aggregator_config, projection_config, image_shape):
    labels = np.array([s.label for s in sets], dtype=np.int64)
    if aggregator_config is None:
        aggregator_config = AggregatorConfig("deepset_mean")
    if spec.loss == "l1":
        out_dim = 1
    elif spec.loss == "ce":
        out_dim = int(labels.max()) + 1
    else:
        out_dim = aggregator_config.output_dim
    aggregator_config = dataclasses.replace(aggregator_config, output_dim=out_dim)
    aggregator = make_aggregator(aggregator_config, encoder.embed_dim, seed=spec.seed + 1)
    model = SetModel(encoder, aggregator)

    projection = None
    if spec.loss == "supcon":
        projection_config = projection_config or ProjectionConfig()
        projection = ProjectionHead(projection_config, out_dim, seed=spec.seed + 2)

    params = model.params()
    if projection is not None:
        params.update(projection.params())
    loop = _TrainLoop(spec, params, len(sets))

    def set_views(idx, rng, views):
        batch = []
        for i in idx:
            for _ in range(views):
                feats = _augment(sets[i].features, spec, image_shape, rng)
                batch.append(feats)
        return batch

    if spec.loss == "supcon":

        def batch_loss(idx, rng):
            outputs = model.forward_sets(set_views(idx, rng, views=2))
            z = projection.forward(outputs)
            batch = ContrastiveBatch(z, labels=labels[idx], temperature=spec.temperature)
            return supcon_loss(batch)

    elif spec.loss == "l1":

        def batch_loss(idx, rng):
            outputs = model.forward_sets(set_views(idx, rng, views=1))
            preds = T.reshape(outputs, (len(idx),))
            return l1_loss(preds, labels[idx].astype(np.float64))

    else:

        def batch_loss(idx, rng):
            logits = model.forward_sets(set_views(idx, rng, views=1))
            return cross_entropy_loss(logits, labels[idx])

    loop.run(batch_loss)
    return PretrainResult(
        encoder=encoder,
        aggregator=aggregator,
        projection=projection,
        spec=spec,
        epoch_losses=loop.epoch_losses,
        step_losses=loop.step_losses,
    )


def _pretrain_fsp_patch(spec, feats, labels, encoder, image_shape):
    num_classes = int(labels.max()) + 1
    head = Encoder(
        EncoderConfig(input_dim=encoder.embed_dim, hidden_dims=(), embed_dim=num_classes),
        seed=spec.seed + 1,
    )
    params = {**encoder.params(), **{f"head.{k}": v for k, v in head.params().items()}}
    loop = _TrainLoop(spec, params, feats.shape[0])

    def batch_loss(idx, rng):
        x = _augment(feats[idx], spec, image_shape, rng)
        logits = head.forward(encoder.forward(x))
        return cross_entropy_loss(logits, labels[idx])

    loop.run(batch_loss)
    return PretrainResult(
        encoder=encoder,
        aggregator=head,
        spec=spec,
        epoch_losses=loop.epoch_losses,
        step_losses=loop.step_losses,
    )


def _pretrain_self_supervised(spec, feats, encoder, projection_config, image_shape):
    projection_config = projection_config or ProjectionConfig()
    projection = ProjectionHead(projection_config, encoder.embed_dim, seed=spec.seed + 2)
    predictor = None
    if spec.method == "simsiam":
        predictor = Encoder(
            EncoderConfig(
                input_dim=projection_config.out_dim,
                hidden_dims=(projection_config.hidden_dim,),
                embed_dim=projection_config.out_dim,
            ),
            seed=spec.seed + 3,
        )
    params = {**encoder.params(), **projection.params()}
    if predictor is not None:
        params.update({f"pred.{k}": v for k, v in predictor.params().items()})
    loop = _TrainLoop(spec, params, feats.shape[0])

    def two_views(idx, rng):
        # Interleave so rows (2k, 2k+1) are the two views of source k.
        v1 = _augment(feats[idx], spec, image_shape, rng)
        v2 = _augment(feats[idx], spec, image_shape, rng)
        stacked = np.empty((2 * len(idx), feats.shape[1]))
        stacked[0::2] = v1
        stacked[1::2] = v2
        return stacked

    if spec.method == "simclr":

        def batch_loss(idx, rng):
            z = projection.forward(encoder.forward(two_views(idx, rng)))
            return simclr_loss(ContrastiveBatch(z, temperature=spec.temperature))

    else:

        def batch_loss(idx, rng):
            z = projection.forward(encoder.forward(two_views(idx, rng)))
            # Views are interleaved; constant selectors split even/odd rows.
            n = z.shape[0] // 2
            sel1 = np.zeros((n, z.shape[0]))
            sel2 = np.zeros((n, z.shape[0]))
            sel1[np.arange(n), 2 * np.arange(n)] = 1.0
            sel2[np.arange(n), 2 * np.arange(n) + 1] = 1.0
            za = T.matmul(T.Tensor(sel1), z)
            zb = T.matmul(T.Tensor(sel2), z)
            p1 = predictor.forward(za)
            p2 = predictor.forward(zb)
            return simsiam_loss(p1, za, p2, zb)

    loop.run(batch_loss)
    return PretrainResult(
        encoder=encoder,
        projection=projection,
        aggregator=predictor,
        spec=spec,
        epoch_losses=loop.epoch_losses,
        step_losses=loop.step_losses,
    )


# ---------------------------------------------------------------------------
# downstream stage


def embed_fine(encoder: Encoder, features) -> np.ndarray:
    """Frozen-encoder embeddings, rows l2-normalized, order preserved."""
    features = check_array(np.asarray(features), "features")
    with T.no_grad():
        z = T.l2_normalize(encoder.forward(features), axis=-1, eps=1e-12)
    return z.data


def embedder(encoder: Encoder):
    """Callable view of ``embed_fine`` for the evaluation protocol."""
    return lambda X: embed_fine(encoder, X)


def fit_fine(spec: FinePredictorSpec, support_z, support_y, augmenter: LatentAugmenter | None = None, rng=None):
    """Fit the fine-grained classifier on embedded supports (LA-expanded if asked)."""
    if spec.latent_augmentation:
        if augmenter is None:
            raise ConfigError("latent augmentation requested without a fitted dictionary")
        support_z, support_y = augmenter.expand(support_z, support_y, count=spec.la_count, rng=rng)
    return make_classifier(spec).fit(support_z, support_y)


def predict(classifier, encoder: Encoder, query_features):
    """Labels of f(normalize(e(x))) for each query row."""
    return classifier.predict(embed_fine(encoder, query_features))


# ---------------------------------------------------------------------------
# sklearn-style wrapper


class SetSupervisedEncoder(BaseEstimator, TransformerMixin):
    """Estimator facade: fit on coarse data, transform instances to embeddings.

    fit(X) accepts a list of CoarseSetExample for set-level methods or a
    (features, labels) tuple / bare feature matrix for instance-level ones.
    """

    def __init__(
        self,
        method="facile_fsp",
        loss="ce",
        epochs=50,
        batch_size=16,
        lr=0.01,
        momentum=0.9,
        weight_decay=1e-4,
        augmentation="none",
        noise_sigma=0.1,
        temperature=0.07,
        hidden_dims=(64, 32),
        embed_dim=32,
        aggregator="deepset_mean",
        aggregator_hidden=64,
        heads=4,
        inducing_points=3,
        projection_hidden=64,
        projection_dim=32,
        seed=0,
    ):
        self.method = method
        self.loss = loss
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.augmentation = augmentation
        self.noise_sigma = noise_sigma
        self.temperature = temperature
        self.hidden_dims = hidden_dims
        self.embed_dim = embed_dim
        self.aggregator = aggregator
        self.aggregator_hidden = aggregator_hidden
        self.heads = heads
        self.inducing_points = inducing_points
        self.projection_hidden = projection_hidden
        self.projection_dim = projection_dim
        self.seed = seed

    def _spec(self):
        return PretrainSpec(
            method=self.method,
            loss=self.loss,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            augmentation=self.augmentation,
            noise_sigma=self.noise_sigma,
            temperature=self.temperature,
            seed=self.seed,
        )

    def fit(self, X, y=None, image_shape=None):
        if _is_set_data(X):
            input_dim = X[0].features.shape[1]
            data = X
        else:
            data = (X, y) if y is not None else X
            input_dim = np.asarray(X).shape[1]
        result = pretrain_coarse(
            self._spec(),
            data,
            EncoderConfig(input_dim=input_dim, hidden_dims=tuple(self.hidden_dims), embed_dim=self.embed_dim),
            AggregatorConfig(
                kind=self.aggregator,
                hidden_dim=self.aggregator_hidden,
                output_dim=self.projection_dim,
                heads=self.heads,
                inducing_points=self.inducing_points,
            ),
            ProjectionConfig(hidden_dim=self.projection_hidden, out_dim=self.projection_dim),
            image_shape=image_shape,
        )
        self.result_ = result
        self.encoder_ = result.encoder
        return self

    def transform(self, X):
        from .validation import check_fitted

        check_fitted(self, "encoder_")
        return embed_fine(self.encoder_, X)
