"""Instance encoders, permutation-invariant set aggregators, projection heads.

All models hold their parameters as named gradient-tracked tensors and expose
``params()`` for the optimizer and checkpointing. Set aggregators consume a
variable number of instance embeddings (any size >= 1) and are invariant to
member order by construction.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import load_params, save_params
from .errors import ConfigError, ContractError, FormatError
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden_dims: tuple = (256, 128)
    embed_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        if self.input_dim < 1 or self.embed_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ConfigError(f"encoder dims must be positive: {self}")


AGGREGATOR_KINDS = ("deepset_mean", "deepset_sum", "deepset_max", "attn_mil", "set_transformer")


@dataclass(frozen=True)
class AggregatorConfig:
    kind: str
    hidden_dim: int = 64
    output_dim: int = 1
    heads: int = 4  # set_transformer only
    inducing_points: int = 3  # set_transformer only

    def __post_init__(self):
        if self.kind not in AGGREGATOR_KINDS:
            raise ConfigError(f"unknown aggregator kind {self.kind!r}")
        if self.hidden_dim < 1 or self.output_dim < 1:
            raise ConfigError(f"aggregator dims must be positive: {self}")
        if self.kind == "set_transformer":
            if self.inducing_points < 1:
                raise ConfigError("inducing_points must be >= 1")
            if self.hidden_dim % self.heads != 0:
                raise ConfigError(
                    f"heads ({self.heads}) must divide hidden_dim ({self.hidden_dim})"
                )


@dataclass(frozen=True)
class ProjectionConfig:
    hidden_dim: int = 64
    out_dim: int = 32

    def __post_init__(self):
        if self.hidden_dim < 1 or self.out_dim < 1:
            raise ConfigError(f"projection dims must be positive: {self}")


def _glorot(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape if shape is not None else (fan_in, fan_out))


class _Linear:
    def __init__(self, rng, in_dim, out_dim):
        self.w = Tensor(_glorot(rng, in_dim, out_dim), requires_grad=True)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x):
        return T.broadcast_add(T.matmul(x, self.w), self.b)

    def named(self, prefix):
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class Encoder:
    """MLP instance feature map: ReLU between layers, linear final layer."""

    def __init__(self, config: EncoderConfig, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        dims = [config.input_dim, *config.hidden_dims, config.embed_dim]
        self.layers = [_Linear(rng, dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    @property
    def embed_dim(self):
        return self.config.embed_dim

    def forward(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.data.ndim != 2 or x.data.shape[0] == 0:
            raise ContractError(f"encoder expects a nonempty 2-D batch, got shape {x.data.shape}")
        for layer in self.layers[:-1]:
            x = T.relu(layer(x))
        return self.layers[-1](x)

    def params(self):
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"enc.l{i}"))
        return out


class DeepSet:
    """Per-instance 2-layer MLP, then mean/sum/max pooling, then an affine head."""

    def __init__(self, config: AggregatorConfig, embed_dim, seed=0):
        if not config.kind.startswith("deepset_"):
            raise ConfigError(f"DeepSet got config kind {config.kind!r}")
        self.config = config
        self.pool = config.kind.split("_", 1)[1]
        rng = np.random.default_rng(seed)
        self.fc1 = _Linear(rng, embed_dim, config.hidden_dim)
        self.fc2 = _Linear(rng, config.hidden_dim, config.hidden_dim)
        self.head = _Linear(rng, config.hidden_dim, config.output_dim)

    def _instance_mlp(self, h):
        return self.fc2(T.relu(self.fc1(h)))

    def _pool_rows(self, phi):
        a = phi.data.shape[0]
        if self.pool == "max":
            return T.reshape(T.max(phi, axis=0), (1, -1))
        pooled = T.matmul(Tensor(np.ones((1, a))), phi)
        return pooled * (1.0 / a) if self.pool == "mean" else pooled

    def forward_set(self, h) -> Tensor:
        h = T.as_tensor(h)
        if h.data.ndim != 2 or h.data.shape[0] == 0:
            raise ContractError("aggregator requires a nonempty set of embeddings")
        out = self.head(self._pool_rows(self._instance_mlp(h)))
        return T.reshape(out, (self.config.output_dim,))

    def forward_stacked(self, h_all, sizes) -> Tensor:
        """Batched path: embeddings of all sets stacked row-wise, split by ``sizes``."""
        phi = self._instance_mlp(T.as_tensor(h_all))
        if self.pool == "max":
            pooled, lo = [], 0
            for a in sizes:
                pooled.append(T.reshape(T.max(T.rows(phi, lo, lo + a), axis=0), (1, -1)))
                lo += a
            stacked = T.concat(pooled, axis=0)
        else:
            pool_mat = np.zeros((len(sizes), int(np.sum(sizes))))
            lo = 0
            for i, a in enumerate(sizes):
                pool_mat[i, lo : lo + a] = 1.0 / a if self.pool == "mean" else 1.0
                lo += a
            stacked = T.matmul(Tensor(pool_mat), phi)
        return self.head(stacked)

    def params(self):
        return {
            **self.fc1.named("agg.fc1"),
            **self.fc2.named("agg.fc2"),
            **self.head.named("agg.head"),
        }


class AttentionPooling:
    """Weighted-average pooling with softmax attention scores (simple MIL form)."""

    def __init__(self, config: AggregatorConfig, embed_dim, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.score1 = _Linear(rng, embed_dim, config.hidden_dim)
        self.score2 = _Linear(rng, config.hidden_dim, 1)
        self.head = _Linear(rng, embed_dim, config.output_dim)

    def attention_weights(self, h) -> Tensor:
        scores = self.score2(T.tanh(self.score1(h)))  # (a, 1)
        return T.softmax(scores, axis=0)

    def forward_set(self, h) -> Tensor:
        h = T.as_tensor(h)
        if h.data.ndim != 2 or h.data.shape[0] == 0:
            raise ContractError("aggregator requires a nonempty set of embeddings")
        weights = self.attention_weights(h)
        pooled = T.matmul(T.transpose(weights), h)  # (1, embed)
        return T.reshape(self.head(pooled), (self.config.output_dim,))

    def forward_stacked(self, h_all, sizes) -> Tensor:
        h_all = T.as_tensor(h_all)
        scores = self.score2(T.tanh(self.score1(h_all)))
        pooled, lo = [], 0
        for a in sizes:
            w = T.softmax(T.rows(scores, lo, lo + a), axis=0)
            pooled.append(T.matmul(T.transpose(w), T.rows(h_all, lo, lo + a)))
            lo += a
        return self.head(T.concat(pooled, axis=0))

    def params(self):
        return {
            **self.score1.named("agg.score1"),
            **self.score2.named("agg.score2"),
            **self.head.named("agg.head"),
        }


class SetTransformer:
    """One induced set-attention block plus single-seed attention pooling.

    Inducing points attend to the set, the set attends back to the induced
    summary, and a learned seed vector pools the result; per-head dimension
    is hidden_dim / heads with 1/sqrt(head_dim) score scaling.
    """

    def __init__(self, config: AggregatorConfig, embed_dim, seed=0):
        if config.kind != "set_transformer":
            raise ConfigError(f"SetTransformer got config kind {config.kind!r}")
        self.config = config
        rng = np.random.default_rng(seed)
        H = config.hidden_dim
        self.inducing = Tensor(_glorot(rng, config.inducing_points, H), requires_grad=True)
        self.seed_vec = Tensor(_glorot(rng, 1, H), requires_grad=True)
        self.mabs = {
            "isab0": self._make_mab(rng, H, embed_dim),
            "isab1": self._make_mab(rng, embed_dim, H),
            "pma": self._make_mab(rng, H, H),
        }
        self.head = _Linear(rng, H, config.output_dim)
        # Constant per-head column selectors; gradients flow through matmul.
        hd = H // config.heads
        eye = np.eye(H)
        self._selectors = [Tensor(eye[:, i * hd : (i + 1) * hd]) for i in range(config.heads)]
        self._scale = 1.0 / np.sqrt(hd)

    def _make_mab(self, rng, dim_q, dim_k):
        H = self.config.hidden_dim
        return {
            "q": _Linear(rng, dim_q, H),
            "k": _Linear(rng, dim_k, H),
            "v": _Linear(rng, dim_k, H),
            "o": _Linear(rng, H, H),
        }

    def _mab(self, name, q_in, k_in, attn_out=None):
        mab = self.mabs[name]
        q, k, v = mab["q"](q_in), mab["k"](k_in), mab["v"](k_in)
        heads = []
        for sel in self._selectors:
            qh, kh, vh = T.matmul(q, sel), T.matmul(k, sel), T.matmul(v, sel)
            attn = T.softmax(T.matmul(qh, T.transpose(kh)) * self._scale, axis=-1)
            if attn_out is not None:
                attn_out.append(attn.data.copy())
            heads.append(T.add(qh, T.matmul(attn, vh)))
        out = T.concat(heads, axis=1)
        return T.add(out, T.relu(mab["o"](out)))

    def forward_set(self, h, attn_out=None) -> Tensor:
        h = T.as_tensor(h)
        if h.data.ndim != 2 or h.data.shape[0] == 0:
            raise ContractError("aggregator requires a nonempty set of embeddings")
        induced = self._mab("isab0", self.inducing, h, attn_out)
        encoded = self._mab("isab1", h, induced, attn_out)
        pooled = self._mab("pma", self.seed_vec, encoded, attn_out)
        return T.reshape(self.head(pooled), (self.config.output_dim,))

    def forward_stacked(self, h_all, sizes) -> Tensor:
        h_all = T.as_tensor(h_all)
        outs, lo = [], 0
        for a in sizes:
            outs.append(T.reshape(self.forward_set(T.rows(h_all, lo, lo + a)), (1, -1)))
            lo += a
        return T.concat(outs, axis=0)

    def params(self):
        out = {"agg.inducing": self.inducing, "agg.seed": self.seed_vec}
        for name, mab in self.mabs.items():
            for part, lin in mab.items():
                out.update(lin.named(f"agg.{name}.{part}"))
        out.update(self.head.named("agg.head"))
        return out


def make_aggregator(config: AggregatorConfig, embed_dim, seed=0):
    if config.kind.startswith("deepset_"):
        return DeepSet(config, embed_dim, seed)
    if config.kind == "attn_mil":
        return AttentionPooling(config, embed_dim, seed)
    return SetTransformer(config, embed_dim, seed)


class ProjectionHead:
    """Two affine layers with ReLU, output rows normalized to the unit sphere."""

    def __init__(self, config: ProjectionConfig, in_dim, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.fc1 = _Linear(rng, in_dim, config.hidden_dim)
        self.fc2 = _Linear(rng, config.hidden_dim, config.out_dim)

    def forward(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.data.ndim != 2 or x.data.shape[0] == 0:
            raise ContractError("projection head expects a nonempty 2-D batch")
        return T.l2_normalize(self.fc2(T.relu(self.fc1(x))), axis=-1, eps=1e-12)

    def params(self):
        return {**self.fc1.named("proj.fc1"), **self.fc2.named("proj.fc2")}


class SetModel:
    """Coarse-label model: aggregator(encoder(each instance in the set))."""

    def __init__(self, encoder: Encoder, aggregator):
        self.encoder = encoder
        self.aggregator = aggregator

    def forward_set(self, features) -> Tensor:
        return self.aggregator.forward_set(self.encoder.forward(features))

    def forward_sets(self, sets) -> Tensor:
        """Batched forward over CoarseSetExamples (or raw (a, D) arrays)."""
        feats = [s.features if hasattr(s, "features") else np.asarray(s) for s in sets]
        sizes = [f.shape[0] for f in feats]
        if any(a == 0 for a in sizes):
            raise ContractError("aggregator requires nonempty sets")
        h_all = self.encoder.forward(np.concatenate(feats, axis=0))
        return self.aggregator.forward_stacked(h_all, sizes)

    def params(self):
        return {**self.encoder.params(), **self.aggregator.params()}


# ---------------------------------------------------------------------------
# checkpoint glue


def _config_header(model):
    cfg = model.config
    return {"type": type(model).__name__, "config": dataclasses.asdict(cfg)}


def save_encoder(path, encoder: Encoder):
    save_params(path, encoder.params(), header=_config_header(encoder))


def load_encoder(path) -> Encoder:
    arrays, header = load_params(path)
    if not header or header.get("type") != "Encoder":
        raise FormatError(f"{path}: checkpoint is not an Encoder")
    cfg = EncoderConfig(**header["config"])
    enc = Encoder(cfg, seed=0)
    apply_params(enc, arrays, path)
    return enc


def apply_params(model, arrays, source="checkpoint"):
    """Copy named arrays onto a model, validating names and shapes."""
    params = model.params()
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise FormatError(f"{source}: parameter names mismatch (missing={missing}, extra={extra})")
    for name, p in params.items():
        if arrays[name].shape != p.data.shape:
            raise FormatError(
                f"{source}: {name} has shape {arrays[name].shape}, expected {p.data.shape}"
            )
        p.data = arrays[name].copy()
