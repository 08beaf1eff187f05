"""Data sources for the pipeline.

Instances carry a fine-grained class plus a superclass; set-level examples
bundle instances under a single coarse label (distinct-superclass count, or
most frequent superclass). Synthetic hierarchies stand in for image data at
desk scale; the CIFAR-100 binary reader gives a bit-exact path to the real
thing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ContractError,
    CorruptRecordError,
    EmptyDatasetError,
    FormatError,
    TaskSamplingError,
)

CIFAR_RECORD_BYTES = 3074  # 1 coarse byte + 1 fine byte + 3 * 1024 pixel planes
CIFAR_NUM_FINE = 100
CIFAR_NUM_SUPER = 20


@dataclass(frozen=True)
class LabeledInstance:
    features: np.ndarray
    fine_label: int
    super_label: int


@dataclass(frozen=True)
class HierarchySpec:
    """Fine classes grouped into superclasses: fine f belongs to super f // fine_per_super."""

    num_super: int
    fine_per_super: int

    @property
    def num_fine(self):
        return self.num_super * self.fine_per_super

    def super_of(self, fine_label):
        return int(fine_label) // self.fine_per_super


@dataclass
class InstanceDataset:
    """Column-oriented store of labeled instances."""

    features: np.ndarray  # (N, D) float64
    fine_labels: np.ndarray  # (N,) int64
    super_labels: np.ndarray  # (N,) int64
    image_shape: tuple | None = None  # (H, W, C) when rows are flattened images

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.fine_labels = np.asarray(self.fine_labels, dtype=np.int64)
        self.super_labels = np.asarray(self.super_labels, dtype=np.int64)

    def __len__(self):
        return self.features.shape[0]

    def __getitem__(self, i) -> LabeledInstance:
        return LabeledInstance(self.features[i], int(self.fine_labels[i]), int(self.super_labels[i]))

    @property
    def dim(self):
        return self.features.shape[1]

    @property
    def num_fine(self):
        return int(self.fine_labels.max()) + 1 if len(self) else 0

    @property
    def num_super(self):
        return int(self.super_labels.max()) + 1 if len(self) else 0


@dataclass(frozen=True)
class CoarseSetExample:
    """A bag of instances with one set-level label."""

    features: np.ndarray  # (a, D)
    member_super_labels: np.ndarray  # (a,)
    label: int

    @property
    def size(self):
        return self.features.shape[0]


@dataclass(frozen=True)
class MetaTask:
    """One c-way k-shot episode with disjoint support and query splits."""

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    class_remap: dict = field(default_factory=dict)  # original fine label -> [0, c)


# ---------------------------------------------------------------------------
# CIFAR-100 binary ingestion


def read_cifar100_file(path):
    """Parse one CIFAR-100 binary file (records of 3074 bytes: coarse, fine, RGB planes).

    Pixels become floats in [0, 1]; image rows are flattened channel-last
    (H, W, C), so feature 0 is R[0, 0] and feature 3071 is B[31, 31].
    """
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
        raise FormatError(
            f"{path}: length {len(raw)} is not a positive multiple of {CIFAR_RECORD_BYTES}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    coarse = records[:, 0].astype(np.int64)
    fine = records[:, 1].astype(np.int64)
    bad = np.flatnonzero((coarse >= CIFAR_NUM_SUPER) | (fine >= CIFAR_NUM_FINE))
    if bad.size:
        raise CorruptRecordError(
            f"{path}: record {bad[0]} has label bytes coarse={coarse[bad[0]]} fine={fine[bad[0]]}"
        )
    planes = records[:, 2:].reshape(-1, 3, 32, 32)
    pixels = planes.transpose(0, 2, 3, 1).reshape(-1, 3072).astype(np.float64) / 255.0
    return InstanceDataset(pixels, fine, coarse, image_shape=(32, 32, 3))


def load_cifar100(train_path, test_path):
    """Load the train/test binary files; labels are taken verbatim."""
    return read_cifar100_file(train_path), read_cifar100_file(test_path)


# ---------------------------------------------------------------------------
# synthetic hierarchy


def gen_synthetic_hierarchy(spec: HierarchySpec, per_class, dim, sigma_fine, sigma_super, seed):
    """Gaussian stand-in for a superclass/fine-class image hierarchy.

    Superclass centers ~ N(0, sigma_super^2 I); fine centers scatter around
    their superclass with sigma_super / 4, so coarse structure is informative
    but does not by itself resolve fine classes; instances add sigma_fine noise.
    """
    if dim < 2:
        raise ContractError(f"dim must be >= 2, got {dim}")
    if sigma_fine <= 0 or sigma_super <= 0:
        raise ContractError("sigma_fine and sigma_super must be positive")
    if per_class == 0:
        raise EmptyDatasetError("per_class is zero")
    rng = np.random.default_rng(seed)
    super_centers = rng.normal(0.0, sigma_super, size=(spec.num_super, dim))
    fine_centers = np.empty((spec.num_fine, dim))
    for f in range(spec.num_fine):
        fine_centers[f] = rng.normal(super_centers[spec.super_of(f)], sigma_super / 4.0)
    feats = np.empty((spec.num_fine * per_class, dim))
    fine = np.empty(spec.num_fine * per_class, dtype=np.int64)
    for f in range(spec.num_fine):
        lo = f * per_class
        feats[lo : lo + per_class] = rng.normal(fine_centers[f], sigma_fine, size=(per_class, dim))
        fine[lo : lo + per_class] = f
    supers = fine // spec.fine_per_super
    return InstanceDataset(feats, fine, supers)


def split_per_class(data: InstanceDataset, per_class_train):
    """First per_class_train instances of every fine class go to train, rest to test."""
    train_idx, test_idx = [], []
    for c in np.unique(data.fine_labels):
        pool = np.flatnonzero(data.fine_labels == c)
        train_idx.append(pool[:per_class_train])
        test_idx.append(pool[per_class_train:])
    parts = []
    for idx in (np.concatenate(train_idx), np.concatenate(test_idx)):
        parts.append(
            InstanceDataset(
                data.features[idx],
                data.fine_labels[idx],
                data.super_labels[idx],
                image_shape=data.image_shape,
            )
        )
    return parts[0], parts[1]


# ---------------------------------------------------------------------------
# coarse set-label tasks


def unique_count_label(member_super_labels):
    """Number of distinct superclasses among the members."""
    return int(np.unique(member_super_labels).size)


def most_frequent_label(member_super_labels, rng):
    """Mode of the member superclasses; ties resolved uniformly from ``rng``."""
    values, counts = np.unique(member_super_labels, return_counts=True)
    top = values[counts == counts.max()]
    if top.size == 1:
        return int(top[0])
    return int(top[rng.integers(0, top.size)])


def _check_set_builder_args(data, m, size_range):
    if len(data) == 0:
        raise ContractError("cannot build sets from an empty dataset")
    lo, hi = size_range
    if not (1 <= lo <= hi <= len(data)):
        raise ContractError(f"size_range {size_range} not within [1, {len(data)}]")
    if m < 0:
        raise ContractError(f"negative set count {m}")


def _sample_members(data, rng, lo, hi):
    a = int(rng.integers(lo, hi + 1))
    idx = rng.integers(0, len(data), size=a)  # with replacement across the dataset
    return data.features[idx].copy(), data.super_labels[idx].copy()


def build_unique_count_sets(data, m, size_range=(6, 10), seed=0):
    """Sets whose label is the count of distinct superclasses among members."""
    _check_set_builder_args(data, m, size_range)
    rng = np.random.default_rng(seed)
    lo, hi = size_range
    out = []
    for _ in range(m):
        feats, supers = _sample_members(data, rng, lo, hi)
        out.append(CoarseSetExample(feats, supers, unique_count_label(supers)))
    return out


def build_most_frequent_sets(data, m, size_range=(6, 10), seed=0):
    """Sets whose label is the most frequent member superclass (random tie-break)."""
    _check_set_builder_args(data, m, size_range)
    rng = np.random.default_rng(seed)
    lo, hi = size_range
    out = []
    for _ in range(m):
        feats, supers = _sample_members(data, rng, lo, hi)
        out.append(CoarseSetExample(feats, supers, most_frequent_label(supers, rng)))
    return out


def flatten_sets(sets):
    """Instance-level view of set examples: each member inherits its set's label."""
    feats = np.concatenate([s.features for s in sets], axis=0)
    labels = np.concatenate([np.full(s.size, s.label, dtype=np.int64) for s in sets])
    return feats, labels


# ---------------------------------------------------------------------------
# image augmentation


def _bilinear_resize(img, out_h, out_w):
    h, w = img.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    p00 = img[y0[:, None], x0[None, :]]
    p01 = img[y0[:, None], x1[None, :]]
    p10 = img[y1[:, None], x0[None, :]]
    p11 = img[y1[:, None], x1[None, :]]
    return (
        (1 - fy) * (1 - fx) * p00
        + (1 - fy) * fx * p01
        + fy * (1 - fx) * p10
        + fy * fx * p11
    )


def horizontal_flip(features, height, width, channels):
    img = np.asarray(features, dtype=np.float64).reshape(height, width, channels)
    return img[:, ::-1, :].reshape(-1).copy()


def _random_resized_crop(img, rng, min_scale=0.2, max_scale=1.0):
    h, w = img.shape[:2]
    area = rng.uniform(min_scale, max_scale) * h * w
    ratio = np.exp(rng.uniform(np.log(3 / 4), np.log(4 / 3)))
    ch = int(np.clip(round(np.sqrt(area / ratio)), 1, h))  # degenerate windows clamp to 1 px
    cw = int(np.clip(round(np.sqrt(area * ratio)), 1, w))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return _bilinear_resize(img[top : top + ch, left : left + cw], h, w)


def augment_simple(features, height, width, channels, rng):
    """Random resized crop (scale 0.2-1.0, bilinear) plus horizontal flip w.p. 0.5."""
    features = np.asarray(features, dtype=np.float64)
    if features.size != height * width * channels:
        raise ContractError(
            f"feature length {features.size} != {height}x{width}x{channels}"
        )
    img = _random_resized_crop(features.reshape(height, width, channels), rng)
    if rng.random() < 0.5:
        img = img[:, ::-1, :]
    return img.reshape(-1).copy()


def _rgb_to_hsv(rgb):
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    dsafe = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / dsafe
    gc = (maxc - g) / dsafe
    bc = (maxc - b) / dsafe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(hsv):
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0).astype(np.int64) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    choices = np.stack(
        [
            np.stack([v, t, p], -1),
            np.stack([q, v, p], -1),
            np.stack([p, v, t], -1),
            np.stack([p, q, v], -1),
            np.stack([t, p, v], -1),
            np.stack([v, p, q], -1),
        ]
    )
    return np.take_along_axis(choices, i[None, ..., None], axis=0)[0]


def to_grayscale(img):
    luma = 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
    return np.repeat(luma[..., None], 3, axis=-1)


def _color_jitter(img, rng, strength=0.8, hue=0.2):
    img = img * rng.uniform(1 - strength, 1 + strength)  # brightness
    gray_mean = to_grayscale(img).mean()
    img = gray_mean + (img - gray_mean) * rng.uniform(1 - strength, 1 + strength)  # contrast
    gray = to_grayscale(np.clip(img, 0.0, 1.0))
    img = gray + (np.clip(img, 0.0, 1.0) - gray) * rng.uniform(1 - strength, 1 + strength)
    hsv = _rgb_to_hsv(np.clip(img, 0.0, 1.0))
    hsv[..., 0] = (hsv[..., 0] + rng.uniform(-hue, hue)) % 1.0
    return _hsv_to_rgb(hsv)


def _gaussian_blur5(img, sigma):
    taps = np.exp(-0.5 * (np.arange(-2, 3) / sigma) ** 2)
    taps /= taps.sum()
    for axis in (0, 1):
        pad = [(0, 0)] * img.ndim
        pad[axis] = (2, 2)
        padded = np.pad(img, pad, mode="reflect")
        acc = np.zeros_like(img)
        for i, k in enumerate(taps):
            sl = [slice(None)] * img.ndim
            sl[axis] = slice(i, i + img.shape[axis])
            acc += k * padded[tuple(sl)]
        img = acc
    return img


def augment_strong(
    features,
    height,
    width,
    channels,
    rng,
    p_jitter=0.8,
    p_gray=0.2,
    p_blur=0.5,
    p_solarize=0.2,
):
    """Simple augmentation followed by color jitter, grayscale, blur, and solarize.

    Matches the strong policy used for contrastive pretraining: jitter
    (strengths 0.8/0.8/0.8, hue 0.2) w.p. 0.8, grayscale w.p. 0.2, 5-tap
    Gaussian blur with sigma in [0.1, 2] w.p. 0.5, solarize at 128/255
    w.p. 0.2. Output is clamped to [0, 1].
    """
    if channels != 3:
        raise ContractError(f"strong augmentation requires 3 channels, got {channels}")
    flat = augment_simple(features, height, width, channels, rng)
    img = flat.reshape(height, width, channels)
    if rng.random() < p_jitter:
        img = _color_jitter(img, rng)
    if rng.random() < p_gray:
        img = to_grayscale(img)
    if rng.random() < p_blur:
        img = _gaussian_blur5(img, rng.uniform(0.1, 2.0))
    if rng.random() < p_solarize:
        thr = 128.0 / 255.0
        img = np.where(img >= thr, 1.0 - img, img)
    return np.clip(img, 0.0, 1.0).reshape(-1)


# ---------------------------------------------------------------------------
# meta-task sampling


def sample_meta_task(data: InstanceDataset, c_way, k_shot, q=15, seed=0):
    """Sample a c-way k-shot episode with q queries per class.

    Classes are drawn without replacement among fine classes holding at
    least k_shot + q instances; support and query indices are disjoint.
    """
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(data.fine_labels, return_counts=True)
    need = k_shot + q
    eligible = classes[counts >= need]
    if eligible.size < c_way:
        deficient = classes[counts < need]
        raise TaskSamplingError(
            f"need {c_way} classes with >= {need} instances; "
            f"short classes: {deficient.tolist()[:10]}"
        )
    chosen = rng.choice(eligible, size=c_way, replace=False)
    remap = {int(c): i for i, c in enumerate(chosen)}
    sx, sy, qx, qy = [], [], [], []
    for c in chosen:
        pool = np.flatnonzero(data.fine_labels == c)
        picked = rng.permutation(pool)[:need]
        sx.append(data.features[picked[:k_shot]])
        qx.append(data.features[picked[k_shot:need]])
        sy.append(np.full(k_shot, remap[int(c)], dtype=np.int64))
        qy.append(np.full(q, remap[int(c)], dtype=np.int64))
    return MetaTask(
        np.concatenate(sx),
        np.concatenate(sy),
        np.concatenate(qx),
        np.concatenate(qy),
        remap,
    )
