"""Datasets: loading, the four-way split protocol, augmentation, and synthetic
Gaussian-cluster generation.

Inputs are float64 in [0, 1]; class ids are 1-based. Datasets are immutable
after construction. The split protocol produces four disjoint, exhaustive,
class-stratified subsets named train, test, generation, and validation; the
generation subset exists solely to build codebooks from labeled data.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SPLIT_NAMES = ("train", "test", "generation", "validation")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray   # (N, d) or (N, C, H, W), float64 in [0, 1]
    labels: np.ndarray   # (N,), int64 class ids 1..K
    num_classes: int
    split: str | None = None

    def __post_init__(self):
        inputs = np.ascontiguousarray(np.asarray(self.inputs, dtype=np.float64))
        labels = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int64))
        if inputs.shape[0] != labels.shape[0]:
            raise DataError(
                f"{inputs.shape[0]} inputs vs {labels.shape[0]} labels")
        if inputs.size and (inputs.min() < 0.0 or inputs.max() > 1.0):
            raise DataError("inputs must lie in [0, 1]")
        if labels.size and (labels.min() < 1 or labels.max() > self.num_classes):
            raise DataError(f"labels must lie in 1..{self.num_classes}")
        if self.split is not None and self.split not in SPLIT_NAMES:
            raise DataError(f"unknown split name {self.split!r}")
        inputs.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def sample_shape(self):
        return self.inputs.shape[1:]

    def subset(self, indices, split=None):
        return Dataset(self.inputs[indices], self.labels[indices],
                       self.num_classes, split=split)


def _largest_remainder(total, ratios):
    """Integer allocation of ``total`` proportional to ``ratios``; leftover
    units go to the largest fractional parts (earlier split wins ties)."""
    exact = np.asarray(ratios, dtype=np.float64) * total
    base = np.floor(exact).astype(np.int64)
    short = total - int(base.sum())
    if short:
        order = np.lexsort((np.arange(len(ratios)), -(exact - base)))
        base[order[:short]] += 1
    return base


def split(dataset, ratios, seed):
    """Class-stratified split into train/test/generation/validation.

    ``ratios`` are four fractions summing to 1 (train, test, generation,
    validation). Per class, samples are shuffled with the seed and allocated
    by largest remainder, so per-class proportions hold within one sample and
    the four subsets are disjoint and exhaustive.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 4:
        raise DataError(f"need 4 split ratios, got {len(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must sum to 1, got {sum(ratios)}")
    if min(ratios) < 0:
        raise DataError("split ratios must be non-negative")

    rng = np.random.default_rng(seed)
    buckets = [[] for _ in SPLIT_NAMES]
    for k in range(1, dataset.num_classes + 1):
        members = np.flatnonzero(dataset.labels == k)
        rng.shuffle(members)
        counts = _largest_remainder(members.size, ratios)
        offsets = np.concatenate(([0], np.cumsum(counts)))
        for b, (lo, hi) in enumerate(zip(offsets[:-1], offsets[1:])):
            buckets[b].append(members[lo:hi])

    out = {}
    for name, parts in zip(SPLIT_NAMES, buckets):
        indices = np.concatenate(parts) if parts else np.array([], dtype=np.int64)
        rng.shuffle(indices)
        out[name] = dataset.subset(indices, split=name)
    return out


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentationConfig:
    crop_padding: int = 0     # image mode: zero-pad then random crop back
    flip_prob: float = 0.0    # image mode: horizontal flip probability
    noise_sigma: float = 0.0  # both modes: additive Gaussian noise
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise DataError(f"flip_prob must be in [0,1], got {self.flip_prob}")
        if self.noise_sigma < 0 or self.crop_padding < 0:
            raise DataError("noise_sigma and crop_padding must be >= 0")


def _augment_one(x, cfg, rng):
    out = x
    if x.ndim == 3:  # (C, H, W) image
        p = cfg.crop_padding
        if p > 0:
            c, h, w = x.shape
            padded = np.zeros((c, h + 2 * p, w + 2 * p))
            padded[:, p:p + h, p:p + w] = x
            i = rng.integers(2 * p + 1)
            j = rng.integers(2 * p + 1)
            out = padded[:, i:i + h, j:j + w]
        if cfg.flip_prob > 0 and rng.random() < cfg.flip_prob:
            out = out[:, :, ::-1]
    if cfg.noise_sigma > 0:
        out = out + rng.normal(0.0, cfg.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def augment_pair(x, cfg, rng=None):
    """Two independent stochastic views of one sample, each clipped to [0,1].
    With the identity config (no padding, no flips, sigma 0) both views equal
    the input exactly."""
    x = np.asarray(x, dtype=np.float64)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    return _augment_one(x, cfg, rng), _augment_one(x, cfg, rng)


def augment_batch_pair(batch, cfg, rng):
    """Pairs of views for a whole batch; vector batches are vectorized."""
    if batch.ndim == 2 and cfg.crop_padding == 0 and cfg.flip_prob == 0:
        if cfg.noise_sigma == 0:
            return batch.copy(), batch.copy()
        a = np.clip(batch + rng.normal(0.0, cfg.noise_sigma, size=batch.shape), 0, 1)
        b = np.clip(batch + rng.normal(0.0, cfg.noise_sigma, size=batch.shape), 0, 1)
        return a, b
    views = [augment_pair(x, cfg, rng) for x in batch]
    return (np.stack([v[0] for v in views]), np.stack([v[1] for v in views]))


def replicate_channels(x):
    """Replicate a single grayscale channel into 3 identical channels.
    3-channel inputs pass through unchanged. Works on one image (C,H,W) or a
    batch (N,C,H,W)."""
    x = np.asarray(x, dtype=np.float64)
    axis = 0 if x.ndim == 3 else 1
    if x.ndim not in (3, 4):
        raise DataError(f"expected (C,H,W) or (N,C,H,W), got shape {x.shape}")
    if x.shape[axis] == 3:
        return x
    if x.shape[axis] != 1:
        raise DataError(f"expected 1 or 3 channels, got {x.shape[axis]}")
    return np.repeat(x, 3, axis=axis)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def make_blobs(num_classes, per_class, dim, spread, seed, center_span=0.25):
    """Balanced Gaussian clusters with seed-deterministic centers.

    Centers are drawn uniformly from [0.5 - center_span, 0.5 + center_span]^dim
    and redrawn until every pair is at least 4*spread apart; samples add
    iid N(0, spread^2) noise per coordinate and are clipped to [0, 1].
    Narrowing ``center_span`` packs the classes closer together relative to
    the attack budget without touching their noise level.
    """
    if num_classes < 1 or per_class < 1 or dim < 1:
        raise DataError("num_classes, per_class and dim must be positive")
    if spread < 0:
        raise DataError(f"spread must be >= 0, got {spread}")
    rng = np.random.default_rng(seed)
    lo, hi = 0.5 - center_span, 0.5 + center_span
    centers = None
    for _ in range(1000):
        cand = rng.uniform(lo, hi, size=(num_classes, dim))
        diffs = cand[:, None, :] - cand[None, :, :]
        dists = np.sqrt((diffs ** 2).sum(axis=2))
        np.fill_diagonal(dists, np.inf)
        if num_classes == 1 or dists.min() >= 4.0 * spread:
            centers = cand
            break
    if centers is None:
        raise DataError(
            f"could not place {num_classes} centers >= {4 * spread:.3g} apart "
            f"in a span-{center_span} box; reduce spread or raise center_span")

    labels = np.repeat(np.arange(1, num_classes + 1), per_class)
    noise = rng.normal(0.0, spread, size=(labels.size, dim))
    inputs = np.clip(centers[labels - 1] + noise, 0.0, 1.0)
    order = rng.permutation(labels.size)
    return Dataset(inputs[order], labels[order], num_classes)


def make_texture_images(num_classes, per_class, seed, size=28, cue_amplitude=0.15):
    """Desk-scale grayscale image classes: each class is a faint oriented
    grating over a shared blocky background, plus pixel noise.

    The discriminative cue is deliberately low-contrast relative to the
    background, which makes plainly-trained classifiers brittle under small
    L-infinity perturbations. Images come out (1, size, size) in [0, 1];
    use ``replicate_channels`` for 3-channel consumers.
    """
    if num_classes < 1 or per_class < 1 or size < 8:
        raise DataError("num_classes, per_class must be positive; size >= 8")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    images = np.empty((num_classes * per_class, 1, size, size))
    labels = np.repeat(np.arange(1, num_classes + 1), per_class)
    block = max(size // 7, 1)
    coarse_n = size // block + 1
    for i, k in enumerate(labels):
        theta = (k - 1) * np.pi / num_classes
        u = np.cos(theta) * xx + np.sin(theta) * yy
        grating = cue_amplitude * np.sin(2 * np.pi * 4 * u + rng.uniform(0, 2 * np.pi))
        coarse = rng.normal(0, 0.15, size=(coarse_n, coarse_n))
        background = np.kron(coarse, np.ones((block, block)))[:size, :size]
        noise = rng.normal(0, 0.05, size=(size, size))
        images[i, 0] = np.clip(0.5 + background + grating + noise, 0.0, 1.0)
    order = rng.permutation(labels.size)
    return Dataset(images[order], labels[order], num_classes)


# ---------------------------------------------------------------------------
# IDX ingestion (MNIST-family binary format)
# ---------------------------------------------------------------------------

def _open_maybe_gzip(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(fh, count, what, path):
    data = fh.read(count)
    if len(data) != count:
        raise DataError(f"truncated IDX file {path}: short read of {what}")
    return data


def load_idx(images_path, labels_path):
    """Load an IDX image/label file pair into a Dataset.

    Pixels are scaled to [0, 1] as (1, H, W) images; the file's 0-based
    labels become 1-based class ids. Files ending in .gz are decompressed
    transparently.
    """
    with _open_maybe_gzip(images_path) as fh:
        magic, count, rows, cols = struct.unpack(
            ">IIII", _read_exact(fh, 16, "image header", images_path))
        if magic != IDX_IMAGES_MAGIC:
            raise DataError(
                f"bad magic 0x{magic:08x} in {images_path} (expected images magic)")
        raw = _read_exact(fh, count * rows * cols, "pixel data", images_path)
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, 1, rows, cols)

    with _open_maybe_gzip(labels_path) as fh:
        magic, label_count = struct.unpack(
            ">II", _read_exact(fh, 8, "label header", labels_path))
        if magic != IDX_LABELS_MAGIC:
            raise DataError(
                f"bad magic 0x{magic:08x} in {labels_path} (expected labels magic)")
        raw = _read_exact(fh, label_count, "label data", labels_path)
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if count != label_count:
        raise DataError(
            f"image count {count} does not match label count {label_count}")
    num_classes = int(labels.max()) + 1 if labels.size else 0
    return Dataset(images / 255.0, labels + 1, num_classes)


# ---------------------------------------------------------------------------
# CSV dataset dumps (blobs and adversarial batches)
# ---------------------------------------------------------------------------

def save_dataset_csv(dataset, path):
    """Dump a dataset as CSV: header is ``d`` for vectors or ``C,H,W`` for
    images, then one row per sample with the label last."""
    flat = dataset.inputs.reshape(len(dataset), -1)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(str(s) for s in dataset.sample_shape) + "\n")
        for row, label in zip(flat, dataset.labels):
            fh.write(",".join(repr(float(v)) for v in row) + f",{label}\n")


def load_dataset_csv(path, num_classes=None):
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise DataError(f"empty dataset file: {path}")
    try:
        shape = tuple(int(s) for s in lines[0].split(","))
    except ValueError as exc:
        raise DataError(f"malformed dataset header {lines[0]!r}") from exc
    width = int(np.prod(shape))
    inputs, labels = [], []
    for i, line in enumerate(lines[1:]):
        cells = line.split(",")
        if len(cells) != width + 1:
            raise DataError(f"row {i + 1} has {len(cells)} cells, expected {width + 1}")
        inputs.append([float(c) for c in cells[:-1]])
        labels.append(int(cells[-1]))
    inputs = np.asarray(inputs).reshape(len(labels), *shape)
    labels = np.asarray(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) if labels.size else 0
    return Dataset(inputs, labels, num_classes)
