"""Training objectives: contrastive, separation, decoding, and composite losses.

All losses are pure functions from tensors to a scalar tensor, built on the
autodiff engine, so gradients come from the graph. Cosine similarity is used
throughout, which makes every loss invariant under positive rescaling of its
vector inputs.

Per-sample losses are averaged (not summed) over the batch so that loss
weights and learning rates transfer across batch sizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codebook import Codebook
from .tensor import (Tensor, TensorError, as_tensor, logsumexp,
                     pairwise_cosine, rowwise_cosine)

RSL_DENOMINATOR_MODES = ("classes-excluding-true", "batch")
CSL_PAIR_MODES = ("unordered", "ordered")

# Additive mask that pushes excluded similarity logits far below any real one,
# so exp() underflows to exactly 0 and no gradient leaks through them.
_EXCLUDED = -1e9


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.5
    lambda_csl: float = 1.0
    hinge_margin: float = 0.5
    rsl_denominator_mode: str = "classes-excluding-true"
    csl_pair_mode: str = "unordered"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if self.lambda_csl < 0:
            raise ValueError(f"lambda_csl must be >= 0, got {self.lambda_csl}")
        if self.rsl_denominator_mode not in RSL_DENOMINATOR_MODES:
            raise ValueError(f"unknown rsl_denominator_mode {self.rsl_denominator_mode!r}")
        if self.csl_pair_mode not in CSL_PAIR_MODES:
            raise ValueError(f"unknown csl_pair_mode {self.csl_pair_mode!r}")


def _rows_tensor(book):
    if isinstance(book, Codebook):
        return Tensor(book.rows)
    return as_tensor(book)


def column_separation_loss(batch_codewords, cfg=LossConfig()):
    """Sum of pairwise cosine similarities between the columns of a (B, n)
    batch of codewords. Low values mean decorrelated code positions.

    Unordered mode counts each column pair once (j < k); ordered mode counts
    both orderings and is exactly twice the unordered value.
    """
    x = as_tensor(batch_codewords)
    if x.ndim != 2 or x.shape[0] < 2:
        raise TensorError(f"need a (B>=2, n) codeword batch, got {x.shape}")
    cols = x.T
    sims = pairwise_cosine(cols, cols)
    n = x.shape[1]
    if cfg.csl_pair_mode == "ordered":
        mask = 1.0 - np.eye(n)
    else:
        mask = np.triu(np.ones((n, n)), k=1)
    return (sims * Tensor(mask)).sum()


def info_nce_loss(projections, pair_index, cfg=LossConfig()):
    """Contrastive loss over 2B projections where ``pair_index[i]`` is the
    index of sample i's positive partner. Every sample acts as an anchor; the
    denominator runs over all other samples (positive included), so the loss
    is always >= 0.
    """
    z = as_tensor(projections)
    m = z.shape[0]
    pair_index = np.asarray(pair_index)
    if z.ndim != 2 or m < 4:
        raise TensorError(f"need at least 4 projections, got shape {z.shape}")
    if pair_index.shape != (m,) or np.any(pair_index == np.arange(m)) \
            or np.any(pair_index[pair_index] != np.arange(m)):
        raise TensorError("pair_index must be a fixed-point-free involution")

    sims = pairwise_cosine(z, z) * (1.0 / cfg.tau)
    sims = sims + Tensor(np.eye(m) * _EXCLUDED)  # anchors never score themselves
    denom = logsumexp(sims, axis=1)
    pos = sims[np.arange(m), pair_index]
    return (denom - pos).mean()


def sample_positive_indices(labels, rng):
    """For each anchor, a uniformly random index of another same-class sample
    in the batch, or -1 when the anchor's class appears only once."""
    labels = np.asarray(labels)
    out = np.full(labels.shape[0], -1, dtype=np.int64)
    for i in range(labels.shape[0]):
        candidates = np.flatnonzero(labels == labels[i])
        candidates = candidates[candidates != i]
        if candidates.size:
            out[i] = candidates[rng.integers(candidates.size)]
    return out


def row_separation_loss(predicted, labels, positives, book, cfg=LossConfig()):
    """Pulls each predicted codeword toward a same-class partner while
    pushing it away from the class codewords in the codebook.

    ``positives[i]`` indexes anchor i's partner in the batch (-1 skips the
    anchor; the mean renormalizes over kept anchors). The denominator runs
    over class codewords excluding the true class by default; ``batch`` mode
    instead sums over the other batch members' class codewords. The positive
    term is absent from the denominator, so the loss can be negative.
    """
    c = as_tensor(predicted)
    labels = np.asarray(labels)
    positives = np.asarray(positives)
    if c.ndim != 2 or labels.shape[0] != c.shape[0] or positives.shape[0] != c.shape[0]:
        raise TensorError("predicted, labels and positives must agree on batch size")
    keep = np.flatnonzero(positives >= 0)
    if keep.size == 0:
        return Tensor(0.0)
    pos_idx = positives[keep]
    if np.any(pos_idx == keep) or np.any(labels[pos_idx] != labels[keep]):
        raise TensorError("positives must point at a different same-class sample")

    anchors = c[keep]
    partners = c[pos_idx]
    pos = rowwise_cosine(anchors, partners) * (1.0 / cfg.tau)

    rows = _rows_tensor(book)
    if cfg.rsl_denominator_mode == "classes-excluding-true":
        sims = pairwise_cosine(anchors, rows) * (1.0 / cfg.tau)
        mask = np.zeros((keep.size, rows.shape[0]))
        mask[np.arange(keep.size), labels[keep] - 1] = _EXCLUDED
    else:
        batch_rows = rows[labels - 1]
        sims = pairwise_cosine(anchors, batch_rows) * (1.0 / cfg.tau)
        mask = np.zeros((keep.size, labels.shape[0]))
        mask[np.arange(keep.size), keep] = _EXCLUDED
    denom = logsumexp(sims + Tensor(mask), axis=1)
    return (denom - pos).mean()


def cross_entropy_loss(probabilities, labels):
    """Mean negative log-probability of the true class. ``probabilities``
    rows must already sum to 1 (within 1e-6); a zero probability at the true
    class is an error rather than an infinite loss."""
    p = as_tensor(probabilities)
    labels = np.asarray(labels)
    if p.ndim != 2 or labels.shape[0] != p.shape[0]:
        raise TensorError(f"need (B, K) probabilities and B labels, got {p.shape}")
    row_sums = p.data.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6):
        raise TensorError("probability rows must sum to 1")
    true_p = p[np.arange(p.shape[0]), labels - 1]
    if np.any(true_p.data <= 0.0):
        raise TensorError("zero probability at the true class")
    return -(true_p.log().mean())


def hinge_codeword_loss(predicted, true_rows, margin=0.5):
    """Mean hinge penalty max(margin - cos(c_i, codeword_i), 0); zero once
    every predicted codeword is within the margin of its class codeword."""
    c = as_tensor(predicted)
    rows = _rows_tensor(true_rows)
    sims = rowwise_cosine(c, rows)
    return (margin - sims).relu().mean()


def mcsm_loss(book):
    """Largest pairwise cosine similarity among codebook rows. The gradient
    flows only through the maximizing pair; exact ties resolve to the first
    pair in row-major order."""
    rows = _rows_tensor(book)
    k = rows.shape[0]
    if rows.ndim != 2 or k < 2:
        raise TensorError(f"need at least 2 codewords, got shape {rows.shape}")
    sims = pairwise_cosine(rows, rows)
    masked = sims.data + np.eye(k) * _EXCLUDED
    i, j = np.unravel_index(np.argmax(masked), masked.shape)
    return sims[int(i), int(j)]


@dataclass
class PretrainParts:
    info_nce: Tensor
    column_separation: Tensor


@dataclass
class FinetuneParts:
    cross_entropy: Tensor
    hinge: Tensor
    row_separation: Tensor
    mcsm: Tensor | None = None


def pretrain_loss(parts, cfg=LossConfig()):
    """Contrastive term plus lambda-weighted column separation."""
    return parts.info_nce + cfg.lambda_csl * parts.column_separation


FINETUNE_VARIANTS = ("pf", "cfpc", "tfc")


def finetune_loss(parts, variant, mcsm_weight=1.0):
    """Decoder cross-entropy + hinge + row separation; the ``cfpc`` variant
    adds the max-cosine term. ``tfc`` trains against a fixed codebook, where
    that term is a constant with no gradient, so it is logged but not summed.
    """
    if variant not in FINETUNE_VARIANTS:
        raise ValueError(f"unknown finetune variant {variant!r}")
    total = parts.cross_entropy + parts.hinge + parts.row_separation
    if variant == "cfpc":
        if parts.mcsm is None:
            raise ValueError("cfpc fine-tuning needs the mcsm part")
        total = total + mcsm_weight * parts.mcsm
    return total
