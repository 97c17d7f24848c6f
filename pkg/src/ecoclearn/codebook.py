"""Class codebooks: generation from data, decoding, separation statistics, CSV I/O.

A codebook is a K x n real matrix whose row k is the codeword for class k
(class ids are 1-based everywhere in this package). Codebooks are immutable
after construction and safe to share across threads.

File format: UTF-8 CSV, first line ``K,n``, then K lines of n comma-separated
floats written with shortest-round-trip formatting, so save/load round-trips
bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, ZeroNormError

SOURCE_GENERATED = "generated-from-data"
SOURCE_LOADED = "loaded"
SOURCE_FIXED_BINARY = "fixed-binary"

# Rows closer than this (max absolute difference) count as duplicates.
DUPLICATE_ROW_TOL = 1e-9


class CodebookError(ValueError):
    pass


@dataclass(frozen=True)
class Codebook:
    rows: np.ndarray
    source: str = SOURCE_GENERATED

    def __post_init__(self):
        rows = np.ascontiguousarray(np.asarray(self.rows, dtype=np.float64))
        if rows.ndim != 2:
            raise CodebookError(f"codebook rows must be 2-d, got shape {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise CodebookError("codebook contains NaN or Inf")
        if self.source == SOURCE_FIXED_BINARY and not np.all(np.isin(rows, (0.0, 1.0))):
            raise CodebookError("fixed-binary codebook must contain only 0/1 entries")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def num_classes(self):
        return self.rows.shape[0]

    @property
    def code_length(self):
        return self.rows.shape[1]

    def row(self, class_id):
        """Codeword for a 1-based class id."""
        if not 1 <= class_id <= self.num_classes:
            raise CodebookError(f"class id {class_id} outside 1..{self.num_classes}")
        return self.rows[class_id - 1]

    def rows_for_labels(self, labels):
        """Stack of codewords for an array of 1-based class ids."""
        return self.rows[np.asarray(labels) - 1]

    def is_binary(self):
        return bool(np.all(np.isin(self.rows, (0.0, 1.0))))


@dataclass(frozen=True)
class SeparationReport:
    min_pairwise_hamming: int
    min_pairwise_cosine_distance: float
    max_pairwise_cosine: float
    mean_column_correlation: float

    def as_dict(self):
        return {
            "min_pairwise_hamming": self.min_pairwise_hamming,
            "min_pairwise_cosine_distance": self.min_pairwise_cosine_distance,
            "max_pairwise_cosine": self.max_pairwise_cosine,
            "mean_column_correlation": self.mean_column_correlation,
        }


def _check_duplicate_rows(rows):
    k = rows.shape[0]
    for i in range(k):
        for j in range(i + 1, k):
            if np.max(np.abs(rows[i] - rows[j])) < DUPLICATE_ROW_TOL:
                raise CodebookError(
                    f"codewords for classes {i + 1} and {j + 1} are identical")


def generate_codebook(codewords, labels, num_classes):
    """Average the predicted codewords of each class into its codebook row.

    ``codewords`` is an (N, n) Tensor or array, ``labels`` holds 1-based class
    ids. Every class 1..num_classes must appear at least once. The result is
    detached from any autodiff graph: generated codebooks act as targets.
    """
    values = codewords.data if isinstance(codewords, Tensor) else np.asarray(
        codewords, dtype=np.float64)
    labels = np.asarray(labels)
    if values.ndim != 2 or values.shape[0] != labels.shape[0]:
        raise CodebookError(
            f"codewords {values.shape} inconsistent with {labels.shape[0]} labels")
    rows = np.zeros((num_classes, values.shape[1]))
    for k in range(1, num_classes + 1):
        members = values[labels == k]
        if members.shape[0] == 0:
            raise CodebookError(f"class {k} has no instances in the generation data")
        rows[k - 1] = members.mean(axis=0)
    _check_duplicate_rows(rows)
    return Codebook(rows, source=SOURCE_GENERATED)


def hamming_decode(predicted, book):
    """Class id whose binary codeword disagrees with ``predicted`` in the
    fewest positions; ties break to the smallest class id."""
    predicted = np.asarray(predicted, dtype=np.float64)
    if not book.is_binary():
        raise CodebookError("hamming decoding needs a binary codebook")
    if not np.all(np.isin(predicted, (0.0, 1.0))):
        raise CodebookError("hamming decoding needs a 0/1 predicted codeword")
    if predicted.shape != (book.code_length,):
        raise CodebookError(
            f"predicted length {predicted.shape} != codeword length {book.code_length}")
    distances = np.count_nonzero(book.rows != predicted[None, :], axis=1)
    return int(np.argmin(distances)) + 1


def hamming_distances(predicted, book):
    """Bitwise disagreement counts against every codebook row."""
    predicted = np.asarray(predicted, dtype=np.float64)
    return np.count_nonzero(book.rows != predicted[None, :], axis=1)


def decode_probabilities(predicted, book):
    """Softmax over cosine similarities to each codeword (differentiable).

    ``predicted`` is a (B, n) Tensor of codewords; returns a (B, K) Tensor of
    class probabilities. The codebook acts as a constant.
    """
    from .tensor import pairwise_cosine, softmax

    rows = Tensor(book.rows)
    sims = pairwise_cosine(predicted, rows)
    return softmax(sims, axis=-1)


def cosine_decode(predicted, book):
    """Decode one codeword: (class id, length-K probability vector)."""
    predicted = np.asarray(
        predicted.data if isinstance(predicted, Tensor) else predicted,
        dtype=np.float64)
    if predicted.shape != (book.code_length,):
        raise CodebookError(
            f"predicted length {predicted.shape} != codeword length {book.code_length}")
    if np.linalg.norm(predicted) == 0.0:
        raise ZeroNormError("cannot cosine-decode a zero codeword")
    probs = decode_probabilities(Tensor(predicted[None, :]), book).data[0]
    return int(np.argmax(probs)) + 1, probs


def binarize(book, threshold=None):
    """Binary view of a codebook: 1 where an entry exceeds its column's
    threshold, else 0. Default threshold is the per-column median (strict >);
    pass a float for a fixed global threshold."""
    if threshold is None:
        cut = np.median(book.rows, axis=0)
    else:
        cut = np.full(book.code_length, float(threshold))
    bits = (book.rows > cut[None, :]).astype(np.float64)
    return Codebook(bits, source=SOURCE_FIXED_BINARY)


def separation_report(book):
    """Row- and column-separation statistics over all unordered pairs."""
    if book.num_classes < 2:
        raise CodebookError("separation report needs at least 2 classes")
    rows = book.rows
    k = book.num_classes

    binary = book if book.is_binary() else binarize(book)
    min_hamming = min(
        int(np.count_nonzero(binary.rows[i] != binary.rows[j]))
        for i in range(k) for j in range(i + 1, k))

    # cosine statistics run over pairs of nonzero rows; an all-zero codeword
    # (legal in binary books) has no direction to compare
    norms = np.linalg.norm(rows, axis=1)
    alive = np.flatnonzero(norms > 0.0)
    if alive.size < 2:
        raise ZeroNormError("separation report needs at least 2 nonzero codewords")
    unit = rows[alive] / norms[alive, None]
    sims = unit @ unit.T
    pair_sims = sims[np.triu_indices(alive.size, 1)]
    max_cos = float(np.max(pair_sims))

    centered = rows - rows.mean(axis=0, keepdims=True)
    col_norms = np.linalg.norm(centered, axis=0)
    n = book.code_length
    corr_sum, pairs = 0.0, 0
    for a in range(n):
        for b in range(a + 1, n):
            pairs += 1
            if col_norms[a] == 0.0 or col_norms[b] == 0.0:
                continue  # constant column: no correlation contribution
            corr = centered[:, a] @ centered[:, b] / (col_norms[a] * col_norms[b])
            corr_sum += abs(corr)

    return SeparationReport(
        min_pairwise_hamming=min_hamming,
        min_pairwise_cosine_distance=1.0 - max_cos,
        max_pairwise_cosine=max_cos,
        mean_column_correlation=corr_sum / pairs if pairs else 0.0,
    )


def save_codebook(book, path):
    """Write a codebook as CSV: header ``K,n`` then one row per class."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{book.num_classes},{book.code_length}\n")
        for row in book.rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_codebook(path, source=SOURCE_LOADED):
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise CodebookError(f"empty codebook file: {path}")
    head = lines[0].split(",")
    if len(head) != 2:
        raise CodebookError(f"malformed codebook header: {lines[0]!r}")
    try:
        k, n = int(head[0]), int(head[1])
    except ValueError as exc:
        raise CodebookError(f"malformed codebook header: {lines[0]!r}") from exc
    body = lines[1:]
    if len(body) != k:
        raise CodebookError(f"expected {k} codeword rows, found {len(body)}")
    rows = np.zeros((k, n))
    for i, line in enumerate(body):
        cells = line.split(",")
        if len(cells) != n:
            raise CodebookError(
                f"row {i + 1} has {len(cells)} entries, expected {n}")
        try:
            rows[i] = [float(c) for c in cells]
        except ValueError as exc:
            raise CodebookError(f"non-numeric entry in row {i + 1}") from exc
    if np.all(np.isin(rows, (0.0, 1.0))):
        source = SOURCE_FIXED_BINARY if source == SOURCE_LOADED else source
    return Codebook(rows, source=source)
