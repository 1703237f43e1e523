"""Class-level statistics feeding the margin-adjusted loss: a transition
matrix averaged from surrogate scores over the full dataset, and a class
frequency prior counted on the selected clean subset.

Both statistics condition on noisy labels only.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import (
    Dataset,
    LabelSpace,
    ScoreMatrix,
    _header_int,
    _parse_header,
    _read_text,
    fmt_float,
)
from .errors import FormatError, ValidationError

ROW_SUM_TOL = 1e-9

# The prior enters the loss through its logarithm, so zero counts are fatal;
# add-half smoothing keeps every entry positive and washes out as counts grow.
PRIOR_SMOOTHING = 0.5


@dataclass(frozen=True)
class TransitionMatrix:
    """C x C row-stochastic matrix; row i averages the score rows of all
    samples whose noisy label is i.

    ``source_count`` records how many samples backed each row; it is None for
    matrices loaded from file (the format does not carry counts). ``warnings``
    lists classes that had no samples and fell back to a uniform row.
    """

    values: np.ndarray
    source_count: Optional[np.ndarray] = None
    warnings: tuple[str, ...] = field(default=())

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValidationError("transition matrix must be square")
        if not np.all(np.isfinite(values)):
            raise ValidationError("non-finite transition matrix entry")
        if values.min() < 0.0 or values.max() > 1.0 + ROW_SUM_TOL:
            raise ValidationError("transition matrix entries must lie in [0, 1]")
        deviation = np.abs(values.sum(axis=1) - 1.0)
        if deviation.max() > ROW_SUM_TOL:
            raise ValidationError(
                f"transition matrix row {int(np.argmax(deviation))} does not sum to 1"
            )
        values = np.ascontiguousarray(values)
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        if self.source_count is not None:
            counts = np.ascontiguousarray(np.asarray(self.source_count, dtype=np.int64))
            if counts.shape != (values.shape[0],):
                raise ValidationError("source_count length must equal the class count")
            counts.flags.writeable = False
            object.__setattr__(self, "source_count", counts)

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class ClassPrior:
    """Smoothed class frequencies of a clean subset; raw ratios are
    recoverable as counts / total."""

    values: np.ndarray
    counts: np.ndarray
    total: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        counts = np.asarray(self.counts, dtype=np.int64)
        if values.ndim != 1 or counts.shape != values.shape:
            raise ValidationError("prior values and counts must be equal-length vectors")
        if values.min() <= 0.0:
            raise ValidationError("smoothed prior entries must be strictly positive")
        if abs(values.sum() - 1.0) > 1e-12:
            raise ValidationError("prior must sum to 1")
        if counts.sum() != self.total:
            raise ValidationError("counts do not sum to the recorded total")
        for name, arr in (("values", values), ("counts", counts)):
            arr = np.ascontiguousarray(arr)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def raw(self) -> np.ndarray:
        return self.counts / self.total


def estimate_transition_matrix(dataset: Dataset, scores: ScoreMatrix) -> TransitionMatrix:
    """Average the score rows within each noisy-label group over the FULL
    dataset; a class with no samples gets a uniform row and a warning."""
    if scores.num_rows != dataset.num_samples or scores.num_cols != dataset.num_classes:
        raise ValidationError("score matrix shape does not match dataset")
    if not np.array_equal(scores.sample_ids, dataset.ids):
        raise ValidationError("score matrix ids do not align with dataset")
    c = dataset.num_classes
    values = np.empty((c, c), dtype=np.float64)
    counts = np.bincount(dataset.noisy_labels, minlength=c).astype(np.int64)
    warnings = []
    for i in range(c):
        if counts[i] == 0:
            values[i] = 1.0 / c
            warnings.append(f"class {i} has no samples; transition row set to uniform")
        else:
            rows = scores.values[dataset.noisy_labels == i]
            values[i] = rows.sum(axis=0) / counts[i]
    return TransitionMatrix(values, counts, tuple(warnings))


def transition_matrix_error(estimated: TransitionMatrix, reference: np.ndarray) -> float:
    """Mean absolute entry-wise difference against a reference row-stochastic
    matrix."""
    reference = np.asarray(reference, dtype=np.float64)
    c = estimated.num_classes
    if reference.shape != (c, c):
        raise ValidationError(
            f"reference shape {reference.shape} does not match ({c}, {c})"
        )
    if np.abs(reference.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValidationError("reference rows must sum to 1")
    return float(np.abs(estimated.values - reference).mean())


def compute_class_prior(clean_subset: Dataset, label_space: LabelSpace) -> ClassPrior:
    """Count noisy labels on the clean subset and smooth with add-half."""
    if clean_subset.num_classes != label_space.num_classes:
        raise ValidationError("subset label space does not match")
    c = label_space.num_classes
    counts = np.bincount(clean_subset.noisy_labels, minlength=c).astype(np.int64)
    total = int(counts.sum())
    if total == 0:
        raise ValidationError("empty subset")
    values = (counts + PRIOR_SMOOTHING) / (total + c * PRIOR_SMOOTHING)
    return ClassPrior(values, counts, total)


def save_transition_matrix(path, matrix: TransitionMatrix) -> None:
    lines = [f"#noiselens-tm v1 C={matrix.num_classes}"]
    for row in matrix.values:
        lines.append(",".join(fmt_float(x) for x in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_transition_matrix(path) -> TransitionMatrix:
    lines = _read_text(path)
    if not lines:
        raise FormatError(f"{path}: empty file")
    kv = _parse_header(lines[0], "tm", ("C",))
    c = _header_int(kv, "C")
    records = [ln for ln in lines[1:] if ln.strip()]
    if len(records) != c:
        raise FormatError(f"header declares C={c} but file has {len(records)} rows")
    values = np.empty((c, c), dtype=np.float64)
    for i, line in enumerate(records):
        parts = line.split(",")
        if len(parts) != c:
            raise FormatError(f"line {i + 2}: expected {c} fields, got {len(parts)}")
        try:
            values[i] = [float(x) for x in parts]
        except ValueError as exc:
            raise FormatError(f"line {i + 2}: {exc}") from None
    return TransitionMatrix(values)


def save_class_prior(path, prior: ClassPrior) -> None:
    lines = [f"#noiselens-prior v1 C={prior.values.size} TOTAL={prior.total}"]
    for j in range(prior.values.size):
        lines.append(f"{int(prior.counts[j])},{fmt_float(prior.values[j])}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_class_prior(path) -> ClassPrior:
    lines = _read_text(path)
    if not lines:
        raise FormatError(f"{path}: empty file")
    kv = _parse_header(lines[0], "prior", ("C", "TOTAL"))
    c, total = _header_int(kv, "C"), _header_int(kv, "TOTAL")
    records = [ln for ln in lines[1:] if ln.strip()]
    if len(records) != c:
        raise FormatError(f"header declares C={c} but file has {len(records)} rows")
    counts = np.empty(c, dtype=np.int64)
    values = np.empty(c, dtype=np.float64)
    for i, line in enumerate(records):
        parts = line.split(",")
        if len(parts) != 2:
            raise FormatError(f"line {i + 2}: expected 2 fields, got {len(parts)}")
        try:
            counts[i] = int(parts[0])
            values[i] = float(parts[1])
        except ValueError as exc:
            raise FormatError(f"line {i + 2}: {exc}") from None
    return ClassPrior(values, counts, total)
