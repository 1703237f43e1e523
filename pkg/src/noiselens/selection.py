"""Clean-sample selection: prediction confidence and prompt consistency.

Both criteria compare a per-sample score against a threshold with a strict
inequality; confidence keeps high scores, consistency keeps low divergences.
Selection reads only noisy labels and scores, never ground truth.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, ScoreMatrix, _header_int, _parse_header, _read_text, fmt_float
from .errors import FormatError, ValidationError

CRITERION_CONFIDENCE = "confidence"
CRITERION_PROMPT_CONSISTENCY = "prompt_consistency"

LN2 = float(np.log(2.0))

# Probability entries below this are treated as exact zeros inside the
# divergence, keeping x*log(x) well-defined at the boundary.
ZERO_CUTOFF = 1e-15

DEFAULT_CONFIDENCE_THRESHOLD = 0.5
# No validated reference value exists for the consistency threshold; 0.1 keeps
# identical score pairs selected and disjoint-support pairs rejected.
DEFAULT_CONSISTENCY_THRESHOLD = 0.1


@dataclass(frozen=True)
class SelectionMask:
    """Per-sample clean/rejected verdicts plus the scores that produced them."""

    sample_ids: np.ndarray
    scores: np.ndarray
    verdicts: np.ndarray
    criterion: str
    threshold: float

    def __post_init__(self):
        ids = np.asarray(self.sample_ids, dtype=np.int64)
        scores = np.asarray(self.scores, dtype=np.float64)
        verdicts = np.asarray(self.verdicts, dtype=bool)
        if not (ids.shape == scores.shape == verdicts.shape) or ids.ndim != 1 or ids.size == 0:
            raise ValidationError("mask fields must be equal-length, non-empty 1-D arrays")
        if self.criterion == CRITERION_CONFIDENCE:
            expected = scores > self.threshold
        elif self.criterion == CRITERION_PROMPT_CONSISTENCY:
            expected = scores < self.threshold
        else:
            raise ValidationError(f"unknown criterion {self.criterion!r}")
        if not np.array_equal(verdicts, expected):
            raise ValidationError("verdicts are inconsistent with scores and threshold")
        for name, arr in (("sample_ids", ids), ("scores", scores), ("verdicts", verdicts)):
            arr = np.ascontiguousarray(arr)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def selected_count(self) -> int:
        return int(self.verdicts.sum())


def _check_alignment(dataset: Dataset, scores: ScoreMatrix) -> None:
    if scores.num_rows != dataset.num_samples or scores.num_cols != dataset.num_classes:
        raise ValidationError("score matrix shape does not match dataset")
    if not np.array_equal(scores.sample_ids, dataset.ids):
        raise ValidationError("score matrix ids do not align with dataset")


def select_by_confidence(dataset: Dataset, scores: ScoreMatrix, rho: float) -> SelectionMask:
    """Keep sample i when its score at the noisy label strictly exceeds rho."""
    if not 0.0 < rho < 1.0:
        raise ValidationError("rho must lie in (0, 1)")
    _check_alignment(dataset, scores)
    at_label = scores.values[np.arange(dataset.num_samples), dataset.noisy_labels]
    return SelectionMask(
        sample_ids=dataset.ids,
        scores=at_label,
        verdicts=at_label > rho,
        criterion=CRITERION_CONFIDENCE,
        threshold=rho,
    )


def _check_distribution(p: np.ndarray, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ValidationError(f"{name} must be a 1-D probability vector")
    if p.min() < 0.0:
        raise ValidationError(f"{name} has a negative entry")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValidationError(f"{name} sums to {p.sum()!r}, not 1")
    return p


def _js_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise Jensen-Shannon divergence in nats, zeros handled by the
    x*log(x) -> 0 limit."""
    a = np.where(a < ZERO_CUTOFF, 0.0, a)
    b = np.where(b < ZERO_CUTOFF, 0.0, b)
    m = 0.5 * (a + b)

    def half_kl(p):
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = p * np.log(p / m)
        return np.where(p > 0.0, terms, 0.0).sum(axis=-1)

    return np.maximum(0.5 * half_kl(a) + 0.5 * half_kl(b), 0.0)


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence between two probability vectors, natural
    log, bounded by [0, ln 2]."""
    p = _check_distribution(p, "p")
    q = _check_distribution(q, "q")
    if p.shape != q.shape:
        raise ValidationError("p and q must have the same length")
    return float(_js_rows(p[None, :], q[None, :])[0])


def select_by_prompt_consistency(
    dataset: Dataset,
    scores_a: ScoreMatrix,
    scores_b: ScoreMatrix,
    mu: float,
) -> SelectionMask:
    """Keep sample i when the divergence between its two prompt-variant score
    rows is strictly below mu."""
    if not mu > 0.0:
        raise ValidationError("mu must be positive")
    _check_alignment(dataset, scores_a)
    _check_alignment(dataset, scores_b)
    distances = _js_rows(scores_a.values, scores_b.values)
    return SelectionMask(
        sample_ids=dataset.ids,
        scores=distances,
        verdicts=distances < mu,
        criterion=CRITERION_PROMPT_CONSISTENCY,
        threshold=mu,
    )


def apply_mask(dataset: Dataset, mask: SelectionMask) -> Dataset:
    """Restrict the dataset to the samples the mask marks clean, preserving
    order and ids."""
    if not np.array_equal(mask.sample_ids, dataset.ids):
        raise ValidationError("mask was built against a different dataset")
    indices = np.nonzero(mask.verdicts)[0]
    if indices.size == 0:
        raise ValidationError(
            "empty selection: no sample passed the threshold, training cannot proceed"
        )
    return dataset.subset(indices)


def apply_masks(dataset: Dataset, masks) -> Dataset:
    """Intersect several masks (logical AND of verdicts) and apply the result.

    Combining criteria is an extrapolation beyond the two documented
    single-criterion paths; exposed for experimentation.
    """
    masks = list(masks)
    if not masks:
        raise ValidationError("need at least one mask")
    combined = np.ones(dataset.num_samples, dtype=bool)
    for mask in masks:
        if not np.array_equal(mask.sample_ids, dataset.ids):
            raise ValidationError("mask was built against a different dataset")
        combined &= mask.verdicts
    indices = np.nonzero(combined)[0]
    if indices.size == 0:
        raise ValidationError(
            "empty selection: no sample passed all thresholds, training cannot proceed"
        )
    return dataset.subset(indices)


def save_mask(path, mask: SelectionMask) -> None:
    lines = [
        f"#noiselens-mask v1 N={mask.sample_ids.size} "
        f"CRITERION={mask.criterion} THRESHOLD={fmt_float(mask.threshold)}"
    ]
    for i in range(mask.sample_ids.size):
        lines.append(
            f"{int(mask.sample_ids[i])},{fmt_float(mask.scores[i])},{int(mask.verdicts[i])}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_mask(path) -> SelectionMask:
    lines = _read_text(path)
    if not lines:
        raise FormatError(f"{path}: empty file")
    kv = _parse_header(lines[0], "mask", ("N", "CRITERION", "THRESHOLD"))
    n = _header_int(kv, "N")
    try:
        threshold = float(kv["THRESHOLD"])
    except ValueError:
        raise FormatError("line 1: THRESHOLD is not a float") from None
    records = [ln for ln in lines[1:] if ln.strip()]
    if len(records) != n:
        raise FormatError(f"header declares N={n} but file has {len(records)} records")
    ids = np.empty(n, dtype=np.int64)
    scores = np.empty(n, dtype=np.float64)
    verdicts = np.empty(n, dtype=bool)
    for i, line in enumerate(records):
        lineno = i + 2
        parts = line.split(",")
        if len(parts) != 3:
            raise FormatError(f"line {lineno}: expected 3 fields, got {len(parts)}")
        try:
            ids[i] = int(parts[0])
            scores[i] = float(parts[1])
            flag = int(parts[2])
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
        if flag not in (0, 1):
            raise FormatError(f"line {lineno}: verdict must be 0 or 1")
        verdicts[i] = bool(flag)
    return SelectionMask(ids, scores, verdicts, kv["CRITERION"], threshold)
