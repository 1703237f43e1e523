"""Synthetic benchmarks: Gaussian blob datasets, label-corruption models,
and ground-truth-aware quality metrics.

Three corruption models are provided. Symmetric noise resamples a chosen
fraction of labels uniformly over *all* classes (so a resampled label can
land back on the true class, and the effective flip rate is
rate * (C-1) / C). Asymmetric noise flips each mapped class to a fixed
target class with the given probability. Instance-dependent noise gives
every sample its own flip budget and distributes it across wrong classes
by how strongly the sample's features project onto per-class directions.

Every injector returns the corrupted dataset together with a record of
what actually happened (flips, realized rate, realized transition matrix),
so experiments can report against the truth instead of the nominal knobs.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from . import data as _data
from .data import Dataset, LabelSpace, fmt_float
from .errors import FormatError, ValidationError
from .selection import SelectionMask

NOISE_KINDS = ("symmetric", "asymmetric", "instance_dependent")

# Width and clipping range of the per-sample flip-budget distribution used
# by the instance-dependent model.
DEFAULT_BUDGET_SD = 0.1
DEFAULT_BUDGET_BOUNDS = (0.0, 1.0)


@dataclass(frozen=True)
class NoiseSpec:
    """Which corruption model to run and with what knobs."""

    kind: str
    rate: float
    seed: int = 0
    pair_map: Optional[dict] = None
    budget_sd: float = DEFAULT_BUDGET_SD
    budget_bounds: tuple = DEFAULT_BUDGET_BOUNDS

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValidationError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.rate < 1.0:
            raise ValidationError("noise rate must lie in [0, 1)")
        if self.kind == "asymmetric":
            if not self.pair_map:
                raise ValidationError("asymmetric noise requires a pair_map")
            for src, dst in self.pair_map.items():
                if src == dst:
                    raise ValidationError(
                        f"pair_map maps class {src} to itself; flips must change the label"
                    )
        if self.kind == "instance_dependent":
            lo, hi = self.budget_bounds
            if not (0.0 <= lo <= hi <= 1.0):
                raise ValidationError("budget_bounds must satisfy 0 <= lo <= hi <= 1")
            if self.budget_sd < 0:
                raise ValidationError("budget_sd must be nonnegative")


@dataclass(frozen=True)
class CorruptionRecord:
    """What a corruption run actually did, measured after the fact."""

    flipped_ids: np.ndarray
    realized_rate: float
    realized_transition: np.ndarray
    num_samples: int

    def __post_init__(self):
        object.__setattr__(self, "flipped_ids", _data._freeze(np.asarray(self.flipped_ids, dtype=np.int64)))
        object.__setattr__(
            self, "realized_transition", _data._freeze(np.asarray(self.realized_transition, dtype=np.float64))
        )

    @property
    def num_flipped(self) -> int:
        return int(self.flipped_ids.size)


def _blob_means(rng: np.random.Generator, num_classes: int, dim: int, separation: float) -> np.ndarray:
    """Class means: axis-aligned for the first min(C, d) classes, random
    unit directions for any excess classes."""
    means = np.zeros((num_classes, dim))
    axis_count = min(num_classes, dim)
    extra = num_classes - axis_count
    if extra > 0:
        raw = rng.standard_normal((extra, dim))
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        means[axis_count:] = separation * raw
    for k in range(axis_count):
        means[k, k] = separation
    return means


def blob_means(num_classes: int, dim: int, separation: float, seed: int = 0) -> np.ndarray:
    """The exact class means `make_blobs` uses for the same arguments."""
    if num_classes < 2 or dim < 1:
        raise ValidationError("need at least 2 classes and 1 dimension")
    return _blob_means(np.random.default_rng(seed), num_classes, dim, separation)


def make_blobs(
    num_classes: int,
    per_class: int,
    dim: int,
    separation: float,
    seed: int = 0,
) -> Dataset:
    """Balanced unit-variance Gaussian blobs with known class means.

    Samples are grouped by class (ids 0..N-1 in class order) and start out
    uncorrupted: noisy labels equal the true ones until an injector runs.
    """
    if num_classes < 2 or dim < 1 or per_class < 1:
        raise ValidationError("need at least 2 classes, 1 dimension and 1 sample per class")
    if separation < 0:
        raise ValidationError("separation must be nonnegative")
    rng = np.random.default_rng(seed)
    means = _blob_means(rng, num_classes, dim, separation)
    n = num_classes * per_class
    labels = np.repeat(np.arange(n // per_class), per_class)
    features = means[labels] + rng.standard_normal((n, dim))
    return Dataset(
        label_space=LabelSpace.default(num_classes),
        ids=np.arange(n),
        features=features,
        noisy_labels=labels.copy(),
        true_labels=labels.copy(),
    )


def _require_ground_truth(dataset: Dataset, what: str) -> None:
    if not dataset.has_ground_truth:
        raise ValidationError(f"{what} requires ground-truth labels")


def _finish(dataset: Dataset, noisy: np.ndarray) -> tuple:
    """Assemble the corrupted dataset and its measured record."""
    truth = dataset.true_labels
    flipped = noisy != truth
    c = dataset.num_classes
    transition = np.zeros((c, c))
    for i in range(c):
        members = truth == i
        count = int(members.sum())
        if count == 0:
            transition[i] = 1.0 / c
        else:
            transition[i] = np.bincount(noisy[members], minlength=c) / count
    corrupted = Dataset(
        label_space=dataset.label_space,
        ids=dataset.ids,
        features=dataset.features,
        noisy_labels=noisy,
        true_labels=truth,
    )
    record = CorruptionRecord(
        flipped_ids=dataset.ids[flipped],
        realized_rate=float(flipped.mean()),
        realized_transition=transition,
        num_samples=dataset.num_samples,
    )
    return corrupted, record


def inject_symmetric(dataset: Dataset, spec: NoiseSpec) -> tuple:
    """Resample a `rate` fraction of labels uniformly over all classes.

    Expected transition matrix: 1 - rate*(C-1)/C on the diagonal, rate/C
    elsewhere.
    """
    if spec.kind != "symmetric":
        raise ValidationError(f"spec kind is {spec.kind!r}, not 'symmetric'")
    _require_ground_truth(dataset, "label corruption")
    rng = np.random.default_rng(spec.seed)
    n = dataset.num_samples
    chosen = rng.random(n) < spec.rate
    resampled = rng.integers(0, dataset.num_classes, size=n)
    noisy = np.where(chosen, resampled, dataset.true_labels)
    return _finish(dataset, noisy)


def inject_asymmetric(dataset: Dataset, spec: NoiseSpec) -> tuple:
    """Flip each mapped class to its fixed partner with probability `rate`;
    classes absent from the map never flip."""
    if spec.kind != "asymmetric":
        raise ValidationError(f"spec kind is {spec.kind!r}, not 'asymmetric'")
    _require_ground_truth(dataset, "label corruption")
    c = dataset.num_classes
    for src, dst in spec.pair_map.items():
        if not (0 <= src < c and 0 <= dst < c):
            raise ValidationError(f"pair_map entry {src}->{dst} is out of range for {c} classes")
    rng = np.random.default_rng(spec.seed)
    truth = dataset.true_labels
    noisy = truth.copy()
    flip = rng.random(dataset.num_samples) < spec.rate
    for src, dst in spec.pair_map.items():
        members = (truth == src) & flip
        noisy[members] = dst
    return _finish(dataset, noisy)


def inject_instance_dependent(dataset: Dataset, spec: NoiseSpec) -> tuple:
    """Feature-driven corruption with a per-sample flip budget.

    Each sample draws a budget q from a truncated normal centered on
    `rate`; its wrong-class probabilities are q times a softmax over the
    projections of its features onto random per-class directions, and the
    true class keeps 1 - q.
    """
    if spec.kind != "instance_dependent":
        raise ValidationError(f"spec kind is {spec.kind!r}, not 'instance_dependent'")
    _require_ground_truth(dataset, "label corruption")
    rng = np.random.default_rng(spec.seed)
    n, d = dataset.features.shape
    c = dataset.num_classes
    lo, hi = spec.budget_bounds

    if lo == hi:
        budgets = np.full(n, lo)
    elif spec.budget_sd == 0:
        budgets = np.full(n, min(max(spec.rate, lo), hi))
    else:
        a = (lo - spec.rate) / spec.budget_sd
        b = (hi - spec.rate) / spec.budget_sd
        budgets = stats.truncnorm.rvs(
            a, b, loc=spec.rate, scale=spec.budget_sd, size=n, random_state=rng
        )

    projections = rng.standard_normal((c, d))
    logits = dataset.features @ projections.T
    truth = dataset.true_labels
    rows = np.arange(n)
    logits[rows, truth] = -np.inf
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)

    probs = weights * budgets[:, None]
    probs[rows, truth] = 1.0 - budgets

    cdf = np.cumsum(probs, axis=1)
    u = rng.random(n)
    noisy = (u[:, None] > cdf).sum(axis=1).astype(np.int64)
    np.minimum(noisy, c - 1, out=noisy)
    return _finish(dataset, noisy)


def inject_noise(dataset: Dataset, spec: NoiseSpec) -> tuple:
    """Dispatch to the injector named by ``spec.kind``."""
    if spec.kind == "symmetric":
        return inject_symmetric(dataset, spec)
    if spec.kind == "asymmetric":
        return inject_asymmetric(dataset, spec)
    return inject_instance_dependent(dataset, spec)


@dataclass(frozen=True)
class SelectionQuality:
    """Precision/recall/F1 of a selection mask against ground truth, where
    a 'positive' is a sample whose noisy label matches its true label."""

    precision: float
    recall: float
    f1: float
    selected: int
    actually_clean: int
    true_positives: int


def selection_quality(mask: SelectionMask, dataset: Dataset) -> SelectionQuality:
    """Score the mask's verdicts against the dataset's ground truth."""
    _require_ground_truth(dataset, "selection scoring")
    if mask.sample_ids.shape != dataset.ids.shape or not np.array_equal(mask.sample_ids, dataset.ids):
        raise ValidationError("mask ids do not match the dataset")
    clean = dataset.noisy_labels == dataset.true_labels
    chosen = mask.verdicts
    tp = int((chosen & clean).sum())
    selected = int(chosen.sum())
    actual = int(clean.sum())
    precision = tp / selected if selected else 0.0
    recall = tp / actual if actual else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return SelectionQuality(
        precision=precision,
        recall=recall,
        f1=f1,
        selected=selected,
        actually_clean=actual,
        true_positives=tp,
    )


def oracle_scores(dataset: Dataset, correct_prob: float = 1.0):
    """Ground-truth score rows: `correct_prob` on the true class and the
    remainder spread evenly over the others. correct_prob=1 gives one-hot
    rows; useful as a best-case surrogate in benchmarks."""
    from .data import ScoreMatrix

    _require_ground_truth(dataset, "oracle scoring")
    if not 0.0 < correct_prob <= 1.0:
        raise ValidationError("correct_prob must lie in (0, 1]")
    n, c = dataset.num_samples, dataset.num_classes
    if c > 1:
        values = np.full((n, c), (1.0 - correct_prob) / (c - 1))
    else:
        values = np.zeros((n, c))
    values[np.arange(n), dataset.true_labels] = correct_prob
    return ScoreMatrix(values=values, sample_ids=dataset.ids)


def save_corruption_record(path, record: CorruptionRecord, spec: NoiseSpec) -> None:
    """Write the record plus the nominal spec as `#noiselens-corruption v1`."""
    c = record.realized_transition.shape[0]
    lines = [
        f"#noiselens-corruption v1 N={record.num_samples} C={c} "
        f"KIND={spec.kind} RATE={fmt_float(spec.rate)} SEED={spec.seed} "
        f"FLIPPED={record.num_flipped} REALIZED={fmt_float(record.realized_rate)}"
    ]
    lines.append(",".join(str(int(i)) for i in record.flipped_ids))
    for row in record.realized_transition:
        lines.append(",".join(fmt_float(v) for v in row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_corruption_record(path) -> tuple:
    """Read a corruption record; returns (record, header_dict)."""
    lines = _data._read_text(path)
    if not lines:
        raise FormatError(f"{path}: empty file")
    header = _data._parse_header(lines[0], "corruption", ("N", "C", "KIND", "FLIPPED", "REALIZED"))
    n = _data._header_int(header, "N")
    c = _data._header_int(header, "C")
    flipped_count = _data._header_int(header, "FLIPPED")
    if len(lines) != 2 + c:
        raise FormatError(f"{path}: expected {2 + c} lines, found {len(lines)}")
    raw = lines[1].strip()
    if raw:
        try:
            flipped = np.array([int(tok) for tok in raw.split(",")], dtype=np.int64)
        except ValueError as exc:
            raise FormatError(f"{path}: bad flipped-id list: {exc}") from None
    else:
        flipped = np.zeros(0, dtype=np.int64)
    if flipped.size != flipped_count:
        raise FormatError(
            f"{path}: header says {flipped_count} flipped ids, found {flipped.size}"
        )
    transition = np.zeros((c, c))
    for i in range(c):
        parts = lines[2 + i].split(",")
        if len(parts) != c:
            raise FormatError(f"{path}: transition row {i} has {len(parts)} entries, expected {c}")
        try:
            transition[i] = [float(tok) for tok in parts]
        except ValueError as exc:
            raise FormatError(f"{path}: transition row {i}: {exc}") from None
    try:
        realized = float(header["REALIZED"])
    except ValueError as exc:
        raise FormatError(f"{path}: bad REALIZED value: {exc}") from None
    record = CorruptionRecord(
        flipped_ids=flipped,
        realized_rate=realized,
        realized_transition=transition,
        num_samples=n,
    )
    return record, header
