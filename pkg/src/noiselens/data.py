"""Core data model: labeled feature datasets, surrogate score matrices, and
their text/binary serialization.

Datasets and score matrices are immutable after construction (the backing
arrays are frozen), so they can be shared freely across workers.
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import FormatError, ValidationError

# Files ingested from disk carry limited precision; internal computations
# are held to a tighter budget.
ROW_SUM_FILE_TOL = 1e-6
ROW_SUM_INTERNAL_TOL = 1e-9

MAGIC = b"NLNS"
BINARY_VERSION = 1
KIND_DATASET = 1
KIND_SCORES = 2
KIND_BANK = 3
KIND_CLASSIFIER = 4


def fmt_float(x) -> str:
    """Shortest decimal string that parses back to the identical float64."""
    return repr(float(x))


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class LabelSpace:
    """The set of C class labels; names are for display only."""

    num_classes: int
    class_names: tuple[str, ...]

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValidationError("label space needs at least 2 classes")
        if len(self.class_names) != self.num_classes:
            raise ValidationError(
                f"expected {self.num_classes} class names, got {len(self.class_names)}"
            )
        if any(not name for name in self.class_names):
            raise ValidationError("class names must be non-empty")
        if len(set(self.class_names)) != self.num_classes:
            raise ValidationError("class names must be distinct")

    @classmethod
    def default(cls, num_classes: int) -> "LabelSpace":
        return cls(num_classes, tuple(f"class_{j}" for j in range(num_classes)))


@dataclass(frozen=True)
class Sample:
    """One record: an id, a frozen-encoder feature vector, and labels.

    ``true_label`` is optional ground truth carried for evaluation only;
    no selection or training code reads it.
    """

    id: int
    features: np.ndarray
    noisy_label: int
    true_label: Optional[int] = None


class Dataset:
    """N samples with a shared feature dimension and label space.

    Either every sample carries a true label or none does; the flag is
    exposed as ``has_ground_truth``.
    """

    def __init__(
        self,
        label_space: LabelSpace,
        ids: np.ndarray,
        features: np.ndarray,
        noisy_labels: np.ndarray,
        true_labels: Optional[np.ndarray] = None,
    ):
        ids = np.asarray(ids, dtype=np.int64)
        features = np.asarray(features, dtype=np.float64)
        noisy_labels = np.asarray(noisy_labels, dtype=np.int64)
        if features.ndim != 2:
            raise ValidationError("features must be a 2-D array")
        n = ids.shape[0]
        if n < 1:
            raise ValidationError("dataset must contain at least one sample")
        if features.shape[0] != n or noisy_labels.shape[0] != n:
            raise ValidationError("ids, features and labels must have equal length")
        if len(np.unique(ids)) != n:
            raise ValidationError("duplicate id in dataset")
        if not np.all(np.isfinite(features)):
            raise ValidationError("non-finite feature value")
        c = label_space.num_classes
        if noisy_labels.min() < 0 or noisy_labels.max() >= c:
            raise ValidationError("label out of range")
        if true_labels is not None:
            true_labels = np.asarray(true_labels, dtype=np.int64)
            if true_labels.shape[0] != n:
                raise ValidationError("true_labels length mismatch")
            if true_labels.min() < 0 or true_labels.max() >= c:
                raise ValidationError("label out of range")
            true_labels = _freeze(true_labels)

        self.label_space = label_space
        self.ids = _freeze(ids)
        self.features = _freeze(features)
        self.noisy_labels = _freeze(noisy_labels)
        self.true_labels = true_labels

    @property
    def num_samples(self) -> int:
        return self.ids.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return self.label_space.num_classes

    @property
    def has_ground_truth(self) -> bool:
        return self.true_labels is not None

    def __len__(self) -> int:
        return self.num_samples

    def sample(self, index: int) -> Sample:
        true = int(self.true_labels[index]) if self.has_ground_truth else None
        return Sample(
            id=int(self.ids[index]),
            features=self.features[index],
            noisy_label=int(self.noisy_labels[index]),
            true_label=true,
        )

    def __iter__(self) -> Iterator[Sample]:
        for i in range(self.num_samples):
            yield self.sample(i)

    @property
    def samples(self) -> list[Sample]:
        return [self.sample(i) for i in range(self.num_samples)]

    def subset(self, indices: np.ndarray) -> "Dataset":
        """New dataset restricted to ``indices``, preserving order."""
        indices = np.asarray(indices)
        return Dataset(
            self.label_space,
            self.ids[indices],
            self.features[indices],
            self.noisy_labels[indices],
            None if self.true_labels is None else self.true_labels[indices],
        )

    @classmethod
    def from_samples(cls, label_space: LabelSpace, samples: list[Sample]) -> "Dataset":
        if not samples:
            raise ValidationError("dataset must contain at least one sample")
        has_gt = samples[0].true_label is not None
        if any((s.true_label is not None) != has_gt for s in samples):
            raise ValidationError("either every sample has a true label or none does")
        return cls(
            label_space,
            np.array([s.id for s in samples], dtype=np.int64),
            np.stack([np.asarray(s.features, dtype=np.float64) for s in samples]),
            np.array([s.noisy_label for s in samples], dtype=np.int64),
            np.array([s.true_label for s in samples], dtype=np.int64) if has_gt else None,
        )


@dataclass(frozen=True)
class ScoreMatrix:
    """N x C row-stochastic surrogate predictions aligned to a dataset by id."""

    values: np.ndarray
    sample_ids: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        ids = np.asarray(self.sample_ids, dtype=np.int64)
        if values.ndim != 2:
            raise ValidationError("score matrix must be 2-D")
        if ids.shape[0] != values.shape[0]:
            raise ValidationError("sample_ids length must equal the row count")
        if not np.all(np.isfinite(values)):
            raise ValidationError("non-finite score value")
        object.__setattr__(self, "values", _freeze(values))
        object.__setattr__(self, "sample_ids", _freeze(ids))

    @property
    def num_rows(self) -> int:
        return self.values.shape[0]

    @property
    def num_cols(self) -> int:
        return self.values.shape[1]

    def renormalized(self) -> "ScoreMatrix":
        """Divide each row by its sum so downstream log/divergence code never
        sees file-precision drift."""
        sums = self.values.sum(axis=1, keepdims=True)
        return ScoreMatrix(self.values / sums, self.sample_ids)


@dataclass(frozen=True)
class AlignmentReport:
    num_rows: int
    num_cols: int
    max_row_sum_deviation: float


def validate_score_matrix(scores: ScoreMatrix, dataset: Dataset) -> AlignmentReport:
    """Check row count, id alignment and row-stochasticity of ``scores``
    against ``dataset``; returns the largest row-sum deviation seen."""
    if scores.num_rows != dataset.num_samples:
        raise ValidationError(
            f"row count {scores.num_rows} does not match dataset size {dataset.num_samples}"
        )
    if scores.num_cols != dataset.num_classes:
        raise ValidationError(
            f"column count {scores.num_cols} does not match {dataset.num_classes} classes"
        )
    mismatch = np.nonzero(scores.sample_ids != dataset.ids)[0]
    if mismatch.size:
        i = int(mismatch[0])
        raise ValidationError(
            f"id mismatch at row {i}: score id {int(scores.sample_ids[i])} "
            f"!= dataset id {int(dataset.ids[i])}"
        )
    if scores.values.min() < 0.0:
        bad = np.argwhere(scores.values < 0.0)[0]
        raise ValidationError(f"negative entry at row {bad[0]}, column {bad[1]}")
    deviation = np.abs(scores.values.sum(axis=1) - 1.0)
    worst = int(np.argmax(deviation))
    if deviation[worst] > ROW_SUM_FILE_TOL:
        raise ValidationError(
            f"row {worst} sums to {scores.values[worst].sum()!r}, "
            f"deviation exceeds {ROW_SUM_FILE_TOL}"
        )
    return AlignmentReport(scores.num_rows, scores.num_cols, float(deviation[worst]))


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def _parse_header(line: str, tag: str, required: tuple[str, ...]) -> dict[str, str]:
    parts = line.strip().split()
    expected = f"#noiselens-{tag}"
    if len(parts) < 2 or parts[0] != expected or parts[1] != "v1":
        raise FormatError(f"line 1: expected '{expected} v1' header, got {line.strip()!r}")
    kv = {}
    for token in parts[2:]:
        if "=" not in token:
            raise FormatError(f"line 1: malformed header field {token!r}")
        key, value = token.split("=", 1)
        kv[key] = value
    for key in required:
        if key not in kv:
            raise FormatError(f"line 1: header missing {key}=")
    return kv


def _header_int(kv: dict[str, str], key: str) -> int:
    try:
        return int(kv[key])
    except ValueError:
        raise FormatError(f"line 1: {key}={kv[key]!r} is not an integer") from None


def _read_text(path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    return text.splitlines()


def is_binary_file(path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(4) == MAGIC


def _binary_header(buf: bytes, kind: int, path) -> int:
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: not a noiselens binary container")
    version, file_kind = struct.unpack_from("<HB", buf, 4)
    if version != BINARY_VERSION:
        raise FormatError(f"{path}: unsupported binary version {version}")
    if file_kind != kind:
        raise FormatError(f"{path}: binary container holds kind {file_kind}, expected {kind}")
    return 7


def _take(buf: bytes, offset: int, dtype, count: int) -> tuple[np.ndarray, int]:
    spec = np.dtype(dtype).newbyteorder("<")
    needed = spec.itemsize * count
    if offset + needed > len(buf):
        raise FormatError(
            f"truncated binary payload: need {needed} bytes at offset {offset}, "
            f"have {len(buf) - offset}"
        )
    arr = np.frombuffer(buf, dtype=spec, count=count, offset=offset)
    return arr.astype(dtype), offset + needed


def save_dataset(path, dataset: Dataset, fmt: str = "text") -> None:
    """Write a dataset in the v1 text format, or the binary twin with
    ``fmt='binary'``."""
    if fmt == "binary":
        _save_dataset_binary(path, dataset)
        return
    if fmt != "text":
        raise ValidationError(f"unknown format {fmt!r}")
    n, c, d = dataset.num_samples, dataset.num_classes, dataset.feature_dim
    gt = 1 if dataset.has_ground_truth else 0
    lines = [f"#noiselens-dataset v1 N={n} C={c} D={d} GT={gt}"]
    for i in range(n):
        fields = [str(int(dataset.ids[i])), str(int(dataset.noisy_labels[i]))]
        if gt:
            fields.append(str(int(dataset.true_labels[i])))
        fields.extend(fmt_float(x) for x in dataset.features[i])
        lines.append(",".join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _save_dataset_binary(path, dataset: Dataset) -> None:
    n, c, d = dataset.num_samples, dataset.num_classes, dataset.feature_dim
    gt = 1 if dataset.has_ground_truth else 0
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HB", BINARY_VERSION, KIND_DATASET))
        fh.write(struct.pack("<QQQB", n, c, d, gt))
        fh.write(dataset.ids.astype("<i8").tobytes())
        fh.write(dataset.noisy_labels.astype("<i8").tobytes())
        if gt:
            fh.write(dataset.true_labels.astype("<i8").tobytes())
        fh.write(dataset.features.astype("<f8").tobytes())


def load_dataset(path, fmt: str = "auto") -> Dataset:
    """Load a dataset, auto-detecting the binary container by magic bytes."""
    if fmt == "auto":
        fmt = "binary" if is_binary_file(path) else "text"
    if fmt == "binary":
        return _load_dataset_binary(path)
    if fmt != "text":
        raise ValidationError(f"unknown format {fmt!r}")

    lines = _read_text(path)
    if not lines:
        raise FormatError(f"{path}: empty file")
    kv = _parse_header(lines[0], "dataset", ("N", "C", "D", "GT"))
    n, c, d = _header_int(kv, "N"), _header_int(kv, "C"), _header_int(kv, "D")
    gt = _header_int(kv, "GT")
    if gt not in (0, 1):
        raise FormatError("line 1: GT must be 0 or 1")
    records = [ln for ln in lines[1:] if ln.strip()]
    if len(records) != n:
        raise FormatError(f"header declares N={n} but file has {len(records)} records")

    ids = np.empty(n, dtype=np.int64)
    noisy = np.empty(n, dtype=np.int64)
    true = np.empty(n, dtype=np.int64) if gt else None
    feats = np.empty((n, d), dtype=np.float64)
    width = 2 + gt + d
    for i, line in enumerate(records):
        lineno = i + 2
        parts = line.split(",")
        if len(parts) != width:
            raise FormatError(
                f"line {lineno}: expected {width} fields, got {len(parts)}"
            )
        try:
            ids[i] = int(parts[0])
            noisy[i] = int(parts[1])
            if gt:
                true[i] = int(parts[2])
            row = np.array([float(x) for x in parts[2 + gt:]], dtype=np.float64)
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
        if not np.all(np.isfinite(row)):
            raise FormatError(f"line {lineno}: non-finite feature value")
        if not 0 <= noisy[i] < c or (gt and not 0 <= true[i] < c):
            raise FormatError(f"line {lineno}: label out of range")
        feats[i] = row
    return Dataset(LabelSpace.default(c), ids, feats, noisy, true)


def _load_dataset_binary(path) -> Dataset:
    buf = Path(path).read_bytes()
    off = _binary_header(buf, KIND_DATASET, path)
    n, c, d, gt = struct.unpack_from("<QQQB", buf, off)
    off += 25
    ids, off = _take(buf, off, np.int64, n)
    noisy, off = _take(buf, off, np.int64, n)
    true = None
    if gt:
        true, off = _take(buf, off, np.int64, n)
    feats, off = _take(buf, off, np.float64, n * d)
    if np.any(noisy < 0) or np.any(noisy >= c) or (gt and (np.any(true < 0) or np.any(true >= c))):
        raise FormatError(f"{path}: label out of range")
    return Dataset(LabelSpace.default(c), ids, feats.reshape(n, d), noisy, true)


def save_score_matrix(path, scores: ScoreMatrix, fmt: str = "text") -> None:
    if fmt == "binary":
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<HB", BINARY_VERSION, KIND_SCORES))
            fh.write(struct.pack("<QQ", scores.num_rows, scores.num_cols))
            fh.write(scores.sample_ids.astype("<i8").tobytes())
            fh.write(scores.values.astype("<f8").tobytes())
        return
    if fmt != "text":
        raise ValidationError(f"unknown format {fmt!r}")
    lines = [f"#noiselens-scores v1 N={scores.num_rows} C={scores.num_cols}"]
    for i in range(scores.num_rows):
        lines.append(
            ",".join([str(int(scores.sample_ids[i]))] + [fmt_float(x) for x in scores.values[i]])
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_score_matrix(path, dataset: Dataset) -> ScoreMatrix:
    """Load scores, validate alignment against ``dataset``, then renormalize
    rows to sum exactly to one."""
    raw = read_score_matrix(path)
    validate_score_matrix(raw, dataset)
    return raw.renormalized()


def read_score_matrix(path) -> ScoreMatrix:
    """Parse a score file without dataset alignment checks."""
    if is_binary_file(path):
        buf = Path(path).read_bytes()
        off = _binary_header(buf, KIND_SCORES, path)
        n, c = struct.unpack_from("<QQ", buf, off)
        off += 16
        ids, off = _take(buf, off, np.int64, n)
        values, off = _take(buf, off, np.float64, n * c)
        return ScoreMatrix(values.reshape(n, c), ids)

    lines = _read_text(path)
    if not lines:
        raise FormatError(f"{path}: empty file")
    kv = _parse_header(lines[0], "scores", ("N", "C"))
    n, c = _header_int(kv, "N"), _header_int(kv, "C")
    records = [ln for ln in lines[1:] if ln.strip()]
    if len(records) != n:
        raise FormatError(f"header declares N={n} but file has {len(records)} records")
    ids = np.empty(n, dtype=np.int64)
    values = np.empty((n, c), dtype=np.float64)
    for i, line in enumerate(records):
        lineno = i + 2
        parts = line.split(",")
        if len(parts) != c + 1:
            raise FormatError(f"line {lineno}: expected {c + 1} fields, got {len(parts)}")
        try:
            ids[i] = int(parts[0])
            values[i] = [float(x) for x in parts[1:]]
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
    return ScoreMatrix(values, ids)
