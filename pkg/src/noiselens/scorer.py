"""Cosine-softmax surrogate scoring over precomputed embeddings.

The built-in scorer turns an embedding matrix and a bank of per-class
embeddings into a row-stochastic score matrix; scores produced elsewhere can
enter through a score file instead.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    BINARY_VERSION,
    KIND_BANK,
    MAGIC,
    Dataset,
    ScoreMatrix,
    _binary_header,
    _header_int,
    _parse_header,
    _read_text,
    _take,
    fmt_float,
    is_binary_file,
    load_score_matrix,
    validate_score_matrix,
)
from .errors import FormatError, ValidationError

# Below this, a vector is treated as zero and rejected rather than clamped:
# silent clamping would hide data corruption.
MIN_NORM = 1e-30

DEFAULT_TEMPERATURE = 0.01


@dataclass(frozen=True)
class ClassEmbeddingBank:
    """One embedding per class, all produced by the same prompt variant."""

    embeddings: np.ndarray
    prompt_id: str = "default"

    def __post_init__(self):
        emb = np.ascontiguousarray(np.asarray(self.embeddings, dtype=np.float64))
        if emb.ndim != 2:
            raise ValidationError("class embeddings must be a 2-D array")
        if not np.all(np.isfinite(emb)):
            raise ValidationError("non-finite class embedding")
        norms = np.linalg.norm(emb, axis=1)
        bad = np.nonzero(norms < MIN_NORM)[0]
        if bad.size:
            raise ValidationError(f"zero-norm class embedding at index {int(bad[0])}")
        if any(ch.isspace() for ch in self.prompt_id) or not self.prompt_id:
            raise ValidationError("prompt_id must be a non-empty token without whitespace")
        emb.flags.writeable = False
        object.__setattr__(self, "embeddings", emb)

    @property
    def num_classes(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass(frozen=True)
class ScorerConfig:
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValidationError("temperature must be positive")


def cosine_softmax_score(
    image_embeddings: np.ndarray,
    bank: ClassEmbeddingBank,
    config: ScorerConfig,
    sample_ids: np.ndarray | None = None,
) -> ScoreMatrix:
    """Score row i, class j as softmax_j(cos(V_i, T_j) / temperature).

    The softmax subtracts the per-row maximum before exponentiating, so the
    sharp default temperature (0.01) cannot overflow float64.
    """
    emb = np.asarray(image_embeddings, dtype=np.float64)
    if emb.ndim != 2:
        raise ValidationError("image embeddings must be a 2-D array")
    if emb.shape[1] != bank.dim:
        raise ValidationError(
            f"embedding dimension {emb.shape[1]} does not match bank dimension {bank.dim}"
        )
    if not np.all(np.isfinite(emb)):
        raise ValidationError("non-finite image embedding")
    norms = np.linalg.norm(emb, axis=1)
    bad = np.nonzero(norms < MIN_NORM)[0]
    if bad.size:
        raise ValidationError(f"zero-norm embedding at sample index {int(bad[0])}")

    unit_images = emb / norms[:, None]
    bank_norms = np.linalg.norm(bank.embeddings, axis=1)
    unit_classes = bank.embeddings / bank_norms[:, None]
    cosines = unit_images @ unit_classes.T

    logits = cosines / config.temperature
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    values = weights / weights.sum(axis=1, keepdims=True)
    if sample_ids is None:
        sample_ids = np.arange(emb.shape[0], dtype=np.int64)
    return ScoreMatrix(values, sample_ids)


def score_with_surrogate(
    dataset: Dataset,
    source,
    image_embeddings: np.ndarray | None = None,
) -> ScoreMatrix:
    """Produce a score matrix aligned to ``dataset``.

    ``source`` is either a path to a score file, or a
    ``(ClassEmbeddingBank, ScorerConfig)`` pair for the built-in cosine
    scorer. The cosine scorer runs on the dataset's own feature vectors
    unless a separate ``image_embeddings`` matrix is supplied (for when the
    surrogate's embedding space differs from the classifier's).
    """
    if isinstance(source, (str, Path)):
        return load_score_matrix(source, dataset)
    bank, config = source
    if bank.num_classes != dataset.num_classes:
        raise ValidationError(
            f"bank has {bank.num_classes} classes, dataset has {dataset.num_classes}"
        )
    if image_embeddings is None:
        image_embeddings = dataset.features
    else:
        image_embeddings = np.asarray(image_embeddings, dtype=np.float64)
        if image_embeddings.shape[0] != dataset.num_samples:
            raise ValidationError("embedding row count does not match dataset size")
    scores = cosine_softmax_score(image_embeddings, bank, config, sample_ids=dataset.ids)
    validate_score_matrix(scores, dataset)
    return scores


def save_embedding_bank(path, bank: ClassEmbeddingBank, fmt: str = "text") -> None:
    if fmt == "binary":
        prompt = bank.prompt_id.encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<HB", BINARY_VERSION, KIND_BANK))
            fh.write(struct.pack("<QQH", bank.num_classes, bank.dim, len(prompt)))
            fh.write(prompt)
            fh.write(bank.embeddings.astype("<f8").tobytes())
        return
    if fmt != "text":
        raise ValidationError(f"unknown format {fmt!r}")
    lines = [f"#noiselens-bank v1 C={bank.num_classes} D={bank.dim} PROMPT={bank.prompt_id}"]
    for j in range(bank.num_classes):
        lines.append(",".join([str(j)] + [fmt_float(x) for x in bank.embeddings[j]]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_embedding_bank(path) -> ClassEmbeddingBank:
    if is_binary_file(path):
        buf = Path(path).read_bytes()
        off = _binary_header(buf, KIND_BANK, path)
        c, d, plen = struct.unpack_from("<QQH", buf, off)
        off += 18
        prompt = buf[off:off + plen].decode("utf-8")
        off += plen
        emb, off = _take(buf, off, np.float64, c * d)
        return ClassEmbeddingBank(emb.reshape(c, d), prompt)

    lines = _read_text(path)
    if not lines:
        raise FormatError(f"{path}: empty file")
    kv = _parse_header(lines[0], "bank", ("C", "D", "PROMPT"))
    c, d = _header_int(kv, "C"), _header_int(kv, "D")
    records = [ln for ln in lines[1:] if ln.strip()]
    if len(records) != c:
        raise FormatError(f"header declares C={c} but file has {len(records)} records")
    emb = np.empty((c, d), dtype=np.float64)
    seen = set()
    for i, line in enumerate(records):
        lineno = i + 2
        parts = line.split(",")
        if len(parts) != d + 1:
            raise FormatError(f"line {lineno}: expected {d + 1} fields, got {len(parts)}")
        try:
            idx = int(parts[0])
            row = [float(x) for x in parts[1:]]
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
        if not 0 <= idx < c or idx in seen:
            raise FormatError(f"line {lineno}: bad or repeated class index {idx}")
        seen.add(idx)
        emb[idx] = row
    return ClassEmbeddingBank(emb, kv["PROMPT"])


def load_embedding_table(path, dataset: Dataset) -> np.ndarray:
    """Load per-sample embeddings from a bank-format file whose first column
    is the sample id; rows must match the dataset order exactly."""
    if is_binary_file(path):
        raise FormatError(f"{path}: per-sample embedding tables are text-only")
    lines = _read_text(path)
    if not lines:
        raise FormatError(f"{path}: empty file")
    kv = _parse_header(lines[0], "bank", ("C", "D"))
    n, d = _header_int(kv, "C"), _header_int(kv, "D")
    if n != dataset.num_samples:
        raise ValidationError(
            f"embedding table has {n} rows, dataset has {dataset.num_samples}"
        )
    records = [ln for ln in lines[1:] if ln.strip()]
    if len(records) != n:
        raise FormatError(f"header declares {n} rows but file has {len(records)}")
    out = np.empty((n, d), dtype=np.float64)
    for i, line in enumerate(records):
        lineno = i + 2
        parts = line.split(",")
        if len(parts) != d + 1:
            raise FormatError(f"line {lineno}: expected {d + 1} fields, got {len(parts)}")
        try:
            row_id = int(parts[0])
            out[i] = [float(x) for x in parts[1:]]
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
        if row_id != int(dataset.ids[i]):
            raise ValidationError(
                f"line {lineno}: embedding id {row_id} does not match dataset id "
                f"{int(dataset.ids[i])}"
            )
    return out
