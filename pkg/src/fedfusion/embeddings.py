"""In-memory representation and binary I/O for embedding datasets and prompt banks.

Two little-endian binary formats are implemented:

``.tfe`` (image embeddings)
    magic ``TOFAEMB1`` | u32 d | u32 N | u32 C | u8 normalized | 3 reserved
    bytes | N u32 labels | N*d float32 row-major vectors.

``.tfp`` (prompt embeddings)
    magic ``TOFAPRM1`` | u32 d | u32 C | u32 M+1 | u8 normalized | 3 reserved
    bytes | C*(M+1)*d float32, class-major then prompt-index order.

Vectors are stored as float32 on disk and promoted to float64 in memory;
all downstream statistics run in float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, FormatError, TruncationError, ValidationError

EMB_MAGIC = b"TOFAEMB1"
PROMPT_MAGIC = b"TOFAPRM1"

_NORM_TOL = 1e-6


@dataclass(frozen=True)
class EmbeddingDataset:
    """Labeled feature vectors for one client or one test split.

    Immutable after construction; the arrays are set non-writeable so the
    dataset can be shared read-only across workers.
    """

    vectors: np.ndarray        # (N, d) float64
    labels: np.ndarray         # (N,) int64, each in [0, C)
    num_classes: int
    normalized: bool = False

    def __post_init__(self):
        vectors = np.ascontiguousarray(np.asarray(self.vectors, dtype=np.float64))
        labels = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int64))
        if vectors.ndim != 2:
            raise ValidationError(f"vectors must be 2-D, got shape {vectors.shape}")
        if vectors.shape[1] < 1:
            raise ValidationError("embedding dimension must be positive")
        if labels.ndim != 1 or labels.shape[0] != vectors.shape[0]:
            raise ValidationError(
                f"labels length {labels.shape} does not match {vectors.shape[0]} rows"
            )
        if self.num_classes < 1:
            raise ValidationError("num_classes must be positive")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValidationError(
                f"labels must lie in [0, {self.num_classes}), got range "
                f"[{labels.min()}, {labels.max()}]"
            )
        if self.normalized and vectors.size:
            norms = np.linalg.norm(vectors, axis=1)
            bad = np.abs(norms - 1.0) > _NORM_TOL
            if bad.any():
                raise ValidationError(
                    f"normalized flag set but row {int(np.argmax(bad))} has norm "
                    f"{norms[np.argmax(bad)]:.8f}"
                )
        vectors.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "labels", labels)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def num_samples(self) -> int:
        return self.vectors.shape[0]

    def present_classes(self) -> np.ndarray:
        """Sorted array of class indices with at least one sample."""
        return np.unique(self.labels)

    def subset(self, index: np.ndarray) -> "EmbeddingDataset":
        return EmbeddingDataset(
            vectors=self.vectors[index],
            labels=self.labels[index],
            num_classes=self.num_classes,
            normalized=self.normalized,
        )


@dataclass(frozen=True)
class PromptBank:
    """Per-class prompt embeddings; slot 0 is the hand-crafted prompt."""

    embeddings: np.ndarray     # (C, M+1, d) float64
    normalized: bool = False

    def __post_init__(self):
        emb = np.ascontiguousarray(np.asarray(self.embeddings, dtype=np.float64))
        if emb.ndim != 3:
            raise ValidationError(f"prompt embeddings must be 3-D, got {emb.shape}")
        if min(emb.shape) < 1:
            raise ValidationError(f"degenerate prompt bank shape {emb.shape}")
        if self.normalized:
            norms = np.linalg.norm(emb, axis=2)
            if np.abs(norms - 1.0).max() > _NORM_TOL:
                raise ValidationError("normalized flag set but rows are not unit norm")
        emb.flags.writeable = False
        object.__setattr__(self, "embeddings", emb)

    @property
    def num_classes(self) -> int:
        return self.embeddings.shape[0]

    @property
    def prompts_per_class(self) -> int:
        return self.embeddings.shape[1]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[2]


@dataclass(frozen=True)
class ClassMeta:
    """Human-readable class names, stored in an optional sidecar file."""

    class_names: list = field(default_factory=list)
    dataset_name: str = ""

    def __post_init__(self):
        if len(set(self.class_names)) != len(self.class_names):
            raise ValidationError("class names must be unique")


def normalize(ds: EmbeddingDataset) -> EmbeddingDataset:
    """Return a copy with every row scaled to unit Euclidean norm.

    Idempotent; raises DegenerateInputError naming the first zero row.
    """
    if ds.normalized or ds.num_samples == 0:
        if ds.normalized:
            return ds
        return EmbeddingDataset(ds.vectors, ds.labels, ds.num_classes, normalized=True)
    norms = np.linalg.norm(ds.vectors, axis=1)
    if (norms == 0.0).any():
        raise DegenerateInputError(
            f"cannot normalize zero vector at row {int(np.argmax(norms == 0.0))}"
        )
    return EmbeddingDataset(
        vectors=ds.vectors / norms[:, None],
        labels=ds.labels,
        num_classes=ds.num_classes,
        normalized=True,
    )


def normalize_bank(bank: PromptBank) -> PromptBank:
    if bank.normalized:
        return bank
    norms = np.linalg.norm(bank.embeddings, axis=2)
    if (norms == 0.0).any():
        c, m = np.argwhere(norms == 0.0)[0]
        raise DegenerateInputError(f"zero prompt embedding at class {c}, slot {m}")
    return PromptBank(bank.embeddings / norms[:, :, None], normalized=True)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise TruncationError(f"expected {n} bytes for {what}, got {len(data)}")
    return data


def save_embeddings(ds: EmbeddingDataset, path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<IIIB3x", ds.dim, ds.num_samples, ds.num_classes,
                             1 if ds.normalized else 0))
        fh.write(ds.labels.astype("<u4").tobytes())
        fh.write(ds.vectors.astype("<f4").tobytes())


def load_embeddings(path) -> EmbeddingDataset:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 8, "magic")
        if magic != EMB_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {EMB_MAGIC!r}")
        d, n, c, flag = struct.unpack("<IIIB3x", _read_exact(fh, 16, "header"))
        labels = np.frombuffer(_read_exact(fh, 4 * n, "labels"), dtype="<u4")
        vectors = np.frombuffer(
            _read_exact(fh, 4 * n * d, "vectors"), dtype="<f4"
        ).reshape(n, d)
        if fh.read(1):
            raise TruncationError(f"{path}: trailing bytes after declared payload")
    return EmbeddingDataset(
        vectors=vectors.astype(np.float64),
        labels=labels.astype(np.int64),
        num_classes=c,
        normalized=bool(flag),
    )


def save_prompt_bank(bank: PromptBank, path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(PROMPT_MAGIC)
        fh.write(struct.pack("<IIIB3x", bank.dim, bank.num_classes,
                             bank.prompts_per_class, 1 if bank.normalized else 0))
        fh.write(bank.embeddings.astype("<f4").tobytes())


def load_prompt_bank(path) -> PromptBank:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 8, "magic")
        if magic != PROMPT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {PROMPT_MAGIC!r}")
        d, c, mp1, flag = struct.unpack("<IIIB3x", _read_exact(fh, 16, "header"))
        emb = np.frombuffer(
            _read_exact(fh, 4 * c * mp1 * d, "prompt embeddings"), dtype="<f4"
        ).reshape(c, mp1, d)
        if fh.read(1):
            raise TruncationError(f"{path}: trailing bytes after declared payload")
    return PromptBank(embeddings=emb.astype(np.float64), normalized=bool(flag))


def save_meta(meta: ClassMeta, path) -> None:
    Path(path).write_text(json.dumps(
        {"dataset": meta.dataset_name, "classes": list(meta.class_names)}, indent=2
    ) + "\n")


def load_meta(path) -> ClassMeta:
    raw = json.loads(Path(path).read_text())
    return ClassMeta(class_names=list(raw["classes"]), dataset_name=raw.get("dataset", ""))
