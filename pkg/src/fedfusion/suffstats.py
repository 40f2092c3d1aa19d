"""Per-class sufficient statistics: the entire client->server upload.

Clients upload raw second moments rather than centered scatters so that
server-side pooling is exact componentwise addition. Wire format ``.tfs``:
magic ``TOFASTS1`` | u32 client_id | u32 d | u32 C | per class
(u64 count, d float64 sum, d(d+1)/2 float64 upper-triangular raw moment).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embeddings import EmbeddingDataset
from .errors import DegenerateInputError, FormatError, TruncationError, ValidationError

STATS_MAGIC = b"TOFASTS1"

_SYM_TOL = 1e-12


def _symmetrize(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + mat.T)


@dataclass(frozen=True)
class ClassStats:
    """Count, sum and raw second moment for one class.

    ``count`` is float so that power-prior scaling (alpha * stats) stays in
    the same type; counts on the wire are integral.
    """

    class_index: int
    count: float
    sum: np.ndarray          # (d,)
    raw_moment: np.ndarray   # (d, d) symmetric PSD

    def __post_init__(self):
        s = np.ascontiguousarray(np.asarray(self.sum, dtype=np.float64))
        m = np.ascontiguousarray(np.asarray(self.raw_moment, dtype=np.float64))
        if s.ndim != 1 or m.shape != (s.shape[0], s.shape[0]):
            raise ValidationError(
                f"inconsistent stats shapes sum={s.shape} raw_moment={m.shape}"
            )
        if self.count < 0:
            raise ValidationError("negative sample count")
        if np.abs(m - m.T).max() > _SYM_TOL * max(1.0, np.abs(m).max()):
            raise ValidationError("raw moment is not symmetric")
        if self.count == 0 and (s.any() or m.any()):
            raise ValidationError("zero-count stats must have zero sum and moment")
        s.flags.writeable = False
        m.flags.writeable = False
        object.__setattr__(self, "sum", s)
        object.__setattr__(self, "raw_moment", m)

    @property
    def dim(self) -> int:
        return self.sum.shape[0]

    @staticmethod
    def zero(class_index: int, d: int) -> "ClassStats":
        return ClassStats(class_index, 0.0, np.zeros(d), np.zeros((d, d)))


def merge(a: ClassStats, b: ClassStats) -> ClassStats:
    """Pool two statistics for the same class; the federated reduction operator."""
    if a.class_index != b.class_index:
        raise ValidationError(f"class mismatch: {a.class_index} vs {b.class_index}")
    if a.dim != b.dim:
        raise ValidationError(f"dimension mismatch: {a.dim} vs {b.dim}")
    return ClassStats(a.class_index, a.count + b.count,
                      a.sum + b.sum, a.raw_moment + b.raw_moment)


def scale(cs: ClassStats, weight: float) -> ClassStats:
    """Temper statistics by a power-prior weight in [0, 1]."""
    if weight == 0.0:
        return ClassStats.zero(cs.class_index, cs.dim)
    return ClassStats(cs.class_index, weight * cs.count,
                      weight * cs.sum, weight * cs.raw_moment)


def scatter(cs: ClassStats):
    """Return (mean, centered scatter) for a class with at least one sample."""
    if cs.count <= 0:
        raise DegenerateInputError(
            f"mean undefined for empty class {cs.class_index}"
        )
    mean = cs.sum / cs.count
    centered = _symmetrize(cs.raw_moment - cs.count * np.outer(mean, mean))
    return mean, centered


@dataclass(frozen=True)
class ClientStatsMessage:
    """All C per-class statistics from one client, ordered by class index."""

    client_id: int
    dim: int
    num_classes: int
    stats: tuple = field(default_factory=tuple)   # C ClassStats

    def __post_init__(self):
        stats = tuple(self.stats)
        if len(stats) != self.num_classes:
            raise ValidationError(
                f"expected {self.num_classes} class entries, got {len(stats)}"
            )
        for c, cs in enumerate(stats):
            if cs.class_index != c:
                raise ValidationError(f"entry {c} carries class index {cs.class_index}")
            if cs.dim != self.dim:
                raise ValidationError(f"class {c} has dim {cs.dim}, expected {self.dim}")
        object.__setattr__(self, "stats", stats)

    @property
    def total_count(self) -> float:
        return sum(cs.count for cs in self.stats)


def compute_stats(ds: EmbeddingDataset, client_id: int = 0) -> ClientStatsMessage:
    """Accumulate per-class count/sum/raw moment over a dataset."""
    stats = []
    for c in range(ds.num_classes):
        rows = ds.vectors[ds.labels == c]
        if rows.shape[0] == 0:
            stats.append(ClassStats.zero(c, ds.dim))
        else:
            stats.append(ClassStats(
                class_index=c,
                count=float(rows.shape[0]),
                sum=rows.sum(axis=0),
                raw_moment=_symmetrize(rows.T @ rows),
            ))
    return ClientStatsMessage(client_id=client_id, dim=ds.dim,
                              num_classes=ds.num_classes, stats=tuple(stats))


def merge_messages(messages) -> ClientStatsMessage:
    """Server-side pooling of all client uploads; result uses client_id -1."""
    messages = list(messages)
    if not messages:
        raise ValidationError("no stats messages to merge")
    first = messages[0]
    pooled = list(first.stats)
    for msg in messages[1:]:
        if (msg.dim, msg.num_classes) != (first.dim, first.num_classes):
            raise ValidationError("stats messages disagree on (d, C)")
        pooled = [merge(a, b) for a, b in zip(pooled, msg.stats)]
    return ClientStatsMessage(client_id=-1, dim=first.dim,
                              num_classes=first.num_classes, stats=tuple(pooled))


def _tri_indices(d: int):
    return np.triu_indices(d)


def pack_stats(msg: ClientStatsMessage) -> bytes:
    """Serialize to the .tfs wire format (upper-triangular raw moments)."""
    iu = _tri_indices(msg.dim)
    out = [STATS_MAGIC, struct.pack("<III", msg.client_id & 0xFFFFFFFF,
                                    msg.dim, msg.num_classes)]
    for cs in msg.stats:
        if cs.count != int(cs.count):
            raise ValidationError(
                f"cannot serialize non-integral count {cs.count} for class "
                f"{cs.class_index}"
            )
        out.append(struct.pack("<Q", int(cs.count)))
        out.append(cs.sum.astype("<f8").tobytes())
        out.append(cs.raw_moment[iu].astype("<f8").tobytes())
    return b"".join(out)


def unpack_stats(data: bytes) -> ClientStatsMessage:
    if data[:8] != STATS_MAGIC:
        raise FormatError(f"bad stats magic {data[:8]!r}")
    client_id, d, c = struct.unpack_from("<III", data, 8)
    if client_id == 0xFFFFFFFF:
        client_id = -1
    ntri = d * (d + 1) // 2
    per_class = 8 + 8 * d + 8 * ntri
    expected = 20 + c * per_class
    if len(data) != expected:
        raise TruncationError(f"stats payload is {len(data)} bytes, expected {expected}")
    iu = _tri_indices(d)
    offset = 20
    stats = []
    for ci in range(c):
        (count,) = struct.unpack_from("<Q", data, offset)
        offset += 8
        s = np.frombuffer(data, dtype="<f8", count=d, offset=offset).copy()
        offset += 8 * d
        tri = np.frombuffer(data, dtype="<f8", count=ntri, offset=offset)
        offset += 8 * ntri
        raw = np.zeros((d, d))
        raw[iu] = tri
        raw = raw + np.triu(raw, 1).T
        stats.append(ClassStats(ci, float(count), s, raw))
    return ClientStatsMessage(client_id=client_id, dim=d, num_classes=c,
                              stats=tuple(stats))


def save_stats(msg: ClientStatsMessage, path) -> None:
    Path(path).write_bytes(pack_stats(msg))


def load_stats(path) -> ClientStatsMessage:
    return unpack_stats(Path(path).read_bytes())
