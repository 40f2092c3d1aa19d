"""Writers for the binary embedding formats consumed by the federated core.

Layouts (all little-endian):

.tfe  magic "TOFAEMB1" | u32 dim | u32 n | u32 classes | u8 normalized
      | 3 pad bytes | n x u32 labels | n*d x f32 row-major vectors
.tfp  magic "TOFAPRM1" | u32 dim | u32 classes | u32 prompts-per-class
      | u8 normalized | 3 pad bytes | c*m*d x f32 class-major embeddings

A JSON sidecar (``<file>.meta.json``) records the dataset name and the
canonical (lexicographic) class-name order so independent extractions align.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

EMB_MAGIC = b"TOFAEMB1"
PROMPT_MAGIC = b"TOFAPRM1"

NORM_TOLERANCE = 1e-5


def _check_unit_rows(rows: np.ndarray) -> None:
    norms = np.linalg.norm(rows.reshape(-1, rows.shape[-1]), axis=1)
    if not np.allclose(norms, 1.0, atol=NORM_TOLERANCE):
        worst = float(np.abs(norms - 1.0).max())
        raise ValueError(f"rows not unit-norm (max deviation {worst:.2e})")


def write_embeddings(vectors: np.ndarray, labels: np.ndarray,
                     num_classes: int, path) -> None:
    vectors = np.ascontiguousarray(vectors, dtype=np.float32)
    labels = np.asarray(labels)
    n, d = vectors.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError("labels out of range")
    _check_unit_rows(vectors)
    with open(Path(path), "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<IIIB3x", d, n, num_classes, 1))
        fh.write(labels.astype("<u4").tobytes())
        fh.write(vectors.astype("<f4").tobytes())


def write_prompt_bank(embeddings: np.ndarray, path) -> None:
    embeddings = np.ascontiguousarray(embeddings, dtype=np.float32)
    c, m, d = embeddings.shape
    _check_unit_rows(embeddings)
    with open(Path(path), "wb") as fh:
        fh.write(PROMPT_MAGIC)
        fh.write(struct.pack("<IIIB3x", d, c, m, 1))
        fh.write(embeddings.astype("<f4").tobytes())


def write_sidecar(path, dataset_name: str, class_names: list) -> None:
    Path(str(path) + ".meta.json").write_text(json.dumps(
        {"dataset": dataset_name, "classes": list(class_names)}, indent=2
    ) + "\n")
