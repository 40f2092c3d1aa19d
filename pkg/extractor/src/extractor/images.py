"""Image-side extraction: dataset folder -> .tfe file."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .encoders import build_encoder
from .errors import DatasetError
from .formats import write_embeddings, write_sidecar
from .jobs import ExtractJob

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp", ".gif", ".webp", ".tiff"}


def list_classes(root: Path) -> list:
    """Class directories in lexicographic name order."""
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    names = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not names:
        raise DatasetError(f"no class directories under {root}")
    return names


def _image_files(class_dir: Path) -> list:
    return sorted(p for p in class_dir.iterdir()
                  if p.suffix.lower() in IMAGE_SUFFIXES)


def extract_images(job: ExtractJob) -> Path:
    """Encode every readable image and write one .tfe plus its sidecar.

    Unreadable images are skipped and counted; more than
    ``job.max_skip_fraction`` of the total is a hard failure.
    """
    root = job.image_root()
    class_names = list_classes(root)
    encoder = build_encoder(job.encoder, batch_size=job.batch_size)

    vectors, labels = [], []
    total = skipped = 0
    for label, name in enumerate(class_names):
        files = _image_files(root / name)
        total += len(files)
        batch, batch_labels = [], []
        for path in files:
            try:
                with Image.open(path) as img:
                    img.load()
                    batch.append(img.copy())
                batch_labels.append(label)
            except (OSError, UnidentifiedImageError) as exc:
                skipped += 1
                log.warning("skipping unreadable image %s: %s", path, exc)
        if batch:
            vectors.append(encoder.encode_images(batch))
            labels.extend(batch_labels)

    if total == 0:
        raise DatasetError(f"no images found under {root}")
    if skipped > job.max_skip_fraction * total:
        raise DatasetError(
            f"{skipped}/{total} images unreadable, above the "
            f"{job.max_skip_fraction:.0%} tolerance")
    if skipped:
        log.warning("skipped %d of %d images", skipped, total)

    all_vectors = np.concatenate(vectors)
    # f32 storage: renormalize after the cast so rows stay unit-norm
    all_vectors = all_vectors.astype(np.float32)
    all_vectors /= np.linalg.norm(all_vectors, axis=1, keepdims=True)
    out = Path(job.output_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_embeddings(all_vectors, np.asarray(labels, dtype=np.uint32),
                     len(class_names), out)
    write_sidecar(out, job.dataset_name or root.name, class_names)
    return out
