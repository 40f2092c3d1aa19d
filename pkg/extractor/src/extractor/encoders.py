"""Image/text encoders behind one small interface.

``stub:<dim>`` is a deterministic hash-based encoder for tests and plumbing
checks; ``clip:<model>`` wraps a pretrained CLIP checkpoint via
``transformers`` (optional dependency, needs downloaded weights).
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import EncoderError


class StubEncoder:
    """Deterministic stand-in: sha256 of the input seeds a unit vector.

    Identical inputs always map to identical embeddings, which is all the
    format-level tests need.
    """

    def __init__(self, dim: int = 32):
        if dim < 1:
            raise EncoderError("stub dimension must be >= 1")
        self.dim = dim

    def _embed(self, payload: bytes) -> np.ndarray:
        digest = hashlib.sha256(payload).digest()
        seed = int.from_bytes(digest[:8], "little")
        vec = np.random.default_rng(seed).standard_normal(self.dim)
        return vec / np.linalg.norm(vec)

    def encode_images(self, images) -> np.ndarray:
        rows = []
        for img in images:
            rgb = img.convert("RGB")
            payload = rgb.size[0].to_bytes(4, "little") \
                + rgb.size[1].to_bytes(4, "little") + rgb.tobytes()
            rows.append(self._embed(payload))
        return np.stack(rows) if rows else np.empty((0, self.dim))

    def encode_texts(self, texts) -> np.ndarray:
        rows = [self._embed(t.encode("utf-8")) for t in texts]
        return np.stack(rows) if rows else np.empty((0, self.dim))


class CLIPEncoder:
    """Pretrained CLIP via transformers, eval mode, batched, no gradients."""

    def __init__(self, model_name: str = "openai/clip-vit-base-patch16",
                 batch_size: int = 64):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise EncoderError(
                "clip encoder needs the [clip] extra (torch + transformers)"
            ) from exc
        try:
            self._model = CLIPModel.from_pretrained(model_name).eval()
            self._processor = CLIPProcessor.from_pretrained(model_name)
        except Exception as exc:
            raise EncoderError(
                f"could not load CLIP weights {model_name!r}: {exc}"
            ) from exc
        self._torch = torch
        self.batch_size = batch_size
        self.dim = int(self._model.config.projection_dim)

    def _batches(self, items):
        for i in range(0, len(items), self.batch_size):
            yield items[i:i + self.batch_size]

    def encode_images(self, images) -> np.ndarray:
        rows = []
        with self._torch.no_grad():
            for batch in self._batches(list(images)):
                inputs = self._processor(images=[im.convert("RGB") for im in batch],
                                         return_tensors="pt")
                feats = self._model.get_image_features(**inputs)
                feats = feats / feats.norm(dim=-1, keepdim=True)
                rows.append(feats.cpu().numpy())
        return np.concatenate(rows) if rows else np.empty((0, self.dim))

    def encode_texts(self, texts) -> np.ndarray:
        rows = []
        with self._torch.no_grad():
            for batch in self._batches(list(texts)):
                inputs = self._processor(text=batch, return_tensors="pt",
                                         padding=True, truncation=True)
                feats = self._model.get_text_features(**inputs)
                feats = feats / feats.norm(dim=-1, keepdim=True)
                rows.append(feats.cpu().numpy())
        return np.concatenate(rows) if rows else np.empty((0, self.dim))


def build_encoder(identifier: str, batch_size: int = 64):
    """``stub:<dim>`` or ``clip:<hf-model-name>`` (bare ``clip`` = ViT-B/16)."""
    kind, _, arg = identifier.partition(":")
    if kind == "stub":
        return StubEncoder(int(arg) if arg else 32)
    if kind == "clip":
        return CLIPEncoder(arg or "openai/clip-vit-base-patch16",
                           batch_size=batch_size)
    raise EncoderError(f"unknown encoder {identifier!r}; "
                       "expected stub:<dim> or clip:<model>")
