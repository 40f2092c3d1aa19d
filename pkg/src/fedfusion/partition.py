"""Non-IID data partitioning and synthetic Gaussian-mixture generation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .embeddings import EmbeddingDataset
from .errors import ValidationError

SCHEMES = ("class-split", "dirichlet", "by-domain", "iid")
DIRICHLET_MAX_RETRIES = 100


@dataclass(frozen=True)
class PartitionSpec:
    scheme: str
    num_clients: int
    beta: Optional[float] = None          # dirichlet concentration
    shots: Optional[int] = None           # few-shot cap per present class
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValidationError(f"unknown scheme {self.scheme!r}, expected {SCHEMES}")
        if self.num_clients < 1:
            raise ValidationError("need at least one client")
        if self.scheme == "dirichlet" and (self.beta is None or self.beta <= 0):
            raise ValidationError("dirichlet partition requires beta > 0")
        if self.shots is not None and self.shots < 1:
            raise ValidationError("shots must be >= 1 when set")


@dataclass(frozen=True)
class ClientSplit:
    train: EmbeddingDataset
    test: EmbeddingDataset


def _assign_indices(ds: EmbeddingDataset, spec: PartitionSpec, rng) -> list:
    k = spec.num_clients
    if spec.scheme == "class-split":
        if ds.num_classes < k:
            raise ValidationError(
                f"class-split needs C >= K, got C={ds.num_classes}, K={k}"
            )
        classes = rng.permutation(ds.num_classes)
        per_client = [[] for _ in range(k)]
        for i, c in enumerate(classes):
            per_client[i % k].extend(np.flatnonzero(ds.labels == c).tolist())
        return [np.array(sorted(idx), dtype=np.int64) for idx in per_client]
    if spec.scheme == "iid":
        order = rng.permutation(ds.num_samples)
        return [np.sort(chunk) for chunk in np.array_split(order, k)]
    if spec.scheme == "dirichlet":
        for _ in range(DIRICHLET_MAX_RETRIES):
            per_client = [[] for _ in range(k)]
            for c in range(ds.num_classes):
                idx = rng.permutation(np.flatnonzero(ds.labels == c))
                if idx.size == 0:
                    continue
                props = rng.dirichlet(np.full(k, spec.beta))
                cuts = (np.cumsum(props)[:-1] * idx.size).astype(int)
                for ci, chunk in enumerate(np.split(idx, cuts)):
                    per_client[ci].extend(chunk.tolist())
            if all(per_client):
                return [np.array(sorted(idx), dtype=np.int64) for idx in per_client]
        raise ValidationError(
            f"dirichlet partition left a client empty after "
            f"{DIRICHLET_MAX_RETRIES} retries"
        )
    raise ValidationError(
        "by-domain partition expects one pre-split dataset per domain; "
        "pass per-domain files directly instead of partitioning one dataset"
    )


def _few_shot_split(ds: EmbeddingDataset, shots: Optional[int], rng) -> ClientSplit:
    if shots is None:
        empty = ds.subset(np.array([], dtype=np.int64))
        return ClientSplit(train=ds, test=empty)
    train_idx, test_idx = [], []
    for c in ds.present_classes():
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        train_idx.extend(idx[:shots].tolist())
        test_idx.extend(idx[shots:].tolist())
    return ClientSplit(
        train=ds.subset(np.array(sorted(train_idx), dtype=np.int64)),
        test=ds.subset(np.array(sorted(test_idx), dtype=np.int64)),
    )


def partition(ds: EmbeddingDataset, spec: PartitionSpec) -> list:
    """Split one dataset into K (train, test) client splits, deterministically."""
    rng = np.random.default_rng(spec.seed)
    assignments = _assign_indices(ds, spec, rng)
    splits = []
    for k, idx in enumerate(assignments):
        if idx.size == 0:
            raise ValidationError(f"client {k} received no samples")
        splits.append(_few_shot_split(ds.subset(idx), spec.shots, rng))
    return splits


@dataclass(frozen=True)
class SyntheticTruth:
    """Ground-truth mixture parameters behind a synthetic instance."""

    means: np.ndarray        # (C, d)
    covariance: np.ndarray   # (d, d)


def synth_generate(num_classes: int, dim: int, num_clients: int,
                   means: np.ndarray, covariance: np.ndarray,
                   n_per_class: int, seed: int = 0,
                   n_test_per_class: int = 0):
    """Sample a shared-covariance Gaussian mixture, split IID across clients.

    Returns (client_splits, truth). Each client receives an equal IID share
    of the training draw; test samples are fresh draws split the same way.
    """
    means = np.asarray(means, dtype=np.float64)
    covariance = np.asarray(covariance, dtype=np.float64)
    if means.shape != (num_classes, dim) or covariance.shape != (dim, dim):
        raise ValidationError("means/covariance shapes do not match (C, d)")
    eigs = np.linalg.eigvalsh(0.5 * (covariance + covariance.T))
    if eigs.min() < -1e-12:
        raise ValidationError(f"covariance not PSD (min eigenvalue {eigs.min():.3e})")
    rng = np.random.default_rng(seed)

    def draw(n):
        if n == 0:
            return EmbeddingDataset(np.zeros((0, dim)), np.zeros(0, dtype=np.int64),
                                    num_classes)
        labels = np.repeat(np.arange(num_classes), n)
        vectors = rng.multivariate_normal(np.zeros(dim), covariance,
                                          size=labels.size) + means[labels]
        perm = rng.permutation(labels.size)
        return EmbeddingDataset(vectors[perm], labels[perm], num_classes)

    train = draw(n_per_class)
    test = draw(n_test_per_class)

    def share(ds):
        if ds.num_samples == 0:
            return [ds.subset(np.array([], dtype=np.int64))] * num_clients
        order = rng.permutation(ds.num_samples)
        return [ds.subset(np.sort(chunk))
                for chunk in np.array_split(order, num_clients)]

    splits = [ClientSplit(train=tr, test=te)
              for tr, te in zip(share(train), share(test))]
    return splits, SyntheticTruth(means=means, covariance=covariance)


def bayes_accuracy_two_class(mean_distance: float, sigma: float) -> float:
    """Closed-form Bayes accuracy for two equal-covariance Gaussian classes."""
    from scipy.stats import norm
    return float(norm.cdf(mean_distance / (2.0 * sigma)))
