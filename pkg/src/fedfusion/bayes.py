"""Hierarchical Gaussian/Inverse-Wishart posterior inference and the GDA head.

The model: a shared covariance drawn from an Inverse-Wishart(S, nu) and, per
class, a mean drawn from N(m_c, Sigma / kappa_c). Evidence enters only
through per-class sufficient statistics, optionally tempered by a power
weight alpha in [0, 1]. The same update implements

* the global posterior (uninformative prior, alpha = 1, pooled stats), and
* each client's personalized posterior (uninformative prior over the
  alpha-scaled global evidence merged with local evidence).

Classification uses the MAP plug-in (means, S / (nu + d + 2)) inside a
shared-covariance softmax discriminant.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import (
    DegenerateInputError,
    FormatError,
    SingularCovarianceError,
    TruncationError,
    ValidationError,
)
from .suffstats import ClassStats, ClientStatsMessage, merge, scale, scatter

NIW_MAGIC = b"TOFANIW1"

DEFAULT_S0 = 1e-6
DEFAULT_KAPPA0 = 1e-6
DEFAULT_RIDGE = 1e-4


def _symmetrize(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + mat.T)


@dataclass(frozen=True)
class NIWPosterior:
    """Parameter block (S, nu, {m_c, kappa_c}) of the conjugate posterior."""

    S: np.ndarray        # (d, d) symmetric PSD
    nu: float
    means: np.ndarray    # (C, d)
    kappas: np.ndarray   # (C,) all > 0

    def __post_init__(self):
        S = _symmetrize(np.asarray(self.S, dtype=np.float64))
        means = np.asarray(self.means, dtype=np.float64)
        kappas = np.asarray(self.kappas, dtype=np.float64)
        if means.ndim != 2 or S.shape != (means.shape[1], means.shape[1]):
            raise ValidationError(
                f"inconsistent posterior shapes S={S.shape} means={means.shape}"
            )
        if kappas.shape != (means.shape[0],):
            raise ValidationError("kappa vector must have one entry per class")
        if (kappas <= 0).any():
            raise ValidationError("every kappa_c must be positive")
        if self.nu < 0:
            raise ValidationError("nu must be non-negative")
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "kappas", kappas)

    @property
    def dim(self) -> int:
        return self.S.shape[0]

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]


def uninformative_prior(d: int, num_classes: int,
                        s0: float = DEFAULT_S0,
                        kappa0: float = DEFAULT_KAPPA0) -> NIWPosterior:
    """Near-vacuous prior: S = s0*I, nu = 0, zero means, kappa_c = kappa0."""
    if s0 <= 0 or kappa0 <= 0:
        raise ValidationError(f"s0 and kappa0 must be positive, got {s0}, {kappa0}")
    return NIWPosterior(S=s0 * np.eye(d), nu=0.0,
                        means=np.zeros((num_classes, d)),
                        kappas=np.full(num_classes, kappa0))


def posterior_update(prior: NIWPosterior, stats, alpha: float = 1.0) -> NIWPosterior:
    """Conjugate update of the prior with (optionally tempered) evidence.

    ``stats`` is a ClientStatsMessage or a sequence of C ClassStats. Classes
    with zero count keep the prior mean and kappa and contribute nothing to S.
    """
    if isinstance(stats, ClientStatsMessage):
        stats = stats.stats
    stats = list(stats)
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must lie in [0, 1], got {alpha}")
    if len(stats) != prior.num_classes:
        raise ValidationError(
            f"expected {prior.num_classes} class stats, got {len(stats)}"
        )
    d = prior.dim
    S = prior.S.copy()
    nu = prior.nu
    means = prior.means.copy()
    kappas = prior.kappas.copy()
    for c, cs in enumerate(stats):
        if cs.dim != d:
            raise ValidationError(f"class {c} stats have dim {cs.dim}, expected {d}")
        n_c = alpha * cs.count
        if n_c == 0.0:
            continue
        zbar, centered = scatter(cs)
        m0, k0 = prior.means[c], prior.kappas[c]
        kq = k0 + n_c
        mq = (k0 * m0 + n_c * zbar) / kq
        nu += n_c
        means[c] = mq
        kappas[c] = kq
        S += alpha * centered
        S += k0 * np.outer(m0, m0) + n_c * np.outer(zbar, zbar) - kq * np.outer(mq, mq)
    return NIWPosterior(S=_symmetrize(S), nu=nu, means=means, kappas=kappas)


def global_posterior(merged: ClientStatsMessage,
                     s0: float = DEFAULT_S0,
                     kappa0: float = DEFAULT_KAPPA0) -> NIWPosterior:
    """Posterior over pooled statistics under the uninformative prior."""
    if merged.total_count == 0:
        raise DegenerateInputError("all classes empty: global posterior undefined")
    prior = uninformative_prior(merged.dim, merged.num_classes, s0, kappa0)
    return posterior_update(prior, merged, alpha=1.0)


def personalized_posterior(global_post: NIWPosterior,
                           global_stats: ClientStatsMessage,
                           local_stats: ClientStatsMessage,
                           alpha: float,
                           s0: float = DEFAULT_S0,
                           kappa0: float = DEFAULT_KAPPA0) -> NIWPosterior:
    """Power-prior posterior for one client.

    Equivalent to a single batch update over the alpha-scaled global evidence
    pooled with the local evidence; at alpha = 1 this reproduces the global
    posterior over the union of the data, at alpha = 0 it is local-only. A
    class with no evidence on either side falls back to the global posterior
    mean with kappa = kappa0 so that every client can score all C classes.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must lie in [0, 1], got {alpha}")
    if (global_stats.dim, global_stats.num_classes) != (local_stats.dim,
                                                        local_stats.num_classes):
        raise ValidationError("global and local stats disagree on (d, C)")
    combined = [merge(scale(g, alpha), l)
                for g, l in zip(global_stats.stats, local_stats.stats)]
    if sum(cs.count for cs in combined) == 0.0:
        raise DegenerateInputError(
            "no evidence: every class empty in both scaled global and local stats"
        )
    prior = uninformative_prior(global_stats.dim, global_stats.num_classes, s0, kappa0)
    post = posterior_update(prior, combined, alpha=1.0)
    means = post.means.copy()
    for c, cs in enumerate(combined):
        if cs.count == 0.0 and global_stats.stats[c].count > 0:
            means[c] = global_post.means[c]
    return NIWPosterior(S=post.S, nu=post.nu, means=means, kappas=post.kappas)


def map_estimate(post: NIWPosterior):
    """MAP plug-in: (means, S / (nu + d + 2))."""
    denom = post.nu + post.dim + 2
    if denom <= 0:
        raise ValidationError(f"nu + d + 2 must be positive, got {denom}")
    return post.means, _symmetrize(post.S / denom)


@dataclass(frozen=True)
class GDAClassifier:
    """Shared-covariance Gaussian discriminant with uniform class priors."""

    means: np.ndarray       # (C, d)
    precision: np.ndarray   # (d, d) symmetric PSD
    log_priors: np.ndarray  # (C,)
    linear: np.ndarray      # (C, d) rows G m_c
    quadratic: np.ndarray   # (C,) m_c^T G m_c

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]


def gda_fit(means: np.ndarray, covariance: np.ndarray,
            ridge: float = DEFAULT_RIDGE) -> GDAClassifier:
    """Invert the (ridge-regularized) covariance via Cholesky factorization.

    The ridge is scaled by the mean diagonal, tr(cov)/d, so it is unitless.
    """
    means = np.asarray(means, dtype=np.float64)
    covariance = _symmetrize(np.asarray(covariance, dtype=np.float64))
    if ridge < 0:
        raise ValidationError("ridge must be non-negative")
    d = covariance.shape[0]
    reg = covariance + ridge * (np.trace(covariance) / d) * np.eye(d)
    try:
        chol = scipy.linalg.cho_factor(reg, lower=True)
        precision = scipy.linalg.cho_solve(chol, np.eye(d))
    except scipy.linalg.LinAlgError:
        smallest = float(np.linalg.eigvalsh(reg).min())
        raise SingularCovarianceError(
            "covariance not positive definite after ridge", smallest
        ) from None
    precision = _symmetrize(precision)
    linear = means @ precision
    quadratic = np.einsum("cd,cd->c", linear, means)
    c = means.shape[0]
    return GDAClassifier(means=means, precision=precision,
                         log_priors=np.full(c, -np.log(c)),
                         linear=linear, quadratic=quadratic)


def gda_logits(clf: GDAClassifier, z: np.ndarray) -> np.ndarray:
    """Discriminants m_c^T G z - m_c^T G m_c / 2 + log p_c for each row of z."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    if not np.isfinite(z2).all():
        raise ValidationError("non-finite input embedding")
    if z2.shape[1] != clf.dim:
        raise ValidationError(f"input dim {z2.shape[1]} != classifier dim {clf.dim}")
    logits = z2 @ clf.linear.T - 0.5 * clf.quadratic + clf.log_priors
    return logits[0] if single else logits


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=axis, keepdims=True)


def gda_predict(clf: GDAClassifier, z: np.ndarray) -> np.ndarray:
    """Class probabilities for one embedding or a batch of embeddings."""
    return softmax(gda_logits(clf, z))


def save_posterior(post: NIWPosterior, path) -> None:
    """Diagnostic .tfn dump: header, nu, kappas, means, upper-triangular S."""
    iu = np.triu_indices(post.dim)
    with open(Path(path), "wb") as fh:
        fh.write(NIW_MAGIC)
        fh.write(struct.pack("<II", post.dim, post.num_classes))
        fh.write(struct.pack("<d", post.nu))
        fh.write(post.kappas.astype("<f8").tobytes())
        fh.write(post.means.astype("<f8").tobytes())
        fh.write(post.S[iu].astype("<f8").tobytes())


def load_posterior(path) -> NIWPosterior:
    data = Path(path).read_bytes()
    return unpack_posterior(data)


def pack_posterior(post: NIWPosterior) -> bytes:
    iu = np.triu_indices(post.dim)
    return b"".join([
        NIW_MAGIC,
        struct.pack("<II", post.dim, post.num_classes),
        struct.pack("<d", post.nu),
        post.kappas.astype("<f8").tobytes(),
        post.means.astype("<f8").tobytes(),
        post.S[iu].astype("<f8").tobytes(),
    ])


def unpack_posterior(data: bytes) -> NIWPosterior:
    if data[:8] != NIW_MAGIC:
        raise FormatError(f"bad posterior magic {data[:8]!r}")
    d, c = struct.unpack_from("<II", data, 8)
    ntri = d * (d + 1) // 2
    expected = 16 + 8 + 8 * c + 8 * c * d + 8 * ntri
    if len(data) != expected:
        raise TruncationError(
            f"posterior payload is {len(data)} bytes, expected {expected}"
        )
    (nu,) = struct.unpack_from("<d", data, 16)
    offset = 24
    kappas = np.frombuffer(data, dtype="<f8", count=c, offset=offset).copy()
    offset += 8 * c
    means = np.frombuffer(data, dtype="<f8", count=c * d, offset=offset).reshape(c, d).copy()
    offset += 8 * c * d
    tri = np.frombuffer(data, dtype="<f8", count=ntri, offset=offset)
    iu = np.triu_indices(d)
    S = np.zeros((d, d))
    S[iu] = tri
    S = S + np.triu(S, 1).T
    return NIWPosterior(S=S, nu=nu, means=means, kappas=kappas)
