"""Prompt importance scoring, server-side alignment, and the text classifier.

Each client scores every prompt embedding against its local class-mean image
embeddings; the server averages per-client confidence ratios (relative to the
hand-crafted slot-0 prompt) into importance scores and converts them to
per-class ensemble weights with a softmax at temperature tau_t.

Report wire format ``.tfr``: magic ``TOFARPT1`` | u32 client_id | u32 C |
u32 M+1 | C*(M+1) float64 confidences | C u8 presence flags.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bayes import softmax
from .embeddings import EmbeddingDataset, PromptBank
from .errors import DegenerateInputError, FormatError, TruncationError, ValidationError

REPORT_MAGIC = b"TOFARPT1"

DEFAULT_TAU_T = 0.5
DEFAULT_EPS_U = 1e-6
DEFAULT_KAPPA_FILTER = 0.85


@dataclass(frozen=True)
class ClientTextReport:
    """Per-(class, prompt) confidences from one client.

    Rows for locally absent classes carry zeros and present=False; they are
    skipped during alignment.
    """

    client_id: int
    confidences: np.ndarray   # (C, M+1) float64
    present: np.ndarray       # (C,) bool
    class_means: np.ndarray   # (C, d), zero rows for absent classes (diagnostic)

    def __post_init__(self):
        u = np.asarray(self.confidences, dtype=np.float64)
        present = np.asarray(self.present, dtype=bool)
        if u.ndim != 2 or present.shape != (u.shape[0],):
            raise ValidationError("report shapes inconsistent")
        if not np.isfinite(u).all():
            raise ValidationError("non-finite confidence values")
        object.__setattr__(self, "confidences", u)
        object.__setattr__(self, "present", present)
        object.__setattr__(self, "class_means",
                           np.asarray(self.class_means, dtype=np.float64))


@dataclass(frozen=True)
class AlignedPromptWeights:
    """Globally aligned scores r and per-class ensemble weights b."""

    scores: np.ndarray    # (C, M+1), column 0 exactly zero
    weights: np.ndarray   # (C, M+1), rows sum to 1
    tau_t: float

    def __post_init__(self):
        r = np.asarray(self.scores, dtype=np.float64)
        b = np.asarray(self.weights, dtype=np.float64)
        if r.shape != b.shape or r.ndim != 2:
            raise ValidationError("scores and weights must share a (C, M+1) shape")
        if (r[:, 0] != 0.0).any():
            raise ValidationError("slot-0 scores must be exactly zero")
        if (b < 0).any() or np.abs(b.sum(axis=1) - 1.0).max() > 1e-9:
            raise ValidationError("weights must be a per-class distribution")
        object.__setattr__(self, "scores", r)
        object.__setattr__(self, "weights", b)


def _class_means(ds: EmbeddingDataset):
    """Mean embedding per locally present class; zero rows elsewhere."""
    means = np.zeros((ds.num_classes, ds.dim))
    present = np.zeros(ds.num_classes, dtype=bool)
    for c in ds.present_classes():
        means[c] = ds.vectors[ds.labels == c].mean(axis=0)
        present[c] = True
    return means, present


def class_prompt_prob(bank: PromptBank, ds: EmbeddingDataset,
                      c: int, m: int) -> np.ndarray:
    """Softmax over locally present classes of mean inner products with t_c^m.

    Returns a full C-vector; absent classes get probability zero.
    """
    means, present = _class_means(ds)
    return _prompt_prob(bank.embeddings[c, m], means, present)


def _prompt_prob(text_emb: np.ndarray, class_means: np.ndarray,
                 present: np.ndarray) -> np.ndarray:
    if not present.any():
        raise DegenerateInputError("no locally present classes")
    dots = class_means[present] @ text_emb
    probs = np.zeros(class_means.shape[0])
    probs[present] = softmax(dots)
    return probs


def client_confidences(bank: PromptBank, ds: EmbeddingDataset,
                       client_id: int = 0) -> ClientTextReport:
    """Confidence u = p_c(t_c^m) - max_{j != c} p_j(t_c^m) for every (c, m)."""
    if bank.dim != ds.dim:
        raise ValidationError(f"bank dim {bank.dim} != dataset dim {ds.dim}")
    if bank.num_classes != ds.num_classes:
        raise ValidationError("bank and dataset disagree on class count")
    means, present = _class_means(ds)
    if not present.any():
        raise DegenerateInputError("no locally present classes")
    c_total, mp1 = bank.num_classes, bank.prompts_per_class
    u = np.zeros((c_total, mp1))
    # All (c, m) prompts share one softmax basis: the local class means.
    dots = np.einsum("cmd,jd->cmj", bank.embeddings, means[present])
    probs = softmax(dots, axis=2)
    present_idx = np.flatnonzero(present)
    pos_of = {j: i for i, j in enumerate(present_idx)}
    for c in range(c_total):
        if c not in pos_of:
            continue
        own = probs[c, :, pos_of[c]]
        others = np.delete(probs[c], pos_of[c], axis=1)
        rival = others.max(axis=1) if others.size else np.zeros(mp1)
        u[c] = own - rival
    return ClientTextReport(client_id=client_id, confidences=u,
                            present=present, class_means=means)


def align_scores(reports, tau_t: float = DEFAULT_TAU_T,
                 eps_u: float = DEFAULT_EPS_U) -> AlignedPromptWeights:
    """Average per-client confidence log-ratios into scores and weights.

    Non-positive confidences are clamped to eps_u inside the log ratio; the
    leading factor is the raw slot-0 confidence floored at zero. Clients
    missing class c are skipped for that class and the average renormalized.
    """
    reports = list(reports)
    if not reports:
        raise ValidationError("at least one client report is required")
    if tau_t <= 0 or eps_u <= 0:
        raise ValidationError("tau_t and eps_u must be positive")
    shape = reports[0].confidences.shape
    for rep in reports:
        if rep.confidences.shape != shape:
            raise ValidationError("reports disagree on (C, M+1)")
    c_total, mp1 = shape
    r = np.zeros(shape)
    for c in range(c_total):
        contributors = [rep for rep in reports if rep.present[c]]
        if not contributors:
            continue
        terms = np.zeros((len(contributors), mp1))
        for i, rep in enumerate(contributors):
            u = rep.confidences[c]
            u0 = u[0]
            clamped = np.maximum(u, eps_u)
            terms[i] = max(u0, 0.0) * np.log(clamped / max(u0, eps_u))
        r[c] = terms.mean(axis=0)
    r[:, 0] = 0.0
    b = softmax(r / tau_t, axis=1)
    return AlignedPromptWeights(scores=r, weights=b, tau_t=tau_t)


def prefilter_prompts(client_banks, kappa: float = DEFAULT_KAPPA_FILTER) -> PromptBank:
    """Cross-client cosine screen, then per-slot averaging into a global bank.

    An augmented embedding survives only if every other client holds some
    same-class embedding within cosine distance >= kappa of it. Slot 0 is
    never filtered. A slot whose members are all dropped for a class falls
    back to that class's hand-crafted embedding.
    """
    client_banks = list(client_banks)
    if not client_banks:
        raise ValidationError("at least one client prompt bank is required")
    if not 0.0 < kappa < 1.0:
        raise ValidationError(f"kappa must lie in (0, 1), got {kappa}")
    shape = client_banks[0].embeddings.shape
    for bank in client_banks:
        if bank.embeddings.shape != shape:
            raise ValidationError("client prompt banks disagree on shape")
    c_total, mp1, d = shape
    unit = np.stack([
        bank.embeddings / np.linalg.norm(bank.embeddings, axis=2, keepdims=True)
        for bank in client_banks
    ])  # (K, C, M+1, d)
    k_total = len(client_banks)
    out = np.zeros((c_total, mp1, d))
    for c in range(c_total):
        hand = unit[:, c, 0].mean(axis=0)
        out[c, 0] = hand / np.linalg.norm(hand)
        for m in range(1, mp1):
            members = []
            for k in range(k_total):
                e = unit[k, c, m]
                ok = all(
                    (unit[k2, c] @ e).max() >= kappa
                    for k2 in range(k_total) if k2 != k
                )
                if ok:
                    members.append(e)
            if members:
                avg = np.mean(members, axis=0)
                out[c, m] = avg / np.linalg.norm(avg)
            else:
                out[c, m] = out[c, 0]
    return PromptBank(embeddings=out, normalized=True)


def text_logits(bank: PromptBank, weights: AlignedPromptWeights,
                z: np.ndarray, tau_clip: float = 0.01) -> np.ndarray:
    """Weighted prompt-ensemble logits sum_m b(t_j^m) z . t_j^m / tau_clip."""
    if tau_clip <= 0:
        raise ValidationError("tau_clip must be positive")
    if weights.weights.shape != bank.embeddings.shape[:2]:
        raise ValidationError("weights do not match the prompt bank shape")
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    if not np.isfinite(z2).all():
        raise ValidationError("non-finite input embedding")
    if z2.shape[1] != bank.dim:
        raise ValidationError(f"input dim {z2.shape[1]} != bank dim {bank.dim}")
    # (C, d) effective class weights: sum_m b[c, m] * emb[c, m]
    effective = np.einsum("cm,cmd->cd", weights.weights, bank.embeddings)
    logits = (z2 @ effective.T) / tau_clip
    return logits[0] if single else logits


def text_predict(bank: PromptBank, weights: AlignedPromptWeights,
                 z: np.ndarray, tau_clip: float = 0.01) -> np.ndarray:
    """Class probabilities of the weighted prompt-ensemble classifier."""
    return softmax(text_logits(bank, weights, z, tau_clip))


def pack_report(rep: ClientTextReport) -> bytes:
    c, mp1 = rep.confidences.shape
    return b"".join([
        REPORT_MAGIC,
        struct.pack("<III", rep.client_id & 0xFFFFFFFF, c, mp1),
        rep.confidences.astype("<f8").tobytes(),
        rep.present.astype(np.uint8).tobytes(),
    ])


def unpack_report(data: bytes) -> ClientTextReport:
    if data[:8] != REPORT_MAGIC:
        raise FormatError(f"bad report magic {data[:8]!r}")
    client_id, c, mp1 = struct.unpack_from("<III", data, 8)
    expected = 20 + 8 * c * mp1 + c
    if len(data) != expected:
        raise TruncationError(f"report payload is {len(data)} bytes, expected {expected}")
    u = np.frombuffer(data, dtype="<f8", count=c * mp1, offset=20).reshape(c, mp1).copy()
    present = np.frombuffer(data, dtype=np.uint8, count=c,
                            offset=20 + 8 * c * mp1).astype(bool)
    return ClientTextReport(client_id=client_id, confidences=u, present=present,
                            class_means=np.zeros((c, 0)))


def save_report(rep: ClientTextReport, path) -> None:
    Path(path).write_bytes(pack_report(rep))


def load_report(path) -> ClientTextReport:
    return unpack_report(Path(path).read_bytes())
