"""One-shot protocol driver: stats up, alignment, broadcast, local inference.

The in-process message bus moves the exact ``.tfs``/``.tfr``/``.tfn`` byte
encodings, so every simulated round exercises the real wire formats and the
transport can assert the one-shot property (K uploads per pipeline, one
broadcast).
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bayes import (
    DEFAULT_KAPPA0,
    DEFAULT_RIDGE,
    DEFAULT_S0,
    gda_fit,
    gda_logits,
    global_posterior,
    map_estimate,
    pack_posterior,
    personalized_posterior,
    unpack_posterior,
)
from .embeddings import PromptBank
from .errors import FedFusionError, ValidationError
from .fusion import (
    IDENTITY_CALIBRATION,
    CalibratedHead,
    DEFAULT_CALIB_TOL,
    FusionModel,
    calibrate,
)
from .suffstats import compute_stats, merge_messages, pack_stats, unpack_stats
from .textalign import (
    DEFAULT_EPS_U,
    DEFAULT_KAPPA_FILTER,
    DEFAULT_TAU_T,
    align_scores,
    client_confidences,
    pack_report,
    prefilter_prompts,
    text_logits,
    unpack_report,
)


@dataclass(frozen=True)
class RunConfig:
    alpha: float = 1.0
    tau_t: float = DEFAULT_TAU_T
    tau_clip: float = 0.01
    kappa_filter: float = DEFAULT_KAPPA_FILTER
    ridge: float = DEFAULT_RIDGE
    s0: float = DEFAULT_S0
    kappa0: float = DEFAULT_KAPPA0
    eps_u: float = DEFAULT_EPS_U
    calibration: bool = True
    calib_tol: float = DEFAULT_CALIB_TOL
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must lie in [0, 1], got {self.alpha}")
        for name in ("tau_t", "tau_clip", "ridge", "s0", "kappa0",
                     "eps_u", "calib_tol"):
            if getattr(self, name) <= 0 and name != "ridge":
                raise ValidationError(f"{name} must be positive")
        if self.ridge < 0:
            raise ValidationError("ridge must be non-negative")
        if self.threads < 1:
            raise ValidationError("threads must be >= 1")

    @staticmethod
    def from_dict(raw: dict) -> "RunConfig":
        known = set(RunConfig.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValidationError(f"unknown config fields: {sorted(unknown)}")
        return RunConfig(**raw)


class MessageBus:
    """Instrumented in-process transport for one simulated round."""

    def __init__(self):
        self.uploads = {"stats": [], "text": []}
        self.broadcasts = []

    def upload(self, pipeline: str, client_id: int, payload: bytes):
        self.uploads[pipeline].append((client_id, payload))

    def broadcast(self, payload: dict):
        # One physical broadcast; the payload maps part name -> bytes.
        self.broadcasts.append(payload)

    def upload_counts(self):
        return {name: len(msgs) for name, msgs in self.uploads.items()}


class DirectoryTransport:
    """File-based transport for multi-process runs: one file per message."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def upload(self, pipeline: str, client_id: int, payload: bytes):
        suffix = {"stats": "tfs", "text": "tfr"}[pipeline]
        (self.root / f"client_{client_id:04d}.{suffix}").write_bytes(payload)

    def broadcast(self, payload: dict):
        for name, data in payload.items():
            (self.root / f"broadcast_{name}").write_bytes(data)


@dataclass
class EvalReport:
    """Per-client and aggregate results for one round."""

    config: dict
    version: str = __version__
    clients: list = field(default_factory=list)
    averages: dict = field(default_factory=dict)
    message_counts: dict = field(default_factory=dict)
    calibration: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def canonical_dict(self) -> dict:
        """Deterministic content; timings are excluded so byte-identity holds."""
        return {
            "version": self.version,
            "config": self.config,
            "clients": self.clients,
            "averages": self.averages,
            "message_counts": self.message_counts,
            "calibration": self.calibration,
        }

    def canonical_bytes(self) -> bytes:
        return json.dumps(self.canonical_dict(), sort_keys=True,
                          indent=2).encode() + b"\n"

    def save(self, path) -> None:
        Path(path).write_bytes(self.canonical_bytes())
        timing_path = Path(path).with_suffix(Path(path).suffix + ".timings")
        timing_path.write_text(json.dumps(self.timings, indent=2) + "\n")

    def flat_table(self) -> str:
        """One CSV row per client per head, for plotting."""
        lines = ["client,head,accuracy_present,accuracy_all"]
        for entry in self.clients:
            for head in ("visual", "text", "fused"):
                acc = entry["accuracy"].get(head)
                if acc is None:
                    continue
                lines.append(f"{entry['client']},{head},"
                             f"{acc['present']:.6f},{acc['all']:.6f}")
        return "\n".join(lines) + "\n"


def _accuracy(probs: np.ndarray, labels: np.ndarray, present: np.ndarray) -> dict:
    """Top-1 accuracy over all classes and restricted to present classes."""
    pred_all = probs.argmax(axis=1)
    masked = np.where(present[None, :], probs, -np.inf)
    pred_present = masked.argmax(axis=1)
    return {
        "all": float((pred_all == labels).mean()),
        "present": float((pred_present == labels).mean()),
    }


def _map_clients(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def run_round(client_splits, bank, cfg: RunConfig, transport=None):
    """Execute the one-shot round and return (fusion models, EvalReport).

    ``bank`` is either one shared PromptBank or a list of per-client banks;
    per-client banks are first cosine-prefiltered into a global bank.
    """
    bus = transport if transport is not None else MessageBus()
    if not client_splits:
        raise ValidationError("no clients")
    dims = {s.train.dim for s in client_splits}
    classes = {s.train.num_classes for s in client_splits}
    if len(dims) != 1 or len(classes) != 1:
        raise ValidationError("all clients must share d and C")
    timings = {}

    if isinstance(bank, (list, tuple)):
        global_bank = prefilter_prompts(list(bank), cfg.kappa_filter)
    else:
        global_bank = bank
    if global_bank.dim != client_splits[0].train.dim:
        raise ValidationError("prompt bank dimension does not match client data")

    # Step 1: every client uploads stats and a text report (wire-encoded).
    t0 = time.monotonic()

    def client_phase1(item):
        k, split = item
        try:
            stats = compute_stats(split.train, client_id=k)
            report = client_confidences(global_bank, split.train, client_id=k)
        except FedFusionError:
            raise
        except Exception as exc:
            raise ValidationError(f"client {k} failed in step 1: {exc}") from exc
        return pack_stats(stats), pack_report(report)

    phase1 = _map_clients(client_phase1, list(enumerate(client_splits)), cfg.threads)
    for k, (stats_bytes, report_bytes) in enumerate(phase1):
        bus.upload("stats", k, stats_bytes)
        bus.upload("text", k, report_bytes)
    timings["stats"] = time.monotonic() - t0

    # Step 2: server merges, infers the global posterior, aligns prompt scores
    # and broadcasts everything once.
    t0 = time.monotonic()
    stats_msgs = [unpack_stats(b) for b, _ in phase1]
    reports = [unpack_report(b) for _, b in phase1]
    merged = merge_messages(stats_msgs)
    g_post = global_posterior(merged, cfg.s0, cfg.kappa0)
    aligned = align_scores(reports, tau_t=cfg.tau_t, eps_u=cfg.eps_u)
    weights_bytes = json.dumps({
        "tau_t": aligned.tau_t,
        "scores": aligned.scores.tolist(),
        "weights": aligned.weights.tolist(),
    }, sort_keys=True).encode()
    bus.broadcast({
        "posterior.tfn": pack_posterior(g_post),
        "stats.tfs": pack_stats(merged),
        "weights.json": weights_bytes,
    })
    timings["alignment"] = time.monotonic() - t0

    # Step 3: each client derives its personalized posterior and classifiers.
    t0 = time.monotonic()
    recv_post = unpack_posterior(pack_posterior(g_post))
    recv_merged = unpack_stats(pack_stats(merged))

    def client_phase3(item):
        k, split = item
        try:
            local_stats = compute_stats(split.train, client_id=k)
            post = personalized_posterior(recv_post, recv_merged, local_stats,
                                          cfg.alpha, cfg.s0, cfg.kappa0)
            means, cov = map_estimate(post)
            clf = gda_fit(means, cov, ridge=cfg.ridge)
        except FedFusionError:
            raise
        except Exception as exc:
            raise ValidationError(f"client {k} failed in step 3: {exc}") from exc

        def visual_fn(z, clf=clf):
            return gda_logits(clf, z)

        def text_fn(z):
            return text_logits(global_bank, aligned, z, cfg.tau_clip)

        if cfg.calibration and split.train.num_samples > 0:
            v_cal = _calibrate_head(visual_fn, split.train, cfg.calib_tol)
            t_cal = _calibrate_head(text_fn, split.train, cfg.calib_tol)
        else:
            v_cal = t_cal = IDENTITY_CALIBRATION
        model = FusionModel(visual=CalibratedHead(visual_fn, v_cal),
                            text=CalibratedHead(text_fn, t_cal))
        return model, {
            "client": k,
            "visual": _calibration_dict(v_cal),
            "text": _calibration_dict(t_cal),
        }

    phase3 = _map_clients(client_phase3, list(enumerate(client_splits)), cfg.threads)
    models = [m for m, _ in phase3]
    calib_diags = [diag for _, diag in phase3]
    timings["posterior"] = time.monotonic() - t0

    report = evaluate(models, client_splits, cfg=cfg, threads=cfg.threads)
    report.calibration = calib_diags
    if isinstance(bus, MessageBus):
        report.message_counts = {
            "uploads": bus.upload_counts(),
            "broadcasts": len(bus.broadcasts),
        }
    report.timings.update(timings)
    return models, report


def _calibrate_head(logit_fn, train, tol):
    logits = np.atleast_2d(logit_fn(train.vectors))
    accuracy = float((logits.argmax(axis=1) == train.labels).mean())
    return calibrate(logits, accuracy, tol=tol)


def _calibration_dict(res) -> dict:
    return {"tau": res.tau, "gap": res.gap, "iterations": res.iterations,
            "clamped": res.clamped, "target": res.target,
            "num_samples": res.num_samples}


def evaluate(models, client_splits, cfg: RunConfig = None, threads: int = 1) -> EvalReport:
    """Top-1 accuracy per client per head on each client's private test split."""
    if len(models) != len(client_splits):
        raise ValidationError("models and client splits are misaligned")
    t0 = time.monotonic()

    def eval_one(item):
        k, (model, split) = item
        present = np.zeros(split.train.num_classes, dtype=bool)
        present[split.train.present_classes()] = True
        if split.test.num_samples == 0:
            return {"client": k, "absent": True, "accuracy": {},
                    "eta": {}, "num_test": 0}
        fused, p_v, p_t, eta = model.predict(split.test.vectors)
        labels = split.test.labels
        return {
            "client": k,
            "absent": False,
            "num_test": int(labels.size),
            "accuracy": {
                "visual": _accuracy(p_v, labels, present),
                "text": _accuracy(p_t, labels, present),
                "fused": _accuracy(fused, labels, present),
            },
            "eta": {"mean": float(eta.mean()), "min": float(eta.min()),
                    "max": float(eta.max())},
        }

    entries = _map_clients(eval_one, list(enumerate(zip(models, client_splits))),
                           threads)
    scored = [e for e in entries if not e["absent"]]
    averages = {}
    for head in ("visual", "text", "fused"):
        for kind in ("present", "all"):
            values = [e["accuracy"][head][kind] for e in scored]
            averages[f"{head}_{kind}"] = float(np.mean(values)) if values else None
    averages["clients_scored"] = len(scored)
    report = EvalReport(config=asdict(cfg) if cfg else {}, clients=entries,
                        averages=averages)
    report.timings["eval"] = time.monotonic() - t0
    return report
