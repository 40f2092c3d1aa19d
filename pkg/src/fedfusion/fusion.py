"""Temperature calibration and sample-wise fusion of the two modality heads.

Calibration rescales pre-softmax logits by a temperature found with binary
search so that mean max-softmax confidence matches a target accuracy. Fusion
mixes the calibrated visual and text probability vectors per sample with
eta = max p_V / (max p_V + max p_T), the sigmoid of the log-confidence ratio.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .bayes import softmax
from .errors import DegenerateInputError, ValidationError

DEFAULT_TAU_RANGE = (0.01, 100.0)
DEFAULT_CALIB_TOL = 1e-3
MAX_CALIB_ITER = 60


def confidence(logits: np.ndarray, tau: float = 1.0) -> float:
    """Mean over samples of the max softmax probability at temperature tau."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise DegenerateInputError("confidence needs a non-empty (N, C) logit array")
    if tau <= 0:
        raise ValidationError("temperature must be positive")
    return float(softmax(logits / tau, axis=1).max(axis=1).mean())


@dataclass(frozen=True)
class CalibrationResult:
    tau: float
    gap: float            # |conf(tau) - target| actually achieved
    iterations: int
    clamped: bool         # target unattainable, tau pinned to a range endpoint
    target: float
    num_samples: int


def calibrate(logits: np.ndarray, accuracy: float,
              tol: float = DEFAULT_CALIB_TOL,
              tau_range=DEFAULT_TAU_RANGE) -> CalibrationResult:
    """Binary search for tau with conf(logits / tau) ~= accuracy.

    Confidence is non-increasing in tau, so the bracket direction is fixed.
    An unattainable target clamps to the nearest endpoint with a warning flag.
    """
    logits = np.asarray(logits, dtype=np.float64)
    lo, hi = tau_range
    if not 0 < lo < hi:
        raise ValidationError(f"invalid temperature range {tau_range}")
    n = logits.shape[0]
    conf_lo = confidence(logits, lo)   # highest attainable
    conf_hi = confidence(logits, hi)   # lowest attainable
    if accuracy >= conf_lo:
        return CalibrationResult(lo, abs(conf_lo - accuracy), 0, True, accuracy, n)
    if accuracy <= conf_hi:
        return CalibrationResult(hi, abs(conf_hi - accuracy), 0, True, accuracy, n)
    iterations = 0
    for iterations in range(1, MAX_CALIB_ITER + 1):
        mid = 0.5 * (lo + hi)
        conf_mid = confidence(logits, mid)
        if abs(conf_mid - accuracy) <= tol:
            return CalibrationResult(mid, abs(conf_mid - accuracy),
                                     iterations, False, accuracy, n)
        if conf_mid > accuracy:
            lo = mid
        else:
            hi = mid
    mid = 0.5 * (lo + hi)
    return CalibrationResult(mid, abs(confidence(logits, mid) - accuracy),
                             iterations, False, accuracy, n)


def mixing_weight(p_visual: np.ndarray, p_text: np.ndarray) -> float:
    """eta = sigmoid(log(max p_V / max p_T)) = max p_V / (max p_V + max p_T)."""
    mv = float(np.max(p_visual))
    mt = float(np.max(p_text))
    if mv <= 0 or mt <= 0:
        raise ValidationError("probability vectors must have positive maxima")
    return mv / (mv + mt)


@dataclass(frozen=True)
class CalibratedHead:
    """A logit function paired with its calibration temperature."""

    logit_fn: Callable[[np.ndarray], np.ndarray]   # (N, d) -> (N, C)
    calibration: CalibrationResult

    def probabilities(self, z: np.ndarray) -> np.ndarray:
        logits = np.atleast_2d(self.logit_fn(np.atleast_2d(z)))
        return softmax(logits / self.calibration.tau, axis=1)


IDENTITY_CALIBRATION = CalibrationResult(tau=1.0, gap=0.0, iterations=0,
                                         clamped=False, target=float("nan"),
                                         num_samples=0)


@dataclass(frozen=True)
class FusionModel:
    """Calibrated visual head + calibrated text head + the mixing rule."""

    visual: CalibratedHead
    text: CalibratedHead

    def predict(self, z: np.ndarray):
        """Return (fused, visual, text, eta) probabilities for a batch."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        p_v = self.visual.probabilities(z)
        p_t = self.text.probabilities(z)
        if p_v.shape != p_t.shape:
            raise ValidationError("modality heads disagree on class count")
        eta = p_v.max(axis=1) / (p_v.max(axis=1) + p_t.max(axis=1))
        fused = eta[:, None] * p_v + (1.0 - eta)[:, None] * p_t
        return fused, p_v, p_t, eta


def fuse_predict(model: FusionModel, z: np.ndarray) -> np.ndarray:
    """Fused class probabilities; convex combination of the two heads."""
    z = np.asarray(z, dtype=np.float64)
    fused, _, _, _ = model.predict(z)
    return fused[0] if z.ndim == 1 else fused
