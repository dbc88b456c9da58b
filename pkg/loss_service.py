import itertools
import logging
import math
from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from errors import InfeasibleAlignmentError, InvalidInputError

# Configure logging
logger = logging.getLogger(__name__)

LAMBDA_FLOOR = 1e-12


@dataclass
class LossValue:
    value: float
    grad: np.ndarray


class JointLossConfig(BaseModel):
    """Fixed λ (λ ≥ 0) or the decade-matching adaptive λ."""

    model_config = ConfigDict(extra="forbid")

    lambda_mode: Literal["fixed", "adaptive"] = "fixed"
    lam: float = Field(1.0, ge=0.0)

    @model_validator(mode="after")
    def _check_finite(self):
        if not math.isfinite(self.lam):
            raise ValueError("λ must be finite")
        return self


# -------------------------------------------------------------------------
# CTC
# -------------------------------------------------------------------------
def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _logsumexp(a: np.ndarray, axis: int = 0) -> np.ndarray:
    peak = np.max(a, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - peak), axis=axis, keepdims=True)) + peak
    return np.squeeze(out, axis=axis)


def ctc_loss(logits: np.ndarray, labels: Sequence[int], blank: Optional[int] = None) -> LossValue:
    """
    Negative log-likelihood of `labels` under CTC, computed with the
    forward-backward recursions in log space.

    The gradient w.r.t. the logits is softmax(logits) − γ, where γ[t, c] is
    the posterior probability of emitting symbol c at frame t. An empty
    label sequence is scored as the all-blank path.
    """
    if logits.ndim != 2:
        raise InvalidInputError(f"logits must be T×P, got shape {logits.shape}")
    steps, num_classes = logits.shape
    if num_classes < 2:
        raise InvalidInputError(f"CTC needs at least one phone plus blank, got P={num_classes}")
    blank = num_classes - 1 if blank is None else blank
    labels = [int(s) for s in labels]
    if any(s == blank or not 0 <= s < num_classes for s in labels):
        raise InvalidInputError(f"labels must be non-blank symbols in [0, {num_classes}), got {labels}")

    required = len(labels) + sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    if steps < max(required, 1):
        raise InfeasibleAlignmentError(f"{steps} frames cannot emit {len(labels)} labels (need {required})")

    ext = np.full(2 * len(labels) + 1, blank, dtype=int)
    ext[1::2] = labels
    num_states = len(ext)
    # Skip transition s-2 -> s allowed when s is a label differing from s-2.
    skip = np.zeros(num_states, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    log_probs = log_softmax(logits)
    emit = log_probs[:, ext]

    alpha = np.full((steps, num_states), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if num_states > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, steps):
        prev = alpha[t - 1]
        step = np.full(num_states, -np.inf)
        step[1:] = prev[:-1]
        jump = np.full(num_states, -np.inf)
        jump[2:] = prev[:-2]
        jump[~skip] = -np.inf
        alpha[t] = _logsumexp(np.stack([prev, step, jump]), axis=0) + emit[t]

    beta = np.full((steps, num_states), -np.inf)
    beta[-1, -1] = 0.0
    if num_states > 1:
        beta[-1, -2] = 0.0
    skip_from = np.zeros(num_states, dtype=bool)
    skip_from[:-2] = skip[2:]
    for t in range(steps - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        step = np.full(num_states, -np.inf)
        step[:-1] = nxt[1:]
        jump = np.full(num_states, -np.inf)
        jump[:-2] = nxt[2:]
        jump[~skip_from] = -np.inf
        beta[t] = _logsumexp(np.stack([nxt, step, jump]), axis=0)

    tail = alpha[-1, -1] if num_states == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    log_likelihood = float(tail)

    occupancy = np.exp(alpha + beta - log_likelihood)
    gamma = np.zeros_like(logits, dtype=np.float64)
    for s in range(num_states):
        gamma[:, ext[s]] += occupancy[:, s]
    grad = np.exp(log_probs) - gamma
    return LossValue(value=-log_likelihood, grad=grad)


# -------------------------------------------------------------------------
# ENHANCEMENT LOSSES
# -------------------------------------------------------------------------
def mse_loss(y_hat: np.ndarray, y: np.ndarray) -> LossValue:
    if y_hat.shape != y.shape:
        raise InvalidInputError(f"MSE shape mismatch: {y_hat.shape} vs {y.shape}")
    diff = y_hat - y
    return LossValue(value=float(np.mean(diff * diff)), grad=2.0 * diff / diff.size)


def pit_mse(y_hats, ys: Sequence[np.ndarray]) -> Tuple[LossValue, Tuple[int, ...]]:
    """
    Permutation-invariant MSE over S streams.

    Returns the smallest mean per-stream MSE over all assignments together
    with the assignment: best_perm[s] is the target matched to stream s.
    The gradient (S×T×N) flows only through that assignment.
    """
    streams = np.asarray(y_hats, dtype=np.float64)
    targets = [np.asarray(y, dtype=np.float64) for y in ys]
    if streams.ndim != 3 or streams.shape[0] < 2:
        raise InvalidInputError(f"PIT needs at least two predicted streams, got shape {streams.shape}")
    if streams.shape[0] != len(targets):
        raise InvalidInputError(f"{streams.shape[0]} predicted streams but {len(targets)} targets")

    num_streams = streams.shape[0]
    pair = [[mse_loss(streams[s], targets[j]) for j in range(num_streams)] for s in range(num_streams)]
    best_value, best_perm = None, None
    for perm in itertools.permutations(range(num_streams)):
        value = sum(pair[s][perm[s]].value for s in range(num_streams)) / num_streams
        if best_value is None or value < best_value:
            best_value, best_perm = value, perm
    grad = np.stack([pair[s][best_perm[s]].grad for s in range(num_streams)]) / num_streams
    return LossValue(value=best_value, grad=grad), tuple(best_perm)


# -------------------------------------------------------------------------
# LOSS WEIGHTING
# -------------------------------------------------------------------------
def decade(x: float) -> int:
    """floor(log10 x), robust to rounding at exact powers of ten."""
    e = math.floor(math.log10(x))
    if 10.0 ** (e + 1) <= x:
        e += 1
    elif 10.0 ** e > x:
        e -= 1
    return e


def lambda_adapt(l_asr: float, l_enh: float) -> float:
    """λ = 10^⌊log10 L_asr⌋ / 10^⌊log10 L_enh⌋; nonpositive inputs are clamped."""
    if l_asr <= 0 or l_enh <= 0:
        logger.warning(f"lambda_adapt got nonpositive loss (L_asr={l_asr}, L_enh={l_enh}); clamping to {LAMBDA_FLOOR}")
        l_asr = max(l_asr, LAMBDA_FLOOR)
        l_enh = max(l_enh, LAMBDA_FLOOR)
    return 10.0 ** (decade(l_asr) - decade(l_enh))


@dataclass
class JointLoss:
    value: float
    lam: float
    enh: LossValue
    asr: LossValue

    @property
    def enh_grad(self) -> np.ndarray:
        return self.lam * self.enh.grad

    @property
    def asr_grad(self) -> np.ndarray:
        return self.asr.grad


def joint_loss(l_enh: LossValue, l_asr: LossValue, cfg: JointLossConfig) -> JointLoss:
    """λ·L_enh + L_asr; λ is a constant w.r.t. differentiation in both modes."""
    if not (math.isfinite(l_enh.value) and math.isfinite(l_asr.value)):
        raise InvalidInputError(f"joint loss needs finite components, got {l_enh.value}, {l_asr.value}")
    lam = lambda_adapt(l_asr.value, l_enh.value) if cfg.lambda_mode == "adaptive" else cfg.lam
    return JointLoss(value=lam * l_enh.value + l_asr.value, lam=lam, enh=l_enh, asr=l_asr)


def loss_pair_summary(pairs: List[Tuple[float, float]]) -> Tuple[float, float]:
    """Mean (L_enh, L_asr) over pairs, reduced in the given order."""
    if not pairs:
        return float("nan"), float("nan")
    enh = math.fsum(p[0] for p in pairs) / len(pairs)
    asr = math.fsum(p[1] for p in pairs) / len(pairs)
    return enh, asr
