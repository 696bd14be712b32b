"""Distillation objectives.

Every loss returns the scalar value together with its gradient with
respect to the student logits; teacher and checkpoint logits are always
treated as constants. KL-family losses follow the tempered convention
loss = T^2 * mean_batch KL(p_teacher || p_student) with p = softmax(z / T).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, ShapeError
from .nn_core import Matrix, log_softmax_t, softmax_t

METHODS = ("kl", "ls", "dkd", "mds", "self_distill", "se2d")

_STD_EPS = 1e-8


@dataclass(frozen=True)
class MethodConfig:
    """A distillation method plus its hyperparameters."""

    method: str
    temperature: float = 10.0
    dkd_alpha: float = 1.0
    dkd_beta: float = 8.0
    mds_low_q: float = 0.25
    mds_high_q: float = 0.75

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise InvalidArgumentError(
                f"unknown method {self.method!r}, expected one of {METHODS}"
            )
        if self.temperature <= 0:
            raise InvalidArgumentError(f"temperature must be > 0, got {self.temperature}")
        if self.dkd_alpha < 0 or self.dkd_beta < 0:
            raise InvalidArgumentError("dkd weights must be nonnegative")
        if not (0.0 <= self.mds_low_q < self.mds_high_q <= 1.0):
            raise InvalidArgumentError(
                f"need 0 <= low < high <= 1, got [{self.mds_low_q}, {self.mds_high_q}]"
            )


@dataclass
class LossResult:
    loss: float
    dlogits: Matrix


@dataclass
class PairedLossResult:
    """Combined scalar plus one gradient per student-logit input."""

    loss: float
    dlogits_all: Matrix
    dlogits_ext: Matrix


def _check_same_shape(a: Matrix, b: Matrix, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def kl_kd_loss(student_logits: Matrix, teacher_logits: Matrix, temperature: float) -> LossResult:
    """Tempered KL divergence from the teacher to the student distribution.

    Zero exactly when the tempered rows match; an empty batch contributes
    zero loss and an empty gradient.
    """
    student_logits = np.asarray(student_logits, dtype=float)
    teacher_logits = np.asarray(teacher_logits, dtype=float)
    _check_same_shape(student_logits, teacher_logits, "kl_kd_loss")
    if temperature <= 0:
        raise InvalidArgumentError(f"temperature must be > 0, got {temperature}")
    n = student_logits.shape[0]
    if n == 0:
        return LossResult(0.0, np.zeros_like(student_logits))
    log_q = log_softmax_t(student_logits, temperature)
    log_p = log_softmax_t(teacher_logits, temperature)
    p = np.exp(log_p)
    loss = temperature**2 * float((p * (log_p - log_q)).sum(axis=1).mean())
    dlogits = temperature * (np.exp(log_q) - p) / n
    return LossResult(loss, dlogits)


def logit_standardize(logits: Matrix) -> Matrix:
    """Z-score each row using the population standard deviation.

    Constant rows map to all zeros through the epsilon guard.
    """
    logits = np.asarray(logits, dtype=float)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise InvalidArgumentError(f"need a 2-D matrix with >= 2 columns, got {logits.shape}")
    centered = logits - logits.mean(axis=1, keepdims=True)
    std = np.sqrt((centered**2).mean(axis=1, keepdims=True))
    return centered / (std + _STD_EPS)


def _standardize_backward(logits: Matrix, grad_out: Matrix) -> Matrix:
    """Chain an upstream gradient back through logit_standardize."""
    n = logits.shape[1]
    centered = logits - logits.mean(axis=1, keepdims=True)
    std = np.sqrt((centered**2).mean(axis=1, keepdims=True))
    denom = std + _STD_EPS
    term1 = (grad_out - grad_out.mean(axis=1, keepdims=True)) / denom
    inner = (grad_out * centered).sum(axis=1, keepdims=True)
    term2 = centered * inner / (n * np.maximum(std, _STD_EPS) * denom**2)
    return term1 - term2


def ls_kd_loss(student_logits: Matrix, teacher_logits: Matrix, temperature: float) -> LossResult:
    """KL distillation on row-standardized logits (both sides z-scored)."""
    student_logits = np.asarray(student_logits, dtype=float)
    teacher_logits = np.asarray(teacher_logits, dtype=float)
    _check_same_shape(student_logits, teacher_logits, "ls_kd_loss")
    inner = kl_kd_loss(
        logit_standardize(student_logits), logit_standardize(teacher_logits), temperature
    )
    return LossResult(inner.loss, _standardize_backward(student_logits, inner.dlogits))


def _masked_log_softmax(scaled_logits: Matrix, target_mask: Matrix) -> Matrix:
    """Log-softmax over the non-target classes only (target forced to -inf)."""
    z = np.where(target_mask, -np.inf, scaled_logits)
    zmax = z.max(axis=1, keepdims=True)
    return z - zmax - np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))


def dkd_loss(
    student_logits: Matrix,
    teacher_logits: Matrix,
    temperature: float,
    alpha: float,
    beta: float | np.ndarray,
) -> LossResult:
    """Decoupled distillation: target-vs-rest term plus non-target term.

    The target class is the teacher's argmax (lowest index on ties). The
    first term is the binary KL between (target, rest) aggregated tempered
    masses; the second is the KL between tempered distributions
    renormalized over the non-target classes. Both carry the T^2 factor.
    `beta` may be a scalar or a per-sample vector of length B.
    """
    student_logits = np.asarray(student_logits, dtype=float)
    teacher_logits = np.asarray(teacher_logits, dtype=float)
    _check_same_shape(student_logits, teacher_logits, "dkd_loss")
    if temperature <= 0:
        raise InvalidArgumentError(f"temperature must be > 0, got {temperature}")
    n, c = student_logits.shape
    if c < 2:
        raise InvalidArgumentError("dkd_loss needs at least 2 classes")
    beta = np.broadcast_to(np.asarray(beta, dtype=float), (n,))

    target = np.argmax(teacher_logits, axis=1)
    rows = np.arange(n)
    mask = np.zeros((n, c), dtype=bool)
    mask[rows, target] = True

    us = student_logits / temperature
    ut = teacher_logits / temperature
    log_q = log_softmax_t(student_logits, temperature)
    log_p = log_softmax_t(teacher_logits, temperature)
    q = np.exp(log_q)
    p = np.exp(log_p)

    # Aggregated (target, rest) masses; rest mass sums the non-target
    # tempered probabilities.
    log_qt = log_q[rows, target]
    log_pt = log_p[rows, target]
    q_rest = np.where(~mask, q, 0.0).sum(axis=1)
    p_rest = np.where(~mask, p, 0.0).sum(axis=1)
    qt = q[rows, target]
    pt = p[rows, target]
    with np.errstate(divide="ignore", invalid="ignore"):
        tckd = pt * (log_pt - log_qt) + p_rest * (np.log(p_rest) - np.log(q_rest))
    tckd = np.where(p_rest > 0, tckd, pt * (log_pt - log_qt))

    # Non-target distributions renormalize to softmax over the masked logits.
    log_qhat = _masked_log_softmax(us, mask)
    log_phat = _masked_log_softmax(ut, mask)
    phat = np.where(mask, 0.0, np.exp(log_phat))
    qhat = np.where(mask, 0.0, np.exp(log_qhat))
    with np.errstate(invalid="ignore"):
        diff = np.where(mask, 0.0, log_phat - log_qhat)
    nckd = (phat * diff).sum(axis=1)

    scale = temperature**2 / n
    loss = float((alpha * tckd + beta * nckd).sum() * scale)

    # d(tckd)/d(scaled student logit) via the binary-softmax chain rule.
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(q_rest > 0, p_rest / q_rest, 0.0) - pt / qt
    dtckd = (coef * qt)[:, None] * (mask.astype(float) - q)
    dnckd = qhat - phat
    dlogits = (temperature / n) * (alpha * dtckd + beta[:, None] * dnckd)
    return LossResult(loss, dlogits)


def batch_entropy(probs: Matrix) -> np.ndarray:
    """Row-wise Shannon entropy in nats with the 0*log(0) = 0 convention."""
    probs = np.asarray(probs, dtype=float)
    if np.any(probs < 0):
        raise InvalidArgumentError("probabilities must be nonnegative")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs), 0.0)
    return -terms.sum(axis=-1)


def entropy(prob_row: np.ndarray) -> float:
    """Shannon entropy of one probability vector, in nats."""
    return float(batch_entropy(np.atleast_2d(prob_row))[0])


def mds_filter(
    teacher_logits: Matrix, low_q: float, high_q: float, temperature: float
) -> np.ndarray:
    """Keep-mask for samples of medium difficulty by teacher entropy.

    Samples whose tempered-softmax entropy falls within the [low_q, high_q]
    empirical quantile band of the batch are kept; boundary ties are kept,
    and at least one sample always survives.
    """
    teacher_logits = np.asarray(teacher_logits, dtype=float)
    if teacher_logits.shape[0] == 0:
        raise InvalidArgumentError("cannot filter an empty batch")
    if not (0.0 <= low_q < high_q <= 1.0):
        raise InvalidArgumentError(f"need 0 <= low < high <= 1, got [{low_q}, {high_q}]")
    ent = batch_entropy(softmax_t(teacher_logits, temperature))
    lo = np.quantile(ent, low_q)
    hi = np.quantile(ent, high_q)
    keep = (ent >= lo) & (ent <= hi)
    if not keep.any():
        # Interpolated quantiles can bracket no sample; fall back to the
        # entropy closest to the band center.
        keep[np.argmin(np.abs(ent - 0.5 * (lo + hi)))] = True
    return keep


def self_distill_loss(
    student_logits: Matrix,
    teacher_logits: Matrix,
    prev_student_logits: Matrix,
    temperature: float,
) -> LossResult:
    """Teacher KL plus previous-checkpoint KL, both over the same batch."""
    teacher_term = kl_kd_loss(student_logits, teacher_logits, temperature)
    prev_term = kl_kd_loss(student_logits, prev_student_logits, temperature)
    return LossResult(teacher_term.loss + prev_term.loss, teacher_term.dlogits + prev_term.dlogits)


def se2d_loss(
    student_logits_all: Matrix,
    teacher_logits_all: Matrix,
    student_logits_ext: Matrix,
    prev_student_logits_ext: Matrix,
    temperature: float,
) -> PairedLossResult:
    """Teacher KL on the full batch plus checkpoint KL on the external batch.

    The two terms are added unweighted. An empty external batch reduces the
    loss to the teacher term alone.
    """
    teacher_term = kl_kd_loss(student_logits_all, teacher_logits_all, temperature)
    ext_term = kl_kd_loss(student_logits_ext, prev_student_logits_ext, temperature)
    return PairedLossResult(
        teacher_term.loss + ext_term.loss, teacher_term.dlogits, ext_term.dlogits
    )
