"""Contrastive, distillation and uncertainty-weighted losses.

All score inputs are ``(K, n)`` arrays: one row per query, column 0 holds the
positive pair. Batch reductions are sums over queries. Each loss returns a
:class:`LossValue` whose ``grad`` is the analytic gradient with respect to the
student scores (teacher scores and weights are treated as constants).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dcd.errors import ConfigError, NumericError, ShapeError, UsageError
from dcd.numeric import FLOAT, check_finite, log_softmax, stable_softmax


@dataclass
class LossValue:
    value: float
    per_query_terms: np.ndarray
    grad: np.ndarray | None = None

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_query_terms))


@dataclass
class WeightVector:
    weights: np.ndarray
    kind: str

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=FLOAT)
        if self.kind not in ("hard", "soft"):
            raise UsageError(f"unknown weight kind {self.kind!r}")
        if not np.all(self.weights > 0):
            raise NumericError(f"{self.kind} weights must be strictly positive")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise NumericError(f"{self.kind} weights sum to {self.weights.sum()!r}, not 1")

    def __len__(self):
        return len(self.weights)

    @classmethod
    def uniform(cls, k: int, kind: str) -> WeightVector:
        return cls(np.full(k, 1.0 / k), kind)


@dataclass
class DistillPair:
    student_logits: np.ndarray
    teacher_logits: np.ndarray

    def __post_init__(self):
        if np.shape(self.student_logits) != np.shape(self.teacher_logits):
            raise ShapeError(
                f"student logits {np.shape(self.student_logits)} vs teacher {np.shape(self.teacher_logits)}"
            )


def _scores(x, name="scores") -> np.ndarray:
    s = np.asarray(x, dtype=FLOAT)
    if s.ndim == 1:
        s = s[None, :]
    if s.ndim != 2:
        raise ShapeError(f"{name} must be (K, n), got shape {s.shape}")
    if s.shape[0] == 0:
        raise UsageError(f"{name}: empty batch")
    if s.shape[1] == 0:
        raise ShapeError(f"{name}: empty candidate list")
    return check_finite(s, name)


def _pairs(student, teacher) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(student, DistillPair):
        student, teacher = student.student_logits, student.teacher_logits
    elif isinstance(student, (list, tuple)) and student and isinstance(student[0], DistillPair):
        teacher = np.vstack([np.atleast_2d(p.teacher_logits) for p in student])
        student = np.vstack([np.atleast_2d(p.student_logits) for p in student])
    s, t = _scores(student, "student logits"), _scores(teacher, "teacher logits")
    if s.shape != t.shape:
        raise ShapeError(f"student logits {s.shape} vs teacher logits {t.shape}")
    return s, t


def _weights(weights, k: int, kind: str) -> np.ndarray:
    w = weights.weights if isinstance(weights, WeightVector) else np.asarray(weights, dtype=FLOAT)
    if w.shape != (k,):
        raise ShapeError(f"{kind} weights have length {w.size}, batch has {k} queries")
    return w


def _check_alpha(alpha: float):
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")


def _contrastive_terms(s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-query -log softmax(s)[0] and its gradient."""
    terms = -log_softmax(s)[:, 0]
    grad = stable_softmax(s)
    grad[:, 0] -= 1.0
    return terms, grad


def nce_loss(scores) -> LossValue:
    s = _scores(scores)
    terms, grad = _contrastive_terms(s)
    return LossValue(float(terms.sum()), terms, grad)


def itm_loss(scores) -> LossValue:
    """Contrastive loss with exactly one negative per query."""
    s = _scores(scores)
    if s.shape[1] != 2:
        raise UsageError(f"itm_loss takes one positive and one negative per query, got {s.shape[1]} scores")
    return nce_loss(s)


def itm_hard_loss(student_logits, candidates=None) -> LossValue:
    """Contrastive loss over the positive plus M' selected negatives per query."""
    s = _scores(student_logits, "student logits")
    if candidates is not None:
        if len(candidates) != s.shape[0]:
            raise ShapeError(f"{len(candidates)} candidate lists for {s.shape[0]} logit rows")
        for c in candidates:
            if len(c.teacher_logits_adjusted) != s.shape[1]:
                raise ShapeError(
                    f"candidate list of length {len(c.teacher_logits_adjusted)} vs {s.shape[1]} student logits"
                )
    return nce_loss(s)


def kl_distill_loss(student_logits, teacher_logits, temperature: float = 1.0) -> LossValue:
    s, t = _pairs(student_logits, teacher_logits)
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    log_pt = log_softmax(t, temperature)
    log_ps = log_softmax(s, temperature)
    pt = np.exp(log_pt)
    terms = temperature**2 * (pt * (log_pt - log_ps)).sum(axis=1)
    terms = np.maximum(terms, 0.0)
    grad = temperature * (np.exp(log_ps) - pt)
    return LossValue(float(terms.sum()), terms, grad)


def mse_distill_loss(student_logits, teacher_logits=None) -> LossValue:
    """Squared L2 distance per query, summed over the batch.

    Accepts a :class:`DistillPair`, a list of them, or two arrays.
    """
    s, t = _pairs(student_logits, teacher_logits)
    diff = s - t
    terms = (diff**2).sum(axis=1)
    return LossValue(float(terms.sum()), terms, 2.0 * diff)


def _combine(a: LossValue, b: LossValue, alpha: float) -> LossValue:
    _check_alpha(alpha)
    terms = alpha * np.asarray(a.per_query_terms) + (1.0 - alpha) * np.asarray(b.per_query_terms)
    grad = None
    if a.grad is not None and b.grad is not None:
        grad = alpha * a.grad + (1.0 - alpha) * b.grad
    return LossValue(alpha * a.value + (1.0 - alpha) * b.value, terms, grad)


def vanilla_kd_objective(mse: LossValue, task: LossValue, alpha: float) -> LossValue:
    return _combine(mse, task, alpha)


def teacher_uncertainty(logits):
    """Entropy of softmax(logits); a float for one vector, an array for a (K, n) batch."""
    z = np.asarray(logits, dtype=FLOAT)
    single = z.ndim == 1
    logp = log_softmax(np.atleast_2d(z))
    u = -(np.exp(logp) * logp).sum(axis=1)
    u = np.clip(u, 0.0, np.log(z.shape[-1]))
    return float(u[0]) if single else u


def hard_label_weights(uncertainties) -> WeightVector:
    """w_i = u_i / sum_j u_j; falls back to uniform when all uncertainties are zero."""
    u = np.asarray(uncertainties, dtype=FLOAT).reshape(-1)
    if u.size == 0:
        raise UsageError("hard_label_weights: empty batch")
    if np.any(u < 0) or not np.all(np.isfinite(u)):
        raise NumericError("uncertainties must be finite and non-negative")
    total = u.sum()
    if total == 0.0:
        return WeightVector.uniform(u.size, "hard")
    # a query whose entropy underflowed to exactly 0 keeps a vanishing positive weight
    u = np.maximum(u, np.finfo(FLOAT).tiny)
    return WeightVector(u / u.sum(), "hard")


def soft_label_weights(hard_weights: WeightVector) -> WeightVector:
    """c_i = softmax_i((1 - w_i)^2): the less the teacher's uncertainty share, the larger c_i."""
    w = hard_weights.weights if isinstance(hard_weights, WeightVector) else np.asarray(hard_weights, dtype=FLOAT)
    return WeightVector(stable_softmax((1.0 - w) ** 2), "soft")


def witm_loss(scores, hard_weights) -> LossValue:
    s = _scores(scores)
    w = _weights(hard_weights, s.shape[0], "hard")
    terms, grad = _contrastive_terms(s)
    terms = w * terms
    return LossValue(float(terms.sum()), terms, w[:, None] * grad)


def wds_loss(student_logits, teacher_logits=None, soft_weights=None) -> LossValue:
    """Weighted distillation loss; ``wds_loss(pairs, soft_weights)`` is also accepted."""
    if soft_weights is None:
        teacher_logits, soft_weights = None, teacher_logits
    s, t = _pairs(student_logits, teacher_logits)
    c = _weights(soft_weights, s.shape[0], "soft")
    diff = s - t
    terms = c * (diff**2).sum(axis=1)
    return LossValue(float(terms.sum()), terms, 2.0 * c[:, None] * diff)


def dcd_objective(wds: LossValue, witm: LossValue, alpha: float) -> LossValue:
    return _combine(wds, witm, alpha)
