"""Distillation objectives for deeply supervised students.

Heads are ordered shallow to deep; the last entry of every per-head list is
the student's final classifier. Shallow heads are combined per sample with
loss-proportional weights that are recomputed every batch and held constant
during differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .models import HeadOutput
from .tensor import ShapeError, Tensor


@dataclass
class DistillConfig:
    alpha: float = 1.0
    beta: float = 30.0
    temperature: float = 4.0
    enable_shallow_kd: bool = True
    enable_fea: bool = True
    enable_shallow_fea: bool = True
    adaptive_weights: bool = True
    kd_grad_scale: float = 1.0
    # Constant multiplying both feature terms; the trainer sets it to
    # 1 / mean(F_T**2) when feature normalisation is on.
    fea_scale: float = 1.0
    # Ground-truth CE at the shallow heads instead of teacher KL (DSN baseline).
    shallow_labels: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be nonnegative, got {self.alpha}")
        if self.beta < 0:
            raise ValueError(f"beta must be nonnegative, got {self.beta}")
        if not self.fea_scale > 0:
            raise ValueError(f"fea_scale must be positive, got {self.fea_scale}")


@dataclass
class DistillLossReport:
    ce: float
    kd_last: float
    kd_shallow: float
    fea_last: float
    fea_shallow: float
    total: float
    kd_weights: np.ndarray  # N × (number of shallow heads)
    fea_weights: np.ndarray
    objective: Tensor  # differentiable scalar equal to ``total``

    def components(self) -> dict:
        return {
            "ce": self.ce,
            "kd_last": self.kd_last,
            "kd_shallow": self.kd_shallow,
            "fea_last": self.fea_last,
            "fea_shallow": self.fea_shallow,
            "total": self.total,
        }


def _values(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _check_same(a, b, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def kl_softened(teacher_logits, student_logits: Tensor, temperature: float) -> Tensor:
    """Per-sample KL(softmax(t/τ) || softmax(s/τ)), summed over classes.

    The teacher side is a constant.
    """
    student_logits = T.as_tensor(student_logits)
    t = _values(teacher_logits)
    _check_same(t, student_logits, "kl_softened")
    log_p = T.log_softmax(Tensor(t), temperature).data
    p = np.exp(log_p)
    log_q = T.log_softmax(student_logits, temperature)
    return T.sum(T.mul(p, T.sub(log_p, log_q)), axis=1)


def mse_feature(teacher_feature, student_feature: Tensor) -> Tensor:
    """Per-sample mean squared difference over the feature dimension."""
    student_feature = T.as_tensor(student_feature)
    t = _values(teacher_feature)
    _check_same(t, student_feature, "mse_feature")
    return T.mean(T.square(T.sub(student_feature, t)), axis=1)


def cross_entropy(labels, logits: Tensor) -> Tensor:
    """Per-sample cross-entropy of one-hot labels against softmax(logits)."""
    y = _values(labels)
    _check_same(y, logits, "cross_entropy")
    return T.mul(T.sum(T.mul(y, T.log_softmax(logits)), axis=1), -1.0)


def adaptive_weights(per_sample_losses) -> np.ndarray:
    """Row-normalize nonnegative losses so the larger loss gets the larger weight.

    All-zero rows fall back to uniform weights. The result is a plain array:
    no gradient flows through the weights.
    """
    losses = np.asarray(_values(per_sample_losses), dtype=np.float64)
    if losses.ndim != 2:
        raise ShapeError(f"adaptive_weights expects N×M losses, got shape {losses.shape}")
    if losses.shape[1] == 0:
        return losses.copy()
    if np.any(losses < 0) or np.any(np.isnan(losses)):
        raise ValueError("adaptive_weights requires nonnegative losses")
    totals = losses.sum(axis=1, keepdims=True)
    uniform = np.full_like(losses, 1.0 / losses.shape[1])
    with np.errstate(invalid="ignore", divide="ignore"):
        w = losses / totals
    return np.where(totals > 0, w, uniform)


def uniform_weights(n: int, m: int) -> np.ndarray:
    return np.full((n, m), 1.0 / m) if m else np.zeros((n, 0))


def _combine_shallow(per_head: Sequence[Tensor], n: int, adaptive: bool) -> Tuple[Tensor, np.ndarray]:
    """Batch mean of the per-sample weighted sum over shallow heads."""
    m = len(per_head)
    if m == 0:
        return Tensor(0.0), np.zeros((n, 0))
    if adaptive:
        # rounding can leave a KL of exactly-matching rows at -1e-17
        stacked = np.stack([h.data for h in per_head], axis=1)
        if np.all(np.isfinite(stacked)):
            weights = adaptive_weights(np.maximum(stacked, 0.0))
        else:
            # let the non-finite value surface in the report instead of failing here
            weights = np.full((n, m), np.nan)
    else:
        weights = uniform_weights(n, m)
    acc = None
    for l, h in enumerate(per_head):
        term = T.mul(h, weights[:, l])
        acc = term if acc is None else T.add(acc, term)
    return T.mean(acc), weights


def _zero_shallow(n: int, m: int) -> Tuple[Tensor, np.ndarray]:
    return Tensor(0.0), uniform_weights(n, m)


def kd_loss_terms(teacher_logits, head_logits: Sequence[Tensor], cfg: DistillConfig):
    """Like :func:`kd_loss` but returning differentiable scalars."""
    if not head_logits:
        raise ValueError("kd_loss needs at least the final head")
    n, m = head_logits[-1].shape[0], len(head_logits) - 1
    last = T.mean(kl_softened(teacher_logits, head_logits[-1], cfg.temperature))
    if cfg.enable_shallow_kd:
        per_head = [kl_softened(teacher_logits, z, cfg.temperature) for z in head_logits[:-1]]
        shallow, weights = _combine_shallow(per_head, n, cfg.adaptive_weights)
    else:
        shallow, weights = _zero_shallow(n, m)
    if cfg.kd_grad_scale != 1.0:
        last, shallow = T.mul(last, cfg.kd_grad_scale), T.mul(shallow, cfg.kd_grad_scale)
    return last, shallow, weights


def kd_loss(teacher_logits, head_logits: Sequence[Tensor], cfg: DistillConfig):
    """(kd_last, kd_shallow, kd_weights) with float losses."""
    last, shallow, w = kd_loss_terms(teacher_logits, head_logits, cfg)
    return last.item(), shallow.item(), w


def fea_loss_terms(teacher_feature, head_features: Sequence[Tensor], cfg: DistillConfig):
    if not head_features:
        raise ValueError("fea_loss needs at least the final head")
    n, m = head_features[-1].shape[0], len(head_features) - 1
    if not cfg.enable_fea:
        return Tensor(0.0), Tensor(0.0), uniform_weights(n, m)
    last = T.mean(mse_feature(teacher_feature, head_features[-1]))
    if cfg.enable_shallow_fea:
        per_head = [mse_feature(teacher_feature, f) for f in head_features[:-1]]
        shallow, weights = _combine_shallow(per_head, n, cfg.adaptive_weights)
    else:
        shallow, weights = _zero_shallow(n, m)
    if cfg.fea_scale != 1.0:
        last, shallow = T.mul(last, cfg.fea_scale), T.mul(shallow, cfg.fea_scale)
    return last, shallow, weights


def fea_loss(teacher_feature, head_features: Sequence[Tensor], cfg: DistillConfig):
    """(fea_last, fea_shallow, fea_weights) with float losses; inputs already projected."""
    last, shallow, w = fea_loss_terms(teacher_feature, head_features, cfg)
    return last.item(), shallow.item(), w


def check_one_hot(labels) -> np.ndarray:
    y = _values(labels)
    if y.ndim != 2:
        raise ValueError(f"labels must be N×K one-hot, got shape {y.shape}")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ValueError("labels must be one-hot: every row needs exactly one 1 and zeros elsewhere")
    return y


def total_loss(labels, teacher_out: Optional[HeadOutput], student_outs: Sequence[HeadOutput],
               cfg: DistillConfig, projected_features: Optional[Sequence[Tensor]] = None) -> DistillLossReport:
    """Assemble CE + alpha * (KD_last + KD_shallow) + beta * (Fea_last + Fea_shallow).

    ``projected_features`` are the student features after the teacher-width
    projection; when omitted the raw head features are compared directly.
    ``teacher_out`` may be None only when alpha and beta are both zero or the
    teacher-dependent terms are all switched off.
    """
    y = check_one_hot(labels)
    logits = [o.logits for o in student_outs]
    n, m = logits[-1].shape[0], len(logits) - 1
    ce = T.mean(cross_entropy(y, logits[-1]))

    uses_kd = cfg.alpha > 0 and not cfg.shallow_labels
    uses_fea = cfg.beta > 0 and cfg.enable_fea
    if teacher_out is None and (uses_kd or uses_fea):
        raise ValueError("teacher output required when alpha or beta is positive")

    if cfg.shallow_labels:
        kd_last = Tensor(0.0)
        if cfg.enable_shallow_kd:
            per_head = [cross_entropy(y, z) for z in logits[:-1]]
            kd_shallow, kd_w = _combine_shallow(per_head, n, cfg.adaptive_weights)
        else:
            kd_shallow, kd_w = _zero_shallow(n, m)
    elif teacher_out is not None:
        kd_last, kd_shallow, kd_w = kd_loss_terms(teacher_out.logits, logits, cfg)
    else:
        kd_last, kd_shallow, kd_w = Tensor(0.0), Tensor(0.0), uniform_weights(n, m)

    feats = list(projected_features) if projected_features is not None else [o.feature for o in student_outs]
    if teacher_out is not None and cfg.enable_fea:
        fea_last, fea_shallow, fea_w = fea_loss_terms(teacher_out.feature, feats, cfg)
    else:
        fea_last, fea_shallow, fea_w = Tensor(0.0), Tensor(0.0), uniform_weights(n, m)

    objective = T.add(
        T.add(ce, T.mul(T.add(kd_shallow, kd_last), cfg.alpha)),
        T.mul(T.add(fea_shallow, fea_last), cfg.beta),
    )
    return DistillLossReport(
        ce=ce.item(), kd_last=kd_last.item(), kd_shallow=kd_shallow.item(),
        fea_last=fea_last.item(), fea_shallow=fea_shallow.item(), total=objective.item(),
        kd_weights=kd_w, fea_weights=fea_w, objective=objective,
    )
