"""Loss functions: smooth-L1 location loss, class-balanced cross-entropy,
per-branch joint classification+regression loss, and the weighted multi-branch
total with an optional detection-head term.

Cross-entropy weighting splits the classification mass 1/(1+gamma) to the
positive mean and gamma/(1+gamma) to the negative mean, which keeps a branch
trainable even when positives are scarce or absent. Probabilities are clamped
at 1e-12 before the log; clamp events are counted and queryable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import softmax
from .tensor import check_finite

PROB_FLOOR = 1e-12

_clamp_events = 0


def clamp_count() -> int:
    return _clamp_events


def reset_clamp_count() -> None:
    global _clamp_events
    _clamp_events = 0


def _neg_log(probs: np.ndarray) -> np.ndarray:
    global _clamp_events
    clipped = np.maximum(probs, PROB_FLOOR)
    _clamp_events += int(np.count_nonzero(probs < PROB_FLOOR))
    return -np.log(clipped)


def smooth_l1(x: float) -> float:
    """0.5 x^2 inside |x| < 1, |x| - 0.5 outside; C1 at the breakpoint."""
    ax = abs(x)
    return 0.5 * x * x if ax < 1.0 else ax - 0.5


def smooth_l1_grad(x: float) -> float:
    return x if abs(x) < 1.0 else float(np.sign(x))


def _smooth_l1_arr(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def _smooth_l1_grad_arr(x: np.ndarray) -> np.ndarray:
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


def _as_offsets(t) -> np.ndarray:
    return t.as_array() if hasattr(t, "as_array") else np.asarray(t, dtype=float)


def loc_loss(t, t_hat) -> float:
    """Mean smooth-L1 over the four offset coordinates."""
    r = _as_offsets(t_hat) - _as_offsets(t)
    return float(_smooth_l1_arr(r).mean())


def balanced_cross_entropy(pos_probs, neg_bg_probs, gamma: float) -> float:
    """Class-balanced cross-entropy over sampled sets.

    pos_probs holds each positive's probability of its true class, and
    neg_bg_probs each negative's background probability. An empty positive
    set contributes zero for its term.
    """
    pos = np.asarray(pos_probs, dtype=float)
    neg = np.asarray(neg_bg_probs, dtype=float)
    value = 0.0
    if pos.size:
        value += _neg_log(pos).mean() / (1.0 + gamma)
    if neg.size:
        value += _neg_log(neg).mean() * gamma / (1.0 + gamma)
    return float(value)


@dataclass
class BranchLossResult:
    value: float                 # cls + lam * loc
    cls_term: float
    loc_term: float              # unscaled by lam
    lam: float
    n_pos: int
    n_neg: int
    dlogits: np.ndarray | None = None
    dreg: np.ndarray | None = None


def branch_loss(samples, logits: np.ndarray, reg_hat: np.ndarray,
                lam: float, gamma: float) -> BranchLossResult:
    """Joint per-branch loss and its gradients.

    logits rows align with samples.positives followed by samples.negatives,
    each row holding K+1 class scores (background first). reg_hat rows align
    with the positives. The location term only sees positives; gradients flow
    back to both heads through the returned dlogits / dreg.
    """
    n_pos = len(samples.positives)
    n_neg = len(samples.negatives)
    if logits.shape[0] != n_pos + n_neg:
        raise ValueError(f"{logits.shape[0]} logit rows for {n_pos}+{n_neg} samples")
    if reg_hat.shape[0] != n_pos:
        raise ValueError(f"{reg_hat.shape[0]} regression rows for {n_pos} positives")
    check_finite(logits, "branch loss logits")
    check_finite(reg_hat, "branch loss regression")

    probs = softmax(logits, axis=1) if logits.size else np.zeros_like(logits)
    dlogits = np.zeros_like(logits)
    cls_term = 0.0

    if n_pos:
        w_pos = 1.0 / ((1.0 + gamma) * n_pos)
        classes = np.array([s.y for s in samples.positives])
        cls_term += float(_neg_log(probs[np.arange(n_pos), classes]).sum() * w_pos)
        grad = probs[:n_pos].copy()
        grad[np.arange(n_pos), classes] -= 1.0
        dlogits[:n_pos] = w_pos * grad
    if n_neg:
        w_neg = gamma / ((1.0 + gamma) * n_neg)
        cls_term += float(_neg_log(probs[n_pos:, 0]).sum() * w_neg)
        grad = probs[n_pos:].copy()
        grad[:, 0] -= 1.0
        dlogits[n_pos:] = w_neg * grad

    loc_term = 0.0
    dreg = np.zeros_like(reg_hat)
    if n_pos:
        targets = np.stack([s.target.as_array() for s in samples.positives])
        residual = reg_hat - targets
        loc_term = float(_smooth_l1_arr(residual).mean(axis=1).sum() / n_pos)
        dreg = lam * _smooth_l1_grad_arr(residual) / (4.0 * n_pos)

    value = cls_term + lam * loc_term
    return BranchLossResult(value, cls_term, loc_term, lam, n_pos, n_neg,
                            dlogits=dlogits, dreg=dreg)


@dataclass
class LossReport:
    """Decomposed multi-branch objective; re-sums exactly to total."""
    total: float
    per_branch: list = field(default_factory=list)
    # rows: (cls_term, loc_term, lam, alpha, n_pos, n_neg)
    detection_term: float | None = None
    alpha_det: float = 1.0

    def reconstruct_total(self) -> float:
        t = sum(alpha * (cls + lam * loc)
                for cls, loc, lam, alpha, _, _ in self.per_branch)
        if self.detection_term is not None:
            t += self.alpha_det * self.detection_term
        return t

    def csv_fields(self) -> list[float]:
        fields = [self.total]
        for cls, loc, lam, alpha, n_pos, n_neg in self.per_branch:
            fields += [cls, loc, float(n_pos), float(n_neg)]
        if self.detection_term is not None:
            fields.append(self.detection_term)
        return fields


def total_loss(branch_results, alphas, detection=None,
               alpha_det: float = 1.0) -> LossReport:
    """Weighted sum of branch losses plus an optional detection-head term."""
    if len(branch_results) != len(alphas):
        raise ValueError("one alpha per branch required")
    total = 0.0
    rows = []
    for res, alpha in zip(branch_results, alphas):
        total += alpha * res.value
        rows.append((res.cls_term, res.loc_term, res.lam, alpha,
                     res.n_pos, res.n_neg))
    det_term = None
    if detection is not None:
        det_term = detection.value
        total += alpha_det * det_term
    return LossReport(float(total), rows, det_term, alpha_det)
