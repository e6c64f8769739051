"""Chi-square tails, ROC curves and rank correlation."""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np
from scipy import stats as _sps

FPR_TARGETS = (0.001, 0.01, 0.05)

_EPS = 1e-16
_MAX_ITER = 100_000


def _log_gamma_p_series(a: float, x: float) -> float:
    """log P(a, x) by the power series, valid for x < a + 1."""
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return math.log(total) - x + a * math.log(x) - math.lgamma(a)


def _log_gamma_q_cf(a: float, x: float) -> float:
    """log Q(a, x) by the modified Lentz continued fraction, valid for x >= a + 1."""
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.log(h) - x + a * math.log(x) - math.lgamma(a)


def log_gamma_q(a: float, x: float) -> float:
    """Natural log of the regularized upper incomplete gamma ``Q(a, x)``."""
    if a <= 0:
        raise ValueError("shape a must be > 0")
    if x <= 0:
        return 0.0
    if x < a + 1.0:
        log_p = _log_gamma_p_series(a, x)
        return math.log1p(-math.exp(log_p)) if log_p < -1e-300 else -math.inf
    return _log_gamma_q_cf(a, x)


def chi2_logsf(s: float, d: int) -> float:
    """``log(1 - F_{chi2_d}(s))``."""
    if d < 1:
        raise ValueError("degrees of freedom must be >= 1")
    return log_gamma_q(0.5 * d, 0.5 * max(float(s), 0.0))


def chi2_sf(s: float, d: int) -> float:
    return math.exp(chi2_logsf(s, d))


# ---------------------------------------------------------------------------
# ROC


@dataclass
class AttackReport:
    scores: np.ndarray
    labels: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    tpr_at: dict[float, float]
    name: str = ""
    meta: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = {"attack": self.name, "auc": self.auc}
        out.update({f"tpr@{t:g}": v for t, v in self.tpr_at.items()})
        return out

    def decision_accuracy(self, threshold: float) -> float:
        return float(np.mean((self.scores > threshold) == (self.labels == 1)))


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """Empirical ROC by a descending threshold sweep; tied scores share a threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both positive and negative labels are required")
    order = np.argsort(-scores, kind="stable")
    s, l = scores[order], labels[order]
    tp = np.cumsum(l)
    fp = np.cumsum(~l)
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tpr = np.r_[0.0, tp[last_of_group] / n_pos]
    fpr = np.r_[0.0, fp[last_of_group] / n_neg]
    return fpr, tpr


def roc_report(scores, labels, fpr_targets=FPR_TARGETS, name: str = "", meta=None) -> AttackReport:
    fpr, tpr = roc_curve(scores, labels)
    auc = float(np.trapezoid(tpr, fpr))
    tpr_at = {float(t): float(tpr[fpr <= t + 1e-15].max()) for t in fpr_targets}
    return AttackReport(np.asarray(scores, dtype=np.float64), np.asarray(labels).astype(int),
                        fpr, tpr, auc, tpr_at, name, dict(meta or {}))


def spearman(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("inputs must have equal length")
    return float(_sps.spearmanr(a, b).statistic)
