"""Binary classification metrics with fraud (label 1) as the positive class."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

REPORT_KEYS = ("recall", "precision", "macro_f1", "auc", "tp", "fp", "tn", "fn")


class UndefinedMetricWarning(UserWarning):
    pass


def _aligned(labels, predictions):
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    p = np.asarray(predictions).reshape(-1)
    if y.shape != p.shape:
        raise ValueError(f"length mismatch: {y.size} labels vs {p.size} predictions")
    return y, p


def confusion(labels, predictions):
    """``(tp, fp, tn, fn)`` counts."""
    y, p = _aligned(labels, predictions)
    p = p.astype(np.int64)
    tp = int(((y == 1) & (p == 1)).sum())
    fp = int(((y == 0) & (p == 1)).sum())
    tn = int(((y == 0) & (p == 0)).sum())
    fn = int(((y == 1) & (p == 0)).sum())
    return tp, fp, tn, fn


def _ratio(num, den, what):
    if den == 0:
        warnings.warn(f"{what} is undefined (zero denominator); reporting 0", UndefinedMetricWarning, stacklevel=3)
        return 0.0
    return num / den


def recall(labels, predictions) -> float:
    tp, _, _, fn = confusion(labels, predictions)
    return _ratio(tp, tp + fn, "recall")


def precision(labels, predictions) -> float:
    tp, fp, _, _ = confusion(labels, predictions)
    return _ratio(tp, tp + fp, "precision")


def _f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def macro_f1(labels, predictions) -> float:
    """Unweighted mean of the fraud-class and benign-class F1."""
    tp, fp, tn, fn = confusion(labels, predictions)
    # benign as positive swaps the roles: tp<->tn, fp<->fn
    return 0.5 * (_f1(tp, fp, fn) + _f1(tn, fn, fp))


def auc(labels, scores) -> float:
    """ROC AUC via the Mann-Whitney U statistic; ties count one half."""
    y, s = _aligned(labels, scores)
    s = s.astype(np.float64)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined when a class is absent")
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class EvalReport:
    recall: float
    precision: float
    macro_f1: float
    auc: float
    tp: int
    fp: int
    tn: int
    fn: int

    def as_dict(self):
        return asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.as_dict().items())

    def csv_row(self) -> list:
        return [_fmt(v) for v in self.as_dict().values()]

    @classmethod
    def from_text(cls, text):
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        return cls(**{k: (int(kv[k]) if k in ("tp", "fp", "tn", "fn") else float(kv[k])) for k in REPORT_KEYS})


def _fmt(v):
    return str(v) if isinstance(v, int) else f"{v:.6f}"


def evaluate(labels, fraud_prob, threshold=0.5) -> EvalReport:
    """Score fraud probabilities; class 1 is predicted when the probability exceeds ``threshold``."""
    y, prob = _aligned(labels, fraud_prob)
    pred = (prob > threshold).astype(np.int64)
    tp, fp, tn, fn = confusion(y, pred)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UndefinedMetricWarning)
        rec = recall(y, pred)
        prec = precision(y, pred)
    try:
        area = auc(y, prob)
    except ValueError:
        area = float("nan")
    return EvalReport(rec, prec, macro_f1(y, pred), area, tp, fp, tn, fn)
