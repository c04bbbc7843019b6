"""Classification metrics and the pretrained-vs-scratch improvement report."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DataIOError, UndefinedMetricError

POSITIVE_CLASS = 1
METRIC_NAMES = ("accuracy", "f1", "auc")


@dataclass
class EvalResult:
    accuracy: float
    f1: float
    auc: float
    tp: int
    fp: int
    tn: int
    fn: int

    def to_dict(self) -> dict:
        return {
            "accuracy": round(self.accuracy, 6),
            "f1": round(self.f1, 6),
            "auc": round(self.auc, 6),
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
        }

    @staticmethod
    def from_dict(d: dict) -> "EvalResult":
        return EvalResult(accuracy=float(d["accuracy"]), f1=float(d["f1"]),
                          auc=float(d["auc"]), tp=int(d["tp"]), fp=int(d["fp"]),
                          tn=int(d["tn"]), fn=int(d["fn"]))


@dataclass
class TransferReport:
    """Metric deltas of a pretrained model over its from-scratch twin."""

    p_n: EvalResult
    p_p: EvalResult
    improvements: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "no_pretrain": self.p_n.to_dict(),
            "pretrained": self.p_p.to_dict(),
            "improvements": {k: round(v, 6) for k, v in self.improvements.items()},
        }


def _paired(preds, labels):
    p = np.asarray(preds)
    l = np.asarray(labels)
    if p.shape != l.shape or p.ndim != 1 or p.size < 1:
        raise ContractError("predictions and labels must be equal-length nonempty vectors")
    return p, l


def accuracy(preds, labels) -> float:
    p, l = _paired(preds, labels)
    return float((p == l).sum() / p.size)


def f1(preds, labels, positive_class: int = POSITIVE_CLASS) -> float:
    """2PR/(P+R), with 0 by convention when precision+recall is 0."""
    p, l = _paired(preds, labels)
    values = set(np.unique(p).tolist()) | set(np.unique(l).tolist())
    if len(values) > 2:
        raise ContractError("f1 is defined for binary tasks")
    tp = int(((p == positive_class) & (l == positive_class)).sum())
    fp = int(((p == positive_class) & (l != positive_class)).sum())
    fn = int(((p != positive_class) & (l == positive_class)).sum())
    if 2 * tp + fp + fn == 0:
        return 0.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average of 1-based ranks
        i = j + 1
    return ranks


def auc(scores, labels) -> float:
    """Rank-based ROC area with midranks for ties (Mann-Whitney form)."""
    s = np.asarray(scores, dtype=np.float64)
    l = np.asarray(labels)
    if s.shape != l.shape or s.ndim != 1:
        raise ContractError("scores and labels must be equal-length vectors")
    npos = int((l == POSITIVE_CLASS).sum())
    nneg = int(l.size - npos)
    if npos == 0 or nneg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = _midranks(s)
    rank_sum = ranks[l == POSITIVE_CLASS].sum()
    return float((rank_sum - npos * (npos + 1) / 2.0) / (npos * nneg))


def evaluate_binary(preds, labels, scores) -> EvalResult:
    """Bundle the three metrics plus the confusion counts."""
    p, l = _paired(preds, labels)
    tp = int(((p == 1) & (l == 1)).sum())
    fp = int(((p == 1) & (l == 0)).sum())
    tn = int(((p == 0) & (l == 0)).sum())
    fn = int(((p == 0) & (l == 1)).sum())
    return EvalResult(
        accuracy=accuracy(p, l), f1=f1(p, l), auc=auc(scores, l),
        tp=tp, fp=fp, tn=tn, fn=fn,
    )


def transfer_gain(p_n: EvalResult, p_p: EvalResult) -> TransferReport:
    """Per-metric difference pretrained - no-pretraining, exact arithmetic."""
    improvements = {name: getattr(p_p, name) - getattr(p_n, name)
                    for name in METRIC_NAMES}
    return TransferReport(p_n=p_n, p_p=p_p, improvements=improvements)


def write_eval_report(path, result: EvalResult) -> None:
    Path(path).write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True))


def read_eval_report(path) -> EvalResult:
    p = Path(path)
    if not p.exists():
        raise DataIOError(f"no such report: {p}")
    try:
        return EvalResult.from_dict(json.loads(p.read_text()))
    except (KeyError, ValueError) as exc:
        raise DataIOError(f"malformed eval report {p}: {exc}") from exc
