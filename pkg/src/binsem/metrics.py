"""Binary classification metrics and per-build-pair report tables."""

import csv
import io
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ValidationError


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricsReport:
    fpr: float
    tpr: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float | None = None
    # metrics whose denominator was zero (reported as 0)
    undefined: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def _pairs(items, first, second):
    for it in items:
        if isinstance(it, dict):
            yield it[first], it[second]
        else:
            yield it[0], it[1]


def confusion(preds):
    """Counts from ``(label, truth)`` pairs or dicts with those keys."""
    tp = fp = tn = fn = 0
    n = 0
    for label, truth in _pairs(preds, "label", "truth"):
        if label not in (0, 1) or truth not in (0, 1):
            raise ValidationError(f"labels must be binary, got ({label}, {truth})")
        n += 1
        if label and truth:
            tp += 1
        elif label:
            fp += 1
        elif truth:
            fn += 1
        else:
            tn += 1
    if n == 0:
        raise ValidationError("confusion matrix of empty input")
    return ConfusionMatrix(tp, fp, tn, fn)


def _ratio(num, den, name, undefined):
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def summarize(cm):
    undefined = []
    precision = _ratio(cm.tp, cm.tp + cm.fp, "precision", undefined)
    recall = _ratio(cm.tp, cm.tp + cm.fn, "recall", undefined)
    fpr = _ratio(cm.fp, cm.fp + cm.tn, "fpr", undefined)
    accuracy = _ratio(cm.tp + cm.tn, cm.total, "accuracy", undefined)
    f1 = _ratio(2 * precision * recall, precision + recall, "f1", undefined)
    return MetricsReport(fpr=fpr, tpr=recall, accuracy=accuracy, precision=precision,
                         recall=recall, f1=f1, undefined=undefined)


def roc_auc(scores):
    """Area under the ROC curve from ``(score, truth)`` pairs.

    Computed as the Mann-Whitney statistic with mid-ranks, so tied
    positive/negative scores contribute one half.
    """
    s, t = [], []
    for score, truth in _pairs(scores, "score", "truth"):
        s.append(float(score))
        t.append(int(truth))
    s, t = np.asarray(s), np.asarray(t)
    n_pos = int((t == 1).sum())
    n_neg = int((t == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("roc_auc needs both classes")
    ranks = rankdata(s)
    u = ranks[t == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def evaluate(rows):
    """MetricsReport for rows with ``label``, ``truth`` and optional ``score``."""
    rows = list(rows)
    report = summarize(confusion(rows))
    if rows and all("score" in r for r in rows):
        truths = {r["truth"] for r in rows}
        if truths == {0, 1}:
            report.auc = roc_auc(rows)
    return report


@dataclass
class PairReport:
    groups: dict
    average: dict
    weighted: bool = False

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pair", "P", "R", "F1"])
        for key, rep in self.groups.items():
            w.writerow([key, f"{rep.precision:.6f}", f"{rep.recall:.6f}", f"{rep.f1:.6f}"])
        a = self.average
        w.writerow(["Average", f"{a['precision']:.6f}", f"{a['recall']:.6f}", f"{a['f1']:.6f}"])
        return buf.getvalue()

    def to_dict(self):
        return {"groups": {k: v.to_dict() for k, v in self.groups.items()},
                "average": self.average, "weighted": self.weighted}


def report_by_pair(rows, weighted=False):
    """Per-group precision/recall/F1 plus an average row.

    ``rows`` carry ``group`` (e.g. ``"(CO0,GO3)"``), ``label``, ``truth`` and
    optionally ``score``. The average is an unweighted mean over groups unless
    ``weighted`` is set, in which case groups count by size.
    """
    by_group = defaultdict(list)
    for r in rows:
        if "group" not in r:
            raise ValidationError("every row needs a group key")
        by_group[r["group"]].append(r)
    groups = {k: evaluate(by_group[k]) for k in sorted(by_group)}
    sizes = np.array([len(by_group[k]) for k in groups], dtype=float)
    w = sizes / sizes.sum() if weighted else np.full(len(groups), 1 / max(len(groups), 1))
    average = {}
    for name in ("precision", "recall", "f1", "accuracy", "fpr", "tpr"):
        average[name] = float(sum(wi * getattr(rep, name) for wi, rep in zip(w, groups.values())))
    return PairReport(groups, average, weighted)
