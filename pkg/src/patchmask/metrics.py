"""Binary mask metrics with cloud_shadow as the positive class."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.stats import rankdata

from .errors import ContractViolation, DataError
from .scene import CLOUD_SHADOW

log = logging.getLogger(__name__)

RATE_FIELDS = ("accuracy", "precision_clear", "precision_cloud", "recall_clear", "recall_cloud",
               "f1_clear", "f1_cloud", "auroc", "ap")
TABLE_HEADERS = ("Accuracy", "Precision Clear", "Precision Cloud", "Recall Clear", "Recall Cloud",
                 "F1 Clear", "F1 Cloud", "AUROC", "AP")


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self):
        return self.tp + self.fp + self.tn + self.fn


def confusion(pred, truth):
    """Counts over pixels valid in both masks."""
    if pred.shape != truth.shape:
        raise ContractViolation(f"prediction {pred.shape} and truth {truth.shape} differ in size")
    both = pred.valid & truth.valid
    if not both.any():
        raise DataError("prediction and truth share no valid pixels")
    p = pred.labels[both] == CLOUD_SHADOW
    t = truth.labels[both] == CLOUD_SHADOW
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return Confusion(tp, fp, int(both.sum()) - tp - fp - fn, fn)


def _ratio(num, den, what):
    if den == 0:
        log.warning("%s undefined: zero denominator (numerator %d)", what, num)
        return None
    return num / den


def _f1(p, r):
    if p is None or r is None:
        return None
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def auroc(confidences, truth):
    """Probability that a random positive outranks a random negative (ties 1/2).

    ``None`` when ``truth`` holds a single class.
    """
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    y = np.asarray(truth).ravel().astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(conf)  # average ranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(confidences, truth):
    """Step-wise area under the precision-recall curve.

    Samples are ranked by descending confidence, ties broken by ascending
    index; AP is the mean of precision at the rank of each positive.
    """
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    y = np.asarray(truth).ravel().astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0:
        return None
    order = np.lexsort((np.arange(conf.size), -conf))
    hits = y[order]
    precision_at_k = np.cumsum(hits) / np.arange(1, conf.size + 1)
    return float(precision_at_k[hits].sum() / n_pos)


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int
    n: int
    accuracy: float | None
    precision_clear: float | None
    precision_cloud: float | None
    recall_clear: float | None
    recall_cloud: float | None
    f1_clear: float | None
    f1_cloud: float | None
    auroc: float | None = None
    ap: float | None = None
    n_scenes: int = 1

    @classmethod
    def from_counts(cls, c, auroc_value=None, ap_value=None):
        pc = _ratio(c.tp, c.tp + c.fp, "cloud precision")
        rc = _ratio(c.tp, c.tp + c.fn, "cloud recall")
        pn = _ratio(c.tn, c.tn + c.fn, "clear precision")
        rn = _ratio(c.tn, c.tn + c.fp, "clear recall")
        return cls(c.tp, c.fp, c.tn, c.fn, c.n, _ratio(c.tp + c.tn, c.n, "accuracy"),
                   pn, pc, rn, rc, _f1(pn, rn), _f1(pc, rc), auroc_value, ap_value)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def evaluate(pred, truth):
    """Full report; AUROC and AP need a confidence plane on ``pred``."""
    counts = confusion(pred, truth)
    auc = ap = None
    if pred.confidence is not None:
        both = pred.valid & truth.valid
        conf = pred.confidence[both]
        y = truth.labels[both] == CLOUD_SHADOW
        auc = auroc(conf, y)
        ap = average_precision(conf, y)
    return MetricsReport.from_counts(counts, auc, ap)


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def aggregate(reports, mode="macro"):
    """Combine per-scene reports.

    ``macro`` averages every rate across reports (absent values skipped);
    ``micro`` recomputes rates from pooled counts, averaging AUROC and AP.
    """
    reports = list(reports)
    if not reports:
        raise ContractViolation("aggregate needs at least one report")
    counts = Confusion(*(sum(getattr(r, k) for r in reports) for k in ("tp", "fp", "tn", "fn")))
    n_scenes = sum(r.n_scenes for r in reports)
    auc = _mean(r.auroc for r in reports)
    ap = _mean(r.ap for r in reports)
    if mode == "micro":
        base = MetricsReport.from_counts(counts, auc, ap)
        return MetricsReport(**{**base.to_dict(), "n_scenes": n_scenes})
    if mode != "macro":
        raise ContractViolation(f"unknown aggregation mode {mode!r}")
    rates = {k: _mean(getattr(r, k) for r in reports) for k in RATE_FIELDS}
    return MetricsReport(counts.tp, counts.fp, counts.tn, counts.fn, counts.n, n_scenes=n_scenes, **rates)


def format_table(rows):
    """Plain-text table of ``(name, report)`` rows in percent, '-' when absent."""
    def cell(v):
        return "-" if v is None else f"{100 * v:.2f}%"

    body = [[name] + [cell(getattr(r, k)) for k in RATE_FIELDS] for name, r in rows]
    header = [""] + list(TABLE_HEADERS)
    widths = [max(len(row[i]) for row in body + [header]) for i in range(len(header))]
    line = lambda row: " | ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths)))
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([line(header), sep] + [line(row) for row in body]) + "\n"
