"""Confusion counting with void exclusion, the change-detection metric set,
threshold sweeps, and two-level category aggregation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields

import numpy as np

from .data import LabelMask
from .kernels import ShapeError

METRIC_COLUMNS = ("Recall", "Specificity", "FPR", "FNR", "PWC",
                  "Precision", "F-Measure", "MCC")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError(f"negative confusion count: {self}")

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricsReport:
    recall: float
    specificity: float
    fpr: float
    fnr: float
    pwc: float
    precision: float
    f_measure: float
    mcc: float
    degenerate: tuple = ()  # names of metrics whose denominator was 0

    def as_row(self):
        """Values in the external column order."""
        return (self.recall, self.specificity, self.fpr, self.fnr,
                self.pwc, self.precision, self.f_measure, self.mcc)


def accumulate(pred, labels: LabelMask) -> ConfusionCounts:
    """Count a binary prediction against ground truth, skipping void pixels."""
    pred = np.asarray(pred)
    if pred.ndim == 3 and pred.shape[0] == 1:
        pred = pred[0]
    if pred.shape != labels.shape:
        raise ShapeError(f"accumulate: prediction {pred.shape} vs "
                         f"labels {labels.shape}")
    pred = pred.astype(bool)
    fg = labels.foreground
    bg = labels.background
    return ConfusionCounts(
        tp=int(np.count_nonzero(pred & fg)),
        fp=int(np.count_nonzero(pred & bg)),
        fn=int(np.count_nonzero(~pred & fg)),
        tn=int(np.count_nonzero(~pred & bg)),
    )


def _ratio(num, den, name, degenerate):
    if den == 0:
        degenerate.append(name)
        return 0.0
    return num / den


def compute_metrics(c: ConfusionCounts) -> MetricsReport:
    degenerate = []
    recall = _ratio(c.tp, c.tp + c.fn, "Recall", degenerate)
    specificity = _ratio(c.tn, c.tn + c.fp, "Specificity", degenerate)
    fpr = _ratio(c.fp, c.fp + c.tn, "FPR", degenerate)
    fnr = _ratio(c.fn, c.tp + c.fn, "FNR", degenerate)
    pwc = 100.0 * _ratio(c.fp + c.fn, c.total, "PWC", degenerate)
    precision = _ratio(c.tp, c.tp + c.fp, "Precision", degenerate)
    f_measure = _ratio(2.0 * precision * recall, precision + recall,
                       "F-Measure", degenerate)
    mcc_den = math.sqrt(float(c.tp + c.fp) * float(c.tp + c.fn)
                        * float(c.tn + c.fn) * float(c.tn + c.fp))
    if mcc_den == 0.0:
        degenerate.append("MCC")
        mcc = 0.0
    else:
        mcc = (float(c.tp) * c.tn - float(c.fp) * c.fn) / mcc_den
    return MetricsReport(recall, specificity, fpr, fnr, pwc, precision,
                         f_measure, mcc, tuple(degenerate))


# ------------------------------------------------------------------- sweeps

@dataclass(frozen=True)
class SweepResult:
    thresholds: tuple
    counts: tuple    # ConfusionCounts per threshold
    reports: tuple   # MetricsReport per threshold
    best_threshold: float
    best_f: float


def threshold_sweep(prob_maps, label_masks, thresholds) -> SweepResult:
    """Binarize at each threshold, pool counts over all frames, report."""
    if len(prob_maps) != len(label_masks):
        raise ValueError(f"threshold_sweep: {len(prob_maps)} probability maps "
                         f"but {len(label_masks)} label masks")
    thresholds = [float(t) for t in thresholds]
    if not thresholds:
        raise ValueError("threshold_sweep: no thresholds")
    for a, b in zip(thresholds, thresholds[1:]):
        if b <= a:
            raise ValueError(f"thresholds must be strictly increasing, "
                             f"got {a} then {b}")
    if thresholds[0] <= 0.0 or thresholds[-1] >= 1.0:
        raise ValueError(f"thresholds must lie in (0, 1), got {thresholds}")
    counts = []
    for t in thresholds:
        c = ConfusionCounts()
        for probs, labels in zip(prob_maps, label_masks):
            p = np.asarray(probs)
            if p.ndim == 3 and p.shape[0] == 1:
                p = p[0]
            c = c + accumulate(p > t, labels)
        counts.append(c)
    reports = [compute_metrics(c) for c in counts]
    best = int(np.argmax([r.f_measure for r in reports]))
    return SweepResult(tuple(thresholds), tuple(counts), tuple(reports),
                       thresholds[best], reports[best].f_measure)


# -------------------------------------------------------------- aggregation

def _mean_report(reports):
    vals = {}
    flagged = []
    for f in fields(MetricsReport):
        if f.name == "degenerate":
            continue
        vals[f.name] = sum(getattr(r, f.name) for r in reports) / len(reports)
    for r in reports:
        flagged.extend(r.degenerate)
    return MetricsReport(degenerate=tuple(dict.fromkeys(flagged)), **vals)


def aggregate(category_reports):
    """Two-level unweighted averaging: videos -> category -> overall.

    category_reports: {category: {video: MetricsReport}}.
    Returns ({category: MetricsReport}, overall MetricsReport).
    """
    if not category_reports:
        raise ValueError("aggregate: no categories")
    per_category = {}
    for cat, videos in category_reports.items():
        if not videos:
            raise ValueError(f"aggregate: category {cat!r} has no videos")
        per_category[cat] = _mean_report(list(videos.values()))
    overall = _mean_report(list(per_category.values()))
    return per_category, overall


# ----------------------------------------------------------------- emission

def emit_csv(rows, fh):
    """rows: iterable of (name, MetricsReport); fh: writable text file."""
    writer = csv.writer(fh)
    writer.writerow(("Name",) + tuple(METRIC_COLUMNS))
    for name, report in rows:
        writer.writerow((name,) + tuple(f"{v:.6f}" for v in report.as_row()))


def format_table(rows):
    """Aligned plain-text table over the same row structure as emit_csv."""
    header = ("Name",) + tuple(METRIC_COLUMNS)
    body = [(str(name),) + tuple(f"{v:.4f}" for v in report.as_row())
            for name, report in rows]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in body:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    return "\n".join(lines)
