"""Reconstruction metrics (NMSE, pooled F-measure) and run comparison tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

LOWER_IS_BETTER = {"nmse": True, "f_measure": False}


@dataclass
class MetricReport:
    label: str
    nmse: float
    f_measure: float
    threshold_used: float
    per_frame_nmse: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def _pair(beta_true, beta_hat):
    a = np.atleast_2d(np.asarray(beta_true, dtype=float))
    b = np.atleast_2d(np.asarray(beta_hat, dtype=float))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def nmse(beta_true, beta_hat) -> float:
    """``sum ||b - b_hat||^2 / sum ||b||^2`` pooled over all frames."""
    a, b = _pair(beta_true, beta_hat)
    denom = float(np.sum(a * a))
    if denom == 0:
        raise ValueError("NMSE is undefined for an all-zero truth")
    return float(np.sum((a - b) ** 2)) / denom


def per_frame_nmse(beta_true, beta_hat) -> list:
    a, b = _pair(beta_true, beta_hat)
    out = []
    for row_a, row_b in zip(a, b):
        d = float(row_a @ row_a)
        out.append(float(np.sum((row_a - row_b) ** 2)) / d if d > 0 else math.nan)
    return out


def f_measure_from_masks(true_mask, pred_mask) -> float:
    t = np.asarray(true_mask, dtype=bool)
    p = np.asarray(pred_mask, dtype=bool)
    tp = int(np.sum(t & p))
    fp = int(np.sum(~t & p))
    fn = int(np.sum(t & ~p))
    if tp + fp + fn == 0:
        return 1.0
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def f_measure(beta_true, beta_hat, threshold: float) -> float:
    """F-measure of the support masks ``|value| > threshold``, pooled over all entries."""
    a, b = _pair(beta_true, beta_hat)
    return f_measure_from_masks(np.abs(a) > threshold, np.abs(b) > threshold)


def default_threshold(slab_var: float) -> float:
    return 0.1 * math.sqrt(slab_var)


def metric_report(label, beta_true, beta_hat, threshold, pred_mask=None) -> MetricReport:
    """Metrics for one run. ``pred_mask`` overrides magnitude thresholding of ``beta_hat``."""
    a, b = _pair(beta_true, beta_hat)
    if pred_mask is None:
        f = f_measure(a, b, threshold)
    else:
        f = f_measure_from_masks(np.abs(a) > threshold, pred_mask)
    return MetricReport(label, nmse(a, b), f, float(threshold), per_frame_nmse(a, b))


@dataclass
class ComparisonTable:
    labels: list
    metrics: list
    values: dict  # metric -> list of values aligned with labels
    best: dict  # metric -> list of winning labels (several on a tie)

    def is_tie(self, metric) -> bool:
        return len(self.best[metric]) > 1

    def to_dict(self):
        return {
            "labels": self.labels,
            "metrics": {
                m: {
                    "values": dict(zip(self.labels, self.values[m])),
                    "best": self.best[m],
                    "tie": self.is_tie(m),
                }
                for m in self.metrics
            },
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", *self.labels, "best"])
        for m in self.metrics:
            w.writerow([m, *(repr(float(v)) for v in self.values[m]), ";".join(self.best[m])])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max(12, *(len(label) + 2 for label in self.labels))
        lines = ["Measure".ljust(12) + "".join(label.rjust(width) for label in self.labels)]
        for m in self.metrics:
            cells = []
            for label, v in zip(self.labels, self.values[m]):
                mark = ("=" if self.is_tie(m) else "*") if label in self.best[m] else " "
                cells.append(f"{v:.4f}{mark}".rjust(width))
            lines.append(m.ljust(12) + "".join(cells))
        lines.append("* best per metric, = tied for best")
        return "\n".join(lines)


def compare_runs(reports) -> ComparisonTable:
    """Metric-by-run table flagging the best run per metric; ties keep every winner."""
    reports = list(reports)
    if not reports:
        raise ValueError("need at least one report")
    labels = [r.label for r in reports]
    metrics = list(LOWER_IS_BETTER)
    values, best = {}, {}
    for m in metrics:
        vals = [float(getattr(r, m)) for r in reports]
        target = min(vals) if LOWER_IS_BETTER[m] else max(vals)
        values[m] = vals
        best[m] = [label for label, v in zip(labels, vals) if v == target]
    return ComparisonTable(labels, metrics, values, best)
