"""Per-image segmentation quality metrics and dispersion summaries.

Foreground (blade) is the positive class. Ratios with a zero denominator are
reported as ``None`` (``NA`` in CSV output) and excluded from aggregates,
with the exclusion count carried alongside; silently substituting 0 or 1
would skew per-step comparisons.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .raster import BinaryMask

__all__ = [
    "METRIC_NAMES",
    "ConfusionCounts",
    "MetricsRecord",
    "DispersionSummary",
    "confusion",
    "compute_metrics",
    "summarize",
    "records_to_csv",
    "CSV_HEADER",
]

METRIC_NAMES = ("accuracy", "recall", "precision", "f1", "miou")

CSV_HEADER = "blade_id,image_id,step,accuracy,recall,precision,f1,miou"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricsRecord:
    """One (image, pipeline step) metrics row; None marks undefined values."""

    blade_id: str
    image_id: str
    step: str
    accuracy: float | None
    recall: float | None
    precision: float | None
    f1: float | None
    miou: float | None

    def metric(self, name: str) -> float | None:
        if name not in METRIC_NAMES:
            raise KeyError(name)
        return getattr(self, name)

    @classmethod
    def from_confusion(
        cls, blade_id: str, image_id: str, step: str, counts: ConfusionCounts
    ) -> "MetricsRecord":
        return cls(blade_id, image_id, step, **compute_metrics(counts))


@dataclass(frozen=True)
class DispersionSummary:
    """Box-plot statistics for one (step, metric) over the defined values."""

    step: str
    metric: str
    count: int
    excluded: int
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float
    mean: float


def confusion(pred: BinaryMask, gt: BinaryMask) -> ConfusionCounts:
    """Pixel confusion counts of a predicted mask against ground truth."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    p = pred.values
    g = gt.values
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = p.size - tp - fp - fn
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def _ratio(num: int, den: int) -> float | None:
    return num / den if den > 0 else None


def compute_metrics(c: ConfusionCounts) -> dict[str, float | None]:
    """Accuracy, recall, precision, F1 and two-class mean IoU from counts.

    mIoU averages the foreground IoU ``tp/(tp+fp+fn)`` and the background IoU
    ``tn/(tn+fp+fn)``; it is undefined when either union is empty.
    """
    if c.total <= 0:
        raise ValueError("confusion counts are empty")
    accuracy = (c.tp + c.tn) / c.total
    recall = _ratio(c.tp, c.tp + c.fn)
    precision = _ratio(c.tp, c.tp + c.fp)
    if precision is None or recall is None or precision + recall == 0:
        f1 = None
    else:
        f1 = 2 * precision * recall / (precision + recall)
    iou_fg = _ratio(c.tp, c.tp + c.fp + c.fn)
    iou_bg = _ratio(c.tn, c.tn + c.fp + c.fn)
    miou = None if iou_fg is None or iou_bg is None else 0.5 * (iou_fg + iou_bg)
    return {
        "accuracy": accuracy,
        "recall": recall,
        "precision": precision,
        "f1": f1,
        "miou": miou,
    }


def _median(sorted_values: Sequence[float]) -> float:
    n = len(sorted_values)
    mid = n // 2
    if n % 2 == 1:
        return sorted_values[mid]
    return 0.5 * (sorted_values[mid - 1] + sorted_values[mid])


def summarize(
    records: Iterable[MetricsRecord],
    step: str,
    metrics: Sequence[str] = METRIC_NAMES,
) -> list[DispersionSummary]:
    """Dispersion statistics per metric over the records of one step.

    Quartiles use the median-of-halves rule: the overall median splits the
    sorted values into halves (excluding the median itself for odd counts)
    and q1/q3 are the medians of those halves. Undefined values are excluded
    and counted; a metric with no defined value at all is an error.
    """
    step_records = [r for r in records if r.step == step]
    out = []
    for name in metrics:
        values = sorted(
            v for v in (r.metric(name) for r in step_records) if v is not None
        )
        excluded = len(step_records) - len(values)
        if not values:
            raise ValueError(f"no defined {name!r} values for step {step!r}")
        n = len(values)
        if n == 1:
            q1 = median = q3 = values[0]
        else:
            median = _median(values)
            q1 = _median(values[: n // 2])
            q3 = _median(values[(n + 1) // 2 :])
        out.append(
            DispersionSummary(
                step=step,
                metric=name,
                count=n,
                excluded=excluded,
                minimum=values[0],
                q1=q1,
                median=median,
                q3=q3,
                maximum=values[-1],
                mean=sum(values) / n,
            )
        )
    return out


def _fmt(v: float | None) -> str:
    return "NA" if v is None else repr(v)


def records_to_csv(
    records: Sequence[MetricsRecord], *, summary_steps: Sequence[str] = ()
) -> str:
    """Render records as CSV under the fixed header, ``NA`` for undefined.

    For each step in ``summary_steps`` a block of dispersion rows is
    appended, reusing the same columns: ``blade_id`` is ``SUMMARY``,
    ``image_id`` names the statistic, and each metric column carries that
    statistic's value for the metric (``NA`` when the metric had no defined
    values).
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER.split(","))
    for r in records:
        writer.writerow(
            [r.blade_id, r.image_id, r.step]
            + [_fmt(r.metric(name)) for name in METRIC_NAMES]
        )
    for step in summary_steps:
        by_metric: dict[str, DispersionSummary | None] = {}
        for name in METRIC_NAMES:
            try:
                by_metric[name] = summarize(records, step, [name])[0]
            except ValueError:
                by_metric[name] = None
        stats = (
            ("min", "minimum"),
            ("q1", "q1"),
            ("median", "median"),
            ("q3", "q3"),
            ("max", "maximum"),
            ("mean", "mean"),
            ("excluded", "excluded"),
        )
        for label, attr in stats:
            row = ["SUMMARY", label, step]
            for name in METRIC_NAMES:
                s = by_metric[name]
                if s is None:
                    row.append("NA")
                elif attr == "excluded":
                    row.append(str(s.excluded))
                else:
                    row.append(repr(getattr(s, attr)))
            writer.writerow(row)
    return buf.getvalue()
