"""Confusion matrices, mIoU / mAcc, and the per-run report tables.

Classes that appear neither in the ground truth nor in the prediction are
excluded from mIoU; mAcc averages over classes present in the ground truth.
Report CSVs express scores in percent with one decimal.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import DataError, DimensionError, UsageError

log = logging.getLogger(__name__)


class ConfusionMatrix:
    """K x K pixel tally; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred, gt) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        k = self.num_classes
        for name, arr in (("prediction", pred), ("ground truth", gt)):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                raise DataError(f"{name} contains class ids outside [0, {k})")
        idx = gt.astype(np.int64).ravel() * k + pred.astype(np.int64).ravel()
        self.counts += np.bincount(idx, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise DimensionError("cannot merge matrices with different class counts")
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def _require_counts(self) -> None:
        if self.total == 0:
            raise UsageError("confusion matrix is empty")

    def per_class_iou(self) -> np.ndarray:
        """IoU per class; NaN for classes absent from both gt and prediction."""
        self._require_counts()
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(0) + self.counts.sum(1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / union, np.nan)

    def per_class_acc(self) -> np.ndarray:
        self._require_counts()
        tp = np.diag(self.counts).astype(np.float64)
        gt = self.counts.sum(1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(gt > 0, tp / gt, np.nan)

    def miou(self) -> float:
        return float(np.nanmean(self.per_class_iou()))

    def macc(self) -> float:
        return float(np.nanmean(self.per_class_acc()))


def update(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    return cm.update(pred, gt)


def miou(cm: ConfusionMatrix) -> float:
    return cm.miou()


def macc(cm: ConfusionMatrix) -> float:
    return cm.macc()


@dataclass
class RunReport:
    """Per-(round, domain) confusion matrices of one continual run."""

    num_classes: int
    domains: list[str] = field(default_factory=list)
    rounds: int = 0
    cells: dict[tuple[int, str], ConfusionMatrix] = field(default_factory=dict)
    samples: int = 0
    losses: list[tuple[float, float, float]] = field(default_factory=list)
    label: str = ""

    def cell(self, rnd: int, domain: str) -> ConfusionMatrix:
        key = (rnd, domain)
        if key not in self.cells:
            self.cells[key] = ConfusionMatrix(self.num_classes)
            if domain not in self.domains:
                self.domains.append(domain)
            self.rounds = max(self.rounds, rnd)
        return self.cells[key]

    def cell_scores(self) -> list[tuple[int, str, float, float]]:
        return [(r, d, cm.miou(), cm.macc()) for (r, d), cm in self.cells.items()]

    def mean_miou(self) -> float:
        return float(np.mean([cm.miou() for cm in self.cells.values()]))

    def mean_macc(self) -> float:
        return float(np.mean([cm.macc() for cm in self.cells.values()]))

    def domain_miou(self, domain: str, rnd: int) -> float:
        return self.cells[(rnd, domain)].miou()


@dataclass
class ReportTable:
    cells: list[tuple[int, str, float, float]]
    aggregates: list[tuple[str, str]]

    def cells_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "domain", "miou", "macc"])
        for r, d, m, a in self.cells:
            w.writerow([r, d, pct(m), pct(a)])
        return buf.getvalue()

    def aggregates_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerows(self.aggregates)
        return buf.getvalue()


def pct(x: float, digits: int = 1) -> str:
    return f"{100.0 * x:.{digits}f}"


def report(run: RunReport, baseline: RunReport | None = None) -> ReportTable:
    """Cell rows plus aggregate rows ``mean_miou, mean_macc, gain_over_source, samples``.

    Without a baseline the gain row is replaced by a warning row.
    """
    agg = [("mean_miou", pct(run.mean_miou())), ("mean_macc", pct(run.mean_macc()))]
    if baseline is None:
        log.warning("no source baseline supplied; gain omitted")
        agg.append(("warning", "no source baseline; gain omitted"))
    else:
        agg.append(("gain_over_source", pct(run.mean_miou() - baseline.mean_miou())))
    agg.append(("samples", str(run.samples)))
    return ReportTable(run.cell_scores(), agg)


def merge_all(mats: Iterable[ConfusionMatrix]) -> ConfusionMatrix:
    mats = list(mats)
    if not mats:
        raise UsageError("nothing to merge")
    out = mats[0]
    for m in mats[1:]:
        out = out.merge(m)
    return out
