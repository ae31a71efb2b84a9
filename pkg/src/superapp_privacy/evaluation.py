"""Evaluation protocol: confidence bins, high-confidence subset metrics, correlation,
significance against a majority-class baseline, and report emission."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats
from sklearn.metrics import precision_recall_fscore_support

from .simulator import InsufficientCountError

NUM_BINS = 10
ABLATION_THRESHOLDS = (0.7, 0.8, 0.9)
ABLATION_INPUTS = ("fused", "mini_h", "op_h")
ABLATION_LENGTHS = (100, 200, 400)


class EmptyInputError(ValueError):
    pass


@dataclass(frozen=True)
class Scored:
    """Per-sample confidence, predicted class and true class, as parallel arrays."""

    confidence: np.ndarray
    predicted: np.ndarray
    true: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.confidence, dtype=np.float64)
        p = np.asarray(self.predicted, dtype=np.int64)
        t = np.asarray(self.true, dtype=np.int64)
        if not (c.shape == p.shape == t.shape) or c.ndim != 1:
            raise ValueError("confidence, predicted and true must be 1-d arrays of equal length")
        object.__setattr__(self, "confidence", c)
        object.__setattr__(self, "predicted", p)
        object.__setattr__(self, "true", t)

    @classmethod
    def from_probabilities(cls, probs: np.ndarray, true) -> "Scored":
        probs = np.asarray(probs, dtype=np.float64)
        pred = probs.argmax(axis=1)
        return cls(probs[np.arange(len(probs)), pred], pred, true)

    @classmethod
    def from_records(cls, records: Sequence[tuple[float, int, int]]) -> "Scored":
        if not records:
            return cls(np.zeros(0), np.zeros(0, int), np.zeros(0, int))
        c, p, t = zip(*records)
        return cls(np.array(c), np.array(p), np.array(t))

    def __len__(self):
        return len(self.confidence)

    @property
    def correct(self) -> np.ndarray:
        return self.predicted == self.true

    def subset(self, keep: np.ndarray) -> "Scored":
        return Scored(self.confidence[keep], self.predicted[keep], self.true[keep])


@dataclass(frozen=True)
class BinRow:
    lo: float
    hi: float
    count: int
    p_int: float
    p_conf: float
    acc_int: float | None
    mean_confidence: float | None

    @property
    def defined(self) -> bool:
        return self.count > 0


def bin_index(confidence: np.ndarray, bins: int = NUM_BINS) -> np.ndarray:
    """Bin k covers [k/bins, (k+1)/bins); edges go up, and 1.0 lands in the top bin.

    Rounding the scaled value first keeps decimal edges such as 0.7 (0.7 * 10 = 6.999...)
    in the upper bin.
    """
    scaled = np.round(np.asarray(confidence, dtype=np.float64) * bins, 9)
    return np.minimum(np.floor(scaled).astype(np.int64), bins - 1)


def bin_analysis(scored: Scored, bins: int = NUM_BINS) -> list[BinRow]:
    n = len(scored)
    if n == 0:
        raise EmptyInputError("bin analysis needs at least one decision")
    c = scored.confidence
    if (c <= 0).any() or (c > 1).any():
        raise ValueError("confidences must lie in (0, 1]")
    idx = bin_index(c, bins)
    correct = scored.correct
    rows = []
    for k in range(bins):
        sel = idx == k
        m = int(sel.sum())
        hits = int(correct[sel].sum())
        rows.append(
            BinRow(
                lo=k / bins,
                hi=(k + 1) / bins,
                count=m,
                p_int=m / n,
                p_conf=hits / n,
                acc_int=hits / m if m else None,
                mean_confidence=float(c[sel].mean()) if m else None,
            )
        )
    return rows


@dataclass(frozen=True)
class SubsetMetrics:
    phc: float
    size: int
    accuracy: float | None
    precision: float | None
    recall: float | None
    f1: float | None

    @property
    def defined(self) -> bool:
        return self.size > 0


def subset_metrics(scored: Scored, t_d: float) -> SubsetMetrics:
    """Metrics on the samples with confidence >= t_d, macro-averaged over the classes
    that occur in that subset (as truth or prediction)."""
    if len(scored) == 0:
        raise EmptyInputError("subset metrics need at least one decision")
    keep = scored.confidence >= t_d
    phc = float(keep.mean())
    sub = scored.subset(keep)
    if len(sub) == 0:
        return SubsetMetrics(phc, 0, None, None, None, None)
    p, r, f, _ = precision_recall_fscore_support(sub.true, sub.predicted, average="macro", zero_division=0)
    return SubsetMetrics(phc, len(sub), float(sub.correct.mean()), float(p), float(r), float(f))


def confidence_accuracy_correlation(rows: Sequence[BinRow]) -> float | None:
    """Pearson r of bin mean confidence vs bin accuracy; None when undefined."""
    used = [r for r in rows if r.defined]
    if len(used) < 2:
        return None
    x = np.array([r.mean_confidence for r in used])
    y = np.array([r.acc_int for r in used])
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    return float(stats.pearsonr(x, y).statistic)


def chi_square_vs_random(scored: Scored, baseline) -> tuple[float, float]:
    """Goodness of fit of (correct, wrong) counts against the baseline accuracy.

    ``baseline`` is either an accuracy or a prior vector, in which case the
    majority-class accuracy max(prior) is used.
    """
    n = len(scored)
    if n == 0:
        raise EmptyInputError("chi-square needs at least one decision")
    b = float(np.max(baseline)) if np.ndim(baseline) else float(baseline)
    expected = np.array([n * b, n * (1 - b)])
    if (expected < 5).any():
        raise InsufficientCountError(f"expected counts {expected.tolist()} below 5; chi-square not applicable")
    hits = int(scored.correct.sum())
    res = stats.chisquare([hits, n - hits], expected)
    return float(res.statistic), float(res.pvalue)


@dataclass
class AttributeReport:
    attribute: str
    num_samples: int
    overall_accuracy: float
    bins: list[BinRow]
    threshold: float
    subset: SubsetMetrics
    pearson_r: float | None
    baseline_accuracy: float
    chi_square_vs_baseline: tuple[float, float] | None
    extra: dict = field(default_factory=dict)

    @property
    def phc(self) -> float:
        return self.subset.phc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["chi_square_vs_baseline"] = None if self.chi_square_vs_baseline is None else list(self.chi_square_vs_baseline)
        return _flag_undefined(d)


def _flag_undefined(obj):
    if isinstance(obj, dict):
        return {k: _flag_undefined(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_flag_undefined(v) for v in obj]
    if obj is None:
        return "undefined"
    if isinstance(obj, float) and not math.isfinite(obj):
        return "undefined"
    return obj


def evaluate_attribute(attribute: str, scored: Scored, prior, threshold: float) -> AttributeReport:
    rows = bin_analysis(scored)
    baseline = float(np.max(prior))
    try:
        chi = chi_square_vs_random(scored, baseline)
    except InsufficientCountError:
        chi = None
    return AttributeReport(
        attribute=attribute,
        num_samples=len(scored),
        overall_accuracy=float(scored.correct.mean()),
        bins=rows,
        threshold=threshold,
        subset=subset_metrics(scored, threshold),
        pearson_r=confidence_accuracy_correlation(rows),
        baseline_accuracy=baseline,
        chi_square_vs_baseline=chi,
    )


@dataclass
class EvaluationReport:
    config_hash: str
    seed: int
    attributes: dict[str, AttributeReport]

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "attributes": {k: self.attributes[k].to_dict() for k in sorted(self.attributes)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def mean_pearson(self) -> float | None:
        rs = [a.pearson_r for a in self.attributes.values() if a.pearson_r is not None]
        return float(np.mean(rs)) if rs else None


def bins_csv(report: EvaluationReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config_hash", "attribute", "lo", "hi", "count", "p_int", "p_conf", "acc_int", "mean_confidence"])
    for name in sorted(report.attributes):
        for r in report.attributes[name].bins:
            w.writerow([
                report.config_hash, name, f"{r.lo:.1f}", f"{r.hi:.1f}", r.count, repr(r.p_int), repr(r.p_conf),
                "undefined" if r.acc_int is None else repr(r.acc_int),
                "undefined" if r.mean_confidence is None else repr(r.mean_confidence),
            ])
    return buf.getvalue()


def plot_description(report: EvaluationReport) -> dict:
    """Per-attribute bar (P_int, P_conf) and line (acc_int) series over the confidence bins."""
    panels = []
    for name in sorted(report.attributes):
        a = report.attributes[name]
        panels.append({
            "attribute": name,
            "x": [f"{r.lo:.1f}-{r.hi:.1f}" for r in a.bins],
            "bars": {"P_int": [r.p_int for r in a.bins], "P_conf": [r.p_conf for r in a.bins]},
            "line": {"acc_int": [r.acc_int for r in a.bins]},
            "threshold": a.threshold,
            "pearson_r": a.pearson_r,
        })
    return _flag_undefined({"config_hash": report.config_hash, "kind": "bar+line", "panels": panels})


@dataclass
class AblationCell:
    axis: str
    value: float | int | str
    reports: dict[str, AttributeReport] | None
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.reports is None

    def mean_accuracy(self) -> float:
        return float(np.mean([r.overall_accuracy for r in self.reports.values()]))

    def mean_subset_accuracy(self) -> float | None:
        vals = [r.subset.accuracy for r in self.reports.values() if r.subset.accuracy is not None]
        return float(np.mean(vals)) if vals else None

    def mean_coverage(self) -> float:
        return float(np.mean([r.phc for r in self.reports.values()]))

    def headline(self) -> float | None:
        """Subset accuracy for threshold cells, overall accuracy otherwise."""
        if self.failed:
            return None
        return self.mean_subset_accuracy() if self.axis == "threshold" else self.mean_accuracy()

    def to_dict(self) -> dict:
        d = {"axis": self.axis, "value": self.value, "error": self.error, "headline": self.headline()}
        if not self.failed:
            d["coverage"] = self.mean_coverage()
            d["reports"] = {k: self.reports[k].to_dict() for k in sorted(self.reports)}
        return _flag_undefined(d)


@dataclass
class AblationGrid:
    config_hash: str
    seed: int
    cells: list[AblationCell]

    def axis(self, name: str) -> dict:
        return {c.value: c for c in self.cells if c.axis == name}

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "seed": self.seed, "cells": [c.to_dict() for c in self.cells]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["config_hash", "axis", "value", "status", "headline", "coverage"])
        for c in self.cells:
            w.writerow([
                self.config_hash, c.axis, c.value, "failed" if c.failed else "ok",
                "undefined" if c.headline() is None else repr(c.headline()),
                "undefined" if c.failed else repr(c.mean_coverage()),
            ])
        return buf.getvalue()


def run_ablations(config, axes: Sequence[str] = ("threshold", "input", "length"), attributes=None) -> AblationGrid:
    """Threshold, input-modality and sequence-length grids, one factor at a time
    around the base config. A cell whose training fails is marked failed."""
    from . import pipeline

    return pipeline.run_ablation_grid(config, axes, attributes)


def threshold_cells(scored_by_attr: Mapping[str, Scored], priors: Mapping[str, np.ndarray],
                    thresholds=ABLATION_THRESHOLDS) -> list[AblationCell]:
    """Threshold cells share one trained and calibrated model per attribute."""
    return [
        AblationCell("threshold", t, {a: evaluate_attribute(a, s, priors[a], t) for a, s in scored_by_attr.items()})
        for t in thresholds
    ]
