"""Threshold-gated selective prediction: emit a label only when calibrated confidence reaches t_d."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .calibration import Calibrator
from .domain import AttributeLabel, InteractionSample, LabeledSample
from .encoder import encode_batch, encode_sample
from .model import TrainedModel

DEFAULT_THRESHOLD = 0.9
UNKNOWN = "unknown"


@dataclass(frozen=True)
class SelectiveDecision:
    label: AttributeLabel | None
    confidence: float
    predicted: int

    @property
    def is_unknown(self) -> bool:
        return self.label is None

    @property
    def outcome(self) -> str:
        return UNKNOWN if self.label is None else self.label.name


@dataclass(frozen=True)
class CalibratedClassifier:
    model: TrainedModel
    calibrator: Calibrator
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")

    @property
    def attribute(self):
        return self.model.attribute

    def probabilities(self, encoded: np.ndarray) -> np.ndarray:
        probs, _ = self.calibrator.apply(self.model.logits(encoded))
        return probs


def select(probabilities: np.ndarray, threshold: float, kind) -> list[SelectiveDecision]:
    """Decisions for rows of calibrated probabilities.

    Argmax ties go to the lowest class index; a label is emitted when
    confidence >= threshold.
    """
    probs = np.atleast_2d(probabilities)
    pred = probs.argmax(axis=1)
    conf = probs[np.arange(len(probs)), pred]
    return [
        SelectiveDecision(AttributeLabel(kind, int(p)) if c >= threshold else None, float(c), int(p))
        for p, c in zip(pred, conf)
    ]


def decide(clf: CalibratedClassifier, sample: InteractionSample) -> SelectiveDecision:
    probs = clf.probabilities(encode_sample(sample, clf.model.encoding)[None])
    return select(probs, clf.threshold, clf.attribute)[0]


@dataclass(frozen=True)
class BatchDecisions:
    decisions: list[SelectiveDecision]
    coverage: float

    def __iter__(self) -> Iterator[SelectiveDecision]:
        return iter(self.decisions)

    def __len__(self) -> int:
        return len(self.decisions)


def summarize(decisions: list[SelectiveDecision]) -> BatchDecisions:
    coverage = sum(not d.is_unknown for d in decisions) / len(decisions) if decisions else 0.0
    return BatchDecisions(decisions, coverage)


def decide_batch(clf: CalibratedClassifier, samples: Sequence[InteractionSample | LabeledSample]) -> BatchDecisions:
    if not samples:
        return BatchDecisions([], 0.0)
    probs = clf.probabilities(encode_batch(samples, clf.model.encoding))
    return summarize(select(probs, clf.threshold, clf.attribute))


def decision_records(
    clf: CalibratedClassifier, samples: Sequence[LabeledSample], batch: BatchDecisions | None = None
) -> list[dict]:
    """Flat records (user_id, attribute, outcome, confidence, predicted, true) for export."""
    batch = batch or decide_batch(clf, samples)
    kind = clf.attribute
    return [
        {
            "user_id": s.user_id,
            "attribute": kind.value,
            "outcome": d.outcome,
            "confidence": d.confidence,
            "predicted": d.predicted,
            "true": s.label(kind),
        }
        for s, d in zip(samples, batch)
    ]
