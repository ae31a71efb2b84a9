"""Experiment drivers shared by scripts/ and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import pipeline
from .config import RunConfig
from .domain import AttributeKind
from .encoder import encode_batch
from .evaluation import AttributeReport, Scored, bin_index, chi_square_vs_random, evaluate_attribute
from .inference import CalibratedClassifier
from .simulator import BayesOracle, InsufficientCountError, default_personas
from .storage import grids_of

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BinAgreement:
    lo: float
    count: int
    model_confidence: float
    oracle_posterior: float

    @property
    def gap(self) -> float:
        return abs(self.model_confidence - self.oracle_posterior)


@dataclass
class OracleComparison:
    attribute: str
    bins: list[BinAgreement]
    report: AttributeReport
    bayes_accuracy: float
    temperature: float | None


def compare_with_oracle(clf: CalibratedClassifier, samples, oracle: BayesOracle, threshold: float,
                        prior, min_confidence: float = 0.5) -> OracleComparison:
    """Per confidence bin (lower edge >= min_confidence): the model's mean calibrated
    confidence next to the mean oracle posterior of the class the model predicted."""
    kind = clf.attribute
    probs = clf.probabilities(encode_batch(samples, clf.model.encoding))
    truth = np.array([s.label(kind) for s in samples])
    scored = Scored.from_probabilities(probs, truth)
    post = oracle.posterior(grids_of(samples), kind)
    on_pred = post[np.arange(len(post)), scored.predicted]
    idx = bin_index(scored.confidence)
    rows = []
    for k in range(10):
        sel = idx == k
        if k / 10 + 1e-12 < min_confidence or not sel.any():
            continue
        rows.append(BinAgreement(k / 10, int(sel.sum()), float(scored.confidence[sel].mean()), float(on_pred[sel].mean())))
    report = evaluate_attribute(kind.value, scored, prior, threshold)
    t = getattr(clf.calibrator, "t", None)
    return OracleComparison(kind.value, rows, report, float((post.argmax(axis=1) == truth).mean()), t)


def oracle_agreement(cfg: RunConfig, kinds: Sequence[AttributeKind] | None = None) -> dict[str, OracleComparison]:
    """Train, calibrate and score every attribute of ``cfg`` on its test split."""
    catalog = pipeline.make_catalog(cfg)
    personas = default_personas()
    split = pipeline.make_split(cfg, catalog, personas)
    oracle = BayesOracle(pipeline.population(cfg, 1), personas, catalog)
    priors = pipeline.priors(cfg)
    out = {}
    for kind in kinds or cfg.kinds:
        model = pipeline.fit_attribute(cfg, split, kind, catalog)
        clf = CalibratedClassifier(model, pipeline.calibrate(cfg, model, split.validation), cfg.threshold)
        out[kind.value] = compare_with_oracle(clf, split.test, oracle, cfg.threshold, priors[kind.value])
        log.info("%s: best epoch %s, accuracy %.3f", kind.value, model.best_epoch, out[kind.value].report.overall_accuracy)
    return out


@dataclass
class TrendPoint:
    seed: int
    subset_accuracy: dict[float, float | None]
    coverage: dict[float, float]
    input_accuracy: dict[str, float | None]
    length_accuracy: dict[int, float | None]


def ablation_trends(cfg: RunConfig, kinds: Sequence[AttributeKind] | None = None) -> TrendPoint:
    """Run the three ablation axes for one seed and pull out the headline numbers."""
    from .evaluation import run_ablations

    grid = run_ablations(cfg, attributes=kinds)
    th, inp, ln = grid.axis("threshold"), grid.axis("input"), grid.axis("length")
    return TrendPoint(
        seed=cfg.seed,
        subset_accuracy={t: c.headline() for t, c in th.items()},
        coverage={t: c.mean_coverage() for t, c in th.items() if not c.failed},
        input_accuracy={m: c.headline() for m, c in inp.items()},
        length_accuracy={n: c.headline() for n, c in ln.items()},
    )


@dataclass
class NullResult:
    attribute: str
    accuracy: float
    baseline: float
    chi_square: tuple[float, float] | None


def null_signal(cfg: RunConfig) -> list[NullResult]:
    """Train and score every attribute on a population with no planted signal."""
    cfg = replace(cfg, data=replace(cfg.data, signal_strength=0.0))
    catalog = pipeline.make_catalog(cfg)
    split = pipeline.make_split(cfg, catalog)
    priors = pipeline.priors(cfg)
    out = []
    for kind in cfg.kinds:
        model = pipeline.fit_attribute(cfg, split, kind, catalog)
        clf = CalibratedClassifier(model, pipeline.calibrate(cfg, model, split.validation), cfg.threshold)
        scored = pipeline.score(clf, split.test)
        try:
            chi = chi_square_vs_random(scored, priors[kind.value])
        except InsufficientCountError:
            chi = None
        out.append(NullResult(kind.value, float(scored.correct.mean()), float(priors[kind.value].max()), chi))
    return out


@dataclass
class FidelityResult:
    chi_square: dict[str, tuple[float, float]]
    female_shopping: float
    worst_relative_gap: float
    worst_cell: tuple[str, int, str]


def generator_fidelity(num_users: int = 10_000, seed: int = 0, min_mean: float = 1.0) -> FidelityResult:
    """Marginal self-test plus Monte-Carlo recovery of the generative category means.

    Means below ``min_mean`` are skipped: a relative tolerance is meaningless near zero.
    """
    from .domain import ALL_KINDS, build_catalog, category_code, category_name
    from .simulator import PopulationSpec, chi_square_marginals, expected_category_means, generate_population

    catalog = build_catalog(1000, 300, seed)
    personas = default_personas()
    pop = PopulationSpec(num_users=num_users, samples_per_user=1, seed=seed)
    samples = generate_population(pop, personas, catalog)
    grids = grids_of(samples)
    # per-sample totals per category (codes 1..28); padding rows have category 0
    totals = np.stack([(grids[:, :, 2] * (grids[:, :, 1] == c)).sum(axis=1) for c in range(1, 29)], axis=1)
    chi = {k.value: v for k, v in chi_square_marginals(samples, pop).items()}
    worst, cell = 0.0, ("", 0, "")
    for kind in ALL_KINDS:
        y = np.array([s.label(kind) for s in samples])
        expected = expected_category_means(pop, personas, kind)
        for c in range(kind.num_classes):
            emp = totals[y == c].mean(axis=0)
            for j in np.flatnonzero(expected[c] >= min_mean):
                gap = abs(emp[j] / expected[c, j] - 1)
                if gap > worst:
                    worst, cell = float(gap), (kind.value, c, category_name(j + 1))
    female = np.array([s.label(AttributeKind.GENDER) for s in samples]) == 1
    shopping = float(totals[female, category_code("Shopping") - 1].mean())
    return FidelityResult(chi, shopping, worst, cell)


@dataclass
class CalibrationBenefit:
    seed: int
    temperature: float
    ece_before: float
    ece_after: float
    nll_before: float
    nll_after: float


def calibration_benefit(cfg: RunConfig, kind: AttributeKind) -> CalibrationBenefit:
    """Fit a temperature on validation logits; ECE is measured on the held-out test split."""
    from .calibration import ece, fit_temperature, nll, softmax
    from .domain import labels_array

    catalog = pipeline.make_catalog(cfg)
    split = pipeline.make_split(cfg, catalog)
    model = pipeline.fit_attribute(cfg, split, kind, catalog)
    zv = model.logits(encode_batch(split.validation, model.encoding))
    yv = labels_array(split.validation, kind)
    zt = model.logits(encode_batch(split.test, model.encoding))
    yt = labels_array(split.test, kind)
    cal = fit_temperature(zv, yv)
    return CalibrationBenefit(
        cfg.seed, cal.t,
        ece(softmax(zt), yt), ece(cal.apply(zt)[0], yt),
        nll(zv, yv), nll(cal.transform(zv), yv),
    )
