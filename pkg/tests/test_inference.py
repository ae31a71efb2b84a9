from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from superapp_privacy.calibration import TemperatureCalibrator, softmax
from superapp_privacy.domain import AttributeKind
from superapp_privacy.encoder import build_encoding
from superapp_privacy.inference import (
    UNKNOWN,
    CalibratedClassifier,
    decide,
    decide_batch,
    decision_records,
    select,
    summarize,
)
from superapp_privacy.model import TrainedModel, build_network, default_architecture

G = AttributeKind.GENDER
probs_strategy = arrays(np.int64, st.tuples(st.integers(1, 30), st.integers(2, 4)), elements=st.integers(1, 1000)).map(
    lambda a: a / a.sum(axis=1, keepdims=True)
)


@pytest.fixture(scope="module")
def clf(catalog):
    arch = replace(default_architecture("transformer"), width=8, depth=1, heads=2).for_attribute(AttributeKind.AGE)
    enc = build_encoding(catalog)
    torch.manual_seed(0)
    net = build_network(arch, enc).eval()
    with torch.no_grad():
        net.head.weight.mul_(3.0)  # spread the confidences out
    return CalibratedClassifier(TrainedModel(arch, net, AttributeKind.AGE, enc), TemperatureCalibrator(1.0), 0.5)


class TestSelect:
    def test_below_threshold_is_unknown(self):
        (d,) = select(np.array([0.85, 0.15]), 0.9, G)
        assert d.is_unknown and d.outcome == UNKNOWN and d.confidence == pytest.approx(0.85)

    def test_above_threshold_labels(self):
        (d,) = select(np.array([0.05, 0.95]), 0.9, G)
        assert d.label.class_index == 1 and d.confidence == pytest.approx(0.95)
        assert d.outcome == d.label.name

    def test_uniform_binary(self):
        (d,) = select(np.array([0.5, 0.5]), 0.9, G)
        assert d.is_unknown and d.confidence == 0.5 and d.predicted == 0

    def test_boundary_emits(self):
        (d,) = select(np.array([0.9, 0.1]), 0.9, G)
        assert not d.is_unknown

    def test_tie_goes_to_lowest_index(self):
        (d,) = select(np.array([0.1, 0.45, 0.45]), 0.4, AttributeKind.LOCATION)
        assert d.label.class_index == 1

    def test_coverage_examples(self):
        p = np.array([[0.95, 0.05], [0.08, 0.92], [0.55, 0.45]])
        assert summarize(select(p, 0.9, G)).coverage == pytest.approx(2 / 3)
        assert summarize(select(p, 0.99, G)).coverage == 0.0
        assert summarize(select(p, 0.5, G)).coverage == 1.0

    def test_threshold_validated(self, clf):
        for t in (0.0, 1.0, 1.5):
            with pytest.raises(ValueError):
                replace(clf, threshold=t)


class TestProperties:
    @settings(max_examples=80, deadline=None)
    @given(probs_strategy, st.floats(0.01, 0.99), st.floats(0.01, 0.99))
    def test_coverage_non_increasing(self, p, a, b):
        lo, hi = sorted((a, b))
        A = AttributeKind.AGE
        assert summarize(select(p, hi, A)).coverage <= summarize(select(p, lo, A)).coverage

    @settings(max_examples=80, deadline=None)
    @given(probs_strategy, st.floats(0.01, 0.99))
    def test_labels_respect_threshold(self, p, t):
        for d in select(p, t, AttributeKind.AGE):
            assert d.is_unknown or d.confidence >= t

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.int64, st.tuples(st.integers(1, 20), st.just(4)), elements=st.integers(-800, 800)),
           st.floats(0.2, 5), st.floats(1.0, 4), st.floats(0.3, 0.95))
    def test_raising_temperature_only_withdraws(self, z, t, factor, td):
        z = z / 100.0
        before = select(TemperatureCalibrator(t).apply(z)[0], td, AttributeKind.AGE)
        after = select(TemperatureCalibrator(t * factor).apply(z)[0], td, AttributeKind.AGE)
        for x, y in zip(before, after):
            assert x.predicted == y.predicted
            if not y.is_unknown:
                assert not x.is_unknown and x.label == y.label


class TestClassifier:
    def test_decide_matches_batch(self, clf, population):
        _, samples = population
        conf = [d.confidence for d in decide_batch(clf, samples[:10])]
        clf = replace(clf, threshold=float(np.median(conf)))
        batch = decide_batch(clf, samples[:10])
        singles = [decide(clf, s.sample) for s in samples[:10]]
        assert [d.predicted for d in batch] == [d.predicted for d in singles]
        assert np.allclose([d.confidence for d in batch], [d.confidence for d in singles], atol=1e-6)
        assert 0 < batch.coverage < 1

    def test_pure(self, clf, population):
        _, samples = population
        assert decide(clf, samples[0].sample) == decide(clf, samples[0].sample)

    def test_confidences_follow_calibrator(self, clf, population):
        _, samples = population
        from superapp_privacy.encoder import encode_batch

        logits = clf.model.logits(encode_batch(samples[:5], clf.model.encoding))
        expected = softmax(logits).max(axis=1)
        assert np.allclose([d.confidence for d in decide_batch(clf, samples[:5])], expected)

    def test_records(self, clf, population):
        _, samples = population
        recs = decision_records(clf, samples[:4])
        assert [r["user_id"] for r in recs] == [s.user_id for s in samples[:4]]
        for r, s in zip(recs, samples):
            assert r["attribute"] == "age" and r["true"] == s.label(AttributeKind.AGE)
            assert r["outcome"] == UNKNOWN or r["confidence"] >= 0.5

    def test_empty_batch(self, clf):
        assert decide_batch(clf, []).coverage == 0.0
