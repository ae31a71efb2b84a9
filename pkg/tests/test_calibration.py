import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import minimize_scalar

from superapp_privacy.calibration import (
    Calibrator,
    MatrixCalibrator,
    NonFiniteLogitsError,
    TemperatureCalibrator,
    VectorCalibrator,
    ece,
    fit_logits,
    fit_temperature,
    golden_section,
    nll,
    softmax,
)

# logits on a 0.01 grid: distinct values stay distinguishable after exp in float64
logit_rows = arrays(np.int64, st.tuples(st.integers(1, 20), st.integers(2, 5)),
                    elements=st.integers(-3000, 3000)).map(lambda a: a / 100.0)


def calibrated_logits(n, k, scale, seed):
    """Base logits whose softmax is the true label distribution, then scaled."""
    rng = np.random.default_rng(seed)
    base = rng.normal(0.0, 1.5, size=(n, k))
    p = softmax(base)
    labels = (rng.random(n)[:, None] > p.cumsum(axis=1)).sum(axis=1)
    return base * scale, labels


class TestApply:
    def test_plain_softmax(self):
        probs, conf = TemperatureCalibrator(1.0).apply([2.0, 0.0])
        assert np.allclose(probs, [0.8808, 0.1192], atol=1e-4)
        assert conf == pytest.approx(0.8808, abs=1e-4)

    def test_temperature_two(self):
        probs, _ = TemperatureCalibrator(2.0).apply([2.0, 0.0])
        assert np.allclose(probs, [0.7311, 0.2689], atol=1e-4)

    def test_huge_temperature_is_uniform(self):
        _, conf = TemperatureCalibrator(1e6).apply([5.0, -3.0, 0.5, 9.0])
        assert abs(conf - 0.25) < 1e-3

    def test_rejects_bad_temperature(self):
        for t in (0.0, -1.0, float("nan"), float("inf")):
            with pytest.raises(ValueError):
                TemperatureCalibrator(t)

    @pytest.mark.parametrize("bad", [float("nan"), float("inf"), -float("inf")])
    def test_non_finite_logits(self, bad):
        with pytest.raises(NonFiniteLogitsError):
            TemperatureCalibrator(1.0).apply([0.0, bad])

    def test_log_space_stability(self):
        probs, conf = TemperatureCalibrator(0.05).apply([1000.0, -1000.0, 0.0])
        assert np.isfinite(probs).all() and conf == 1.0

    def test_vector_identity_matches_temperature_one(self):
        z = np.random.default_rng(0).normal(size=(50, 4)) * 5
        a, _ = VectorCalibrator(np.ones(4), np.zeros(4)).apply(z)
        b, _ = TemperatureCalibrator(1.0).apply(z)
        assert np.array_equal(a, b)

    def test_matrix_identity(self):
        z = np.random.default_rng(1).normal(size=(20, 3))
        a, _ = MatrixCalibrator(np.eye(3), np.zeros(3)).apply(z)
        assert np.allclose(a, softmax(z), atol=1e-15)

    def test_round_trip(self):
        for cal in (TemperatureCalibrator(1.7, fit_log=[1.0, 0.5]),
                    VectorCalibrator(np.array([1.0, 2.0]), np.array([0.1, -0.1])),
                    MatrixCalibrator(np.eye(2) * 1.5, np.array([0.0, 0.2]))):
            back = Calibrator.from_dict(cal.to_dict())
            z = np.array([[0.3, -1.2], [2.0, 1.0]])
            assert np.array_equal(back.apply(z)[0], cal.apply(z)[0])
            assert back.fit_log == cal.fit_log


class TestProperties:
    @settings(max_examples=60, deadline=None)
    @given(logit_rows)
    def test_probabilities_sum_to_one(self, z):
        for cal in (TemperatureCalibrator(0.3), VectorCalibrator(np.linspace(0.5, 2, z.shape[1]), np.zeros(z.shape[1]))):
            probs, _ = cal.apply(z)
            assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(logit_rows, st.floats(0.01, 100))
    def test_argmax_preserved(self, z, t):
        probs, _ = TemperatureCalibrator(t).apply(z)
        assert np.array_equal(probs.argmax(axis=1), z.argmax(axis=1))

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, 4, elements=st.floats(-5, 5, allow_nan=False)),
           st.floats(0.5, 10), st.floats(1.01, 3))
    def test_confidence_falls_with_temperature(self, z, t, factor):
        if np.ptp(z) < 1e-3:
            return
        _, lo = TemperatureCalibrator(t * factor).apply(z)
        _, hi = TemperatureCalibrator(t).apply(z)
        assert lo < hi

    @pytest.mark.parametrize("variant", ["temperature", "vector", "matrix"])
    @pytest.mark.parametrize("seed", range(3))
    def test_fit_never_worse_than_identity(self, variant, seed):
        z, y = calibrated_logits(400, 4, 2.5, seed)
        z = z + np.array([0.5, 0.0, -0.5, 0.0])
        cal = fit_logits(variant, z, y)
        assert nll(cal.transform(z), y) <= nll(z, y) + 1e-12
        assert cal.fit_log


class TestFit:
    def test_calibrated_logits_give_unit_temperature(self):
        z, y = calibrated_logits(20000, 4, 1.0, seed=7)
        assert 0.9 <= fit_temperature(z, y).t <= 1.1

    def test_recovers_scaling(self):
        z, y = calibrated_logits(20000, 4, 3.0, seed=8)
        assert 2.7 <= fit_temperature(z, y).t <= 3.3

    def test_golden_section_matches_scipy(self):
        z, y = calibrated_logits(3000, 3, 2.0, seed=9)
        ours = fit_temperature(z, y).t
        ref = minimize_scalar(lambda lt: nll(z / np.exp(lt), y), bounds=(np.log(0.05), np.log(20)),
                              method="bounded", options={"xatol": 1e-8}).x
        assert ours == pytest.approx(np.exp(ref), rel=1e-3)

    def test_golden_section_quadratic(self):
        x, trail = golden_section(lambda v: (v - 0.3) ** 2, -2, 2, tol=1e-8)
        assert x == pytest.approx(0.3, abs=1e-6)
        assert all(b <= a for a, b in zip(trail, trail[1:]))

    def test_temperature_clipped_to_interval(self):
        z, y = calibrated_logits(500, 2, 1.0, seed=3)
        assert 0.05 <= fit_temperature(z * 1e4, y).t <= 20

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            fit_logits("temperature", np.zeros((0, 2)), np.zeros(0, dtype=int))

    def test_rejects_unknown_variant(self):
        with pytest.raises(ValueError):
            fit_logits("isotonic", np.zeros((3, 2)), np.zeros(3, dtype=int))

    def test_overconfident_ece_improves(self):
        z, y = calibrated_logits(4000, 3, 4.0, seed=4)
        cal = fit_temperature(z[:2000], y[:2000])
        before = ece(softmax(z[2000:]), y[2000:])
        after = ece(cal.apply(z[2000:])[0], y[2000:])
        assert after <= before


class TestEce:
    def test_perfect(self):
        assert ece(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 1])) == 0.0

    def test_half_right_at_full_confidence(self):
        assert ece(np.array([[1.0, 0.0], [1.0, 0.0]]), np.array([0, 1])) == pytest.approx(0.5)

    def test_single(self):
        assert ece(np.array([[0.7, 0.3]]), np.array([0])) == pytest.approx(0.3)

    def test_bins_validated(self):
        with pytest.raises(ValueError):
            ece(np.array([[0.7, 0.3]]), np.array([0]), bins=0)

    @settings(max_examples=50, deadline=None)
    @given(logit_rows, st.integers(1, 15), st.data())
    def test_bounded_and_matches_direct_sum(self, z, bins, data):
        probs = softmax(z)
        y = np.array(data.draw(st.lists(st.integers(0, z.shape[1] - 1), min_size=len(z), max_size=len(z))))
        got = ece(probs, y, bins)
        assert 0.0 <= got <= 1.0
        conf, correct = probs.max(axis=1), probs.argmax(axis=1) == y
        # the edge convention is covered by the evaluation tests; keep clear of it here
        assume(np.abs(conf * bins - np.round(conf * bins)).min() > 1e-6 or (conf == 1.0).all())
        total = 0.0
        for b in range(bins):
            lo, hi = b / bins, (b + 1) / bins
            sel = (conf >= lo) & ((conf < hi) | (b == bins - 1))
            if sel.any():
                total += sel.mean() * abs(correct[sel].mean() - conf[sel].mean())
        assert got == pytest.approx(total, abs=1e-12)
