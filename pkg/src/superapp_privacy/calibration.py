"""Post-hoc confidence calibration: temperature, vector and matrix scaling fitted on validation NLL."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import log_softmax

from .domain import LabeledSample, labels_array
from .encoder import encode_batch

VARIANTS = ("temperature", "vector", "matrix")

T_MIN, T_MAX = 0.05, 20.0
GOLDEN_TOL = 1e-4
GD_STEPS = 500
GD_LR = 1e-2
MATRIX_OFFDIAG_L2 = 1e-3


class NonFiniteLogitsError(ValueError):
    pass


def _check_logits(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(z).all():
        raise NonFiniteLogitsError("logits must be finite")
    return z


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z, axis=-1))


def nll(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    logp = log_softmax(np.asarray(logits, dtype=np.float64), axis=-1)
    return float(-logp[np.arange(len(labels)), labels].mean())


@dataclass
class Calibrator:
    fit_log: list[float] = field(default_factory=list, kw_only=True)

    variant = "identity"

    def transform(self, logits: np.ndarray) -> np.ndarray:
        return logits

    def apply(self, logits) -> tuple[np.ndarray, np.ndarray | float]:
        """Calibrated probabilities and confidence (max probability).

        Accepts one logit vector (K,) or a batch (B, K).
        """
        z = _check_logits(logits)
        probs = softmax(self.transform(z))
        return probs, probs.max(axis=-1) if probs.ndim > 1 else float(probs.max())

    def to_dict(self) -> dict:
        raise NotImplementedError

    @staticmethod
    def from_dict(d: Mapping) -> "Calibrator":
        kind = d["variant"]
        log = list(d.get("fit_log", []))
        if kind == "temperature":
            return TemperatureCalibrator(float(d["t"]), fit_log=log)
        if kind == "vector":
            return VectorCalibrator(np.array(d["w"], dtype=float), np.array(d["b"], dtype=float), fit_log=log)
        if kind == "matrix":
            return MatrixCalibrator(np.array(d["W"], dtype=float), np.array(d["b"], dtype=float), fit_log=log)
        raise ValueError(f"unknown calibrator variant {kind!r}")


@dataclass
class TemperatureCalibrator(Calibrator):
    t: float = 1.0
    variant = "temperature"

    def __post_init__(self):
        if not (self.t > 0 and math.isfinite(self.t)):
            raise ValueError(f"temperature must be positive, got {self.t}")

    def transform(self, logits):
        return logits / self.t

    def to_dict(self):
        return {"variant": self.variant, "t": self.t, "fit_log": self.fit_log}


@dataclass
class VectorCalibrator(Calibrator):
    w: np.ndarray
    b: np.ndarray
    variant = "vector"

    def transform(self, logits):
        return logits * self.w + self.b

    def to_dict(self):
        return {"variant": self.variant, "w": self.w.tolist(), "b": self.b.tolist(), "fit_log": self.fit_log}


@dataclass
class MatrixCalibrator(Calibrator):
    W: np.ndarray
    b: np.ndarray
    variant = "matrix"

    def transform(self, logits):
        return logits @ self.W.T + self.b

    def to_dict(self):
        return {"variant": self.variant, "W": self.W.tolist(), "b": self.b.tolist(), "fit_log": self.fit_log}


def golden_section(f, lo: float, hi: float, tol: float = GOLDEN_TOL) -> tuple[float, list[float]]:
    """Minimise a unimodal f on [lo, hi]; returns the argmin and the f trajectory."""
    inv_phi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - inv_phi * (b - a), a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    trail = [min(fc, fd)]
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
        trail.append(min(fc, fd))
    x = (a + b) / 2
    return x, trail


def fit_temperature(logits: np.ndarray, labels: np.ndarray) -> TemperatureCalibrator:
    z = _check_logits(logits)
    u, trail = golden_section(lambda u: nll(z / math.exp(u), labels), math.log(T_MIN), math.log(T_MAX))
    return TemperatureCalibrator(math.exp(u), fit_log=trail)


def _descend(objective, grad, params: list[np.ndarray], steps: int, lr: float) -> tuple[list[np.ndarray], list[float]]:
    """Full-batch gradient descent; a step that raises the objective is retried at half size."""
    current = objective(params)
    trail = [current]
    for _ in range(steps):
        g = grad(params)
        step = lr
        for _ in range(40):
            trial = [p - step * gp for p, gp in zip(params, g)]
            value = objective(trial)
            if value <= current:
                break
            step /= 2
        else:
            break
        params, current = trial, value
        trail.append(current)
    return params, trail


def fit_vector(logits: np.ndarray, labels: np.ndarray, steps: int = GD_STEPS, lr: float = GD_LR) -> VectorCalibrator:
    z = _check_logits(logits)
    onehot = np.eye(z.shape[1])[labels]

    def objective(p):
        return nll(z * p[0] + p[1], labels)

    def grad(p):
        r = (softmax(z * p[0] + p[1]) - onehot) / len(z)
        return [(r * z).sum(axis=0), r.sum(axis=0)]

    (w, b), trail = _descend(objective, grad, [np.ones(z.shape[1]), np.zeros(z.shape[1])], steps, lr)
    return VectorCalibrator(w, b, fit_log=trail)


def fit_matrix(
    logits: np.ndarray, labels: np.ndarray, steps: int = GD_STEPS, lr: float = GD_LR, l2: float = MATRIX_OFFDIAG_L2
) -> MatrixCalibrator:
    z = _check_logits(logits)
    k = z.shape[1]
    onehot = np.eye(k)[labels]
    off = 1.0 - np.eye(k)

    def objective(p):
        return nll(z @ p[0].T + p[1], labels) + l2 * float(((p[0] * off) ** 2).sum())

    def grad(p):
        r = (softmax(z @ p[0].T + p[1]) - onehot) / len(z)
        return [r.T @ z + 2 * l2 * p[0] * off, r.sum(axis=0)]

    (W, b), trail = _descend(objective, grad, [np.eye(k), np.zeros(k)], steps, lr)
    return MatrixCalibrator(W, b, fit_log=trail)


_FITTERS = {"temperature": fit_temperature, "vector": fit_vector, "matrix": fit_matrix}


def fit_logits(variant: str, logits: np.ndarray, labels: np.ndarray) -> Calibrator:
    if variant not in _FITTERS:
        raise ValueError(f"calibrator variant must be one of {VARIANTS}, got {variant!r}")
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("calibration needs a non-empty validation set")
    return _FITTERS[variant](logits, labels)


def fit(variant: str, model, validation: Sequence[LabeledSample]) -> Calibrator:
    """Fit a calibrator on the frozen model's validation logits."""
    if not validation:
        raise ValueError("calibration needs a non-empty validation set")
    logits = model.logits(encode_batch(validation, model.encoding))
    return fit_logits(variant, logits, labels_array(validation, model.attribute))


def ece(probabilities: np.ndarray, labels: np.ndarray, bins: int = 10) -> float:
    """Expected calibration error over equal-width confidence bins (top bin closed)."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    probs = np.atleast_2d(np.asarray(probabilities, dtype=float))
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    conf = probs.max(axis=1)
    correct = probs.argmax(axis=1) == labels
    idx = np.minimum(np.floor(np.round(conf * bins, 9)).astype(np.int64), bins - 1)
    total = 0.0
    for b in range(bins):
        sel = idx == b
        if sel.any():
            total += sel.mean() * abs(correct[sel].mean() - conf[sel].mean())
    return float(total)
