"""Inverse difficulty temperature scaling.

Hard tokens (score above the batch median) get temperatures below the base,
easy tokens above it:

    s_hat = tanh(log(s / median(s)))
    tau   = tau_base * exp(-c * s_hat)

Temperatures come back as numpy arrays, so nothing downstream can
backpropagate into them.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

SCORE_FLOOR = 1e-8


class TemperatureMode(str, enum.Enum):
    INVERSE = "inverse"
    FLIPPED = "flipped"
    FIXED = "fixed"


@dataclass
class IdtsConfig:
    tau_base: float = 1.0
    c: float = 0.5
    mode: TemperatureMode = TemperatureMode.INVERSE
    median_over: str = "selected"

    def validate(self) -> None:
        if not (math.isfinite(self.tau_base) and self.tau_base > 0):
            raise ValueError(f"tau_base must be positive, got {self.tau_base}")
        if not (math.isfinite(self.c) and self.c >= 0):
            raise ValueError(f"c must be non-negative, got {self.c}")
        TemperatureMode(self.mode)
        if self.median_over not in ("selected", "valid"):
            raise ValueError(f"median_over must be 'selected' or 'valid', got {self.median_over!r}")

    @property
    def bounds(self) -> tuple[float, float]:
        if TemperatureMode(self.mode) is TemperatureMode.FIXED:
            return self.tau_base, self.tau_base
        return self.tau_base * math.exp(-self.c), self.tau_base * math.exp(self.c)


@dataclass
class TemperatureAssignment:
    temps: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        self.temps = np.asarray(self.temps, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64)
        self.temps.setflags(write=False)
        self.states.setflags(write=False)


def median(scores) -> float:
    return float(np.median(np.asarray(scores, dtype=np.float64)))


def normalize_scores(scores, reference_median: Optional[float] = None) -> np.ndarray:
    """tanh(log(s / median)); scores floored at 1e-8, all zeros if the median is below it."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise ValueError("normalize_scores needs at least one score")
    if not np.all(np.isfinite(s)) or np.any(s < 0):
        raise ValueError("scores must be finite and non-negative")
    med = median(s) if reference_median is None else float(reference_median)
    if med <= SCORE_FLOOR:
        return np.zeros_like(s)
    return np.tanh(np.log(np.maximum(s, SCORE_FLOOR) / med))


def assign_temperatures(states, config: IdtsConfig) -> TemperatureAssignment:
    config.validate()
    states = np.asarray(states, dtype=np.float64)
    mode = TemperatureMode(config.mode)
    if mode is TemperatureMode.FIXED:
        temps = np.full(states.shape, config.tau_base)
    else:
        sign = -1.0 if mode is TemperatureMode.INVERSE else 1.0
        temps = config.tau_base * np.exp(sign * config.c * states)
        lo, hi = config.bounds
        temps = np.clip(temps, lo, hi)
    return TemperatureAssignment(temps=temps, states=states)


def temperatures_for(scores, config: IdtsConfig, reference_scores=None) -> TemperatureAssignment:
    """Normalize ``scores`` (median taken over ``reference_scores`` if given) and map to temperatures."""
    ref_median = None if reference_scores is None else median(reference_scores)
    return assign_temperatures(normalize_scores(scores, ref_median), config)


def temperature_summary(assignment: TemperatureAssignment) -> dict:
    t, s = assignment.temps, assignment.states
    hard, easy = t[s > 0], t[s < 0]
    return {
        "tau_min": float(t.min()),
        "tau_median": float(np.median(t)),
        "tau_max": float(t.max()),
        "tau_hard_mean": float(hard.mean()) if hard.size else float("nan"),
        "tau_easy_mean": float(easy.mean()) if easy.size else float("nan"),
    }


class InverseDifficultyTemperature(TransformerMixin, BaseEstimator):
    """Map difficulty scores to per-token temperatures.

    ``fit`` records the median of a reference batch; ``transform`` returns the
    temperatures for any scores relative to that median.
    """

    def __init__(self, tau_base: float = 1.0, c: float = 0.5, mode: str = "inverse"):
        self.tau_base = tau_base
        self.c = c
        self.mode = mode

    def _config(self) -> IdtsConfig:
        cfg = IdtsConfig(tau_base=self.tau_base, c=self.c, mode=TemperatureMode(self.mode))
        cfg.validate()
        return cfg

    def fit(self, X, y=None):
        s = np.asarray(X, dtype=np.float64).reshape(-1)
        if s.size == 0:
            raise ValueError("need at least one score to fit")
        self._config()
        self.median_ = median(s)
        return self

    def transform(self, X):
        check_is_fitted(self, "median_")
        s = np.asarray(X, dtype=np.float64)
        states = normalize_scores(s.reshape(-1), self.median_)
        return assign_temperatures(states, self._config()).temps.reshape(s.shape)


# -- gradient scaling diagnostic ---------------------------------------------

def kl_logit_gradient(teacher_logits, student_logits, tau: float) -> np.ndarray:
    """Gradient of unscaled KL(q_tau || p_tau) with respect to the student logits."""
    zp = torch.as_tensor(np.asarray(teacher_logits, dtype=np.float64))
    zq = torch.tensor(np.asarray(student_logits, dtype=np.float64), requires_grad=True)
    log_p = torch.log_softmax(zp / tau, -1)
    log_q = torch.log_softmax(zq / tau, -1)
    kl = (log_q.exp() * (log_q - log_p)).sum()
    kl.backward()
    return zq.grad.numpy().copy()


def gradient_scaling_fit(n_pairs: int = 64, vocab: int = 32, c: float = 0.5,
                         n_taus: int = 9, logit_scale: float = 0.3,
                         seed: int = 0) -> dict:
    """Regress log||grad KL||^2 on log(s^2 / tau^4) over synthetic token pairs.

    Each pair has a fixed teacher/student discrepancy of random size; every pair
    is evaluated over a grid of temperatures spanning [e^-c, e^c]. Returns the
    least-squares slope, intercept and r^2.
    """
    from .distributions import hellinger_distance, softmax_with_temperature

    rng = np.random.default_rng(seed)
    taus = np.exp(np.linspace(-c, c, n_taus)) if c > 0 else np.ones(1)
    xs, ys = [], []
    for _ in range(n_pairs):
        zp = rng.normal(scale=logit_scale, size=vocab)
        gap = rng.uniform(0.05, 1.0)
        zq = zp + gap * rng.normal(scale=logit_scale, size=vocab)
        s = hellinger_distance(softmax_with_temperature(zp), softmax_with_temperature(zq))
        for tau in taus:
            g = kl_logit_gradient(zp, zq, tau)
            xs.append(math.log(s**2 / tau**4))
            ys.append(math.log(float(g @ g)))
    x, y = np.asarray(xs), np.asarray(ys)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    r2 = 1.0 - resid.var() / y.var()
    return {"slope": float(slope), "intercept": float(intercept), "r2": float(r2),
            "n_points": int(x.size)}
