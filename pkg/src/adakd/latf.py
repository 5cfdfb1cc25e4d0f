"""Loss-driven token focusing: EMA-loss feedback on the fraction of hardest tokens trained.

The controller follows the training procedure step for step:

* before step 1 the EMA is seeded with the untrained student's loss,
* at step t the ratio is updated from the *previous* EMA value,
* any change of ratio after warm-up moves the reference loss to that EMA,
* after the parameter update the EMA absorbs the step's loss.

Scheduled baselines (fixed, linear, cosine) share the same interface so the
trainer does not care which one it is driving.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional

import numpy as np

KEEP, DECREASE, INCREASE, WARMUP = "keep", "decrease", "increase", "warmup"


@dataclass
class LatfConfig:
    beta: float = 0.97
    epsilon: float = 0.05
    delta: float = 0.05
    warmup_steps: Optional[int] = None
    warmup_fraction: float = 0.05
    r_min: float = 0.05

    def validate(self) -> None:
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if self.epsilon <= 0 or self.delta <= 0:
            raise ValueError("epsilon and delta must be positive")
        if not 0.0 < self.r_min <= 1.0:
            raise ValueError(f"r_min must lie in (0, 1], got {self.r_min}")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")

    def resolve_warmup(self, total_steps: int) -> int:
        if self.warmup_steps is not None:
            return int(self.warmup_steps)
        return int(round(self.warmup_fraction * total_steps))


@dataclass
class FocusState:
    r: float = 1.0
    ema_loss: Optional[float] = None
    ref_loss: float = math.inf
    step: int = 0
    branch: str = WARMUP

    def snapshot(self) -> "FocusState":
        return replace(self)


class RatioController:
    """Common EMA bookkeeping; subclasses decide the ratio."""

    def __init__(self, beta: float = 0.97, warmup_steps: int = 0):
        self.beta = beta
        self.warmup_steps = int(warmup_steps)
        self.state = FocusState()

    def init_ema(self, initial_loss: float) -> None:
        initial_loss = float(initial_loss)
        if not math.isfinite(initial_loss):
            raise FloatingPointError(f"initial loss is not finite: {initial_loss}")
        self.state.ema_loss = initial_loss

    def update_ema(self, loss: float) -> float:
        loss = float(loss)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite loss {loss} at step {self.state.step}")
        if self.state.ema_loss is None:
            raise RuntimeError("EMA not seeded; call init_ema with the untrained loss first")
        self.state.ema_loss = self.beta * self.state.ema_loss + (1.0 - self.beta) * loss
        return self.state.ema_loss

    def update_ratio(self) -> float:
        raise NotImplementedError


class LatfController(RatioController):
    def __init__(self, config: LatfConfig, total_steps: int):
        config.validate()
        super().__init__(config.beta, config.resolve_warmup(total_steps))
        self.config = config
        self.total_steps = int(total_steps)

    def update_ratio(self) -> float:
        """Advance one step and return r_t; compares the previous EMA to the reference."""
        st = self.state
        st.step += 1
        if st.step <= self.warmup_steps:
            st.r, st.branch = 1.0, WARMUP
            return st.r
        cfg = self.config
        prev_r = st.r
        ema = st.ema_loss
        if ema is None:
            raise RuntimeError("EMA not seeded; call init_ema with the untrained loss first")
        if ema < st.ref_loss * (1.0 - cfg.epsilon):
            r, branch = prev_r * (1.0 - cfg.delta), DECREASE
        elif ema > st.ref_loss * (1.0 + cfg.epsilon):
            r, branch = min(1.0, prev_r * (1.0 + cfg.delta)), INCREASE
        else:
            r, branch = prev_r, KEEP
        r = min(1.0, max(cfg.r_min, r))
        if r != prev_r:
            st.ref_loss = ema
        else:
            branch = KEEP
        st.r, st.branch = r, branch
        return r


class FixedRatio(RatioController):
    def __init__(self, ratio: float = 1.0, beta: float = 0.97):
        super().__init__(beta)
        if not 0.0 < ratio <= 1.0:
            raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
        self.ratio = float(ratio)

    def update_ratio(self) -> float:
        self.state.step += 1
        self.state.r, self.state.branch = self.ratio, KEEP
        return self.ratio


class ScheduledRatio(RatioController):
    """r goes from ``start`` to ``end`` over the run, linearly or along a half cosine."""

    def __init__(self, total_steps: int, start: float = 1.0, end: float = 0.75,
                 shape: str = "linear", beta: float = 0.97):
        super().__init__(beta)
        if shape not in ("linear", "cosine"):
            raise ValueError(f"unknown schedule shape {shape!r}")
        if not (0.0 < end <= 1.0 and 0.0 < start <= 1.0):
            raise ValueError("schedule endpoints must lie in (0, 1]")
        self.total_steps = max(int(total_steps), 1)
        self.start, self.end, self.shape = float(start), float(end), shape

    def update_ratio(self) -> float:
        st = self.state
        st.step += 1
        frac = min(max((st.step - 1) / max(self.total_steps - 1, 1), 0.0), 1.0)
        if self.shape == "cosine":
            frac = 0.5 * (1.0 - math.cos(math.pi * frac))
        st.r = self.start + (self.end - self.start) * frac
        st.branch = KEEP
        return st.r


def make_controller(kind: str, total_steps: int, latf: Optional[LatfConfig] = None,
                    ratio: float = 1.0, ratio_end: float = 0.75) -> RatioController:
    latf = latf or LatfConfig()
    if kind == "latf":
        return LatfController(latf, total_steps)
    if kind == "fixed":
        return FixedRatio(ratio, beta=latf.beta)
    if kind in ("linear", "cosine"):
        return ScheduledRatio(total_steps, start=ratio, end=ratio_end, shape=kind, beta=latf.beta)
    raise ValueError(f"unknown ratio controller {kind!r}")


def selection_size(n_valid: int, r: float) -> int:
    """max(1, ceil(n_valid * r)), tolerant of float noise in r (0.95 * 20 is 19, not 20)."""
    if n_valid <= 0:
        raise ValueError("no valid tokens to select from")
    exact = Fraction(r).limit_denominator(10**9) * n_valid
    return max(1, min(n_valid, math.ceil(exact)))


def select_tokens(scores, r: float, mask=None, per_sequence: bool = False) -> np.ndarray:
    """Boolean mask of the top-r fraction of valid tokens by score.

    ``scores`` is a DifficultyScores or an array with the position grid of
    ``mask``. Ties at the cutoff go to the lower (row-major) position.
    """
    if hasattr(scores, "scores"):
        values, mask = scores.scores, scores.mask
    else:
        values = np.asarray(scores, dtype=np.float64)
        mask = np.ones(values.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not 0.0 < r <= 1.0:
        raise ValueError(f"ratio must lie in (0, 1], got {r}")
    out = np.zeros(values.shape, dtype=bool)
    if per_sequence and values.ndim == 2:
        for b in range(values.shape[0]):
            if mask[b].any():
                out[b] = _select_flat(values[b], mask[b], r)
        if not out.any():
            raise ValueError("no valid tokens to select from")
        return out
    return _select_flat(values.reshape(-1), mask.reshape(-1), r).reshape(values.shape)


def _select_flat(values: np.ndarray, mask: np.ndarray, r: float) -> np.ndarray:
    idx = np.flatnonzero(mask)
    k = selection_size(idx.size, r)
    # stable sort on the negated score keeps lower positions first among ties
    order = np.argsort(-values[idx], kind="stable")[:k]
    out = np.zeros(values.shape, dtype=bool)
    out[idx[order]] = True
    return out
