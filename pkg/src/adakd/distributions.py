"""Temperature-scaled probability math and the divergences used for distillation.

The scalar functions here take plain vectors (numpy arrays or lists) and return
floats; they are what the difficulty scorer and the diagnostics call. The
``*_rows`` functions are their batched torch counterparts, written in log space
on logits so they can sit inside the autograd graph of the training loss.
"""
from __future__ import annotations

import math

import numpy as np
import torch

from ._validation import (
    check_logit_vector,
    check_positive,
    check_prob_vector,
    check_same_vocab,
)

PROB_FLOOR = 1e-12
LN2 = math.log(2.0)


def softmax_with_temperature(logits, tau: float = 1.0) -> np.ndarray:
    tau = check_positive(tau, "tau")
    z = check_logit_vector(logits) / tau
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def entropy(p) -> float:
    p = check_prob_vector(p)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def entropy_temp_derivative(logits, tau: float = 1.0) -> float:
    """dH/dtau of softmax(z/tau): the variance of the raw logits under p(tau), over tau**3."""
    tau = check_positive(tau, "tau")
    z = check_logit_vector(logits)
    p = softmax_with_temperature(z, tau)
    mean = (p * z).sum()
    var = (p * (z - mean) ** 2).sum()
    return float(max(var, 0.0) / tau**3)


def smooth(p: np.ndarray) -> np.ndarray:
    """Clamp to PROB_FLOOR and renormalize so logs stay finite."""
    p = np.maximum(p, PROB_FLOOR)
    return p / p.sum()


def kl_divergence(p, q, tau: float = 1.0, apply_tau_sq: bool = False) -> float:
    """KL(p || q). Pass (teacher, student) for forward KL, (student, teacher) for reverse."""
    p = check_prob_vector(p, "p")
    q = check_prob_vector(q, "q")
    check_same_vocab(p, q)
    ps, qs = smooth(p), smooth(q)
    value = float(max((ps * (np.log(ps) - np.log(qs))).sum(), 0.0))
    if apply_tau_sq:
        value *= check_positive(tau, "tau") ** 2
    return value


def js_divergence(p, q) -> float:
    p = check_prob_vector(p, "p")
    q = check_prob_vector(q, "q")
    check_same_vocab(p, q)
    ps, qs = smooth(p), smooth(q)
    m = 0.5 * (ps + qs)
    value = 0.5 * (ps * np.log(ps / m)).sum() + 0.5 * (qs * np.log(qs / m)).sum()
    return float(min(max(value, 0.0), LN2))


def cross_entropy_to_target(q, target_id: int) -> float:
    q = check_prob_vector(q, "q")
    if not 0 <= int(target_id) < q.size:
        raise ValueError(f"target_id {target_id} outside vocabulary of size {q.size}")
    return float(-np.log(max(q[int(target_id)], PROB_FLOOR)))


def hellinger_distance(p, q) -> float:
    p = check_prob_vector(p, "p")
    q = check_prob_vector(q, "q")
    check_same_vocab(p, q)
    d = np.sqrt(((np.sqrt(p) - np.sqrt(q)) ** 2).sum() / 2.0)
    return float(min(d, 1.0))


# -- batched, differentiable forms (last axis is the vocabulary) ---------------

def kl_rows(log_p: torch.Tensor, log_q: torch.Tensor) -> torch.Tensor:
    """Row-wise KL(p || q) from log-probabilities."""
    return (log_p.exp() * (log_p - log_q)).sum(-1)


def js_rows(log_p: torch.Tensor, log_q: torch.Tensor) -> torch.Tensor:
    log_m = torch.logaddexp(log_p, log_q) - LN2
    return 0.5 * kl_rows(log_p, log_m) + 0.5 * kl_rows(log_q, log_m)


def hellinger_rows(log_p: torch.Tensor, log_q: torch.Tensor) -> torch.Tensor:
    diff = (0.5 * log_p).exp() - (0.5 * log_q).exp()
    return ((diff * diff).sum(-1) / 2.0).sqrt().clamp(max=1.0)


def entropy_rows(logits: torch.Tensor, tau=1.0) -> torch.Tensor:
    log_p = torch.log_softmax(logits / tau, dim=-1)
    return -(log_p.exp() * log_p).sum(-1)
