"""Selective, per-token-temperature distillation loss and the plain NLL loss."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch

from ._validation import check_logit_batch, check_mask
from .distributions import js_rows, kl_rows
from .idts import TemperatureAssignment


class DivergenceKind(str, enum.Enum):
    FORWARD_KL = "forward_kl"
    REVERSE_KL = "reverse_kl"
    JS = "js"


@dataclass
class DistillObjective:
    divergence: DivergenceKind = DivergenceKind.REVERSE_KL
    apply_tau_sq: bool = True
    sft_weight: float = 0.0

    def validate(self) -> None:
        DivergenceKind(self.divergence)
        if not 0.0 <= self.sft_weight <= 1.0:
            raise ValueError(f"sft_weight must lie in [0, 1], got {self.sft_weight}")


def token_divergences(teacher_logits: torch.Tensor, student_logits: torch.Tensor,
                      temps: torch.Tensor, objective: DistillObjective) -> torch.Tensor:
    """Per-row divergence for (k, V) logits, each row at its own temperature."""
    tau = temps[:, None]
    log_p = torch.log_softmax(teacher_logits.detach() / tau, dim=-1)
    log_q = torch.log_softmax(student_logits / tau, dim=-1)
    kind = DivergenceKind(objective.divergence)
    if kind is DivergenceKind.REVERSE_KL:
        d = kl_rows(log_q, log_p)
    elif kind is DivergenceKind.FORWARD_KL:
        d = kl_rows(log_p, log_q)
    else:
        d = js_rows(log_p, log_q)
    if objective.apply_tau_sq:
        d = d * temps**2
    return d


def _temps_tensor(temps, k: int) -> torch.Tensor:
    if temps is None:
        return torch.ones(k, dtype=torch.float64)
    if isinstance(temps, TemperatureAssignment):
        temps = temps.temps
    t = torch.tensor(np.asarray(temps, dtype=np.float64)).reshape(-1)
    if t.numel() == 1 and k != 1:
        t = t.expand(k)
    if t.numel() != k:
        raise ValueError(f"{t.numel()} temperatures for {k} selected tokens")
    if not torch.all(t > 0):
        raise ValueError("temperatures must be positive")
    return t


def selective_distill_loss(teacher_logits, student_logits, mask=None,
                           temps: Union[TemperatureAssignment, np.ndarray, float, None] = None,
                           objective: Optional[DistillObjective] = None) -> torch.Tensor:
    """Mean divergence over the selected positions.

    ``temps`` lists one temperature per selected position in row-major order
    (a scalar is broadcast, None means 1). Only student logits at selected
    positions receive gradient.
    """
    objective = objective or DistillObjective()
    objective.validate()
    zt = check_logit_batch(teacher_logits, "teacher_logits")
    zs = check_logit_batch(student_logits, "student_logits")
    if zt.shape != zs.shape:
        raise ValueError(f"teacher/student logits misaligned: {tuple(zt.shape)} vs {tuple(zs.shape)}")
    m = torch.as_tensor(check_mask(mask, zt.shape[:2]))
    k = int(m.sum())
    if k == 0:
        raise ValueError("selection is empty")
    tau = _temps_tensor(temps, k)
    per_token = token_divergences(zt[m], zs[m], tau, objective)
    return per_token.sum() / k


def sft_loss(student_logits, target_ids, mask=None) -> torch.Tensor:
    """Mean negative log-likelihood of ``target_ids`` over the masked-in positions."""
    zs = check_logit_batch(student_logits, "student_logits")
    tgt = torch.as_tensor(np.asarray(target_ids), dtype=torch.long)
    if tgt.ndim == 1:
        tgt = tgt[None]
    if tuple(tgt.shape) != tuple(zs.shape[:2]):
        raise ValueError(f"target_ids shape {tuple(tgt.shape)} does not match logits {tuple(zs.shape[:2])}")
    m = torch.as_tensor(check_mask(mask, zs.shape[:2]))
    if not m.any():
        raise ValueError("no valid positions for the NLL loss")
    if (tgt[m] < 0).any() or (tgt[m] >= zs.shape[-1]).any():
        raise ValueError("target id outside vocabulary")
    log_q = torch.log_softmax(zs[m], dim=-1)
    return -log_q.gather(-1, tgt[m][:, None]).sum() / int(m.sum())


def combined_loss(distill: torch.Tensor, sft: Optional[torch.Tensor], objective: DistillObjective) -> torch.Tensor:
    w = objective.sft_weight
    if w == 0.0 or sft is None:
        return distill
    return (1.0 - w) * distill + w * sft
