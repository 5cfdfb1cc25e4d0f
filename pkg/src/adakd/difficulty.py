"""Per-token difficulty scores from teacher and student logits."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from ._validation import check_logit_batch, check_mask, check_prob_vector, check_same_vocab
from .distributions import hellinger_rows, js_rows, kl_rows, smooth

DEFAULT_TOPK = 5


class IndicatorKind(str, enum.Enum):
    HELLINGER = "hellinger"
    FORWARD_KL = "forward_kl"
    REVERSE_KL = "reverse_kl"
    CROSS_ENTROPY = "cross_entropy"
    JS = "js"
    TOPK_RANK = "topk_rank"


@dataclass
class DifficultyScores:
    """Scores aligned with a (B, L) position grid; NaN where ``mask`` is False."""

    scores: np.ndarray
    mask: np.ndarray
    kind: IndicatorKind

    @property
    def valid(self) -> np.ndarray:
        return self.scores[self.mask]

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())


def topk_rank_agreement(teacher, student, k: int = DEFAULT_TOPK) -> float:
    """KL restricted to the teacher's top-k ids, both sides renormalized over that set."""
    p = check_prob_vector(teacher, "teacher")
    q = check_prob_vector(student, "student")
    check_same_vocab(p, q)
    k = int(k)
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    if k > p.size:
        raise ValueError(f"k={k} exceeds vocabulary size {p.size}")
    top = np.argsort(-p, kind="stable")[:k]
    pk, qk = smooth(p[top]), smooth(q[top])
    return float(max((pk * np.log(pk / qk)).sum(), 0.0))


def _topk_rows(log_p: torch.Tensor, log_q: torch.Tensor, k: int) -> torch.Tensor:
    # stable descending order matches topk_rank_agreement's tie handling
    idx = torch.argsort(-log_p, dim=-1, stable=True)[..., :k]
    pk = log_p.exp().gather(-1, idx).clamp_min(1e-12)
    qk = log_q.exp().gather(-1, idx).clamp_min(1e-12)
    pk = pk / pk.sum(-1, keepdim=True)
    qk = qk / qk.sum(-1, keepdim=True)
    return (pk * (pk.log() - qk.log())).sum(-1).clamp_min(0.0)


@torch.no_grad()
def score_tokens(teacher_logits, student_logits, kind=IndicatorKind.HELLINGER,
                 target_ids=None, mask=None, k: int = DEFAULT_TOPK) -> DifficultyScores:
    """Score every masked-in position at temperature 1.

    Logits are (L, V) or (B, L, V); ``mask`` marks response positions and
    ``target_ids`` (same grid) is needed only for the cross-entropy kind.
    """
    kind = IndicatorKind(kind)
    zt = check_logit_batch(teacher_logits, "teacher_logits").detach()
    zs = check_logit_batch(student_logits, "student_logits").detach()
    if zt.shape != zs.shape:
        raise ValueError(f"teacher/student logits misaligned: {tuple(zt.shape)} vs {tuple(zs.shape)}")
    m = check_mask(mask, zt.shape[:2])
    log_p = torch.log_softmax(zt, -1)
    log_q = torch.log_softmax(zs, -1)

    if kind is IndicatorKind.HELLINGER:
        s = hellinger_rows(log_p, log_q)
    elif kind is IndicatorKind.FORWARD_KL:
        s = kl_rows(log_p, log_q)
    elif kind is IndicatorKind.REVERSE_KL:
        s = kl_rows(log_q, log_p)
    elif kind is IndicatorKind.JS:
        s = js_rows(log_p, log_q)
    elif kind is IndicatorKind.TOPK_RANK:
        if k <= 0 or k > zt.shape[-1]:
            raise ValueError(f"k must be in [1, {zt.shape[-1]}], got {k}")
        s = _topk_rows(log_p, log_q, k)
    else:  # cross entropy against the ground truth
        if target_ids is None:
            raise ValueError("cross_entropy indicator needs target_ids")
        tgt = torch.as_tensor(np.asarray(target_ids), dtype=torch.long)
        if tgt.ndim == 1:
            tgt = tgt[None]
        if tuple(tgt.shape) != tuple(zt.shape[:2]):
            raise ValueError(f"target_ids shape {tuple(tgt.shape)} does not match logits {tuple(zt.shape[:2])}")
        tgt = tgt.clamp(0, zt.shape[-1] - 1)
        s = -log_q.gather(-1, tgt[..., None])[..., 0]

    scores = s.clamp_min(0.0).numpy().copy()
    scores[~m] = np.nan
    if not np.all(np.isfinite(scores[m])):
        raise FloatingPointError("non-finite difficulty score")
    return DifficultyScores(scores=scores, mask=m, kind=kind)
