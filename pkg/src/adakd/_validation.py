"""Input checks shared by the public functions, in the spirit of sklearn's check_array."""
from __future__ import annotations

import numpy as np
import torch

PROB_ATOL = 1e-9


def check_positive(value, name: str) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a positive finite number, got {value!r}")
    return value


def check_logit_vector(logits, name: str = "logits") -> np.ndarray:
    arr = np.asarray(logits, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_prob_vector(p, name: str = "p") -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D probability vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise ValueError(f"{name} must be finite and non-negative")
    total = arr.sum()
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"{name} sums to {total:.12g}, not 1")
    return arr


def check_same_vocab(p: np.ndarray, q: np.ndarray) -> None:
    if p.shape != q.shape:
        raise ValueError(f"vocabulary mismatch: {p.shape[-1]} vs {q.shape[-1]} entries")


def check_logit_batch(logits, name: str = "logits") -> torch.Tensor:
    """Accept (L, V) or (B, L, V) logits as a float64 tensor with shape (B, L, V)."""
    t = logits if isinstance(logits, torch.Tensor) else torch.as_tensor(np.asarray(logits, dtype=np.float64))
    if t.dtype != torch.float64:
        t = t.to(torch.float64)
    if t.ndim == 2:
        t = t[None]
    if t.ndim != 3:
        raise ValueError(f"{name} must have shape (L, V) or (B, L, V), got {tuple(t.shape)}")
    return t


def check_mask(mask, shape, name: str = "mask") -> np.ndarray:
    """Boolean mask with the (B, L) shape of a logit batch; None means all positions."""
    if mask is None:
        return np.ones(shape, dtype=bool)
    arr = np.asarray(mask.detach().numpy() if isinstance(mask, torch.Tensor) else mask)
    if arr.ndim == len(shape) - 1:
        arr = arr[None]
    if arr.shape != tuple(shape):
        raise ValueError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")
    return arr.astype(bool)
