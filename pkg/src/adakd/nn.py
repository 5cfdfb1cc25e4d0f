"""Tiny decoder-only transformer, optimizer and checkpoint container.

Everything runs in float64 on CPU. Autodiff is torch's reverse mode; this
module adds the contracts the rest of the package relies on (input
validation, deterministic init, explicit optimizer state, a versioned
checkpoint format).
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

DTYPE = torch.float64
INIT_STD = 0.02

CHECKPOINT_MAGIC = b"ADAKDCKP"
CHECKPOINT_VERSION = 1


@dataclass
class ModelSpec:
    vocab_size: int = 100
    context_length: int = 64
    layer_count: int = 2
    head_count: int = 4
    model_width: int = 64
    tie_output: bool = False

    def validate(self) -> None:
        for name in ("vocab_size", "context_length", "layer_count", "head_count", "model_width"):
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.model_width % self.head_count:
            raise ValueError(
                f"model_width ({self.model_width}) must be divisible by head_count ({self.head_count})"
            )


class CausalSelfAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, L, D = x.shape
        h = self.heads
        q, k, v = self.qkv(x).split(D, dim=-1)
        q = q.view(B, L, h, D // h).transpose(1, 2)
        k = k.view(B, L, h, D // h).transpose(1, 2)
        v = v.view(B, L, h, D // h).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(D // h)
        causal = torch.ones(L, L, dtype=torch.bool).triu(1)
        att = att.masked_fill(causal, float("-inf"))
        y = torch.softmax(att, dim=-1) @ v
        return self.proj(y.transpose(1, 2).reshape(B, L, D))


class Block(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = CausalSelfAttention(width, heads)
        self.ln2 = nn.LayerNorm(width)
        self.fc = nn.Linear(width, 4 * width)
        self.out = nn.Linear(4 * width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.out(F.gelu(self.fc(self.ln2(x))))


class TinyTransformerLM(nn.Module):
    """Pre-norm decoder-only LM with learned positional embeddings."""

    def __init__(self, spec: ModelSpec, seed: int = 0):
        super().__init__()
        spec.validate()
        self.spec = spec
        gen = torch.Generator().manual_seed(int(seed))
        self.tok_emb = nn.Embedding(spec.vocab_size, spec.model_width)
        self.pos_emb = nn.Embedding(spec.context_length, spec.model_width)
        self.blocks = nn.ModuleList(
            Block(spec.model_width, spec.head_count) for _ in range(spec.layer_count)
        )
        self.ln_f = nn.LayerNorm(spec.model_width)
        self.head = None if spec.tie_output else nn.Linear(spec.model_width, spec.vocab_size, bias=False)
        self.to(DTYPE)
        self._init_parameters(gen)

    @torch.no_grad()
    def _init_parameters(self, gen: torch.Generator) -> None:
        for name, p in self.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif ".ln" in name or name.startswith("ln_"):
                p.fill_(1.0)
            else:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) * INIT_STD)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        L = ids.shape[-1]
        pos = torch.arange(L)
        x = self.tok_emb(ids) + self.pos_emb(pos)
        for block in self.blocks:
            x = block(x)
        x = self.ln_f(x)
        if self.head is None:
            return x @ self.tok_emb.weight.T
        return self.head(x)


def check_token_ids(model: TinyTransformerLM, token_ids) -> torch.Tensor:
    """Validate ids against the model's vocabulary and context; returns a long tensor."""
    ids = torch.as_tensor(np.asarray(token_ids), dtype=torch.long)
    if ids.ndim not in (1, 2):
        raise ValueError(f"token_ids must be 1-D or 2-D, got shape {tuple(ids.shape)}")
    if ids.shape[-1] == 0:
        raise ValueError("token_ids is empty")
    if ids.shape[-1] > model.spec.context_length:
        raise ValueError(
            f"sequence length {ids.shape[-1]} exceeds context_length {model.spec.context_length}"
        )
    bad = (ids < 0) | (ids >= model.spec.vocab_size)
    if bad.any():
        pos = tuple(int(i) for i in bad.nonzero()[0])
        raise ValueError(
            f"token id {int(ids[pos])} at position {pos if len(pos) > 1 else pos[0]} "
            f"is outside vocabulary of size {model.spec.vocab_size}"
        )
    return ids


def forward_lm(model: TinyTransformerLM, token_ids) -> torch.Tensor:
    """Logits for every position: (L, V) for a 1-D input, (B, L, V) for 2-D."""
    ids = check_token_ids(model, token_ids)
    if ids.ndim == 1:
        return model(ids[None])[0]
    return model(ids)


def backward(loss: torch.Tensor) -> None:
    if loss.numel() != 1 or loss.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any parameter requiring grad")
    loss.backward()


@dataclass
class OptimizerState:
    """Adam-style state; mode="sgd" ignores the moment buffers."""

    learning_rate: float = 1e-3
    mode: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: Dict[str, torch.Tensor] = field(default_factory=dict)
    second_moment: Dict[str, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer mode {self.mode!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")


@torch.no_grad()
def optimizer_step(state: OptimizerState, model: nn.Module) -> None:
    """Update parameters in place from their ``.grad``; grads are left untouched."""
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    for name, p in params:
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
    state.step += 1
    lr = state.learning_rate
    if state.mode == "sgd":
        for _, p in params:
            p.sub_(lr * p.grad)
        return
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step
    for name, p in params:
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = torch.zeros_like(p)
            state.second_moment[name] = torch.zeros_like(p)
        v = state.second_moment[name]
        m.mul_(b1).add_(p.grad, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(p.grad, p.grad, value=1.0 - b2)
        denom = (v / bias2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-lr / bias1)


def zero_grad(model: nn.Module) -> None:
    for p in model.parameters():
        p.grad = None


def parameter_vector(model: nn.Module) -> np.ndarray:
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()]).numpy().copy()


def gradient_vector(model: nn.Module) -> np.ndarray:
    parts = []
    for p in model.parameters():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        parts.append(g.detach().reshape(-1))
    return torch.cat(parts).numpy().copy()


# -- checkpoints -------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path: Union[str, Path], model: TinyTransformerLM,
                    extra: Optional[dict] = None) -> Path:
    """Layout: magic, u32 version, u64 header length, JSON header, raw little-endian f64."""
    path = Path(path)
    state = model.state_dict()
    tensors = []
    blobs = []
    offset = 0
    for name, t in state.items():
        arr = t.detach().cpu().numpy().astype("<f8", copy=False)
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    spec = asdict(model.spec)
    header = {
        "spec": spec,
        "config_hash": config_hash({"spec": spec, "extra": extra or {}}),
        "extra": extra or {},
        "tensors": tensors,
        "nbytes": offset,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hb)))
        fh.write(hb)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)
    return path


def read_checkpoint_header(path: Union[str, Path]) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path) -> dict:
    magic = fh.read(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not an adakd checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", fh.read(12))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    return json.loads(fh.read(hlen))


def load_checkpoint(path: Union[str, Path]) -> tuple[TinyTransformerLM, dict]:
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        raw = fh.read()
    if len(raw) != header["nbytes"]:
        raise CheckpointError(f"{path}: truncated payload ({len(raw)} of {header['nbytes']} bytes)")
    model = TinyTransformerLM(ModelSpec(**header["spec"]))
    state = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=entry["offset"])
        state[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
    model.load_state_dict(state)
    return model, header


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def freeze(model: nn.Module) -> nn.Module:
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    return model


def iter_named_parameters(model: nn.Module) -> Iterable[tuple[str, torch.Tensor]]:
    return ((n, p) for n, p in model.named_parameters() if p.requires_grad)
