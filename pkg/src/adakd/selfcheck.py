"""Fast numeric invariants, run by ``adakd selfcheck`` (well under a minute on one core)."""
from __future__ import annotations

import math
import time
from typing import Callable, List, Tuple

import numpy as np
import torch

from .config import DistillRunConfig
from .data import iterate_batches, synthetic_pairs
from .distributions import entropy, entropy_temp_derivative, hellinger_distance, softmax_with_temperature
from .evaluation import lcs_length
from .idts import IdtsConfig, temperatures_for
from .latf import LatfConfig, LatfController
from .loss import selective_distill_loss
from .nn import ModelSpec, OptimizerState, TinyTransformerLM, optimizer_step, zero_grad
from .trainer import TeacherCache, run_distillation


def _check_hellinger(rng) -> None:
    for _ in range(500):
        v = int(rng.integers(2, 20))
        p, q = rng.dirichlet(np.ones(v)), rng.dirichlet(np.ones(v))
        ref = math.sqrt(sum((math.sqrt(a) - math.sqrt(b)) ** 2 for a, b in zip(p, q)) / 2)
        h = hellinger_distance(p, q)
        assert abs(h - ref) < 1e-12 and 0 <= h <= 1 and h == hellinger_distance(q, p)


def _check_entropy(rng) -> None:
    taus = [0.25, 0.5, 1.0, 2.0, 4.0]
    for _ in range(200):
        z = rng.normal(size=int(rng.integers(2, 30))) * 2
        hs = [entropy(softmax_with_temperature(z, t)) for t in taus]
        assert all(b > a for a, b in zip(hs, hs[1:]))
        t, h = 0.8, 1e-5
        fd = (entropy(softmax_with_temperature(z, t + h)) - entropy(softmax_with_temperature(z, t - h))) / (2 * h)
        d = entropy_temp_derivative(z, t)
        assert abs(fd - d) <= 1e-6 * max(abs(d), 1e-8) + 1e-9


def _check_idts(rng) -> None:
    for _ in range(1000):
        cfg = IdtsConfig(tau_base=float(rng.uniform(0.2, 3)), c=float(rng.uniform(0, 2)))
        s = rng.uniform(0, 1, size=int(rng.integers(1, 30)))
        t = temperatures_for(s, cfg).temps
        lo, hi = cfg.bounds
        assert np.all(t >= lo) and np.all(t <= hi)


def _check_latf(_rng) -> None:
    ctl = LatfController(LatfConfig(warmup_steps=2, beta=0.5, epsilon=0.1, delta=0.25, r_min=0.6), total_steps=10)
    ctl.init_ema(1.0)
    trace = []
    for loss in [1.0, 1.0, 0.2, 0.6, 1.0, 0.8, 0.8]:
        trace.append(ctl.update_ratio())
        ctl.update_ema(loss)
    # warm-up, first decrease (reference unset), clamp at r_min, keep inside the band, increase
    assert trace == [1.0, 1.0, 0.75, 0.6, 0.6, 0.75, 0.75], trace


def _check_rouge(rng) -> None:
    for _ in range(200):
        a = list(rng.integers(0, 3, size=int(rng.integers(0, 8))))
        b = list(rng.integers(0, 3, size=int(rng.integers(0, 8))))
        table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
        for i in range(len(a) - 1, -1, -1):
            for j in range(len(b) - 1, -1, -1):
                table[i][j] = table[i + 1][j + 1] + 1 if a[i] == b[j] else max(table[i + 1][j], table[i][j + 1])
        assert lcs_length(a, b) == table[0][0]


def _check_gradients(_rng) -> None:
    spec = ModelSpec(vocab_size=7, context_length=5, layer_count=2, head_count=2, model_width=4)
    model = TinyTransformerLM(spec, seed=0)
    ids = torch.tensor([[1, 3, 5, 2, 6]])
    zt = torch.randn(1, 5, 7, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    mask = np.array([[False, True, True, False, True]])

    def loss_fn():
        return selective_distill_loss(zt, model(ids), mask, [0.7, 1.0, 1.4])

    loss_fn().backward()
    with torch.no_grad():
        for _, p in model.named_parameters():
            flat, grad = p.view(-1), p.grad.view(-1).clone()
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + 1e-5
                up = loss_fn().item()
                flat[i] = old - 1e-5
                down = loss_fn().item()
                flat[i] = old
                num, a = (up - down) / 2e-5, grad[i].item()
                assert abs(a - num) <= max(1e-4 * max(abs(a), abs(num)), 1e-8)


def _check_reduction(_rng) -> None:
    cfg = DistillRunConfig()
    cfg.teacher = ModelSpec(context_length=40, layer_count=1, head_count=2, model_width=16)
    cfg.student = ModelSpec(context_length=40, layer_count=1, head_count=2, model_width=8)
    cfg.distill.steps, cfg.distill.batch_size, cfg.distill.controller = 10, 4, "fixed"
    cfg.distill.ema_init_batches = 1
    cfg.idts.c = 0.0
    pairs = synthetic_pairs(40, seed=0)
    teacher = TinyTransformerLM(cfg.teacher, seed=1)
    cache = TeacherCache(teacher, pairs)
    ours = [row["loss"] for row in run_distillation(cfg, teacher, pairs, seed=3, cache=cache).metrics]
    student = TinyTransformerLM(cfg.student, seed=3)
    opt = OptimizerState(learning_rate=cfg.distill.learning_rate)
    batches = iterate_batches(pairs, 4, 40, np.random.default_rng(3))
    for expected in ours:
        idx, batch = next(batches)
        m = torch.as_tensor(batch.mask)
        log_p = torch.log_softmax(cache.batch_logits(idx, batch)[m], -1)
        log_q = torch.log_softmax(student(torch.as_tensor(batch.input_ids))[m], -1)
        loss = (log_q.exp() * (log_q - log_p)).sum(-1).mean()
        loss.backward()
        optimizer_step(opt, student)
        zero_grad(student)
        assert abs(loss.item() - expected) <= 1e-9


CHECKS: List[Tuple[str, Callable]] = [
    ("hellinger matches scalar oracle", _check_hellinger),
    ("entropy increases with temperature", _check_entropy),
    ("temperatures stay in range", _check_idts),
    ("focus-ratio controller trace", _check_latf),
    ("LCS matches dynamic programme", _check_rouge),
    ("loss gradients match finite differences", _check_gradients),
    ("full-ratio loop reduces to plain reverse KL", _check_reduction),
]


def run_selfcheck(emit: Callable[[str], None] = print) -> bool:
    rng = np.random.default_rng(0)
    ok = True
    for name, fn in CHECKS:
        start = time.perf_counter()
        try:
            fn(rng)
            status = "PASS"
        except Exception as exc:  # report every failure, keep going
            status, ok = f"FAIL {type(exc).__name__} {exc}".rstrip(), False
        emit(f"{status:4s}  {name}  ({time.perf_counter() - start:.2f}s)")
    return ok
