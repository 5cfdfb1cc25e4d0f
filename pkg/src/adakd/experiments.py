"""Seeded method comparisons on a shared teacher.

Every method at a given seed starts from the same student initialisation and
sees the same batch order, so score differences come from the objective alone.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import DistillRunConfig, with_overrides
from .data import PromptResponsePair
from .evaluation import evaluate_model
from .nn import TinyTransformerLM
from .trainer import TeacherCache, initial_student, run_distillation

log = logging.getLogger(__name__)

# config overrides that turn the base run into each compared method
METHODS: Dict[str, List[str]] = {
    "rkd": ["distill.controller=fixed", "distill.ratio=1.0", "idts.mode=fixed"],
    "idts": ["distill.controller=fixed", "distill.ratio=1.0", "idts.mode=inverse"],
    "adakd": ["distill.controller=latf", "idts.mode=inverse"],
    "flipped": ["distill.controller=latf", "idts.mode=flipped"],
}


@dataclass
class Comparison:
    seeds: List[int]
    scores: Dict[str, List[float]] = field(default_factory=dict)
    seconds: Dict[str, List[float]] = field(default_factory=dict)

    def mean(self, method: str) -> float:
        return float(np.mean(self.scores[method]))

    def to_dict(self) -> dict:
        return {"seeds": self.seeds, "scores": self.scores, "seconds": self.seconds,
                "means": {m: self.mean(m) for m in self.scores}}


def method_config(base: DistillRunConfig, method: str) -> DistillRunConfig:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(METHODS)}")
    return with_overrides(base, METHODS[method])


def compare_methods(base: DistillRunConfig, teacher: TinyTransformerLM,
                    train: Sequence[PromptResponsePair], val: Sequence[PromptResponsePair],
                    seeds: Sequence[int], methods: Sequence[str] = tuple(METHODS),
                    cache: Optional[TeacherCache] = None) -> Comparison:
    """Distil one student per (method, seed) and score it on ``val`` with decoding seed = training seed."""
    cache = cache or TeacherCache(teacher, train)
    configs = {m: method_config(base, m) for m in methods}
    result = Comparison(seeds=list(seeds), scores={m: [] for m in methods}, seconds={m: [] for m in methods})
    for seed in seeds:
        init = initial_student(base, train, seed)
        for m, cfg in configs.items():
            start = time.perf_counter()
            run = run_distillation(cfg, teacher, train, seed, cache=cache, init_student=init)
            score = evaluate_model(run.student, val, cfg.eval, seeds=[seed]).mean
            result.scores[m].append(score)
            result.seconds[m].append(time.perf_counter() - start)
            log.info("seed %d %s rouge-l %.4f", seed, m, score)
    return result
