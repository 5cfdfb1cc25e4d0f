"""Estimator-style wrappers: fit on prompt/response pairs, predict responses, score by ROUGE-L."""
from __future__ import annotations

import copy
from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import DistillRunConfig
from .data import ByteTokenizer, PromptResponsePair, make_pair
from .difficulty import IndicatorKind
from .evaluation import DecodeConfig, evaluate_model, generate
from .idts import IdtsConfig, TemperatureMode
from .latf import LatfConfig
from .loss import DistillObjective, DivergenceKind
from .nn import ModelSpec, TinyTransformerLM, freeze
from .trainer import TeacherCache, run_distillation, train_lm


def check_pairs(X, require_response: bool = True) -> List[PromptResponsePair]:
    """Accept PromptResponsePair objects, (prompt, response) tuples or {"prompt", "response"} dicts."""
    tok = ByteTokenizer()
    if isinstance(X, (str, bytes)) or not hasattr(X, "__iter__"):
        raise TypeError("expected a sequence of prompt/response pairs")
    out = []
    for i, item in enumerate(list(X)):
        if isinstance(item, PromptResponsePair):
            out.append(item)
            continue
        if isinstance(item, dict):
            prompt, response = item.get("prompt"), item.get("response", "")
        elif isinstance(item, str):
            prompt, response = item, ""
        else:
            try:
                prompt, response = item
            except (TypeError, ValueError):
                raise ValueError(f"item {i}: expected a (prompt, response) pair") from None
        if not isinstance(prompt, str) or not isinstance(response, str):
            raise ValueError(f"item {i}: prompt and response must be strings")
        if require_response and not response:
            raise ValueError(f"item {i}: empty response")
        out.append(make_pair(tok, prompt, response))
    if not out:
        raise ValueError("no examples given")
    return out


class _GenerativeMixin:
    """predict/score shared by the teacher and the distiller; the fitted model lives in ``model_``."""

    def _fitted_model(self) -> TinyTransformerLM:
        check_is_fitted(self, "model_")
        return self.model_

    def predict(self, X, seed: int = 10, decode: Optional[DecodeConfig] = None) -> List[str]:
        """Sample one response per prompt (strings, pairs or PromptResponsePair)."""
        pairs = check_pairs(X, require_response=False)
        outs, _ = generate(self._fitted_model(), [p.prompt for p in pairs], decode or DecodeConfig(), seed)
        tok = ByteTokenizer()
        return [tok.decode(o) for o in outs]

    def score(self, X, y=None, seeds: Sequence[int] = (10,)) -> float:
        """Mean ROUGE-L F of sampled responses against the references."""
        pairs = check_pairs(X)
        return evaluate_model(self._fitted_model(), pairs, DecodeConfig(), seeds).mean


class TeacherLM(_GenerativeMixin, BaseEstimator):
    def __init__(self, layer_count=4, head_count=4, model_width=128, context_length=64,
                 steps=1500, batch_size=32, learning_rate=2e-3, seed=0):
        self.layer_count = layer_count
        self.head_count = head_count
        self.model_width = model_width
        self.context_length = context_length
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed

    def fit(self, X, y=None):
        pairs = check_pairs(X)
        spec = ModelSpec(vocab_size=ByteTokenizer.vocab_size, context_length=self.context_length,
                         layer_count=self.layer_count, head_count=self.head_count, model_width=self.model_width)
        spec.validate()
        model = TinyTransformerLM(spec, seed=self.seed)
        train_lm(model, pairs, self.steps, self.batch_size, self.learning_rate, seed=self.seed, label="teacher")
        freeze(model)
        self.model_ = model
        return self


class AdaKDDistiller(_GenerativeMixin, BaseEstimator):
    """Distill a fitted teacher into a smaller student with token-adaptive focusing and temperatures.

    ``teacher`` is a fitted :class:`TeacherLM` or a ``TinyTransformerLM``.
    After ``fit``: ``model_`` (the student), ``metrics_`` (one dict per step),
    ``controller_`` and ``initial_loss_``.
    """

    def __init__(self, teacher=None, layer_count=2, head_count=4, model_width=64, steps=600,
                 batch_size=16, learning_rate=2e-3, controller="latf", ratio=1.0, c=0.5, tau_base=1.0,
                 temperature_mode="inverse", divergence="reverse_kl", indicator="hellinger",
                 apply_tau_sq=True, beta=0.97, epsilon=0.05, delta=0.05, warmup_fraction=0.05,
                 r_min=0.05, sft_warmstart_steps=0, seed=0):
        self.teacher = teacher
        self.layer_count = layer_count
        self.head_count = head_count
        self.model_width = model_width
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.controller = controller
        self.ratio = ratio
        self.c = c
        self.tau_base = tau_base
        self.temperature_mode = temperature_mode
        self.divergence = divergence
        self.indicator = indicator
        self.apply_tau_sq = apply_tau_sq
        self.beta = beta
        self.epsilon = epsilon
        self.delta = delta
        self.warmup_fraction = warmup_fraction
        self.r_min = r_min
        self.sft_warmstart_steps = sft_warmstart_steps
        self.seed = seed

    def _teacher_model(self) -> TinyTransformerLM:
        if isinstance(self.teacher, TinyTransformerLM):
            return self.teacher
        if isinstance(self.teacher, TeacherLM):
            return self.teacher._fitted_model()
        raise ValueError("teacher must be a fitted TeacherLM or a TinyTransformerLM")

    def run_config(self) -> DistillRunConfig:
        teacher = self._teacher_model()
        cfg = DistillRunConfig(
            teacher=copy.deepcopy(teacher.spec),
            student=ModelSpec(vocab_size=teacher.spec.vocab_size, context_length=teacher.spec.context_length,
                              layer_count=self.layer_count, head_count=self.head_count,
                              model_width=self.model_width),
            latf=LatfConfig(beta=self.beta, epsilon=self.epsilon, delta=self.delta,
                            warmup_fraction=self.warmup_fraction, r_min=self.r_min),
            idts=IdtsConfig(tau_base=self.tau_base, c=self.c, mode=TemperatureMode(self.temperature_mode)),
            objective=DistillObjective(divergence=DivergenceKind(self.divergence), apply_tau_sq=self.apply_tau_sq),
            seeds=[self.seed],
        )
        d = cfg.distill
        d.steps, d.batch_size, d.learning_rate = self.steps, self.batch_size, self.learning_rate
        d.controller, d.ratio, d.indicator = self.controller, self.ratio, IndicatorKind(self.indicator)
        d.sft_warmstart_steps = self.sft_warmstart_steps
        cfg.validate()
        return cfg

    def fit(self, X, y=None):
        pairs = check_pairs(X)
        cfg = self.run_config()
        teacher = self._teacher_model()
        result = run_distillation(cfg, teacher, pairs, self.seed, cache=TeacherCache(teacher, pairs))
        self.model_ = result.student
        self.metrics_ = result.metrics
        self.controller_ = result.controller
        self.initial_loss_ = result.initial_loss
        return self

    @property
    def ratio_trace_(self) -> np.ndarray:
        check_is_fitted(self, "metrics_")
        return np.array([row["ratio"] for row in self.metrics_])
