"""Teacher pre-training and the token-adaptive distillation loop."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence

import numpy as np
import torch

from .config import DistillRunConfig
from .data import (
    PAD,
    Batch,
    ByteTokenizer,
    PromptResponsePair,
    iterate_batches,
    load_dataset,
    make_batch,
    split_pairs,
    synthetic_pairs,
)
from .difficulty import score_tokens
from .evaluation import evaluate_model
from .idts import TemperatureAssignment, temperature_summary, temperatures_for
from .latf import RatioController, make_controller, select_tokens
from .loss import combined_loss, selective_distill_loss, sft_loss
from .nn import (
    ModelSpec,
    OptimizerState,
    TinyTransformerLM,
    freeze,
    optimizer_step,
    save_checkpoint,
    zero_grad,
)

log = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "step", "loss", "ema_loss", "ratio", "ref_loss", "branch", "n_valid", "n_selected",
    "score_mean", "tau_min", "tau_median", "tau_max", "tau_hard_mean", "tau_easy_mean", "val_rouge_l",
]


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


def build_data(cfg: DistillRunConfig) -> tuple[List[PromptResponsePair], List[PromptResponsePair]]:
    tok = ByteTokenizer()
    if cfg.data.path:
        pairs = load_dataset(cfg.data.path, tok)
    else:
        pairs = synthetic_pairs(cfg.data.synthetic_examples, cfg.data.synthetic_seed, tok,
                                varied=cfg.data.varied_phrasing)
    train, val = split_pairs(pairs, cfg.data.validation_fraction)
    if not train:
        raise ValueError("training split is empty")
    return train, val[: cfg.data.max_eval_examples]


def train_lm(model: TinyTransformerLM, train: Sequence[PromptResponsePair], steps: int, batch_size: int,
             learning_rate: float, optimizer: str = "adam", seed: int = 0, label: str = "lm") -> TinyTransformerLM:
    """Plain NLL training on the response tokens with cosine learning-rate decay."""
    opt = OptimizerState(learning_rate=learning_rate, mode=optimizer)
    batches = iterate_batches(train, min(batch_size, len(train)), model.spec.context_length,
                              np.random.default_rng(seed))
    model.train()
    for step in range(1, steps + 1):
        _, batch = next(batches)
        opt.learning_rate = learning_rate * _cosine_decay(step, steps)
        loss = sft_loss(model(torch.as_tensor(batch.input_ids)), batch.target_ids, batch.mask)
        if not torch.isfinite(loss):
            raise TrainingDiverged(step, loss.item())
        loss.backward()
        optimizer_step(opt, model)
        zero_grad(model)
        if step % 250 == 0:
            log.info("%s step %d nll %.4f", label, step, loss.item())
    return model


def train_teacher(cfg: DistillRunConfig, train: Sequence[PromptResponsePair],
                  out_dir: Optional[Path] = None) -> TinyTransformerLM:
    """Train the teacher from scratch; returns a frozen model."""
    tc = cfg.teacher_training
    model = TinyTransformerLM(cfg.teacher, seed=tc.seed)
    train_lm(model, train, tc.steps, tc.batch_size, tc.learning_rate, tc.optimizer, tc.seed, "teacher")
    freeze(model)
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "teacher.ckpt", model, {"role": "teacher", "steps": tc.steps})
    return model


def initial_student(cfg: DistillRunConfig, train: Sequence[PromptResponsePair], seed: int) -> TinyTransformerLM:
    """Fresh student for ``seed``, optionally warm-started with a few NLL steps."""
    student = TinyTransformerLM(cfg.student, seed=seed)
    d = cfg.distill
    if d.sft_warmstart_steps:
        train_lm(student, train, d.sft_warmstart_steps, d.batch_size, d.learning_rate, d.optimizer,
                 seed + 1, "warm-start")
    return student


def _cosine_decay(step: int, total: int, floor: float = 0.1) -> float:
    if total <= 1:
        return 1.0
    return floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * (step - 1) / (total - 1)))


class TeacherCache:
    """Frozen-teacher logits per training example, computed once."""

    def __init__(self, teacher: TinyTransformerLM, pairs: Sequence[PromptResponsePair], chunk: int = 64):
        self.vocab = teacher.spec.vocab_size
        self.ctx = teacher.spec.context_length
        self.rows: List[torch.Tensor] = []
        with torch.no_grad():
            for lo in range(0, len(pairs), chunk):
                batch = make_batch(pairs[lo:lo + chunk], self.ctx)
                logits = teacher(torch.as_tensor(batch.input_ids))
                lengths = (batch.input_ids != PAD).sum(1)
                for b in range(logits.shape[0]):
                    self.rows.append(logits[b, : int(lengths[b])].clone())

    def batch_logits(self, idx: Sequence[int], batch: Batch) -> torch.Tensor:
        B, T = batch.input_ids.shape
        out = torch.zeros(B, T, self.vocab, dtype=torch.float64)
        for b, i in enumerate(idx):
            row = self.rows[int(i)]
            n = min(row.shape[0], T)
            out[b, :n] = row[:n]
        return out


@dataclass
class DistillResult:
    student: TinyTransformerLM
    metrics: List[dict]
    controller: RatioController
    best_val: Optional[float] = None
    best_step: Optional[int] = None
    best_student: Optional[TinyTransformerLM] = None
    initial_loss: float = float("nan")


def distill_step_loss(teacher_logits: torch.Tensor, student_logits: torch.Tensor, batch: Batch,
                      r: float, cfg: DistillRunConfig):
    """Score, select, assign temperatures and build the loss for one micro-batch."""
    d = cfg.distill
    scores = score_tokens(teacher_logits, student_logits.detach(), d.indicator,
                          target_ids=batch.target_ids, mask=batch.mask, k=d.topk)
    selected = select_tokens(scores, r, per_sequence=d.selection == "sequence")
    reference = scores.valid if cfg.idts.median_over == "valid" else None
    temps = temperatures_for(scores.scores[selected], cfg.idts, reference)
    loss = selective_distill_loss(teacher_logits, student_logits, selected, temps, cfg.objective)
    if cfg.objective.sft_weight > 0:
        loss = combined_loss(loss, sft_loss(student_logits, batch.target_ids, batch.mask), cfg.objective)
    return loss, scores, selected, temps


def initial_distill_loss(student: TinyTransformerLM, cache: TeacherCache,
                         train: Sequence[PromptResponsePair], cfg: DistillRunConfig) -> float:
    """Loss of the untrained student (full selection) over a fixed prefix of the data."""
    bs = min(cfg.distill.batch_size, len(train))
    n_batches = max(1, min(cfg.distill.ema_init_batches, len(train) // bs))
    total = 0.0
    with torch.no_grad():
        for i in range(n_batches):
            idx = np.arange(i * bs, (i + 1) * bs)
            batch = make_batch([train[j] for j in idx], cfg.student.context_length)
            zt = cache.batch_logits(idx, batch)
            zs = student(torch.as_tensor(batch.input_ids))
            loss, *_ = distill_step_loss(zt, zs, batch, 1.0, cfg)
            total += float(loss)
    return total / n_batches


def run_distillation(cfg: DistillRunConfig, teacher: TinyTransformerLM,
                     train: Sequence[PromptResponsePair], seed: int,
                     val: Sequence[PromptResponsePair] = (),
                     out_dir: Optional[Path] = None,
                     cache: Optional[TeacherCache] = None,
                     init_student: Optional[TinyTransformerLM] = None) -> DistillResult:
    """Distill ``teacher`` into a student initialized from ``seed``.

    ``init_student`` (copied, never modified) replaces the seeded initialization,
    which lets several runs share one warm start.
    """
    cfg.validate()
    d = cfg.distill
    freeze(teacher)
    cache = cache or TeacherCache(teacher, train)
    student = copy.deepcopy(init_student) if init_student is not None else initial_student(cfg, train, seed)
    student.train()
    opt = OptimizerState(learning_rate=d.learning_rate, mode=d.optimizer)
    controller = make_controller(d.controller, d.steps, cfg.latf, d.ratio, d.ratio_end)
    initial = initial_distill_loss(student, cache, train, cfg)
    controller.init_ema(initial)

    bs = min(d.batch_size, len(train))
    batches = iterate_batches(train, bs, cfg.student.context_length, np.random.default_rng(seed))
    metrics: List[dict] = []
    writer = _MetricsWriter(Path(out_dir) / "metrics.csv") if out_dir is not None else None
    best_val, best_step, best_state = None, None, None
    student.train()
    try:
        for t in range(1, d.steps + 1):
            step_loss = 0.0
            stats = {"n_valid": 0, "n_selected": 0, "score_sum": 0.0}
            temps_all = []
            states_all = []
            r = None
            for _ in range(d.grad_accum):
                idx, batch = next(batches)
                zt = cache.batch_logits(idx, batch)
                zs = student(torch.as_tensor(batch.input_ids))
                if r is None:
                    # scores come from these pre-update logits; the ratio uses the previous EMA
                    r = controller.update_ratio()
                loss, scores, selected, temps = distill_step_loss(zt, zs, batch, r, cfg)
                (loss / d.grad_accum).backward()
                step_loss += loss.item() / d.grad_accum
                stats["n_valid"] += scores.n_valid
                stats["n_selected"] += int(selected.sum())
                stats["score_sum"] += float(scores.valid.sum())
                temps_all.append(temps.temps)
                states_all.append(temps.states)
            if not math.isfinite(step_loss):
                raise TrainingDiverged(t, step_loss)
            optimizer_step(opt, student)
            zero_grad(student)
            controller.update_ema(step_loss)

            summary = temperature_summary(TemperatureAssignment(np.concatenate(temps_all),
                                                                np.concatenate(states_all)))
            st = controller.state
            row = {
                "step": t, "loss": step_loss, "ema_loss": st.ema_loss, "ratio": r,
                "ref_loss": st.ref_loss, "branch": st.branch,
                "n_valid": stats["n_valid"], "n_selected": stats["n_selected"],
                "score_mean": stats["score_sum"] / max(stats["n_valid"], 1),
                **summary, "val_rouge_l": "",
            }
            if d.eval_every and val and (t % d.eval_every == 0 or t == d.steps):
                score = evaluate_model(student, val, cfg.eval, seeds=[seed]).mean
                row["val_rouge_l"] = score
                if best_val is None or score > best_val:
                    best_val, best_step = score, t
                    best_state = copy.deepcopy(student.state_dict())
                    if out_dir is not None:
                        save_checkpoint(Path(out_dir) / "best.ckpt", student,
                                        {"role": "student", "step": t, "val_rouge_l": score, "seed": seed})
            if out_dir is not None and d.checkpoint_every and t % d.checkpoint_every == 0:
                save_checkpoint(Path(out_dir) / f"step_{t}.ckpt", student, {"role": "student", "step": t, "seed": seed})
            metrics.append(row)
            if writer is not None:
                writer.write(row)
    finally:
        if writer is not None:
            writer.close()
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "final.ckpt", student, {"role": "student", "step": d.steps, "seed": seed})
    best_student = None
    if best_state is not None:
        best_student = copy.deepcopy(student)
        best_student.load_state_dict(best_state)
    return DistillResult(student=student, metrics=metrics, controller=controller, best_val=best_val,
                         best_step=best_step, best_student=best_student, initial_loss=initial)


class _MetricsWriter:
    def __init__(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = open(path, "w", newline="")
        self.writer = csv.DictWriter(self.fh, fieldnames=METRIC_COLUMNS)
        self.writer.writeheader()

    def write(self, row: dict) -> None:
        self.writer.writerow(row)
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def read_metrics(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
