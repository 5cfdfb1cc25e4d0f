"""ROUGE-L scoring, sampled generation, and the token-group diagnostics."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .data import BOS, EOS, PAD, SEP, Batch, ByteTokenizer, PromptResponsePair
from .difficulty import DifficultyScores, IndicatorKind, score_tokens
from .distributions import entropy_rows
from .idts import IdtsConfig, TemperatureMode, assign_temperatures, normalize_scores
from .loss import DistillObjective, sft_loss, token_divergences
from .nn import TinyTransformerLM, gradient_vector, zero_grad


# -- ROUGE-L -------------------------------------------------------------------

def lcs_length(a: Sequence, b: Sequence) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def _tokens(seq) -> list:
    return seq.split() if isinstance(seq, str) else list(seq)


def rouge_l_prf(candidate, reference) -> tuple[float, float, float]:
    """(precision, recall, F) of the LCS between two token sequences; strings are whitespace-split."""
    cand, ref = _tokens(candidate), _tokens(reference)
    if not ref:
        raise ValueError("reference is empty")
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0, 0.0, 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return p, r, 2 * p * r / (p + r)


def rouge_l(candidate, reference) -> float:
    return rouge_l_prf(candidate, reference)[2]


# -- generation ----------------------------------------------------------------

@dataclass
class DecodeConfig:
    temperature: float = 1.0
    top_p: float = 1.0
    max_new_tokens: int = 40

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ValueError("decode temperature must be positive")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must lie in (0, 1]")
        if self.max_new_tokens <= 0:
            raise ValueError("max_new_tokens must be positive")


def _sample(logits: torch.Tensor, cfg: DecodeConfig, gen: torch.Generator) -> torch.Tensor:
    probs = torch.softmax(logits / cfg.temperature, dim=-1)
    if cfg.top_p < 1.0:
        sorted_p, idx = probs.sort(dim=-1, descending=True)
        keep = sorted_p.cumsum(-1) - sorted_p < cfg.top_p
        sorted_p = sorted_p * keep
        probs = torch.zeros_like(probs).scatter(-1, idx, sorted_p)
        probs = probs / probs.sum(-1, keepdim=True)
    return torch.multinomial(probs, 1, generator=gen)[:, 0]


@torch.no_grad()
def generate(model: TinyTransformerLM, prompts: Sequence[Sequence[int]], decode: DecodeConfig,
             seed: int, batch_size: int = 128) -> tuple[list[list[int]], list[bool]]:
    """Ancestral sampling of one response per prompt; returns (responses, truncated flags)."""
    decode.validate()
    ctx = model.spec.context_length
    gen = torch.Generator().manual_seed(int(seed))
    responses: list[list[int]] = []
    truncated: list[bool] = []
    for lo in range(0, len(prompts), batch_size):
        chunk = [[BOS, *p, SEP] for p in prompts[lo:lo + batch_size]]
        if max(len(c) for c in chunk) > ctx:
            raise ValueError("prompt does not fit the model context")
        out = [[] for _ in chunk]
        done = [False] * len(chunk)
        cut = [False] * len(chunk)
        for _ in range(decode.max_new_tokens):
            live = [i for i, d in enumerate(done) if not d]
            if not live:
                break
            seqs = [chunk[i] + out[i] for i in live]
            T = max(len(s) for s in seqs)
            ids = torch.full((len(seqs), T), PAD, dtype=torch.long)
            for r, s in enumerate(seqs):
                ids[r, :len(s)] = torch.tensor(s)
            logits = model(ids)
            last = torch.tensor([len(s) - 1 for s in seqs])
            nxt = _sample(logits[torch.arange(len(seqs)), last], decode, gen)
            for r, i in enumerate(live):
                tok = int(nxt[r])
                if tok == EOS:
                    done[i] = True
                    continue
                out[i].append(tok)
                if len(chunk[i]) + len(out[i]) >= ctx:
                    done[i] = cut[i] = True
        for i, d in enumerate(done):
            if not d:
                cut[i] = True
        responses.extend(out)
        truncated.extend(cut)
    return responses, truncated


@dataclass
class EvalReport:
    scores: Dict[int, List[float]]  # seed -> per-example ROUGE-L F
    decode: DecodeConfig
    truncated: int = 0
    judge: Optional[dict] = None  # pairwise win/tie/loss section, not populated here

    @property
    def seed_means(self) -> Dict[int, float]:
        return {s: float(np.mean(v)) for s, v in self.scores.items()}

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.seed_means.values())))

    @property
    def std(self) -> float:
        return float(np.std(list(self.seed_means.values())))

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "std": self.std,
            "seed_means": {str(k): v for k, v in self.seed_means.items()},
            "scores": {str(k): v for k, v in self.scores.items()},
            "decode": asdict(self.decode),
            "truncated": self.truncated,
            "judge": self.judge,
        }


def evaluate_model(model, eval_set: Sequence[PromptResponsePair], decode: DecodeConfig | None = None,
                   seeds: Sequence[int] = (10, 20, 30, 40, 50),
                   tokenizer: ByteTokenizer | None = None) -> EvalReport:
    """Sample one response per example per seed and score it against the reference.

    ``model`` is a TinyTransformerLM, or any callable ``(prompts, seed) -> list[str]``.
    """
    if not seeds:
        raise ValueError("at least one seed is required")
    decode = decode or DecodeConfig()
    tok = tokenizer or ByteTokenizer()
    scores, n_cut = {}, 0
    refs = [p.response_text or tok.decode(p.response) for p in eval_set]
    for seed in seeds:
        if isinstance(model, TinyTransformerLM):
            outs, cut = generate(model, [p.prompt for p in eval_set], decode, seed)
            texts = [tok.decode(o) for o in outs]
            n_cut += sum(cut)
        else:
            texts = list(model([p.prompt_text for p in eval_set], seed))
        scores[int(seed)] = [rouge_l(t, r) for t, r in zip(texts, refs)]
    return EvalReport(scores=scores, decode=decode, truncated=n_cut)


# -- token-group diagnostics ---------------------------------------------------

GROUPS = ("hard", "mid", "easy")


@dataclass
class GroupDiagnostics:
    labels: np.ndarray                      # per valid token: "hard"/"mid"/"easy"
    norm_share: Dict[str, float] = field(default_factory=dict)
    cos_batch: Dict[str, float] = field(default_factory=dict)
    cos_sft: Dict[str, float] = field(default_factory=dict)
    entropy: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def entropy_gap(self, when: str) -> float:
        return abs(float(self.entropy["hard"][when].mean()) - float(self.entropy["easy"][when].mean()))

    def to_dict(self) -> dict:
        return {
            "norm_share": self.norm_share,
            "cos_batch": self.cos_batch,
            "cos_sft": self.cos_sft,
            "entropy_means": {g: {k: float(v.mean()) for k, v in d.items()} for g, d in self.entropy.items()},
            "group_counts": {g: int((self.labels == g).sum()) for g in np.unique(self.labels)},
            "metadata": self.metadata,
        }


def tercile_labels(values: np.ndarray) -> tuple[np.ndarray, list[float]]:
    """Split by rank into thirds: lowest third easy, highest third hard."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    labels = np.empty(values.size, dtype=object)
    bounds = []
    for name, part in zip(("easy", "mid", "hard"), np.array_split(order, 3)):
        labels[part] = name
        if part.size:
            bounds.append(float(values[part].max()))
    return labels.astype(str), bounds


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def group_gradient_stats(group_grads: Dict[str, np.ndarray], batch_grad: np.ndarray,
                         sft_grad: Optional[np.ndarray] = None) -> tuple[dict, dict, dict]:
    """Norm shares (summing to 1) and cosines of each group gradient."""
    norms = {g: float(np.linalg.norm(v)) for g, v in group_grads.items()}
    total = sum(norms.values())
    share = {g: (n / total if total > 0 else 0.0) for g, n in norms.items()}
    cos_b = {g: cosine(v, batch_grad) for g, v in group_grads.items()}
    cos_s = {g: cosine(v, sft_grad) for g, v in group_grads.items()} if sft_grad is not None else {}
    return share, cos_b, cos_s


def gradient_alignment_report(model: TinyTransformerLM, batch: Batch, teacher_logits: torch.Tensor,
                              scores: Optional[DifficultyScores] = None,
                              objective: Optional[DistillObjective] = None,
                              labels: Optional[np.ndarray] = None) -> GroupDiagnostics:
    """Backpropagate each difficulty group's share of the unselected loss separately."""
    objective = objective or DistillObjective()
    ids = torch.as_tensor(batch.input_ids)
    mask = torch.as_tensor(batch.mask)
    teacher_logits = teacher_logits.detach()
    if scores is None:
        with torch.no_grad():
            scores = score_tokens(teacher_logits, model(ids), IndicatorKind.HELLINGER, mask=batch.mask)
    valid_scores = scores.scores[batch.mask]
    bounds: list = []
    if labels is None:
        labels, bounds = tercile_labels(valid_scores)
    n = int(mask.sum())

    def grad_of(select: Optional[np.ndarray]) -> np.ndarray:
        zero_grad(model)
        logits = model(ids)
        per_tok = token_divergences(teacher_logits[mask], logits[mask],
                                    torch.ones(n, dtype=torch.float64), objective)
        if select is not None:
            per_tok = per_tok[torch.as_tensor(select)]
        (per_tok.sum() / n).backward()
        return gradient_vector(model)

    group_grads = {g: grad_of(labels == g) for g in GROUPS if (labels == g).any()}
    batch_grad = grad_of(None)
    zero_grad(model)
    sft_loss(model(ids), batch.target_ids, batch.mask).backward()
    sft_grad = gradient_vector(model)
    zero_grad(model)
    share, cos_b, cos_s = group_gradient_stats(group_grads, batch_grad, sft_grad)
    return GroupDiagnostics(labels=labels, norm_share=share, cos_batch=cos_b, cos_sft=cos_s,
                            metadata={"grouping": "terciles", "tercile_upper_bounds": bounds,
                                      "sft_reference": "same batch",
                                      "group_norms": {g: float(np.linalg.norm(v)) for g, v in group_grads.items()},
                                      "batch_norm": float(np.linalg.norm(batch_grad)),
                                      "absent_groups": [g for g in GROUPS if g not in group_grads]})


@torch.no_grad()
def entropy_histogram_report(teacher_logits, student_logits, mask=None,
                             idts: Optional[IdtsConfig] = None, bins: int = 20) -> GroupDiagnostics:
    """Student entropy per token at tau=1 and at its IDTS temperature, split hard/easy at the median score."""
    idts = idts or IdtsConfig()
    scores = score_tokens(teacher_logits, student_logits, IndicatorKind.HELLINGER, mask=mask)
    zs = student_logits if isinstance(student_logits, torch.Tensor) else torch.as_tensor(np.asarray(student_logits))
    if zs.ndim == 2:
        zs = zs[None]
    m = torch.as_tensor(scores.mask)
    states = normalize_scores(scores.valid)
    temps = assign_temperatures(states, idts).temps
    rows = zs[m]
    before = entropy_rows(rows).numpy()
    after = entropy_rows(rows, torch.tensor(temps)[:, None]).numpy()
    labels = np.where(states > 0, "hard", "easy")
    ent = {g: {"before": before[labels == g], "after": after[labels == g], "temperature": temps[labels == g]}
           for g in ("hard", "easy") if (labels == g).any()}
    hi = float(max(before.max(), after.max()))
    edges = np.linspace(0.0, hi if hi > 0 else 1.0, bins + 1)
    diag = GroupDiagnostics(labels=labels, entropy=ent,
                            metadata={"grouping": "median split on normalized score",
                                      "c": idts.c, "tau_base": idts.tau_base,
                                      "mode": TemperatureMode(idts.mode).value,
                                      "bin_edges": edges.tolist()})
    return diag


def histogram_rows(diag: GroupDiagnostics) -> list[dict]:
    """Plot-ready (group, series, bin_left, bin_right, count) rows."""
    edges = np.asarray(diag.metadata["bin_edges"])
    rows = []
    for g, series in diag.entropy.items():
        for name in ("before", "after"):
            counts, _ = np.histogram(series[name], bins=edges)
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                rows.append({"group": g, "series": f"entropy_{name}", "bin_left": float(lo),
                             "bin_right": float(hi), "count": int(c)})
        t = series["temperature"]
        t_edges = np.linspace(t.min(), t.max() + 1e-12, len(edges))
        counts, _ = np.histogram(t, bins=t_edges)
        for lo, hi, c in zip(t_edges[:-1], t_edges[1:], counts):
            rows.append({"group": g, "series": "temperature", "bin_left": float(lo),
                         "bin_right": float(hi), "count": int(c)})
    return rows


def write_report(diag_or_report, out_dir: Path, kind: str) -> tuple[Path, Optional[Path]]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jpath = out_dir / f"{kind}.json"
    jpath.write_text(json.dumps(diag_or_report.to_dict(), indent=2, default=float))
    cpath = None
    if isinstance(diag_or_report, GroupDiagnostics) and diag_or_report.entropy:
        cpath = out_dir / f"{kind}.csv"
        rows = histogram_rows(diag_or_report)
        with open(cpath, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["group", "series", "bin_left", "bin_right", "count"])
            w.writeheader()
            w.writerows(rows)
    return jpath, cpath
