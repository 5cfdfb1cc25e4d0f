"""Tokenizer, prompt/response records and batching."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Sequence, Union

import numpy as np

log = logging.getLogger(__name__)

PAD, BOS, SEP, EOS, NEWLINE = 0, 1, 2, 3, 4
_FIRST_CHAR = 5


class DatasetError(ValueError):
    pass


class ByteTokenizer:
    """Printable ASCII plus newline and four control ids: 100 symbols total."""

    vocab_size = _FIRST_CHAR + 95

    def encode(self, text: str) -> List[int]:
        ids = []
        for i, ch in enumerate(text):
            o = ord(ch)
            if ch == "\n":
                ids.append(NEWLINE)
            elif 32 <= o <= 126:
                ids.append(_FIRST_CHAR + o - 32)
            else:
                raise ValueError(f"character {ch!r} at offset {i} is not printable ASCII")
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        out = []
        for t in ids:
            t = int(t)
            if t == NEWLINE:
                out.append("\n")
            elif t >= _FIRST_CHAR:
                out.append(chr(t - _FIRST_CHAR + 32))
            elif t == EOS:
                break
        return "".join(out)


@dataclass(frozen=True)
class PromptResponsePair:
    prompt: List[int]
    response: List[int]
    prompt_text: str = ""
    response_text: str = ""


def make_pair(tok: ByteTokenizer, prompt: str, response: str) -> PromptResponsePair:
    return PromptResponsePair(tok.encode(prompt), tok.encode(response), prompt, response)


def load_dataset(path: Union[str, Path], tokenizer: ByteTokenizer | None = None) -> List[PromptResponsePair]:
    """Read JSON-lines records with "prompt" and "response" string fields."""
    tok = tokenizer or ByteTokenizer()
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: no such file")
    pairs, dropped = [], 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise DatasetError(f"{path}:{lineno}: record is not an object")
            for key in ("prompt", "response"):
                if not isinstance(rec.get(key), str):
                    raise DatasetError(f"{path}:{lineno}: missing or non-string field {key!r}")
            if not rec["response"]:
                dropped += 1
                continue
            try:
                pairs.append(make_pair(tok, rec["prompt"], rec["response"]))
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
    if dropped:
        log.warning("%s: dropped %d records with empty responses", path, dropped)
    if not pairs:
        raise DatasetError(f"{path}: dataset is empty")
    return pairs


def write_dataset(path: Union[str, Path], pairs: Sequence[PromptResponsePair]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps({"prompt": p.prompt_text, "response": p.response_text}) + "\n")


# -- synthetic corpus --------------------------------------------------------

WORDS = ["ant", "bee", "cat", "dog", "elk", "fox", "gnu", "hen", "owl", "pig",
         "ram", "yak", "cow", "eel", "bat", "emu"]
COLORS = ["red", "blue", "green", "gold", "gray", "pink"]
FRUITS = ["apple", "pear", "plum", "fig", "lime", "kiwi", "date", "melon"]


def _phrase(rng, variants, varied):
    # with varied phrasing any template is a correct answer; otherwise always the first
    return variants[int(rng.integers(len(variants)))] if varied else variants[0]


def _task_reverse(rng, varied=False):
    w = list(rng.choice(WORDS, size=rng.integers(3, 5), replace=False))
    ans = " ".join(reversed(w))
    return "reverse " + " ".join(w), _phrase(rng, [ans, f"reversed: {ans}", f"it is {ans}"], varied)


def _task_sort(rng, varied=False):
    w = list(rng.choice(WORDS, size=rng.integers(3, 5), replace=False))
    ans = " ".join(sorted(w))
    return "sort " + " ".join(w), _phrase(rng, [ans, f"sorted: {ans}", f"it is {ans}"], varied)


def _task_add(rng, varied=False):
    a, b = int(rng.integers(10, 50)), int(rng.integers(10, 50))
    return f"add {a} {b}", _phrase(rng, [f"{a} plus {b} is {a + b}", f"the sum is {a + b}", f"{a + b}"], varied)


def _task_color(rng, varied=False):
    # fixed animal -> color table, learned by memorization
    w = str(rng.choice(WORDS))
    color = COLORS[WORDS.index(w) % len(COLORS)]
    return f"color of {w}", _phrase(rng, [f"the {w} is {color}", f"{color}", f"it is {color}"], varied)


def _task_fruit(rng, varied=False):
    # open-ended: any distinct fruits are correct
    n = int(rng.integers(2, 4))
    f = list(rng.choice(FRUITS, size=n, replace=False))
    return f"name {n} fruits", " and ".join(f)


def _task_repeat(rng, varied=False):
    w = str(rng.choice(WORDS))
    n = int(rng.integers(2, 5))
    ans = " ".join([w] * n)
    return f"say {w} {n} times", _phrase(rng, [ans, f"ok: {ans}"], varied)


TASKS = (_task_reverse, _task_sort, _task_add, _task_color, _task_fruit, _task_repeat)


def synthetic_corpus(n: int, seed: int = 0, varied: bool = False) -> List[tuple[str, str]]:
    """Templated question/answer strings mixing deterministic and open-ended tasks.

    ``varied`` draws each answer's phrasing from a few templates, so the
    teacher's next-token distribution is genuinely uncertain at phrasing
    positions and confident on the content.
    """
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        task = TASKS[int(rng.integers(len(TASKS)))]
        out.append(task(rng, varied))
    return out


def synthetic_pairs(n: int, seed: int = 0, tokenizer: ByteTokenizer | None = None,
                    varied: bool = False) -> List[PromptResponsePair]:
    tok = tokenizer or ByteTokenizer()
    return [make_pair(tok, p, r) for p, r in synthetic_corpus(n, seed, varied)]


def is_validation(prompt_text: str, fraction: float = 0.1) -> bool:
    h = int.from_bytes(hashlib.sha256(prompt_text.encode()).digest()[:8], "big")
    return (h % 10_000) < fraction * 10_000


def split_pairs(pairs: Sequence[PromptResponsePair], fraction: float = 0.1):
    """Deterministic train/validation split keyed on the prompt text."""
    train, val = [], []
    for p in pairs:
        key = p.prompt_text or json.dumps(p.prompt)
        (val if is_validation(key, fraction) else train).append(p)
    return train, val


# -- batching ----------------------------------------------------------------

@dataclass
class Batch:
    input_ids: np.ndarray   # (B, T) model inputs
    target_ids: np.ndarray  # (B, T) next-token targets
    mask: np.ndarray        # (B, T) True where the target is a response token or EOS
    truncated: np.ndarray   # (B,) response cut to fit the context

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())


def make_batch(pairs: Sequence[PromptResponsePair], context_length: int) -> Batch:
    seqs, starts, truncated = [], [], []
    for p in pairs:
        seq = [BOS, *p.prompt, SEP, *p.response, EOS]
        start = len(p.prompt) + 1  # input position holding SEP predicts the first response token
        if start >= context_length:
            raise DatasetError(f"prompt of length {len(p.prompt)} does not fit context {context_length}")
        cut = len(seq) - 1 > context_length
        seqs.append(seq[: context_length + 1])
        starts.append(start)
        truncated.append(cut)
    T = max(len(s) for s in seqs) - 1
    B = len(seqs)
    inp = np.full((B, T), PAD, dtype=np.int64)
    tgt = np.full((B, T), PAD, dtype=np.int64)
    mask = np.zeros((B, T), dtype=bool)
    for b, (s, start) in enumerate(zip(seqs, starts)):
        n = len(s) - 1
        inp[b, :n] = s[:-1]
        tgt[b, :n] = s[1:]
        mask[b, start:n] = True
    return Batch(inp, tgt, mask, np.asarray(truncated))


def iterate_batches(pairs: Sequence[PromptResponsePair], batch_size: int, context_length: int,
                    rng: np.random.Generator) -> Iterator[tuple[np.ndarray, Batch]]:
    """Endless shuffled epochs; yields (example indices, batch)."""
    n = len(pairs)
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            idx = order[i:i + batch_size]
            yield idx, make_batch([pairs[j] for j in idx], context_length)
