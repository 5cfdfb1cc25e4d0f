"""Acceptance suite: one test group per criterion, summarised as PASS/FAIL lines at the end of the run.

Criteria 8, 9 and 11 train a 4-layer teacher once and cache it under
``$ADAKD_ACCEPTANCE_CACHE`` (default ``~/.cache/adakd/acceptance``), keyed by the
teacher and data config.
"""
import decimal
import hashlib
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from adakd.config import load_config, with_overrides
from adakd.data import iterate_batches
from adakd.distributions import (
    entropy,
    entropy_temp_derivative,
    hellinger_distance,
    hellinger_rows,
    softmax_with_temperature,
)
from adakd.evaluation import entropy_histogram_report, rouge_l_prf
from adakd.experiments import compare_methods
from adakd.idts import IdtsConfig, gradient_scaling_fit, normalize_scores, temperatures_for
from adakd.latf import DECREASE, INCREASE, KEEP, WARMUP, LatfConfig, LatfController, select_tokens
from adakd.loss import selective_distill_loss
from adakd.nn import ModelSpec, OptimizerState, TinyTransformerLM, load_checkpoint, optimizer_step, zero_grad
from adakd.trainer import TeacherCache, build_data, distill_step_loss, run_distillation, train_teacher
from adakd.data import synthetic_pairs

from conftest import central_difference_check

SEEDS = [10, 20, 30, 40, 50]

# Desk-scale protocol for criteria 8, 9 and 11 (defaults plus these overrides).
PROTOCOL = []


def criterion(number, title):
    return pytest.mark.criterion(number, title)


# -- 1: reduction to baseline ----------------------------------------------------

@criterion(1, "r=1, c=0, tau_base=1 reproduces a plain reverse-KL loop for 200 steps (1e-9)")
def test_c01_reduction_to_plain_reverse_kl():
    cfg = load_config(overrides=[
        "teacher.context_length=40", "teacher.layer_count=1", "teacher.head_count=2", "teacher.model_width=16",
        "student.context_length=40", "student.layer_count=2", "student.head_count=2", "student.model_width=16",
        "distill.steps=200", "distill.batch_size=8", "distill.controller=fixed", "distill.ratio=1.0",
        "idts.c=0.0", "idts.tau_base=1.0", "distill.ema_init_batches=1",
    ])
    pairs = synthetic_pairs(200, seed=0)
    teacher = TinyTransformerLM(cfg.teacher, seed=1)
    cache = TeacherCache(teacher, pairs)
    ours = [row["loss"] for row in run_distillation(cfg, teacher, pairs, seed=5, cache=cache).metrics]
    assert len(ours) == 200

    student = TinyTransformerLM(cfg.student, seed=5)
    opt = OptimizerState(learning_rate=cfg.distill.learning_rate)
    batches = iterate_batches(pairs, 8, 40, np.random.default_rng(5))
    worst = 0.0
    for step, expected in enumerate(ours, 1):
        idx, batch = next(batches)
        m = torch.as_tensor(batch.mask)
        log_p = torch.log_softmax(cache.batch_logits(idx, batch)[m], -1)
        log_q = torch.log_softmax(student(torch.as_tensor(batch.input_ids))[m], -1)
        loss = (log_q.exp() * (log_q - log_p)).sum(-1).mean()
        loss.backward()
        optimizer_step(opt, student)
        zero_grad(student)
        worst = max(worst, abs(loss.item() - expected))
        assert abs(loss.item() - expected) <= 1e-9, f"step {step}"
    print(f"criterion 1: max |diff| over 200 steps = {worst:.2e}")


# -- 2: Hellinger oracle ---------------------------------------------------------

def _hellinger_scalar(p, q):
    return math.sqrt(sum((math.sqrt(a) - math.sqrt(b)) ** 2 for a, b in zip(p, q)) / 2.0)


@criterion(2, "Hellinger matches a scalar oracle on 10,000 pairs (1e-12), bounded, symmetric")
def test_c02_hellinger_oracle():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(10_000):
        v = int(rng.integers(2, 40))
        alpha = rng.choice([0.05, 1.0, 10.0])
        p, q = rng.dirichlet(np.full(v, alpha)), rng.dirichlet(np.full(v, alpha))
        h = hellinger_distance(p, q)
        ref = _hellinger_scalar(p, q)
        worst = max(worst, abs(h - ref))
        assert abs(h - ref) <= 1e-12
        assert 0.0 <= h <= 1.0
        assert h == hellinger_distance(q, p)
    print(f"criterion 2: max |diff| = {worst:.2e}")


@criterion(2, "Hellinger matches a scalar oracle on 10,000 pairs (1e-12), bounded, symmetric")
def test_c02_batched_rows_match_oracle():
    rng = np.random.default_rng(22)
    p = rng.dirichlet(np.ones(17), size=2000)
    q = rng.dirichlet(np.ones(17), size=2000)
    lp, lq = torch.log(torch.as_tensor(p)), torch.log(torch.as_tensor(q))
    rows = hellinger_rows(lp, lq).numpy()
    ref = np.array([_hellinger_scalar(a, b) for a, b in zip(p, q)])
    assert np.max(np.abs(rows - ref)) <= 1e-12
    assert np.all((rows >= 0) & (rows <= 1))
    assert np.array_equal(rows, hellinger_rows(lq, lp).numpy())


# -- 3: entropy monotone in temperature -----------------------------------------

def _entropy_decimal(z, tau, ctx):
    """Entropy of softmax(z / tau) in 30-digit decimal arithmetic."""
    with decimal.localcontext(ctx):
        zs = [decimal.Decimal(float(x)) / tau for x in z]
        top = max(zs)
        w = [(x - top).exp() for x in zs]
        total = sum(w)
        return -sum((wi / total) * (wi / total).ln() for wi in w if wi > 0)


@criterion(3, "entropy strictly increases in tau; dH/dtau matches finite differences (1e-6 rel)")
def test_c03_entropy_monotone_and_derivative():
    rng = np.random.default_rng(3)
    taus = [0.25, 0.5, 1.0, 2.0, 4.0]
    h = decimal.Decimal("1e-10")  # truncation ~h^2; rounding ~10^-prec / h

    def central_difference(z, t):
        td = decimal.Decimal(t)
        for prec in (30, 60):  # near-deterministic softmaxes have tiny derivatives
            ctx = decimal.Context(prec=prec)
            fd = (_entropy_decimal(z, td + h, ctx) - _entropy_decimal(z, td - h, ctx)) / (2 * h)
            if abs(fd) > decimal.Decimal(10) ** (20 - prec):  # rounding error under 1e-10 of |fd|
                break
        return float(fd)

    worst = 0.0
    for _ in range(1000):
        z = rng.normal(scale=float(rng.choice([0.5, 2.0, 5.0])), size=int(rng.integers(2, 40)))
        ents = [entropy(softmax_with_temperature(z, t)) for t in taus]
        assert all(b > a for a, b in zip(ents, ents[1:])), ents
        for t in taus:
            fd = central_difference(z, t)
            d = entropy_temp_derivative(z, t)
            rel = abs(d - fd) / abs(fd)
            worst = max(worst, rel)
            assert rel <= 1e-6, (t, d, fd)
    print(f"criterion 3: max relative error = {worst:.2e}")


# -- 4: gradient correctness -----------------------------------------------------

def _selective_setup(seed=4):
    cfg = load_config(overrides=["idts.c=0.5", "distill.ratio=0.6"])
    spec = ModelSpec(vocab_size=24, context_length=10, layer_count=2, head_count=2, model_width=12)
    student = TinyTransformerLM(spec, seed=seed)
    gen = torch.Generator().manual_seed(seed)
    ids = torch.randint(1, 24, (3, 10), generator=gen)
    ids[2, 7:] = 0  # padding
    zt = 2.0 * torch.randn(3, 10, 24, dtype=torch.float64, generator=gen)
    mask = np.ones((3, 10), dtype=bool)
    mask[:, :2] = False  # prompt positions
    mask[2, 6:] = False
    return cfg, student, ids, zt, mask


@criterion(4, "selective loss gradients match finite differences; unselected positions get zero gradient")
def test_c04_full_loss_finite_differences():
    cfg, student, ids, zt, mask = _selective_setup()
    from adakd.difficulty import score_tokens
    with torch.no_grad():
        scores = score_tokens(zt, student(ids), cfg.distill.indicator, mask=mask)
    selected = select_tokens(scores, 0.6)
    temps = temperatures_for(scores.scores[selected], cfg.idts).temps
    assert 0 < selected.sum() < mask.sum() and len(set(temps.round(12))) > 2

    # selection and temperatures are constants of the objective (no gradient flows into them)
    def loss_fn():
        return selective_distill_loss(zt, student(ids), selected, temps, cfg.objective)

    failures = central_difference_check(student, loss_fn, h=1e-5, rtol=1e-4, atol=1e-8)
    n = sum(p.numel() for p in student.parameters())
    print(f"criterion 4: {n} parameters checked, {len(failures)} mismatches")
    assert not failures, failures[:5]


@criterion(4, "selective loss gradients match finite differences; unselected positions get zero gradient")
def test_c04_masked_positions_get_exactly_zero_gradient():
    cfg, student, ids, zt, mask = _selective_setup(seed=14)
    zs = student(ids).detach().requires_grad_(True)
    from adakd.data import Batch
    batch = Batch(input_ids=ids.numpy(), target_ids=np.zeros_like(ids.numpy()), mask=mask,
                  truncated=np.zeros(3, dtype=bool))
    loss, _, selected, _ = distill_step_loss(zt, zs, batch, 0.6, cfg)
    loss.backward()
    grad_norm = zs.grad.norm(dim=-1).numpy()
    assert np.all(grad_norm[~selected] == 0.0)
    assert np.all(grad_norm[selected] > 0.0)
    assert not selected[~mask].any()


# -- 5: gradient scaling law -----------------------------------------------------

@criterion(5, "log||grad KL||^2 vs log(s^2/tau^4) has slope 1 +/- 0.15")
def test_c05_gradient_scaling_law():
    fit = gradient_scaling_fit(n_pairs=64, c=0.5, seed=5)
    print(f"criterion 5: slope {fit['slope']:.4f}, r^2 {fit['r2']:.4f}, {fit['n_points']} points")
    assert abs(fit["slope"] - 1.0) <= 0.15


# -- 6: LATF traces ----------------------------------------------------------------

W, D, I, K = WARMUP, DECREASE, INCREASE, KEEP
INF = math.inf

# Hand-simulated with beta=0.5, epsilon=0.25, delta=0.5, r_min=0.25; every value is dyadic, so exact.
# columns: loss fed after the ratio update, expected r, branch, reference loss, EMA after the step
TRACE_ALL_BRANCHES = dict(
    config=dict(beta=0.5, epsilon=0.25, delta=0.5, r_min=0.25, warmup_steps=2), initial=8.0,
    rows=[
        (8, 1.0, W, INF, 8), (8, 1.0, W, INF, 8),
        (4, 0.5, D, 8, 6),           # reference unset: first comparison always shrinks
        (4, 0.5, K, 8, 5),           # 6 is not strictly below 0.75 * 8
        (3, 0.25, D, 5, 4),
        (2, 0.25, K, 5, 3),          # 4 inside the band [3.75, 6.25]
        (2, 0.25, K, 5, 2.5),        # would decrease, clamped at r_min: no reset
        (8, 0.25, K, 5, 5.25),
        (9.75, 0.25, K, 5, 7.5),     # 5.25 inside the band
        (7.5, 0.375, I, 7.5, 7.5),
        (12.5, 0.375, K, 7.5, 10),
        (14, 0.5625, I, 10, 12),
        (16, 0.5625, K, 10, 14),
        (20, 0.84375, I, 14, 17),
        (19, 0.84375, K, 14, 18),
        (30, 1.0, I, 18, 24),        # 1.265625 clamped to 1.0, still a change: reset
        (24, 1.0, K, 18, 24),        # would increase, already at 1.0: no reset
        (8, 1.0, K, 18, 16),
        (6, 1.0, K, 18, 11),
        (11, 0.5, D, 11, 11),
    ],
)

TRACE_FLAT_LOSS = dict(
    config=dict(beta=0.5, epsilon=0.25, delta=0.5, r_min=0.25, warmup_steps=0), initial=1.0,
    rows=[(1, 0.5, D, 1, 1)] + [(1, 0.5, K, 1, 1)] * 19,
)

TRACE_COLLAPSING_LOSS = dict(
    config=dict(beta=0.5, epsilon=0.25, delta=0.5, r_min=0.25, warmup_steps=0), initial=1024.0,
    rows=[(0, 0.5, D, 1024, 512), (0, 0.25, D, 512, 256)]
    + [(0, 0.25, K, 512, 1024 / 2 ** t) for t in range(3, 21)],
)

# warm-up from the fraction: round(0.1 * 20) = 2 steps
TRACE_FRACTION_WARMUP = dict(
    config=dict(beta=0.5, epsilon=0.25, delta=0.5, r_min=0.25, warmup_fraction=0.1), initial=4.0,
    rows=[(4, 1.0, W, INF, 4), (4, 1.0, W, INF, 4), (4, 0.5, D, 4, 4)] + [(4, 0.5, K, 4, 4)] * 17,
)


@criterion(6, "LATF controller matches hand-simulated 20-step traces exactly")
@pytest.mark.parametrize("trace", [TRACE_ALL_BRANCHES, TRACE_FLAT_LOSS, TRACE_COLLAPSING_LOSS,
                                   TRACE_FRACTION_WARMUP], ids=["branches", "flat", "collapsing", "fraction"])
def test_c06_latf_traces(trace):
    ctl = LatfController(LatfConfig(**trace["config"]), total_steps=20)
    ctl.init_ema(trace["initial"])
    got = []
    for loss, *_ in trace["rows"]:
        r = ctl.update_ratio()
        st = ctl.state
        got.append((r, st.branch, st.ref_loss, ctl.update_ema(loss)))
    expected = [(r, b, ref, ema) for _, r, b, ref, ema in trace["rows"]]
    assert len(got) == 20
    assert got == expected


# -- 7: IDTS contracts -------------------------------------------------------------

@criterion(7, "IDTS: exact range containment, scale invariance, strict anti-monotonicity")
def test_c07_idts_contracts():
    rng = np.random.default_rng(7)
    for _ in range(10_000):
        tau_base = float(rng.uniform(0.1, 4.0))
        c = float(rng.uniform(0.0, 3.0))
        n = int(rng.integers(1, 40))
        p = rng.dirichlet(np.ones(16), size=n)
        q = rng.dirichlet(np.full(16, rng.choice([0.3, 1.0, 5.0])), size=n)
        s = np.sqrt(((np.sqrt(p) - np.sqrt(q)) ** 2).sum(1) / 2)
        temps = temperatures_for(s, IdtsConfig(tau_base=tau_base, c=c)).temps
        lo, hi = tau_base * math.exp(-c), tau_base * math.exp(c)
        assert np.all(temps >= lo) and np.all(temps <= hi)

        k = float(np.exp(rng.uniform(-10, 10)))
        assert np.allclose(normalize_scores(k * s), normalize_scores(s), rtol=0, atol=1e-12)

        if c > 0:
            order = np.argsort(s)
            ss, tt = s[order], temps[order]
            strictly_harder = np.diff(ss) > 0
            assert np.all(np.diff(tt)[strictly_harder] < 0)


# -- 8, 9: desk-scale direction --------------------------------------------------

def _cache_dir() -> Path:
    root = os.environ.get("ADAKD_ACCEPTANCE_CACHE", str(Path.home() / ".cache" / "adakd" / "acceptance"))
    return Path(root)


@pytest.fixture(scope="session")
def desk_setup():
    cfg = load_config(overrides=PROTOCOL)
    train, val = build_data(cfg)
    key = hashlib.sha256(json.dumps({"teacher": cfg.to_dict()["teacher"], "train": cfg.to_dict()["teacher_training"],
                                     "data": cfg.to_dict()["data"]}, sort_keys=True).encode()).hexdigest()[:12]
    path = _cache_dir() / f"teacher-{key}.ckpt"
    timing = path.with_suffix(".json")
    if path.exists() and timing.exists():
        teacher, _ = load_checkpoint(path)
        seconds = json.loads(timing.read_text())["train_seconds"]
    else:
        start = time.perf_counter()
        teacher = train_teacher(cfg, train, path.parent)
        seconds = time.perf_counter() - start
        (path.parent / "teacher.ckpt").replace(path)
        timing.write_text(json.dumps({"train_seconds": seconds}))
    return cfg, teacher, train, val, seconds


@pytest.fixture(scope="session")
def desk_comparison(desk_setup):
    cfg, teacher, train, val, teacher_seconds = desk_setup
    start = time.perf_counter()
    result = compare_methods(cfg, teacher, train, val, SEEDS)
    elapsed = teacher_seconds + time.perf_counter() - start  # a cached teacher still counts
    for m in result.scores:
        print(f"{m:8s} " + " ".join(f"{x:.4f}" for x in result.scores[m]) + f"  mean {result.mean(m):.4f}")
    return result, elapsed


@pytest.mark.slow
@criterion(8, "desk scale: AdaKD >= IDTS-only >= RKD and AdaKD - RKD >= 0.005 ROUGE-L, within 30 min")
def test_c08_directional_result(desk_comparison):
    result, elapsed = desk_comparison
    adakd, idts, rkd = result.mean("adakd"), result.mean("idts"), result.mean("rkd")
    print(f"criterion 8: adakd {adakd:.4f}, idts {idts:.4f}, rkd {rkd:.4f}, {elapsed / 60:.1f} min")
    assert elapsed <= 30 * 60
    assert adakd >= idts >= rkd
    assert adakd - rkd >= 0.005


@pytest.mark.slow
@criterion(9, "ablation: sign-flipped temperatures score below inverse mode")
def test_c09_flipped_below_inverse(desk_comparison):
    result, _ = desk_comparison
    print(f"criterion 9: inverse {result.mean('adakd'):.4f}, flipped {result.mean('flipped'):.4f}")
    assert result.mean("flipped") < result.mean("adakd")


# -- 10: ROUGE-L oracle ------------------------------------------------------------

def _lcs_table(a, b):
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[-1][-1]


@criterion(10, "ROUGE-L P/R/F match a quadratic-DP LCS oracle exactly on 1,000 pairs")
def test_c10_rouge_oracle():
    rng = np.random.default_rng(10)
    words = "the a cat dog sat on mat red blue is".split()
    for _ in range(1000):
        cand = " ".join(rng.choice(words, size=int(rng.integers(0, 15))))
        ref = " ".join(rng.choice(words, size=int(rng.integers(1, 15))))
        c, r = cand.split(), ref.split()
        lcs = _lcs_table(c, r)
        if lcs == 0:
            expected = (0.0, 0.0, 0.0)
        else:
            p, rec = lcs / len(c), lcs / len(r)
            expected = (p, rec, 2 * p * rec / (p + rec))
        assert rouge_l_prf(cand, ref) == expected


# -- 11: entropy gap on mid-training checkpoints ------------------------------------

@pytest.mark.slow
@criterion(11, "mid-training: post-IDTS hard/easy entropy gap below pre-IDTS gap on every batch (c=0.5)")
def test_c11_entropy_gap_shrinks_mid_training(desk_setup, tmp_path):
    cfg, teacher, train, *_ = desk_setup
    cfg = with_overrides(cfg, ["distill.checkpoint_every=200", "idts.c=0.5"])
    run_distillation(cfg, teacher, train, seed=SEEDS[0], out_dir=tmp_path)
    cache = TeacherCache(teacher, train)
    checked = 0
    for ckpt in ("step_200", "step_400"):
        student, _ = load_checkpoint(tmp_path / f"{ckpt}.ckpt")
        batches = iterate_batches(train, 32, cfg.student.context_length, np.random.default_rng(11))
        for _ in range(8):
            idx, batch = next(batches)
            with torch.no_grad():
                zs = student(torch.as_tensor(batch.input_ids))
            diag = entropy_histogram_report(cache.batch_logits(idx, batch), zs, batch.mask, cfg.idts)
            before, after = diag.entropy_gap("before"), diag.entropy_gap("after")
            assert after < before, (ckpt, before, after)
            checked += 1
    print(f"criterion 11: {checked} batches, gap shrank on all")
