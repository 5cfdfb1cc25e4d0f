"""Command-line entry point: ``adakd <command> [flags]``.

Exit codes: 0 success, 2 usage, 3 configuration, 4 runtime failure.
Failures print one JSON line to stderr: {"error": <kind>, "message": ..., ["field": ...]}.
"""
from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import __version__
from .config import ConfigError, DistillRunConfig, load_config, save_config
from .data import make_batch
from .difficulty import IndicatorKind, score_tokens
from .evaluation import entropy_histogram_report, evaluate_model, gradient_alignment_report, write_report
from .nn import CheckpointError, config_hash, load_checkpoint
from .selfcheck import run_selfcheck
from .trainer import TeacherCache, build_data, run_distillation, train_teacher

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3, 4
OUT_ROOT_ENV = "ADAKD_OUT_ROOT"

log = logging.getLogger("adakd")


class UsageError(Exception):
    pass


def code_version() -> dict:
    """Package version plus a digest of the installed sources."""
    digest = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return {"version": __version__, "source_sha256": digest.hexdigest()[:16]}


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


class RunDir:
    """An output directory with a config snapshot and a manifest tracking run status."""

    def __init__(self, path: Path, cfg: DistillRunConfig, command: str, seed: Optional[int], force: bool):
        self.path = Path(path)
        self.manifest_path = self.path / "manifest.json"
        if self.manifest_path.exists() and not force:
            status = json.loads(self.manifest_path.read_text()).get("status")
            if status == "completed":
                raise UsageError(f"{self.path} holds a completed run; pass --force to overwrite")
        self.path.mkdir(parents=True, exist_ok=True)
        save_config(cfg, self.path / "config.json")
        self.manifest = {
            "command": command, "seed": seed, "status": "running",
            "config_hash": config_hash(cfg.to_dict()), "code": code_version(),
            "started_at": _now(), "finished_at": None,
            "argv": sys.argv[1:],
        }
        self._write()

    def _write(self) -> None:
        self.manifest_path.write_text(json.dumps(self.manifest, indent=2))

    def finish(self, status: str = "completed", **extra) -> None:
        self.manifest.update(status=status, finished_at=_now(), **extra)
        self._write()


def default_out(command: str, cfg: DistillRunConfig) -> Path:
    root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
    return root / f"{command}-{config_hash(cfg.to_dict())[:8]}"


def resolve_checkpoint(name: str, out: Path) -> Path:
    """A path, or a bare name such as ``step_500`` looked up in the run directory."""
    p = Path(name)
    if p.suffix == ".ckpt" and p.exists():
        return p
    stem = p.name if p.suffix == ".ckpt" else f"{p.name}.ckpt"
    direct = out / stem
    if direct.exists():
        return direct
    matches = sorted(out.glob(f"seed_*/{stem}"))
    if len(matches) == 1:
        return matches[0]
    if matches:
        raise UsageError(f"checkpoint {name!r} is ambiguous: {', '.join(str(m) for m in matches)}")
    raise UsageError(f"checkpoint {name!r} not found under {out}")


def _load_teacher(cfg: DistillRunConfig, out: Path, train):
    if cfg.teacher_checkpoint:
        teacher, _ = load_checkpoint(cfg.teacher_checkpoint)
        return teacher
    existing = out / "teacher.ckpt"
    if existing.exists():
        teacher, _ = load_checkpoint(existing)
        return teacher
    return None


# -- commands ------------------------------------------------------------------

def cmd_train_teacher(args, cfg: DistillRunConfig) -> int:
    if args.seed is not None:
        cfg.teacher_training.seed = args.seed
    out = args.out or default_out("teacher", cfg)
    run = RunDir(out, cfg, "train-teacher", cfg.teacher_training.seed, args.force)
    train, _ = build_data(cfg)
    train_teacher(cfg, train, out)
    run.finish(checkpoint="teacher.ckpt")
    print(json.dumps({"out": str(out), "checkpoint": str(out / "teacher.ckpt")}))
    return EXIT_OK


def cmd_distill(args, cfg: DistillRunConfig) -> int:
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    cfg.seeds = seeds
    out = args.out or default_out("distill", cfg)
    run = RunDir(out, cfg, "distill", seeds[0] if len(seeds) == 1 else None, args.force)
    train, val = build_data(cfg)
    teacher = _load_teacher(cfg, out, train)
    if teacher is None:
        teacher = train_teacher(cfg, train, out)
    if teacher.spec.vocab_size != cfg.student.vocab_size:
        raise ConfigError("teacher_checkpoint", "teacher vocabulary differs from the student's")
    cache = TeacherCache(teacher, train)
    summary = {}
    for seed in seeds:
        seed_dir = out if len(seeds) == 1 else out / f"seed_{seed}"
        if seed_dir != out:
            RunDir(seed_dir, cfg, "distill", seed, force=True)
        result = run_distillation(cfg, teacher, train, seed, val, seed_dir, cache)
        model = result.best_student or result.student
        report = evaluate_model(model, val, cfg.eval, [seed]) if val else None
        summary[str(seed)] = {
            "val_rouge_l": report.mean if report else None,
            "best_step": result.best_step,
            "final_ratio": result.metrics[-1]["ratio"],
        }
        if seed_dir != out:
            _finish_sub(seed_dir, summary[str(seed)])
        log.info("seed %d done: %s", seed, summary[str(seed)])
    scores = [v["val_rouge_l"] for v in summary.values() if v["val_rouge_l"] is not None]
    agg = {"seeds": summary, "mean": float(np.mean(scores)) if scores else None,
           "std": float(np.std(scores)) if scores else None}
    (out / "summary.json").write_text(json.dumps(agg, indent=2))
    run.finish(summary="summary.json")
    print(json.dumps({"out": str(out), "mean_val_rouge_l": agg["mean"]}))
    return EXIT_OK


def _finish_sub(seed_dir: Path, extra: dict) -> None:
    path = seed_dir / "manifest.json"
    m = json.loads(path.read_text())
    m.update(status="completed", finished_at=_now(), result=extra)
    path.write_text(json.dumps(m, indent=2))


def _report_dir(args, cfg: DistillRunConfig, base: Path, kind: str, ckpt: Path) -> tuple[Path, RunDir]:
    target = base / "reports" / f"{kind}-{ckpt.stem}"
    return target, RunDir(target, cfg, kind, args.seed, force=True)


def cmd_eval(args, cfg: DistillRunConfig) -> int:
    base = args.out or Path(".")
    ckpt = resolve_checkpoint(args.checkpoint, base)
    model, header = load_checkpoint(ckpt)
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    target, run = _report_dir(args, cfg, base, "eval", ckpt)
    _, val = build_data(cfg)
    if not val:
        raise ConfigError("data.validation_fraction", "validation split is empty")
    report = evaluate_model(model, val, cfg.eval, seeds)
    jpath, _ = write_report(report, target, "eval_report")
    run.finish(checkpoint=str(ckpt), report=jpath.name)
    print(json.dumps({"report": str(jpath), "mean": report.mean, "std": report.std}))
    return EXIT_OK


def cmd_analyze(args, cfg: DistillRunConfig) -> int:
    base = args.out or Path(".")
    ckpt = resolve_checkpoint(args.checkpoint, base)
    student, _ = load_checkpoint(ckpt)
    teacher = _load_teacher(cfg, base, None)
    if teacher is None:
        raise ConfigError("teacher_checkpoint", f"no teacher.ckpt in {base} and none configured")
    kind = "entropy_histogram" if args.report == "entropy" else "gradient_alignment"
    target, run = _report_dir(args, cfg, base, args.report, ckpt)
    _, val = build_data(cfg)
    pairs = val[: args.batch_size] if val else build_data(cfg)[0][: args.batch_size]
    batch = make_batch(pairs, student.spec.context_length)
    with torch.no_grad():
        zt = teacher(torch.as_tensor(batch.input_ids))
        zs = student(torch.as_tensor(batch.input_ids))
    if args.report == "entropy":
        diag = entropy_histogram_report(zt, zs, batch.mask, cfg.idts)
    else:
        scores = score_tokens(zt, zs, IndicatorKind.HELLINGER, mask=batch.mask)
        diag = gradient_alignment_report(student, batch, zt, scores, cfg.objective)
    diag.metadata["checkpoint"] = str(ckpt)
    jpath, cpath = write_report(diag, target, kind)
    run.finish(checkpoint=str(ckpt), report=jpath.name, csv=cpath.name if cpath else None)
    print(json.dumps({"report": str(jpath), "csv": str(cpath) if cpath else None}))
    return EXIT_OK


def cmd_selfcheck(args, cfg) -> int:
    return EXIT_OK if run_selfcheck() else EXIT_RUNTIME


# -- parsing -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON or YAML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path override, repeatable; last wins")
    common.add_argument("--out", type=Path, help=f"output directory (default: ${OUT_ROOT_ENV} or ./runs)")
    common.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    common.add_argument("--force", action="store_true", help="overwrite a completed run")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="adakd", description="Token-adaptive knowledge distillation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    sub.add_parser("train-teacher", parents=[common], help="train the teacher by NLL")
    sub.add_parser("distill", parents=[common], help="distill the teacher into a student, per seed")
    p = sub.add_parser("eval", parents=[common], help="ROUGE-L of a checkpoint on the validation split")
    p.add_argument("--checkpoint", required=True, help="path, or name like step_500 inside --out")
    p = sub.add_parser("analyze", parents=[common], help="entropy or gradient-alignment diagnostics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", choices=["entropy", "gradient"], default="entropy")
    p.add_argument("--batch-size", type=int, default=32)
    sub.add_parser("selfcheck", parents=[common], help="fast numeric invariants")
    return parser


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "selfcheck": cmd_selfcheck,
}


def _fail(kind: str, message: str, code: int, field: Optional[str] = None) -> int:
    payload = {"error": kind, "message": message}
    if field is not None:
        payload["field"] = field
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides) if args.command != "selfcheck" else None
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        return _fail("config", exc.message, EXIT_CONFIG, exc.field)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    except CheckpointError as exc:
        return _fail("checkpoint", str(exc), EXIT_RUNTIME)
    except (FloatingPointError, ValueError, OSError, RuntimeError) as exc:
        return _fail("runtime", f"{type(exc).__name__}: {exc}", EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
