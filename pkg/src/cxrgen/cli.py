"""Command-line entry point.

    cxrgen synthesize --n 2000 --seed 0 --out runs/corpus
    cxrgen train      --corpus runs/corpus/corpus.jsonl --seed 0 --out runs/train
    cxrgen generate   --corpus ... --checkpoint runs/train/stage3.ckpt --out runs/gen
    cxrgen summarize  --corpus ... --checkpoint runs/train/stage3.ckpt --out runs/sum
    cxrgen evaluate   --corpus ... --checkpoint runs/train/stage3.ckpt --out runs/metrics.json
    cxrgen ablate     --seed 3 --out runs/ablation
    cxrgen pipeline   --seed 0 --out runs/full

Exit codes: 0 success, 1 validation error (bad flags, config, corpus or a
missing artifact), 2 runtime error. Every command that writes anything writes
only under ``--out`` and leaves a ``manifest.json`` there with the seed, the
hash of the resolved config text, the corpus hash, the code version and the
hash of every produced artifact.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path
from typing import Sequence

from . import __version__
from .checkpoint import file_sha256, load_checkpoint
from .errors import CxrError, MissingArtifact, MissingConfig, UnknownCommand, ValidationError
from .model import ModelConfig
from .radex.corpus import DEFAULT_MIX, build_corpus, parse_mix, read_corpus, write_corpus
from .trainer import (
    RunPlan, ablation_stage_configs, default_stage_configs, format_config, load_config, pipeline_manifest,
    run_ablation, run_pipeline, write_json,
)

COMMANDS = ("synthesize", "train", "generate", "summarize", "evaluate", "ablate", "pipeline")
MANIFEST = "manifest.json"
CORPUS_FILE = "corpus.jsonl"
METRICS_FILE = "metrics.json"


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of calling ``sys.exit``."""

    def error(self, message):
        raise ValidationError(message)


def text_sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _out_dir(path: str) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise ValidationError(f"--out {out} exists and is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _log(args) -> callable:
    if not args.verbose:
        return None
    return lambda msg: print(msg, file=sys.stderr, flush=True)


def _resolve_plan(args, ablation: bool = False) -> tuple[RunPlan, str]:
    """Config file (or the built-in defaults) -> plan plus its canonical text."""
    if getattr(args, "config", None):
        plan = load_config(args.config)
    else:
        plan = RunPlan(ablation_stage_configs() if ablation else default_stage_configs())
    text = format_config(plan.stages, plan.model, plan.warmup)
    return plan, text


def _model_cfg(plan: RunPlan) -> ModelConfig | None:
    if not plan.model:
        return None
    try:
        return ModelConfig.from_dict(plan.model)
    except ValueError as e:
        raise ValidationError(f"[model] {e}") from None


def _manifest(command: str, seed: int | None, **extra) -> dict:
    return {"command": command, "seed": seed, "code_version": __version__, **extra}


# ------------------------------------------------------------------ commands


def cmd_synthesize(args) -> int:
    out = _out_dir(args.out)
    mix = parse_mix(args.mix) if args.mix else dict(DEFAULT_MIX)
    records = build_corpus(args.n, mix, seed=args.seed)
    path = out / CORPUS_FILE
    write_corpus(path, records)
    counts = {}
    for r in records:
        counts[f"{r.split}/{r.kind}"] = counts.get(f"{r.split}/{r.kind}", 0) + 1
    write_json(out / MANIFEST, _manifest("synthesize", args.seed, n=args.n, mix=mix, counts=counts,
                                         corpus=CORPUS_FILE, corpus_sha256=file_sha256(path)))
    print(f"wrote {len(records)} records to {path}")
    return 0


def _train(records, corpus_sha: str, plan: RunPlan, config_text: str, seed: int, out: Path, log) -> dict:
    configs = plan.stages
    result = run_pipeline(configs, records, seed, out_dir=out, model_cfg=_model_cfg(plan),
                          warmup=plan.warmup, log=log)
    m = pipeline_manifest(result, configs, seed, plan.warmup)
    m.update(_manifest("train", seed, config=config_text, config_sha256=text_sha256(config_text),
                       corpus_sha256=corpus_sha))
    return m


def cmd_train(args) -> int:
    out = _out_dir(args.out)
    records = read_corpus(args.corpus)
    plan, text = _resolve_plan(args)
    m = _train(records, file_sha256(args.corpus), plan, text, args.seed, out, _log(args))
    m["corpus"] = str(Path(args.corpus).resolve())
    write_json(out / MANIFEST, m)
    for s in m["stages"]:
        print(f"stage {s['stage']}: {s['steps']} steps, final loss {s['final_loss']:.4f}, {s['checkpoint']}")
    return 0


def check_run_artifacts(run_dir: Path) -> dict:
    """Load a run manifest and verify every checkpoint it lists is present and unchanged."""
    path = run_dir / MANIFEST
    if not path.exists():
        raise MissingArtifact(f"no {MANIFEST} in {run_dir}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    for s in manifest.get("stages", []):
        if "checkpoint" not in s:
            continue
        ckpt = run_dir / s["checkpoint"]
        if not ckpt.exists():
            raise MissingArtifact(f"stage {s['stage']} checkpoint missing: {ckpt}")
        if file_sha256(ckpt) != s["checkpoint_sha256"]:
            raise MissingArtifact(f"stage {s['stage']} checkpoint {ckpt} does not match its manifest hash")
    return manifest


def _load_for_eval(args):
    ckpt = Path(args.checkpoint)
    if (ckpt.parent / MANIFEST).exists():
        check_run_artifacts(ckpt.parent)
    if not ckpt.exists():
        raise MissingArtifact(f"checkpoint not found: {ckpt}")
    bundle, header = load_checkpoint(ckpt)
    return bundle, header


def _decode_command(args, task: str) -> int:
    from .evaluation.report import generate_texts, task_inputs

    out = _out_dir(args.out)
    bundle, _ = _load_for_eval(args)
    records = [r for r in read_corpus(args.corpus) if r.split == args.split]
    if not records:
        raise ValidationError(f"no records in split {args.split!r}")
    pairs = task_inputs(records, task)
    if getattr(args, "instruction", None) and task == "generation":
        pairs = [(args.instruction, ref) for _, ref in pairs]
    hyps = generate_texts(bundle, [r.image for r in records], [p[0] for p in pairs], args.max_new_tokens)
    path = out / f"{task}.jsonl"
    rows = [{"record_id": r.record_id, "instruction": p[0], "reference": p[1], "hypothesis": h}
            for r, p, h in zip(records, pairs, hyps)]
    path.write_text("".join(json.dumps(row, sort_keys=True) + "\n" for row in rows), encoding="utf-8")
    write_json(out / MANIFEST, _manifest(args.command, None, task=task, split=args.split,
                                         checkpoint_sha256=file_sha256(args.checkpoint),
                                         corpus_sha256=file_sha256(args.corpus),
                                         outputs={path.name: file_sha256(path)}))
    print(f"wrote {len(rows)} {task} outputs to {path}")
    return 0


def cmd_generate(args) -> int:
    return _decode_command(args, "generation")


def cmd_summarize(args) -> int:
    return _decode_command(args, "summarization")


def evaluate_to_file(checkpoint: str | Path, corpus: str | Path, out: str | Path,
                     max_new_tokens: int = 80, latency: bool = False, repeats: int = 1) -> dict:
    from .evaluation.latency import latency_harness
    from .evaluation.report import evaluate_bundle

    bundle, _ = load_checkpoint(checkpoint)
    records = read_corpus(corpus)
    report = evaluate_bundle(bundle, records, max_new_tokens=max_new_tokens)
    report["checkpoint_sha256"] = file_sha256(checkpoint)
    report["corpus_sha256"] = file_sha256(corpus)
    if latency:
        test = [r for r in records if r.split == "test"]
        report["latency"] = latency_harness(bundle, test, repeats=repeats, max_new_tokens=max_new_tokens)
    write_json(out, report)
    return report


def _print_summary(report: dict) -> None:
    for task in ("generation", "summarization"):
        if task in report:
            cells = " ".join(f"{k}={v:.4f}" for k, v in report[task]["mean"].items())
            print(f"{task}: {cells}")
    if "auc" in report:
        cells = [f"{f}={v['auc']:.3f}" for f, v in report["auc"].items()
                 if v["auc"] is not None and v["positives"] >= 20]
        print("auc (>= 20 positives): " + " ".join(cells))
    if "latency" in report:
        for task, st in report["latency"].items():
            print(f"latency {task}: mean {st['mean']:.4f} s/instance (min {st['min']:.4f}, max {st['max']:.4f})")


def cmd_evaluate(args) -> int:
    if args.run:
        run = Path(args.run)
        manifest = check_run_artifacts(run)
        last = max(s["stage"] for s in manifest["stages"])
        checkpoint = run / f"stage{last}.ckpt"
        corpus = Path(args.corpus) if args.corpus else run / CORPUS_FILE
    else:
        if not args.checkpoint or not args.corpus:
            raise ValidationError("evaluate needs --checkpoint and --corpus, or --run")
        _load_for_eval(args)
        checkpoint, corpus = Path(args.checkpoint), Path(args.corpus)
    if not corpus.exists():
        raise MissingArtifact(f"corpus not found: {corpus}")
    out = Path(args.out)
    if out.is_dir():
        out = out / METRICS_FILE
    out.parent.mkdir(parents=True, exist_ok=True)
    report = evaluate_to_file(checkpoint, corpus, out, args.max_new_tokens, args.latency, args.repeats)
    _print_summary(report)
    print(f"wrote {out}")
    return 0


def cmd_ablate(args) -> int:
    from .evaluation.report import format_table

    out = _out_dir(args.out)
    plan, text = _resolve_plan(args, ablation=True)
    records = build_corpus(args.n, seed=args.seed)
    result = run_ablation(records, args.seed, plan.stages, _model_cfg(plan), args.max_new_tokens,
                          warmup=plan.warmup, log=_log(args))
    table = format_table(result["rows"])
    (out / "ablation.tsv").write_text(table + "\n", encoding="utf-8")
    write_json(out / "ablation.json", result)
    write_json(out / MANIFEST, _manifest("ablate", args.seed, n=args.n, config=text, config_sha256=text_sha256(text),
                                         outputs={n: file_sha256(out / n) for n in ("ablation.tsv", "ablation.json")}))
    print(table)
    return 0


def cmd_pipeline(args) -> int:
    """synthesize -> warm-up and three stages -> evaluate, all under one directory."""
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        raise ValidationError(f"--out {out} must be empty or absent")
    out = _out_dir(args.out)
    log = _log(args)
    plan, text = _resolve_plan(args)
    t0 = time.perf_counter()
    records = build_corpus(args.n, seed=args.seed)
    corpus = out / CORPUS_FILE
    write_corpus(corpus, records)
    m = _train(records, file_sha256(corpus), plan, text, args.seed, out, log)
    m.update(command="pipeline", n=args.n, corpus=CORPUS_FILE)
    write_json(out / MANIFEST, m)
    report = evaluate_to_file(out / "stage3.ckpt", corpus, out / METRICS_FILE, args.max_new_tokens)
    _print_summary(report)
    if log:
        log(f"pipeline finished in {time.perf_counter() - t0:.1f} s")
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cxrgen", description="Desk-scale chest X-ray report generation pipeline.")
    p.add_argument("--version", action="version", version=f"cxrgen {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def common(sp, seed=True):
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True, help="output directory (file path for evaluate)")
        sp.add_argument("-v", "--verbose", action="store_true", help="progress on stderr")

    sp = sub.add_parser("synthesize", help="write a synthetic corpus")
    sp.add_argument("--n", type=int, default=2000)
    sp.add_argument("--mix", help="kind proportions, e.g. caption=0.15,instruction=0.35,report=0.4,summarization-pair=0.1")
    common(sp)

    sp = sub.add_parser("train", help="warm-up plus stages 1-3 on a corpus file")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--config", help="INI file with [stage1] [stage2] [stage3] (and optional [warmup] [model])")
    common(sp)

    for name, helptext in (("generate", "Findings for every record in a split"),
                           ("summarize", "Impressions for every record in a split")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--corpus", required=True)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--split", default="test")
        sp.add_argument("--max-new-tokens", type=int, default=80)
        if name == "generate":
            sp.add_argument("--instruction", help="override the canonical report prompt")
        common(sp, seed=False)

    sp = sub.add_parser("evaluate", help="metric report for a checkpoint")
    sp.add_argument("--corpus")
    sp.add_argument("--checkpoint")
    sp.add_argument("--run", help="run directory with a manifest; uses its last checkpoint")
    sp.add_argument("--max-new-tokens", type=int, default=80)
    sp.add_argument("--latency", action="store_true", help="also time decoding (makes the report nondeterministic)")
    sp.add_argument("--repeats", type=int, default=1)
    common(sp, seed=False)

    sp = sub.add_parser("ablate", help="baseline / (a) / (b) / full comparison table")
    sp.add_argument("--n", type=int, default=2000)
    sp.add_argument("--config")
    sp.add_argument("--max-new-tokens", type=int, default=80)
    common(sp)

    sp = sub.add_parser("pipeline", help="synthesize, train and evaluate in one run directory")
    sp.add_argument("--n", type=int, default=2000)
    sp.add_argument("--config")
    sp.add_argument("--max-new-tokens", type=int, default=80)
    common(sp)
    return p


HANDLERS = {
    "synthesize": cmd_synthesize, "train": cmd_train, "generate": cmd_generate, "summarize": cmd_summarize,
    "evaluate": cmd_evaluate, "ablate": cmd_ablate, "pipeline": cmd_pipeline,
}


def dispatch(argv: Sequence[str]) -> int:
    argv = list(argv)
    try:
        if argv and not argv[0].startswith("-") and argv[0] not in COMMANDS:
            raise UnknownCommand(f"unknown command {argv[0]!r}; expected one of {', '.join(COMMANDS)}")
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UnknownCommand(f"no command given; expected one of {', '.join(COMMANDS)}")
        if getattr(args, "config", None) and not Path(args.config).exists():
            raise MissingConfig(f"config file not found: {args.config}")
        return HANDLERS[args.command](args)
    except ValidationError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except (CxrError, OSError, ValueError, RuntimeError, KeyError, FloatingPointError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main(argv: Sequence[str] | None = None) -> int:
    return dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    raise SystemExit(main())
