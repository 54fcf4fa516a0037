"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 sample rejected.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

from ..attention import word_attention_from_bundle
from ..controller import REJECT_MESSAGE, GuidedSampler, SampleOutcome, normalize_mode
from ..evaluation.benchmark import SampleRecord, aggregate, run_benchmark, toy_confidences
from ..losses import GuidanceConfig
from ..overlap import detect
from ..toy_mmdit.checkpoint import load_checkpoint, save_checkpoint
from ..toy_mmdit.model import ModelConfig
from ..toy_mmdit.training import heldout_loss, train_toy_model
from .config import RunConfig, load_run_config
from .dumps import dump_attention, load_attention
from .plots import attention_panels, image_png, mask_png, save_png
from .prompts import PromptRecord, parse_prompt_file, parse_prompt_line

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_REJECTED = 0, 1, 2, 3

log = logging.getLogger("mmdit_guidance")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _mode(value: str) -> str:
    try:
        return normalize_mode(value)
    except ValueError as err:
        raise argparse.ArgumentTypeError(str(err)) from err


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mmdit-guidance", description="Toy MMDiT with attention-guided similar-subject sampling")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    t = sub.add_parser("train", help="train the toy denoiser and write a checkpoint")
    t.add_argument("--out", required=True, help="checkpoint directory to write")
    t.add_argument("--config", help="run config JSON (dataset/model sections are used)")
    t.add_argument("--steps", type=int, help="override the number of training steps")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("sample", help="sample one image; prints ACCEPTED or REJECTED")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--prompt", required=True, help='e.g. "a <circle> and a <ellipse>"')
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--mode", type=_mode, default="full", help="baseline, amb or full")
    s.add_argument("--config", help="run config JSON (guidance section is used)")
    s.add_argument("--out", default="runs", help="directory for the image and run log")
    s.add_argument("--dump-attention", action="store_true", help="also dump the attention seen at each detection step")

    d = sub.add_parser("diagnose", help="overlap report and heatmaps from an attention dump")
    d.add_argument("--dump", required=True)
    d.add_argument("--config", help="run config JSON (guidance section is used)")
    d.add_argument("--out", help="directory for report.json and PNG panels (default: the dump)")

    b = sub.add_parser("bench", help="success-rate benchmark over a prompt file")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--prompts", required=True)
    b.add_argument("--seeds", type=int, required=True, help="use seeds 0..N-1")
    b.add_argument("--modes", default="baseline,amb_only,full")
    b.add_argument("--config", help="run config JSON (guidance section is used)")
    b.add_argument("--out", default="bench")
    b.add_argument("--batch-size", type=int, default=50)

    r = sub.add_parser("report", help="aggregate run logs into a success-rate table")
    r.add_argument("--runs", required=True)
    return p


def _guidance(args) -> GuidanceConfig:
    if getattr(args, "config", None):
        return load_run_config(args.config).guidance
    return GuidanceConfig()


def slug(text: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", text.lower()).strip("_")


def run_log_name(prompt_id: str, seed: int, mode: str) -> str:
    return f"{prompt_id}_seed{seed}_{mode}.jsonl"


def outcome_record(prompt: PromptRecord, outcome: SampleOutcome) -> SampleRecord:
    conf = toy_confidences(outcome, prompt.subjects) if outcome.accepted else None
    return SampleRecord(
        prompt_id=prompt.prompt_id,
        seed=outcome.seed,
        mode=outcome.mode,
        cardinality=prompt.cardinality,
        status=outcome.status,
        would_reject=outcome.rejection_suppressed or outcome.status == "rejected",
        restarted=outcome.restarted,
        confidences=conf,
    )


def write_run_log(prompt: PromptRecord, outcome: SampleOutcome, path: Path) -> Path:
    """JSON lines: per-iteration loss reports, detection reports, then the outcome."""
    with open(path, "w") as fh:
        for rec in outcome.reports:
            fh.write(json.dumps({"type": "loss", **rec}) + "\n")
        for k, det in enumerate(outcome.detections):
            fh.write(json.dumps({"type": "detection", "pass": k + 1, **det.to_dict()}) + "\n")
        record = outcome_record(prompt, outcome).to_dict()
        fh.write(json.dumps({"type": "outcome", **record, **outcome.summary()}) + "\n")
    return path


def cmd_train(args) -> int:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    dataset = cfg.dataset
    tok = dataset.tokenizer()
    model_cfg = cfg.model or ModelConfig(vocab_a=tok.vocab_a, vocab_b=tok.vocab_b)
    overrides = {}
    if args.steps is not None:
        overrides["train_steps"] = args.steps
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    model_cfg = ModelConfig.from_dict({**model_cfg.to_dict(), **overrides})
    ckpt = train_toy_model(dataset, model_cfg, args.seed)
    ckpt.history.append({"heldout_final": heldout_loss(ckpt.model, dataset, ckpt.tokenizer)})
    save_checkpoint(ckpt, args.out)
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def cmd_sample(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    record = parse_prompt_line(args.prompt)
    record = PromptRecord(record.text, record.subjects, slug(record.text))
    prompt = ckpt.tokenizer.tokenize_prompt(record.text, record.subjects)
    sampler = GuidedSampler(
        ckpt.model, ckpt.tokenizer.null_prompt(), _guidance(args), keep_attention=args.dump_attention
    )
    outcome = sampler.run(prompt, [args.seed], args.mode)[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = run_log_name(record.prompt_id, args.seed, outcome.mode)[: -len(".jsonl")]
    write_run_log(record, outcome, out / f"{stem}.jsonl")
    for k, bundle in enumerate(outcome.detection_attention):
        dump_attention(bundle, prompt, out / f"{stem}_attention_pass{k + 1}")
    if not outcome.accepted:
        print("REJECTED")
        print(REJECT_MESSAGE)
        return EXIT_REJECTED
    save_png(image_png(outcome.image.pixels), out / f"{stem}.png")
    print("ACCEPTED")
    return EXIT_OK


def diagnose_dump(dump_path, config: GuidanceConfig):
    """In-process diagnosis of an attention dump: (OverlapReport, WordAttention)."""
    bundle, prompt = load_attention(dump_path)
    word_attn = word_attention_from_bundle(bundle, prompt)
    return detect(word_attn, config), word_attn


def cmd_diagnose(args) -> int:
    config = _guidance(args)
    report, word_attn = diagnose_dump(args.dump, config)
    out = Path(args.out) if args.out else Path(args.dump)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"subjects": list(word_attn.words), **report.to_dict()}
    text = json.dumps(summary, indent=2)
    (out / "report.json").write_text(text)
    save_png(attention_panels(word_attn, config), out / "heatmaps.png")
    for i, word in enumerate(word_attn.words):
        save_png(mask_png(report.masks[i]), out / f"mask_{i}_{word}.png")
    if report.conflict_mask is not None:
        save_png(mask_png(report.conflict_mask), out / "conflict_mask.png")
    print(text)
    return EXIT_OK


def cmd_bench(args) -> int:
    records = parse_prompt_file(args.prompts)
    if not records:
        raise UsageError(f"prompt file {args.prompts} contains no prompts")
    if args.seeds < 1:
        raise UsageError("--seeds must be positive")
    modes = [normalize_mode(m) for m in args.modes.split(",") if m]
    ckpt = load_checkpoint(args.checkpoint)
    config = _guidance(args)
    samplers = {
        m: GuidedSampler(ckpt.model, ckpt.tokenizer.null_prompt(), config.replace(reject_sampling=False) if m == "full" else config)
        for m in modes
    }
    report = run_benchmark(
        records,
        range(args.seeds),
        modes,
        samplers.__getitem__,
        lambda r: ckpt.tokenizer.tokenize_prompt(r.text, r.subjects),
        batch_size=args.batch_size,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    with open(out / "records.jsonl", "w") as fh:
        for rec in report.records:
            fh.write(json.dumps({"type": "outcome", **rec.to_dict()}) + "\n")
    (out / "report.txt").write_text(report.table() + "\n")
    print(report.table())
    return EXIT_OK


def read_outcomes(runs_dir) -> list[SampleRecord]:
    fields = set(SampleRecord.__dataclass_fields__)
    out = []
    for path in sorted(Path(runs_dir).rglob("*.jsonl")):
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            if row.get("type") == "outcome":
                out.append(SampleRecord.from_dict({k: v for k, v in row.items() if k in fields and k != "success"}))
    return out


def cmd_report(args) -> int:
    records = read_outcomes(args.runs)
    if not records:
        raise UsageError(f"no run logs under {args.runs}")
    print(aggregate(records).table())
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "diagnose": cmd_diagnose,
    "bench": cmd_bench,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return COMMANDS[args.command](args)
    except UsageError as err:
        print(str(err), file=sys.stderr)
        return EXIT_USAGE
    except Exception as err:  # noqa: BLE001 - every runtime failure maps to exit code 2
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
