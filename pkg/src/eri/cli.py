"""``eri`` command line: generate, preprocess, train, eval and report.

Exit codes are 0 on success, 1 on a runtime failure and 2 on a usage or
configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, parse_overrides
from .core_math import MetricReport, evaluate_predictions, znormalize
from .data_io import EMOTION_COLUMNS, ManifestRecord, SyntheticSpec, generate_synthetic, load_manifest, save_manifest, write_tensor
from .errors import DomainError, EriError
from .model_zoo import load_model
from .preprocessing import clip_from_record, load_split
from .training import parse_history, predict, train

log = logging.getLogger("eri")


class UsageError(Exception):
    """Bad arguments or configuration; maps to exit code 2."""


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=argparse.SUPPRESS if suppress else 0)
    parser.add_argument("--out", default=default, help="output directory")
    parser.add_argument("--config", default=default, help="flat key=value run configuration")
    parser.add_argument("--micro", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="desk-scale model and batch preset (not paper scale)")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eri", description="Emotion reaction intensity pipeline")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        _global_flags(p, suppress=True)
        return p

    g = command("generate", "write a seeded synthetic dataset")
    g.add_argument("--n-clips", type=int, default=16)
    g.add_argument("--frames-per-video", type=int, default=40)
    g.add_argument("--image-size", type=int, default=112)
    g.add_argument("--n-val", type=int, default=0)
    g.add_argument("--n-test", type=int, default=0)
    g.add_argument("--pixel-noise", type=int, default=6)

    p = command("preprocess", "sample, crop and resize every clip into tensor files")
    p.add_argument("--data", required=True, help="dataset directory holding manifest.csv")
    p.add_argument("--frames", type=int, default=0, help="frames per clip (default: model preset)")
    p.add_argument("--image-size", type=int, default=0, help="clip size (default: model preset)")

    t = command("train", "fit a model and write history and checkpoints")
    for f in fields(RunConfig):
        if f.name in ("seed", "out", "micro"):
            continue
        t.add_argument("--" + f.name.replace("_", "-"), dest="cfg__" + f.name, default=argparse.SUPPRESS,
                       metavar=f.name.upper())

    e = command("eval", "score a checkpoint on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val", choices=("train", "val", "test"))
    e.add_argument("--model", choices=("cnn_lstm", "cnn_transformer"), default=None,
                   help="expected architecture; a mismatching checkpoint is rejected")

    r = command("report", "render history and metrics as Markdown")
    r.add_argument("--history", default=None)
    r.add_argument("--metrics", default=None)
    return parser


# commands -------------------------------------------------------------------


def cmd_generate(args) -> int:
    if not args.out:
        raise UsageError("generate requires --out")
    try:
        spec = SyntheticSpec(n_clips=args.n_clips, frames_per_video=args.frames_per_video,
                             image_size=args.image_size, seed=args.seed, n_val=args.n_val,
                             n_test=args.n_test, pixel_noise=args.pixel_noise)
    except DomainError as exc:
        raise UsageError(str(exc)) from None
    generate_synthetic(spec, args.out)
    print(f"wrote {spec.n_clips} clips to {args.out}")
    return 0


def _run_config(args, extra: dict | None = None) -> RunConfig:
    text = Path(args.config).read_text(encoding="utf-8") if args.config else None
    try:
        overrides = parse_overrides(extra or {})
        if "seed" in vars(args) and args.seed is not None:
            overrides.setdefault("seed", args.seed)
        return load_config(text, micro=args.micro, **overrides)
    except DomainError as exc:
        raise UsageError(str(exc)) from None


def cmd_preprocess(args) -> int:
    if not args.out:
        raise UsageError("preprocess requires --out")
    cfg = _run_config(args).model_config()
    k = args.frames or cfg.frames
    size = args.image_size or cfg.backbone.image_size
    data, out = Path(args.data), Path(args.out)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    records = load_manifest(data / "manifest.csv")
    converted = []
    for rec in records:
        clip = clip_from_record(rec, data, k, size)
        rel = f"clips/{rec.video_id}.erit"
        write_tensor(out / rel, clip)
        converted.append(ManifestRecord(rec.video_id, rel, "", rec.raw_labels, rec.split))
    save_manifest(converted, out / "manifest.csv")
    print(f"wrote {len(converted)} clips of shape [{k}, {size}, {size}, 3] to {out}")
    return 0


def _load_splits(data: Path, k: int, size: int):
    records = load_manifest(data / "manifest.csv")
    splits = {}
    for name in ("train", "val"):
        clips, targets, _ = load_split(records, data, name, k, size)
        splits[name] = (clips, targets)
    if len(splits["train"][0]) == 0:
        raise DomainError(f"{data}: manifest has no train rows")
    if len(splits["val"][0]) == 0:
        log.warning("no val rows; monitoring the train split instead")
        splits["val"] = splits["train"]
    return splits


def cmd_train(args) -> int:
    if not args.out:
        raise UsageError("train requires --out")
    extra = {k[len("cfg__"):]: v for k, v in vars(args).items() if k.startswith("cfg__")}
    run = _run_config(args, extra)
    if not run.data:
        raise UsageError("train requires --data (flag or config key)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = replace(run, out=str(out))
    (out / "config.txt").write_text(run.dumps(), encoding="utf-8")
    cfg = run.model_config()
    splits = _load_splits(Path(run.data), cfg.frames, cfg.backbone.image_size)
    result = train(run.model, splits, run, out)
    best = max(result.history, key=lambda r: r.val_pcc_mean)
    print(f"{len(result.history)} epochs, best val pcc {best.val_pcc_mean:.4f} at epoch {best.epoch}"
          + (" (stopped early)" if result.stopped_early else ""))
    return 0


def format_pcc_table(report: MetricReport) -> str:
    lines = ["| emotion | PCC |", "|---|---|"]
    for j, (name, r) in enumerate(zip(EMOTION_COLUMNS, report.pcc_per_emotion)):
        flag = " (degenerate)" if j in report.degenerate_emotions else ""
        lines.append(f"| {name} | {r:.4f}{flag} |")
    lines.append(f"| mean | {report.pcc_mean:.4f} |")
    lines.append("")
    lines.append(f"MSE {report.mse:.6f} over {report.n_samples} clips")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint, expect_arch=args.model)
    if model.normalizer is None:
        raise DomainError(f"{args.checkpoint}: checkpoint carries no input normalizer")
    cfg = model.config
    records = load_manifest(Path(args.data) / "manifest.csv")
    clips, targets, _ = load_split(records, args.data, args.split, cfg.frames, cfg.backbone.image_size)
    if len(clips) == 0:
        raise DomainError(f"split {args.split!r} is empty")
    pred = predict(model, znormalize(clips.astype(np.float32), model.normalizer))
    report = evaluate_predictions(pred, targets)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / f"metrics_{args.split}.json").write_text(report.to_json(), encoding="utf-8")
    print(format_pcc_table(report))
    return 0


def render_report(history_text: str | None, metrics_text: str | None) -> str:
    parts = ["# Run report", ""]
    if history_text is not None:
        history = parse_history(history_text)
        parts += ["## Training history", "", "| epoch | train loss | val loss | val PCC | lr |",
                  "|---|---|---|---|---|"]
        parts += [f"| {r.epoch} | {r.train_loss:.5f} | {r.val_loss:.5f} | {r.val_pcc_mean:.4f} | {r.lr:.3g} |"
                  for r in history]
        if history:
            best = max(history, key=lambda r: r.val_pcc_mean)
            parts += ["", f"Best val PCC {best.val_pcc_mean:.4f} at epoch {best.epoch}."]
        parts.append("")
    if metrics_text is not None:
        parts += ["## Evaluation", "", format_pcc_table(MetricReport.from_json(metrics_text)), ""]
    return "\n".join(parts)


def cmd_report(args) -> int:
    if args.history is None and args.metrics is None:
        raise UsageError("report needs --history and/or --metrics")
    read = lambda p: Path(p).read_text(encoding="utf-8") if p else None  # noqa: E731
    text = render_report(read(args.history), read(args.metrics))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "report.md").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


COMMANDS = {"generate": cmd_generate, "preprocess": cmd_preprocess, "train": cmd_train,
            "eval": cmd_eval, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"eri {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (EriError, OSError) as exc:
        print(f"eri {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
