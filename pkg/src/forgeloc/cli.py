"""Command-line entry point: synth, train-backbone, train-head, predict, eval, robustness.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .config import ConfigError, RunConfig, validate_config
from .evaluate import AXES, EvalReport, axis_specs, evaluate, plot_curve, robustness_sweep
from .model import CheckpointError, HeadUninitializedError
from .train import TrainingError, predict, stage1_pretrain, stage2_finetune

log = logging.getLogger("forgeloc")

OUTPUTS = "outputs.json"
RESOLVED = "resolved_config.txt"
# files whose contents depend on wall-clock time; listed but not digested
VOLATILE_SUFFIX = "_timing.csv"

RUNTIME_ERRORS = (
    HeadUninitializedError,
    CheckpointError,
    TrainingError,
    D.ManifestError,
    D.SampleError,
    D.SpliceError,
    OSError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")
    p.add_argument("--seed", type=int, help="global seed (same as --set global_seed=N)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="forgeloc", description="Splice localization with multi-view pixel contrast.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic splice dataset")
    _common(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--dataset-id", default="synth")

    p = sub.add_parser("train-backbone", help="stage 1: contrastive pretraining")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)

    p = sub.add_parser("train-head", help="stage 2: fine-tune the localization head")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True, help="stage-1 checkpoint")

    p = sub.add_parser("predict", help="score map for one image")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)

    p = sub.add_parser("eval", help="per-dataset F1/IoU and weighted averages")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, action="append", required=True, help="repeatable")

    p = sub.add_parser("robustness", help="F1 under degradation sweeps")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--axis", action="append", choices=AXES, help="sweep one axis; repeatable")
    p.add_argument("--chain", action="append", default=[],
                   help='degradation chain, e.g. "jpeg(60) > resize(0.6) > blur(5)"; repeatable')
    return parser


def resolve_config(args) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        if any(o.split("=", 1)[0].strip() == "global_seed" for o in overrides):
            raise UsageError("conflicting flags: --seed and --set global_seed")
        overrides.append(f"global_seed={args.seed}")
    return validate_config(args.config, overrides)


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_outputs(out: Path, command: str) -> Path:
    """List every produced file with its sha256 (timing files are listed only)."""
    files, volatile = {}, []
    for p in sorted(out.rglob("*")):
        if not p.is_file() or p.name == OUTPUTS:
            continue
        rel = p.relative_to(out).as_posix()
        if p.name.endswith(VOLATILE_SUFFIX):
            volatile.append(rel)
        else:
            files[rel] = _digest(p)
    path = out / OUTPUTS
    path.write_text(json.dumps({"command": command, "files": files, "volatile": volatile},
                               indent=2, sort_keys=True), encoding="utf-8")
    return path


def _synth(args, cfg: RunConfig, out: Path) -> None:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    path = D.make_synthetic_dataset(out, args.count, cfg.global_seed, size=args.size, dataset_id=args.dataset_id)
    print(f"wrote {args.count} samples, manifest {path}")


def _train_backbone(args, cfg: RunConfig, out: Path) -> None:
    res = stage1_pretrain(args.manifest, cfg, out_dir=out)
    print(f"stage 1 done: best epoch {res.best_epoch}, loss {res.log.losses[res.best_epoch]:.6f}, "
          f"checkpoint {res.checkpoint}")


def _train_head(args, cfg: RunConfig, out: Path) -> None:
    res = stage2_finetune(args.checkpoint, args.manifest, cfg, out_dir=out)
    print(f"stage 2 done: final loss {res.log.losses[-1]:.6f}, checkpoint {res.checkpoint}")


def _predict(args, cfg: RunConfig, out: Path) -> None:
    scores = predict(args.checkpoint, D.read_image(args.image))
    stem = args.image.stem
    np.save(out / f"{stem}_scores.npy", scores.astype(np.float32))
    D.write_image(out / f"{stem}_scores.png", np.repeat(scores[..., None], 3, axis=2))
    D.write_mask(out / f"{stem}_pred.png", (scores > cfg.threshold).astype(np.uint8))
    print(f"score map {scores.shape[1]}x{scores.shape[0]} written to {out}")


def _eval(args, cfg: RunConfig, out: Path) -> None:
    report = evaluate(args.checkpoint, args.manifest, cfg.threshold, cfg.empty_score)
    report.write(out, "report")
    for r in report.rows:
        print(f"{r.dataset_id}: n={r.count} F1={r.f1:.4f} IoU={r.iou:.4f}")
    print(f"weighted average: F1={report.avg_f1:.4f} IoU={report.avg_iou:.4f}")


def _robustness(args, cfg: RunConfig, out: Path) -> None:
    grids = {"jpeg": cfg.jpeg_axis, "blur": cfg.blur_axis, "noise": cfg.noise_axis, "resize": cfg.resize_axis}
    sweeps = {}
    try:
        for axis in args.axis or ([] if args.chain else AXES):
            sweeps[axis] = axis_specs(axis, grids[axis], cfg.global_seed)
        for i, text in enumerate(args.chain):
            ops = tuple(D.DegradationOp.parse(t) for t in text.split(">") if t.strip())
            if not ops:
                raise ValueError(f"empty chain {text!r}")
            sweeps[f"chain{i}"] = [D.DegradationSpec(ops, cfg.global_seed)]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    base = evaluate(args.checkpoint, args.manifest, cfg.threshold, cfg.empty_score)
    for name, specs in sweeps.items():
        points = robustness_sweep(args.checkpoint, args.manifest, specs, cfg.threshold, cfg.empty_score)
        base.curves[name] = points
        plot_curve(points, out / f"robustness_{name}.png", name)
        for p in points:
            print(f"{name}: {p.label}: F1={p.f1:.4f} IoU={p.iou:.4f}")
    base.write(out, "robustness")


COMMANDS = {
    "synth": _synth,
    "train-backbone": _train_backbone,
    "train-head": _train_head,
    "predict": _predict,
    "eval": _eval,
    "robustness": _robustness,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out: Path = args.out
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create output directory {out}: {exc}", file=sys.stderr)
        return 1
    (out / RESOLVED).write_text(cfg.dumps(), encoding="utf-8")
    try:
        COMMANDS[args.command](args, cfg, out)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    write_outputs(out, args.command)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
