"""Command-line interface.

Every subcommand takes ``--config`` and an optional ``--output-dir`` (which
overrides ``[output] dir``). Stage subcommands read the previous stage's
files from the output directory, so running ``fuse``, ``calibrate``,
``denoise``, ``merge``, ``prune``, ``eval`` and ``report`` in order matches
a single ``pipeline`` run.

Exit codes: 0 success, 1 other failure, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import checkpoint
from . import pipeline as pl
from .config import load_config
from .denoiser import Trajectory
from .errors import ConfigError, RotPruneError, StageError
from .report import load_report, report_emit

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _fused(out):
    return checkpoint.load_model(out / "fused.dnrt")


def cmd_fuse(cfg, out):
    model = pl.fuse_stage(pl.initial_model(cfg))
    checkpoint.save_model(out / "fused.dnrt", model)
    return f"wrote {out / 'fused.dnrt'}"


def cmd_calibrate(cfg, out):
    stats = pl.calibrate(_fused(out), pl.calib_inputs(cfg), cfg.calib.batch_size)
    pl.save_calib(out / "calib.dnrt", stats)
    return f"wrote {out / 'calib.dnrt'}"


def cmd_denoise(cfg, out):
    stats = pl.load_calib(out / "calib.dnrt")
    result = pl.denoise_stage(_fused(out), stats, cfg)
    pl.save_rotations(out / "rotations.dnrt", result)
    lines = [f"layer {i}: entropy {t.losses[0]:.6g} -> {t.losses[-1]:.6g}"
             for i, t in enumerate(result.trajectories)]
    return "\n".join(lines)


def cmd_merge(cfg, out):
    rots, _ = pl.load_rotations(out / "rotations.dnrt")
    from .transformer import merge_rotations

    merged = merge_rotations(pl.rotate_stage(_fused(out), rots))
    checkpoint.save_model(out / "merged.dnrt", merged)
    return f"wrote {out / 'merged.dnrt'}"


def cmd_prune(cfg, out):
    merged = checkpoint.load_model(out / "merged.dnrt")
    stats = pl.load_calib(out / "calib.dnrt")
    result = pl.prune_stage(merged, stats, cfg, _fused(out))
    checkpoint.save_model(out / "pruned.dnrt", result.model)
    pl.write_masks(out / "masks", result.masks)
    (out / "prune.json").write_text(json.dumps([asdict(r) for r in result.records], indent=2) + "\n")
    return "\n".join(f"layer {i}: output deviation {r.output_deviation:.6g}" for i, r in enumerate(result.records))


def cmd_eval(cfg, out):
    pruned = checkpoint.load_model(out / "pruned.dnrt")
    metrics = pl.evaluate(pruned, pl.eval_tokens(cfg), _fused(out), cfg.eval.metrics)
    (out / "eval.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return "\n".join(f"{k}: {v}" for k, v in metrics.items() if not isinstance(v, list))


def cmd_report(cfg, out):
    _, meta = pl.load_rotations(out / "rotations.dnrt")
    records = json.loads((out / "prune.json").read_text())
    metrics = json.loads((out / "eval.json").read_text())
    trajectories = meta["trajectories"]
    layers = [
        pl.LayerRecord(i, t[0], t[-1], r["pruned_score_before"], r["pruned_score_after"], r["output_deviation"])
        for i, (t, r) in enumerate(zip(trajectories, records))
    ]
    metrics["mean_output_deviation"] = sum(r.output_deviation for r in layers) / len(layers)
    names = ("fused.dnrt", "calib.dnrt", "rotations.dnrt", "merged.dnrt", "pruned.dnrt")
    report = pl.RunReport(
        layers=layers, trajectories=trajectories, eval=metrics, config=cfg.to_dict(),
        checkpoints={n: pl.sha256_file(out / n) for n in names},
    ).check_finite()
    paths = report_emit(report, out, figures=cfg.output.figures)
    return "\n".join(f"wrote {p}" for p in paths)


def cmd_pipeline(cfg, out):
    report = pl.run_pipeline(cfg, out)
    lines = [
        f"layer {r.layer}: entropy {r.entropy_before:.6g} -> {r.entropy_after:.6g}, "
        f"pruned score {r.pruned_score_before:.6g} -> {r.pruned_score_after:.6g}, "
        f"deviation {r.output_deviation:.6g}"
        for r in report.layers
    ]
    if "perplexity" in report.eval:
        lines.append(f"perplexity {report.eval['perplexity']:.6g}")
    lines.append(f"report written to {out}")
    return "\n".join(lines)


COMMANDS = {
    "fuse": (cmd_fuse, "fold RMSNorm weights into the adjacent linears"),
    "calibrate": (cmd_calibrate, "accumulate per-linear Hessians"),
    "denoise": (cmd_denoise, "train the per-layer rotations"),
    "merge": (cmd_merge, "rotate the weights and merge adjacent rotations"),
    "prune": (cmd_prune, "prune the rotated model"),
    "eval": (cmd_eval, "evaluate the pruned model against the dense one"),
    "report": (cmd_report, "assemble report files from stage outputs"),
    "pipeline": (cmd_pipeline, "run every stage in order"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="rotprune", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, type=Path, help="INI config file")
        p.add_argument("--output-dir", type=Path, help="overrides [output] dir")
    return parser


def _exit_code(exc):
    cause = exc.cause if isinstance(exc, StageError) else exc
    if isinstance(cause, ConfigError):
        return EXIT_CONFIG
    if isinstance(cause, ArithmeticError):
        return EXIT_NUMERIC
    return EXIT_FAIL


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        out = Path(args.output_dir or cfg.output.dir)
        out.mkdir(parents=True, exist_ok=True)
        message = COMMANDS[args.command][0](cfg, out)
    except (RotPruneError, ArithmeticError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    if message:
        print(message)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
