"""Write a :class:`RunReport` to disk and read it back.

Files written by :func:`report_emit`:

``report.json``
    The whole report; ``schema_version`` identifies the layout.
``entropy_trajectory.csv``
    ``step, total, layer_0, ..., layer_{L-1}``: the entropy loss of each
    layer before each optimizer step, plus the final value.
``layer_table.csv``
    One row per layer: ``layer, entropy_before, entropy_after,
    pruned_score_before, pruned_score_after, output_deviation``.
``timings.json``
    Wall-clock seconds per stage. Kept apart so every other file is
    reproducible byte for byte.
``entropy_trajectory.png``, ``layer_table.png``
    Figures, when requested.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, fields
from pathlib import Path

from .errors import RotPruneError
from .pipeline import SCHEMA_VERSION, LayerRecord, RunReport

LAYER_COLUMNS = [f.name for f in fields(LayerRecord)]


class ReportError(RotPruneError):
    pass


def report_to_dict(report: RunReport) -> dict:
    d = asdict(report)
    d.pop("timings")
    return d


def report_from_dict(d: dict, timings=None) -> RunReport:
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ReportError(f"unsupported report schema version {version!r}")
    return RunReport(
        layers=[LayerRecord(**r) for r in d["layers"]],
        trajectories=[list(t) for t in d["trajectories"]],
        eval=d["eval"],
        config=d["config"],
        checkpoints=d.get("checkpoints", {}),
        schema_version=version,
        timings=dict(timings or {}),
    )


def trajectory_rows(report: RunReport) -> list:
    n = max((len(t) for t in report.trajectories), default=0)
    rows = []
    for step in range(n):
        # shorter trajectories hold their final value
        vals = [t[min(step, len(t) - 1)] for t in report.trajectories]
        rows.append([step, sum(vals)] + vals)
    return rows


def _write(path: Path, writer):
    try:
        writer(path)
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc}") from exc
    return path


def _write_csv(path, header, rows):
    def go(p):
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return _write(Path(path), go)


def report_emit(report: RunReport, directory, figures=True) -> list:
    """Write the report files into ``directory``; returns the paths written."""
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"cannot create {d}: {exc}") from exc
    text = json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n"
    paths = [
        _write(d / "report.json", lambda p: p.write_text(text)),
        _write(d / "timings.json", lambda p: p.write_text(json.dumps(report.timings, indent=2, sort_keys=True) + "\n")),
        _write_csv(
            d / "entropy_trajectory.csv",
            ["step", "total"] + [f"layer_{i}" for i in range(len(report.trajectories))],
            trajectory_rows(report),
        ),
        _write_csv(
            d / "layer_table.csv", LAYER_COLUMNS,
            [[getattr(r, c) for c in LAYER_COLUMNS] for r in report.layers],
        ),
    ]
    if figures:
        paths += plot_report(report, d)
    return paths


def load_report(directory) -> RunReport:
    d = Path(directory)
    try:
        data = json.loads((d / "report.json").read_text())
    except OSError as exc:
        raise ReportError(f"cannot read {d / 'report.json'}: {exc}") from exc
    timings_path = d / "timings.json"
    timings = json.loads(timings_path.read_text()) if timings_path.exists() else {}
    return report_from_dict(data, timings)


def plot_report(report: RunReport, directory) -> list:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    d = Path(directory)
    meta = {"Software": None}
    paths = []

    fig, ax = plt.subplots(figsize=(6, 4))
    for i, t in enumerate(report.trajectories):
        ax.plot(range(len(t)), t, label=f"layer {i}")
    ax.set_xlabel("step")
    ax.set_ylabel("entropy loss (nats)")
    ax.set_title("Entropy during rotation training")
    if report.trajectories:
        ax.legend(fontsize="small")
    fig.tight_layout()
    path = d / "entropy_trajectory.png"
    _write(path, lambda p: fig.savefig(p, dpi=100, metadata=meta))
    plt.close(fig)
    paths.append(path)

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    idx = [r.layer for r in report.layers]
    width = 0.4
    for ax, (a, b, title) in zip(axes, [
        ("entropy_before", "entropy_after", "Entropy"),
        ("pruned_score_before", "pruned_score_after", "Pruned score mass"),
    ]):
        ax.bar([i - width / 2 for i in idx], [getattr(r, a) for r in report.layers], width, label="before")
        ax.bar([i + width / 2 for i in idx], [getattr(r, b) for r in report.layers], width, label="after")
        ax.set_xlabel("layer")
        ax.set_xticks(idx)
        ax.set_title(title)
        ax.legend(fontsize="small")
    fig.tight_layout()
    path = d / "layer_table.png"
    _write(path, lambda p: fig.savefig(p, dpi=100, metadata=meta))
    plt.close(fig)
    paths.append(path)
    return paths
