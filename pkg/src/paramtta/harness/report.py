"""Metrics CSV, per-run JSON and SVG plots."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .adapt import LOSS_KEYS, RunRecord  # noqa: E402

METRICS_HEADER = ["run_id", "domain", "accuracy", *LOSS_KEYS, "seed"]
FLOAT_FMT = "{:.10g}"

# stable SVG ids and no timestamp, so re-rendering gives identical files
matplotlib.rcParams["svg.hashsalt"] = "paramtta"
_SVG_META = {"Date": None, "Creator": None}


def _writable_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory is not writable: {path} ({exc})") from exc
    return path


def metrics_rows(records: list[RunRecord]) -> list[list[str]]:
    rows = []
    for r in records:
        for d in r.domains:
            vals = [d["accuracy"]] + [d[k] for k in LOSS_KEYS]
            rows.append([r.run_id, d["domain"], *(FLOAT_FMT.format(float(v)) for v in vals), str(r.seed)])
    return rows


def write_metrics_csv(records: list[RunRecord], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        w.writerows(metrics_rows(records))
    return path


def write_run_json(rec: RunRecord, out_dir: str | Path) -> Path:
    path = Path(out_dir) / f"run_{rec.run_id}.json"
    path.write_text(json.dumps(rec.to_dict(), indent=1))
    return path


def load_run_json(path: str | Path) -> RunRecord:
    return RunRecord.from_dict(json.loads(Path(path).read_text()))


def load_records(out_dir: str | Path) -> list[RunRecord]:
    return [load_run_json(p) for p in sorted(Path(out_dir).glob("run_*.json"))]


def plot_accuracy(records: list[RunRecord], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    for r in records:
        acc = [d["accuracy"] for d in r.domains]
        ax.plot(range(1, len(acc) + 1), acc, marker="o", label=r.run_id)
    if records:
        names = [d["domain"] for d in records[0].domains]
        ax.set_xticks(range(1, len(names) + 1), names, rotation=20, fontsize=8)
    ax.set_xlabel("domain")
    ax.set_ylabel("online accuracy")
    ax.set_ylim(0, 1.02)
    if 0 < len(records) <= 12:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def plot_losses(records: list[RunRecord], path: Path) -> Path:
    fig, axes = plt.subplots(1, len(LOSS_KEYS), figsize=(12, 3))
    for ax, key in zip(axes, LOSS_KEYS):
        for r in records:
            ax.plot([s["step"] for s in r.steps], [s[key] for s in r.steps], lw=0.8, label=r.run_id)
        ax.set_title(key, fontsize=9)
        ax.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def emit_report(records: list[RunRecord], out_dir: str | Path) -> dict[str, Path]:
    """Write ``metrics.csv``, one ``run_<id>.json`` per record and ``plots/*.svg``."""
    out = _writable_dir(Path(out_dir))
    plots = _writable_dir(out / "plots")
    files = {"metrics": write_metrics_csv(records, out / "metrics.csv")}
    for r in records:
        files[r.run_id] = write_run_json(r, out)
    files["accuracy_plot"] = plot_accuracy(records, plots / "accuracy.svg")
    files["loss_plot"] = plot_losses(records, plots / "losses.svg")
    return files
