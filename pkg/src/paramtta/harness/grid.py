"""Ablation grid: Cartesian product of adapter x generator x alignment flags."""
from __future__ import annotations

import csv
import itertools
import logging
from pathlib import Path

import numpy as np

from .adapt import RunRecord, run_continual, run_label
from .config import ExperimentConfig
from .train import OfflineArtifacts, offline_train

log = logging.getLogger(__name__)

DEFAULT_AXES = {
    "use_adapter": ["dual", "plain_lora"],
    "use_generator": [True, False],
    "align": ["ot", "kl", "off"],
}

GRID_HEADER = ["run_id", "use_adapter", "use_generator", "align", "seed", "shifted_accuracy",
               "source_before", "source_after", "forgetting"]
SUMMARY_HEADER = ["variant", "n_seeds", "mean_shifted_accuracy", "std_shifted_accuracy", "mean_forgetting"]


def grid_configs(config: ExperimentConfig, axes: dict | None = None, seeds=(0, 1, 2),
                 include_direct: bool = True) -> list[ExperimentConfig]:
    axes = DEFAULT_AXES if axes is None else axes
    names = list(axes)
    out = []
    for seed in seeds:
        for combo in itertools.product(*(axes[n] for n in names)):
            out.append(config.replace(seed=seed, ablation=dict(zip(names, combo))))
        if include_direct:
            out.append(config.replace(seed=seed, ablation={"use_adapter": "off", "use_generator": False,
                                                           "align": "off"}))
    return out


class ArtifactCache:
    """Offline training depends on the seed and the adapter variant only."""

    def __init__(self, root: str | Path | None = None):
        self.root = None if root is None else Path(root)
        self._mem: dict[tuple, OfflineArtifacts] = {}

    def get(self, config: ExperimentConfig) -> OfflineArtifacts:
        key = (config.seed, config.ablation.use_adapter)
        if key not in self._mem:
            ckpt = None if self.root is None else self.root / f"ckpt-{key[1]}-s{key[0]}"
            train_cfg = config.replace(ablation={"use_generator": True, "align": "ot"})
            self._mem[key] = offline_train(train_cfg, ckpt)
        return self._mem[key]


def run_ablation_grid(config: ExperimentConfig, axes: dict | None = None, seeds=(0, 1, 2),
                      out_dir: str | Path | None = None, include_direct: bool = True,
                      cache: ArtifactCache | None = None) -> list[RunRecord]:
    cache = ArtifactCache(None if out_dir is None else Path(out_dir) / "checkpoints") if cache is None else cache
    records = []
    for cfg in grid_configs(config, axes, seeds, include_direct):
        rec = run_continual(cfg, cache.get(cfg))
        log.info("%s: shifted %.4f forgetting %.4f", rec.run_id, rec.shifted_accuracy(), rec.forgetting)
        records.append(rec)
    if out_dir is not None:
        write_grid_csv(records, Path(out_dir) / "grid.csv")
        write_summary_csv(records, Path(out_dir) / "grid_summary.csv")
    return records


def variant_of(rec: RunRecord) -> str:
    """Run label without the seed suffix."""
    return rec.run_id.rsplit("-s", 1)[0]


def summarize(records: list[RunRecord]) -> dict[str, dict]:
    groups: dict[str, list[RunRecord]] = {}
    for r in records:
        groups.setdefault(variant_of(r), []).append(r)
    out = {}
    for name, rs in groups.items():
        acc = np.array([r.shifted_accuracy() for r in rs])
        out[name] = {"n_seeds": len(rs), "mean_shifted_accuracy": float(acc.mean()),
                     "std_shifted_accuracy": float(acc.std()),
                     "mean_forgetting": float(np.mean([r.forgetting for r in rs]))}
    return out


def _fmt(x) -> str:
    return f"{x:.6f}" if isinstance(x, float) else str(x)


def write_grid_csv(records: list[RunRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GRID_HEADER)
        for r in records:
            a = r.config["ablation"]
            w.writerow([_fmt(v) for v in (r.run_id, a["use_adapter"], a["use_generator"], a["align"], r.seed,
                                          r.shifted_accuracy(), r.source_accuracy_before,
                                          r.source_accuracy_after, r.forgetting)])


def write_summary_csv(records: list[RunRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for name, s in sorted(summarize(records).items()):
            w.writerow([name] + [_fmt(s[k]) for k in SUMMARY_HEADER[1:]])


__all__ = ["run_ablation_grid", "grid_configs", "summarize", "ArtifactCache", "run_label"]
