"""Command line entry point: ``python -m paramtta {train,adapt,grid,report}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig

log = logging.getLogger("paramtta")

ADAPTER_FLAG = {"dual": "dual", "plain": "plain_lora", "off": "off"}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="paramtta", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", type=Path, help="YAML experiment file (defaults if omitted)")
        sp.add_argument("--seed", type=int, help="override config seed")
        sp.add_argument("--out", type=Path, default=Path(out_default))
        sp.add_argument("--no-generator", action="store_true", help="disable parameter regeneration")
        sp.add_argument("--align", choices=["ot", "kl", "off"])
        sp.add_argument("--adapter", choices=list(ADAPTER_FLAG))
        sp.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("train", help="offline source training"), "runs/ckpt")
    sp = sub.add_parser("adapt", help="continual test-time adaptation")
    common(sp, "runs/adapt")
    sp.add_argument("--ckpt", type=Path, default=Path("runs/ckpt"), help="directory written by `train`")
    sp = sub.add_parser("grid", help="ablation grid")
    common(sp, "runs/grid")
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    sp = sub.add_parser("report", help="re-render metrics and plots from run_*.json")
    sp.add_argument("--out", type=Path, default=Path("runs/adapt"))
    sp.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    abl = {}
    if args.no_generator:
        abl["use_generator"] = False
    if args.align:
        abl["align"] = args.align
    if args.adapter:
        abl["use_adapter"] = ADAPTER_FLAG[args.adapter]
    return cfg.replace(ablation=abl) if abl else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .report import emit_report, load_records

    if args.command == "report":
        records = load_records(args.out)
        if not records:
            print(f"error: no run_*.json files in {args.out}", file=sys.stderr)
            return 2
        emit_report(records, args.out)
        print(f"re-rendered {len(records)} runs into {args.out}")
        return 0

    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    if args.command == "train":
        from .train import offline_train

        arts = offline_train(cfg, args.out)
        cfg.dump(args.out / "config.yaml")
        print(f"source test accuracy {arts.metrics['source_test_accuracy']:.4f}; checkpoints in {args.out}")
        return 0

    if args.command == "adapt":
        from .adapt import run_continual
        from .train import OfflineArtifacts

        try:
            arts = OfflineArtifacts.load(args.ckpt, need_generator=cfg.ablation.use_generator
                                         and cfg.ablation.use_adapter != "off")
        except FileNotFoundError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        rec = run_continual(cfg, arts)
        emit_report([rec], args.out)
        for name, acc in rec.domain_accuracy().items():
            print(f"{name:18s} {acc:.4f}")
        print(f"mean shifted accuracy {rec.shifted_accuracy():.4f}; source drop {rec.forgetting:+.4f}")
        return 0

    from .grid import run_ablation_grid, summarize

    records = run_ablation_grid(cfg, seeds=args.seeds, out_dir=args.out)
    emit_report(records, args.out)
    for name, s in sorted(summarize(records).items()):
        print(f"{name:28s} {s['mean_shifted_accuracy']:.4f} +- {s['std_shifted_accuracy']:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
