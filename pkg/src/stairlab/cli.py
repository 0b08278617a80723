"""Command-line front end wiring the experiment pipelines together."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import experiments
from .config import ExperimentConfig, default_config, load_config
from .errors import StairlabError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stairlab",
        description="Stair-geometry perception and stepping-policy experiments",
    )
    parser.add_argument("--config", type=Path, default=None, help="experiment config file")
    parser.add_argument("--seed", type=int, default=None, help="override the seed list")
    parser.add_argument("--out", type=Path, default=None, help="output root directory")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", help="generate spec/cloud/grid triples for the seed sweep")

    p_bev = sub.add_parser("bev", help="project a point cloud file into a BEV grid file")
    p_bev.add_argument("cloud", type=Path)
    p_bev.add_argument("grid", type=Path)

    p_est = sub.add_parser("estimate", help="estimate the terrain token from a grid file")
    p_est.add_argument("grid", type=Path)

    p_ing = sub.add_parser("ingest", help="estimate the terrain token from a point cloud file")
    p_ing.add_argument("cloud", type=Path)

    sub.add_parser("train", help="run the three-stage training pipeline")
    sub.add_parser("ablation", help="train and compare all observation modes")
    sub.add_parser("generalize", help="height-generalization sweep")
    sub.add_parser("track", help="velocity tracking under a command schedule")
    sub.add_parser("benchmark-estimator", help="randomized estimator accuracy benchmark")
    return parser


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg = replace(cfg, run=replace(cfg.run, seeds=(args.seed,)))
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
        out_root = experiments.resolve_out_root(cfg, str(args.out) if args.out else None)
        if args.command == "gen":
            rows = experiments.cmd_gen(cfg, out_root)
            print(f"gen: wrote {len(rows)} triples under {out_root / 'gen'}")
        elif args.command == "bev":
            experiments.cmd_bev(cfg, args.cloud, args.grid)
            print(f"bev: wrote {args.grid}")
        elif args.command == "estimate":
            print(experiments.cmd_estimate(cfg, args.grid))
        elif args.command == "ingest":
            print(experiments.cmd_ingest(cfg, args.cloud))
        elif args.command == "train":
            result = experiments.cmd_train(cfg, out_root)
            print(f"train: wrote {result['out']}")
        elif args.command == "ablation":
            experiments.cmd_ablation(cfg, out_root)
            print(f"ablation: wrote {out_root / 'ablation'}")
        elif args.command == "generalize":
            experiments.cmd_generalize(cfg, out_root)
            print(f"generalize: wrote {out_root / 'generalize'}")
        elif args.command == "track":
            experiments.cmd_track(cfg, out_root)
            print(f"track: wrote {out_root / 'track'}")
        elif args.command == "benchmark-estimator":
            summary = experiments.cmd_benchmark_estimator(cfg, out_root)
            print(
                "benchmark: mae_h={mae_h_m:.4f} m mae_d={mae_d_m:.4f} m "
                "mae_theta={mae_theta_deg:.2f} deg acc={class_accuracy:.3f}".format(**summary)
            )
        return 0
    except (StairlabError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
