"""``dagan`` command line: train, synthesize, evaluate, gradcheck, ablate.

Exit codes: 0 success, 1 invalid input, 2 numeric failure, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .diffgraph.tensor import ShapeError
from .generator import DivergenceError
from .synthdata import PoseError, parse_poses

log = logging.getLogger("dagan")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(ValueError):
    pass


class NumericFailure(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# Shared option handling
# ---------------------------------------------------------------------------

def _config(args, required: bool = False):
    from .trainer import TrainConfig, load_config

    if args.config is None:
        if required:
            raise UsageError("--config is required")
        cfg = TrainConfig()
    else:
        cfg = load_config(args.config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        overrides["mode"] = args.mode
    if getattr(args, "poses", None):
        overrides["poses"] = [list(p) for p in _poses(args.poses)]
    if getattr(args, "steps", None) is not None:
        overrides["steps"] = args.steps
    if overrides:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), **overrides})
    return cfg


def _poses(text: str):
    try:
        poses = parse_poses(text)
    except ValueError as exc:
        raise UsageError(f"cannot parse --poses {text!r}: {exc}") from None
    if not poses:
        raise UsageError("--poses is empty")
    return poses


def _out_dir(args, default: str) -> Path:
    return Path(args.out if args.out is not None else default)


def _load_checkpoint(path):
    from .trainer import load_state

    if path is None:
        raise UsageError("--checkpoint is required")
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_state(path)


def _dataset_for(state, poses=None):
    from .trainer import TrainConfig, build_dataset

    cfg = state.config
    if poses is not None:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "poses": [list(p) for p in poses]})
    return build_dataset(cfg)


def _check_compatible(state, args) -> None:
    """A --config passed next to --checkpoint must describe the same networks."""
    if args.config is None:
        return
    from .trainer import load_config

    cfg = load_config(args.config)
    keys = ("image_size", "channels", "base_channels", "scales", "mode")
    diff = [k for k in keys if getattr(cfg, k) != getattr(state.config, k)]
    if diff:
        raise UsageError("config does not match checkpoint: " + ", ".join(
            f"{k}={getattr(cfg, k)!r} vs {getattr(state.config, k)!r}" for k in diff))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    from .trainer import run

    cfg = _config(args)
    out = _out_dir(args, "runs/train")
    state, records = run(cfg, out_dir=out, log_every=args.log_every)
    last = records[-1] if records else {}
    print(json.dumps({"steps": state.step, "checkpoint": str(out / "checkpoint.npz"),
                      "final": {k: v for k, v in last.items() if k != "step"}}, indent=2))
    return EXIT_OK


def cmd_synthesize(args) -> int:
    from .evaluation import frontalize, save_grid

    if args.count < 1:
        raise UsageError("--count must be at least 1; an empty grid has nothing to show")
    state = _load_checkpoint(args.checkpoint)
    _check_compatible(state, args)
    poses = _poses(args.poses) if args.poses else state.config.pose_list
    dataset = _dataset_for(state, poses)
    pairs = dataset.split(args.split)
    ids = sorted({p.identity for p in pairs})
    if len(ids) < args.count:
        raise UsageError(f"--count {args.count} exceeds the {len(ids)} identities in the {args.split} split")
    chosen = [p for pose in poses for i in ids[:args.count] for p in pairs if p.identity == i and p.pose == pose]
    profiles = np.stack([p.profile for p in chosen])
    fakes = frontalize(state.G, profiles)
    rows = [list(profiles), list(fakes), [p.frontal for p in chosen]]
    out = _out_dir(args, "runs/synthesize")
    path = save_grid(rows, out / "synthesis.png")
    print(json.dumps({"grid": str(path), "rows": 3, "columns": len(chosen),
                      "poses": [list(p) for p in poses], "count": args.count}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate

    state = _load_checkpoint(args.checkpoint)
    _check_compatible(state, args)
    poses = _poses(args.poses) if args.poses else None
    dataset = _dataset_for(state, poses)
    out = _out_dir(args, "runs/evaluate")
    report = evaluate(state.G, state.embedder, dataset, split=args.split, grid_path=out / "samples.png")
    (out / "eval.json").write_text(json.dumps(report.to_dict(), indent=2))
    print(report.format_table())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import THRESHOLD, failures, run_suite

    table = run_suite(trials=args.trials, seed=args.seed if args.seed is not None else 0)
    width = max(len(k) for k in table)
    for name, err in table.items():
        status = "ok" if err <= THRESHOLD else "FAIL"
        print(f"{name:<{width}}  {err:.3e}  {status}")
    bad = failures(table)
    if bad:
        raise NumericFailure(f"gradient check above {THRESHOLD:g} for: {', '.join(bad)}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import format_ablation, run_ablation
    from .trainer import MODES

    cfg = _config(args, required=True)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()] if args.modes else list(MODES)
    unknown = [m for m in modes if m not in MODES]
    if unknown or not modes:
        raise UsageError(f"unknown modes {unknown}; choose from {', '.join(MODES)}")
    out = _out_dir(args, "runs/ablate")
    result = run_ablation(cfg, modes, out_dir=out)
    text = format_ablation(result)
    (out / "ablation.txt").write_text(text + "\n")
    (out / "ablation.json").write_text(json.dumps(result, indent=2))
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from .trainer import MODES

    parser = argparse.ArgumentParser(prog="dagan", description="Attention-guided face frontalization at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, checkpoint=False, out=True, seed=True, mode=False, poses=False):
        if config:
            p.add_argument("--config", help="YAML file whose keys are TrainConfig fields")
        if checkpoint:
            p.add_argument("--checkpoint", help="training checkpoint (.npz)")
        if out:
            p.add_argument("--out", help="output directory")
        if seed:
            p.add_argument("--seed", type=int, help="overrides the config seed")
        if mode:
            p.add_argument("--mode", choices=list(MODES), help="ablation mode")
        if poses:
            p.add_argument("--poses", help="comma list of yaws or yaw/pitch pairs, e.g. 0,30,-60 or 30/0,0/30")

    p = sub.add_parser("train", help="train a generator")
    common(p, mode=True, poses=True)
    p.add_argument("--steps", type=int, help="overrides the config step count")
    p.add_argument("--log-every", type=int, default=100, help="log running losses every N steps (with -v)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize", help="write a profile / synthesized / ground-truth grid")
    common(p, checkpoint=True, seed=False, poses=True)
    p.add_argument("--count", type=int, default=1, help="samples per pose")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", help="rank-1 retrieval per pose on the held-out split")
    common(p, checkpoint=True, seed=False, poses=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op, attention and loss")
    common(p, config=False, out=False)
    p.add_argument("--trials", type=int, default=5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and evaluate several modes on the same seed and data")
    common(p, poses=True)
    p.add_argument("--modes", help=f"comma list (default: all of {', '.join(MODES)})")
    p.add_argument("--steps", type=int, help="overrides the config step count")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    from .checkpoint import CheckpointError
    from .trainer import ConfigError, NonFiniteLossError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NumericFailure, NonFiniteLossError, DivergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ConfigError, PoseError, ShapeError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
