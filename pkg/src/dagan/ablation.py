"""Train several modes on identical data and seed, then compare rank-1 per pose."""

from __future__ import annotations

import logging
import time
from pathlib import Path
from typing import Dict, Optional, Sequence

from .evaluation import EvalReport, evaluate, format_rows, pose_key
from .losses import IdentityEmbedder, train_embedder
from .synthdata import FaceDataset
from .trainer import TrainConfig, build_dataset, init_state, run

log = logging.getLogger(__name__)


def run_ablation(config: TrainConfig, modes: Sequence[str], out_dir=None, dataset: Optional[FaceDataset] = None,
                 embedder: Optional[IdentityEmbedder] = None) -> dict:
    """One row per mode; every mode sees the same dataset, embedder and seed.

    The returned dict is JSON-ready: ``poses`` lists the bucket keys,
    ``rows`` holds per-mode counts, and ``raw`` holds the raw-profile
    baseline (identical for all modes since it does not involve G).
    """
    dataset = dataset or build_dataset(config)
    if embedder is None:
        embedder = train_embedder(dataset.split("train"), epochs=config.embedder_epochs, seed=config.seed,
                                  dtype=config.np_dtype, min_accuracy=None)
    rows, raw, poses = [], None, None
    for mode in modes:
        cfg = TrainConfig.from_dict({**config.to_dict(), "mode": mode})
        started = time.perf_counter()
        mode_dir = Path(out_dir) / mode if out_dir is not None else None
        state, records = run(cfg, dataset, out_dir=mode_dir, state=init_state(cfg, dataset, embedder))
        report: EvalReport = evaluate(state.G, embedder, dataset)
        seconds = time.perf_counter() - started
        log.info("%s: average rank-1 %.3f (%.0f s)", mode, report.average().accuracy, seconds)
        poses = [pose_key(p) for p in report.poses]
        rows.append({
            "mode": mode,
            "buckets": {pose_key(p): report.frontalized[p].to_dict() for p in report.poses},
            "average": report.average().to_dict(),
            "pixel_l1": {pose_key(p): report.pixel_l1[p] for p in report.poses},
            "final_running_L_pixel": records[-1]["running_L_pixel"] if records else None,
            "seconds": seconds,
        })
        if raw is None:
            raw = {"buckets": {pose_key(p): report.raw[p].to_dict() for p in report.poses},
                   "average": report.average("raw").to_dict()}
    return {"seed": config.seed, "steps": config.steps, "gallery_size": len(dataset.test_ids),
            "poses": poses or [], "rows": rows, "raw": raw}


def format_ablation(result: Dict) -> str:
    """Plain-text table: one row per mode (plus raw profiles), one column per pose bucket, then the average."""
    head = ["mode"] + list(result["poses"]) + ["avg"]
    body = []
    entries = [(r["mode"], r) for r in result["rows"]]
    if result.get("raw"):
        entries.append(("raw profile", result["raw"]))
    for name, entry in entries:
        cells = [f"{entry['buckets'][p]['accuracy']:.3f}" for p in result["poses"]]
        body.append([name] + cells + [f"{entry['average']['accuracy']:.3f}"])
    return format_rows(head, body)
