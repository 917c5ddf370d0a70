"""Rank-1 identity retrieval of frontalized and raw profile probes against a frontal gallery."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .diffgraph import no_grad
from .generator import Generator
from .losses import IdentityEmbedder
from .synthdata import FaceDataset, render, to_uint8

Pose = Tuple[int, int]


def pose_key(pose: Pose) -> str:
    yaw, pitch = pose
    return f"{yaw:+d}/{pitch:+d}"


@dataclass(frozen=True)
class Count:
    hits: int
    total: int

    @property
    def accuracy(self) -> float:
        return self.hits / self.total if self.total else float("nan")

    def __add__(self, other: "Count") -> "Count":
        return Count(self.hits + other.hits, self.total + other.total)

    def to_dict(self) -> dict:
        return {"hits": self.hits, "total": self.total, "accuracy": self.accuracy}


def pooled(counts: Iterable[Count]) -> Count:
    out = Count(0, 0)
    for c in counts:
        out = out + c
    return out


@dataclass
class EvalReport:
    """Per-pose rank-1 counts for frontalized and raw probes, plus per-pose pixel L1."""

    poses: List[Pose]
    frontalized: Dict[Pose, Count]
    raw: Dict[Pose, Count]
    pixel_l1: Dict[Pose, float]
    gallery_size: int
    grid_path: Optional[str] = None

    def _select(self, kind: str) -> Dict[Pose, Count]:
        if kind not in ("frontalized", "raw"):
            raise ValueError(f"kind must be 'frontalized' or 'raw', got {kind!r}")
        return getattr(self, kind)

    def average(self, kind: str = "frontalized") -> Count:
        """Pooled count over every non-frontal pose bucket."""
        counts = self._select(kind)
        return pooled(c for p, c in counts.items() if p != (0, 0))

    def at_least(self, min_abs_yaw: int, kind: str = "frontalized") -> Count:
        counts = self._select(kind)
        return pooled(c for (yaw, _), c in counts.items() if abs(yaw) >= min_abs_yaw)

    def to_dict(self) -> dict:
        return {
            "gallery_size": self.gallery_size,
            "poses": [pose_key(p) for p in self.poses],
            "frontalized": {pose_key(p): self.frontalized[p].to_dict() for p in self.poses},
            "raw": {pose_key(p): self.raw[p].to_dict() for p in self.poses},
            "pixel_l1": {pose_key(p): self.pixel_l1[p] for p in self.poses},
            "average": {"frontalized": self.average("frontalized").to_dict(),
                        "raw": self.average("raw").to_dict()},
            "grid_path": self.grid_path,
        }

    def format_table(self) -> str:
        head = ["pose", "frontalized", "raw", "pixel_L1"]
        rows = []
        for p in self.poses:
            f, r = self.frontalized[p], self.raw[p]
            rows.append([pose_key(p), f"{f.hits}/{f.total} ({f.accuracy:.3f})",
                         f"{r.hits}/{r.total} ({r.accuracy:.3f})", f"{self.pixel_l1[p]:.4f}"])
        f, r = self.average("frontalized"), self.average("raw")
        rows.append(["avg", f"{f.hits}/{f.total} ({f.accuracy:.3f})", f"{r.hits}/{r.total} ({r.accuracy:.3f})", ""])
        return format_rows(head, rows)


def format_rows(head: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(head, *rows)]
    line = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()
    return "\n".join([line(head), line(["-" * w for w in widths])] + [line(r) for r in rows])


def _normalise(x: np.ndarray) -> np.ndarray:
    x = x.reshape(len(x), -1).astype(np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def rank1(probe_features: np.ndarray, probe_ids: Sequence[int], gallery_features: np.ndarray,
          gallery_ids: Sequence[int]) -> np.ndarray:
    """Boolean hit per probe: the most cosine-similar gallery entry has the probe's identity.

    Ties resolve to the lowest gallery index.
    """
    if len(gallery_features) == 0:
        raise ValueError("empty gallery")
    sim = _normalise(probe_features) @ _normalise(gallery_features).T
    best = np.asarray(gallery_ids)[np.argmax(sim, axis=1)]
    return best == np.asarray(probe_ids)


def frontalize(G: Generator, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Full-resolution generator output for a stack of profile images."""
    dtype = next(iter(G.parameters())).dtype
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out.append(G(images[i:i + batch_size].astype(dtype))[-1].data)
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[1:])


def embed(embedder: IdentityEmbedder, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    dtype = embedder.feature_scale.dtype
    return np.concatenate([embedder.embed(images[i:i + batch_size].astype(dtype))
                           for i in range(0, len(images), batch_size)])


def gallery(dataset: FaceDataset, identities: Sequence[int]) -> np.ndarray:
    """One frontal, unit-gain render per identity."""
    return np.stack([render(dataset.identity_params(i).frontal(), dataset.image_size) for i in identities])


def evaluate(G: Generator, embedder: IdentityEmbedder, dataset: FaceDataset, split: str = "test",
             grid_path=None) -> EvalReport:
    pairs = dataset.split(split)
    if not pairs:
        raise ValueError(f"split {split!r} is empty")
    ids = sorted({p.identity for p in pairs})
    gallery_feats = embed(embedder, gallery(dataset, ids))

    profiles = np.stack([p.profile for p in pairs])
    frontals = np.stack([p.frontal for p in pairs])
    fakes = frontalize(G, profiles)
    probe_ids = [p.identity for p in pairs]
    hit_fake = rank1(embed(embedder, fakes), probe_ids, gallery_feats, ids)
    hit_raw = rank1(embed(embedder, profiles), probe_ids, gallery_feats, ids)
    l1 = np.abs(fakes.astype(np.float64) - frontals).reshape(len(pairs), -1).mean(axis=1)

    poses = [p for p in dataset.poses if any(q.pose == p for q in pairs)]
    frontalized, raw, pixel = {}, {}, {}
    for pose in poses:
        sel = np.array([q.pose == pose for q in pairs])
        frontalized[pose] = Count(int(hit_fake[sel].sum()), int(sel.sum()))
        raw[pose] = Count(int(hit_raw[sel].sum()), int(sel.sum()))
        pixel[pose] = float(l1[sel].mean())

    report = EvalReport(poses, frontalized, raw, pixel, gallery_size=len(ids))
    if grid_path is not None:
        per_pose = [next(i for i, q in enumerate(pairs) if q.pose == pose) for pose in poses]
        tiles = [[profiles[i] for i in per_pose], [fakes[i] for i in per_pose], [frontals[i] for i in per_pose]]
        report.grid_path = str(save_grid(tiles, grid_path))
    return report


def tile_grid(rows: Sequence[Sequence[np.ndarray]], pad: int = 1) -> np.ndarray:
    """Arrange ``(C, H, W)`` images in [-1, 1] into one uint8 raster, ``pad`` pixels apart."""
    if not rows or not rows[0]:
        raise ValueError("empty grid")
    ncols = len(rows[0])
    if any(len(r) != ncols for r in rows):
        raise ValueError("grid rows differ in length")
    c, h, w = rows[0][0].shape
    canvas = np.zeros((len(rows) * (h + pad) + pad, ncols * (w + pad) + pad, c), dtype=np.uint8)
    for r, row in enumerate(rows):
        for k, img in enumerate(row):
            y, x = pad + r * (h + pad), pad + k * (w + pad)
            canvas[y:y + h, x:x + w] = to_uint8(img).reshape(h, w, c)
    return canvas[..., 0] if c == 1 else canvas


def save_grid(rows: Sequence[Sequence[np.ndarray]], path) -> Path:
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(tile_grid(rows)).save(path, format="PNG")
    return path
