"""Procedural paired-face data.

Faces are flat-shaded cartoons assembled from ellipses and rectangles whose
sizes, positions and grey levels are drawn per identity. A posed view is
rendered by treating the face as a vertical cylinder: every output pixel is
mapped back to the frontal surface point it shows, and points that rotated
out of view are replaced by the back of the head (hair). Pitch uses the same
construction on the vertical axis.

All coordinates are fractions of the image side; pixel ``(row, col)``
samples the point ``((col + 0.5) / S, (row + 0.5) / S)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

YAW_GRID = (0, 15, -15, 30, -30, 45, -45, 60, -60, 75, -75, 90, -90)
PITCH_GRID = (0, 30, -30)
DEFAULT_POSES: Tuple[Tuple[int, int], ...] = tuple((yaw, 0) for yaw in YAW_GRID)

# Region labels of the frontal label map.
BACKGROUND, SKIN, HAIR, EYE, BROW, NOSE, MOUTH = range(7)
KEYPOINT_LABELS = (EYE, BROW, NOSE, MOUTH)
REGION_NAMES = ("background", "skin", "hair", "eye", "brow", "nose", "mouth")


class PoseError(ValueError):
    pass


@dataclass(frozen=True)
class Geometry:
    cx: float
    cy: float
    face_a: float       # half-width of the face ellipse
    face_b: float       # half-height
    hair_w: float       # extra half-width of the hair ellipse
    hair_h: float       # extra half-height of the hair ellipse
    hair_cut: float     # hair only above cy - hair_cut * face_b
    eye_dx: float
    eye_dy: float       # relative to cy (negative is up)
    eye_rx: float
    eye_ry: float
    brow_gap: float
    brow_hw: float
    brow_hh: float
    nose_dy: float
    nose_hw: float
    nose_hh: float
    mouth_dy: float
    mouth_rx: float
    mouth_ry: float


@dataclass(frozen=True)
class FaceParams:
    identity: int
    geometry: Geometry
    albedo: Dict[int, Tuple[float, ...]]    # region label -> per-channel intensity in [0, 1]
    yaw: int = 0
    pitch: int = 0
    gain: float = 1.0

    @property
    def channels(self) -> int:
        return len(self.albedo[SKIN])

    def frontal(self) -> "FaceParams":
        return replace(self, yaw=0, pitch=0, gain=1.0)

    def posed(self, yaw: int, pitch: int = 0, gain: float = 1.0) -> "FaceParams":
        return replace(self, yaw=yaw, pitch=pitch, gain=gain)


def sample_identity(identity: int, seed: int, channels: int = 1) -> FaceParams:
    """Geometry and albedo for one identity; a pure function of (identity, seed)."""
    rng = np.random.default_rng([int(seed), int(identity), 7])
    u = rng.uniform
    face_b = u(0.30, 0.38)
    geo = Geometry(
        cx=0.5,
        cy=u(0.53, 0.59),
        face_a=u(0.25, 0.33),
        face_b=face_b,
        hair_w=u(0.02, 0.07),
        hair_h=u(0.05, 0.13),
        hair_cut=u(0.2, 0.6),
        eye_dx=u(0.09, 0.14),
        eye_dy=u(-0.13, -0.05),
        eye_rx=u(0.04, 0.07),
        eye_ry=u(0.025, 0.05),
        brow_gap=u(0.055, 0.085),
        brow_hw=u(0.045, 0.08),
        brow_hh=u(0.012, 0.03),
        nose_dy=u(0.0, 0.07),
        nose_hw=u(0.025, 0.05),
        nose_hh=u(0.03, 0.07),
        mouth_dy=u(0.14, 0.21),
        mouth_rx=u(0.06, 0.12),
        mouth_ry=u(0.018, 0.04),
    )
    ranges = {
        SKIN: (0.5, 0.9), HAIR: (0.0, 0.4), EYE: (0.0, 0.25), BROW: (0.05, 0.4),
        NOSE: (0.3, 0.65), MOUTH: (0.15, 0.6),
    }
    albedo = {BACKGROUND: (0.0,) * channels}
    for label, (lo, hi) in ranges.items():
        albedo[label] = tuple(float(v) for v in rng.uniform(lo, hi, size=channels))
    return FaceParams(identity=int(identity), geometry=geo, albedo=albedo)


def _pixel_grid(size: int):
    c = (np.arange(size) + 0.5) / size
    x, y = np.meshgrid(c, c)
    return x, y


def _in_face(g: Geometry, x, y):
    return ((x - g.cx) / g.face_a) ** 2 + ((y - g.cy) / g.face_b) ** 2 <= 1.0


def frontal_labels(g: Geometry, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Region label of the frontal face at points ``(x, y)``."""
    labels = np.full(x.shape, BACKGROUND, dtype=np.int8)
    hair = (((x - g.cx) / (g.face_a + g.hair_w)) ** 2 + ((y - g.cy) / (g.face_b + g.hair_h)) ** 2 <= 1.0) \
        & (y <= g.cy - g.hair_cut * g.face_b)
    labels[hair] = HAIR
    face = _in_face(g, x, y)
    labels[face] = SKIN
    dx = np.abs(x - g.cx)
    eye = ((dx - g.eye_dx) / g.eye_rx) ** 2 + ((y - g.cy - g.eye_dy) / g.eye_ry) ** 2 <= 1.0
    brow_y = g.cy + g.eye_dy - g.brow_gap
    brow = (np.abs(dx - g.eye_dx) <= g.brow_hw) & (np.abs(y - brow_y) <= g.brow_hh)
    nose = (dx <= g.nose_hw) & (np.abs(y - g.cy - g.nose_dy) <= g.nose_hh)
    mouth = (x - g.cx) ** 2 / g.mouth_rx ** 2 + (y - g.cy - g.mouth_dy) ** 2 / g.mouth_ry ** 2 <= 1.0
    for label, region in ((BROW, brow), (EYE, eye), (NOSE, nose), (MOUTH, mouth)):
        labels[face & region] = label
    return labels


def posed_labels(params: FaceParams, size: int) -> np.ndarray:
    """Label map of the face as seen at ``(params.yaw, params.pitch)``."""
    if params.yaw not in YAW_GRID or params.pitch not in PITCH_GRID:
        raise PoseError(f"pose (yaw={params.yaw}, pitch={params.pitch}) is outside the pose grid")
    g = params.geometry
    x, y = _pixel_grid(size)
    face = _in_face(g, x, y)
    xs, ys = x.copy(), y.copy()
    back = np.zeros_like(face)

    if params.pitch:
        beta = math.radians(params.pitch)
        half_h = g.face_b * np.sqrt(np.clip(1.0 - ((x - g.cx) / g.face_a) ** 2, 0.0, None))
        v = np.clip((y - g.cy) / np.where(half_h > 0, half_h, 1.0), -1.0, 1.0)
        psi = np.arcsin(v) - beta
        hidden = face & (np.abs(psi) > math.pi / 2)
        ys = np.where(face, g.cy + half_h * np.sin(psi), ys)
        # Tilting forward exposes the crown, tilting back the underside of the chin.
        back |= hidden & (beta > 0)
        ys = np.where(hidden & (beta < 0), g.cy + half_h, ys)

    if params.yaw:
        alpha = math.radians(params.yaw)
        half_w = g.face_a * np.sqrt(np.clip(1.0 - ((ys - g.cy) / g.face_b) ** 2, 0.0, None))
        u = np.clip((x - g.cx) / np.where(half_w > 0, half_w, 1.0), -1.0, 1.0)
        theta = np.arcsin(u) - alpha
        hidden = face & (np.abs(theta) > math.pi / 2 + 1e-12)
        xs = np.where(face, g.cx + half_w * np.sin(theta), xs)
        back |= hidden

    labels = np.where(face, frontal_labels(g, xs, ys), frontal_labels(g, x, y)).astype(np.int8)
    labels[back] = HAIR
    return labels


def paint(labels: np.ndarray, params: FaceParams) -> np.ndarray:
    """Grey levels for a label map, scaled by ``params.gain``, mapped to [-1, 1]."""
    lut = np.array([params.albedo[k] for k in range(len(REGION_NAMES))], dtype=np.float64)  # R x C
    img = lut[labels.astype(np.intp)]  # H, W, C
    img = np.clip(img * params.gain, 0.0, 1.0) * 2.0 - 1.0
    return np.ascontiguousarray(np.moveaxis(img, -1, 0))


def render(params: FaceParams, size: int = 32, return_labels: bool = False):
    """Rasterise ``params`` to a ``(channels, size, size)`` array in [-1, 1]."""
    labels = posed_labels(params, size)
    img = paint(labels, params)
    return (img, labels) if return_labels else img


@dataclass(frozen=True, eq=False)
class ImagePair:
    profile: np.ndarray
    frontal: np.ndarray
    identity: int
    pose: Tuple[int, int]
    params: FaceParams = field(repr=False, compare=False)


@dataclass
class FaceDataset:
    pairs: List[ImagePair]
    train_ids: Tuple[int, ...]
    test_ids: Tuple[int, ...]
    image_size: int
    seed: int
    poses: Tuple[Tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def split(self, name: str) -> List[ImagePair]:
        ids = {"train": self.train_ids, "test": self.test_ids, "all": None}[name]
        if ids is None:
            return list(self.pairs)
        keep = set(ids)
        return [p for p in self.pairs if p.identity in keep]

    def identity_params(self, identity: int) -> FaceParams:
        for p in self.pairs:
            if p.identity == identity:
                return p.params.frontal()
        raise KeyError(identity)


def parse_poses(text: str) -> Tuple[Tuple[int, int], ...]:
    """Parse ``"0,15,-30"`` (yaws) or ``"30/0,0/30"`` (yaw/pitch) into pose tuples."""
    poses = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        yaw, _, pitch = item.partition("/")
        poses.append((int(yaw), int(pitch or 0)))
    return tuple(poses)


def make_dataset(n_identities: int, poses: Sequence[Tuple[int, int]] = DEFAULT_POSES, seed: int = 0,
                 image_size: int = 32, channels: int = 1, test_fraction: float = 0.25,
                 gain_range: Tuple[float, float] = (0.7, 1.3)) -> FaceDataset:
    """Every identity rendered at every pose, split into disjoint identity sets.

    Posed views get a per-sample illumination gain from ``gain_range``;
    frontal targets always use gain 1.
    """
    if n_identities < 2:
        raise ValueError("need at least two identities for a train/test split")
    poses = tuple((int(a), int(b)) for a, b in poses)
    for yaw, pitch in poses:
        if yaw not in YAW_GRID or pitch not in PITCH_GRID:
            raise PoseError(f"pose (yaw={yaw}, pitch={pitch}) is outside the pose grid")
    pairs = []
    for identity in range(n_identities):
        face = sample_identity(identity, seed, channels)
        frontal = render(face, image_size)
        gains = np.random.default_rng([int(seed), identity, 11]).uniform(*gain_range, size=len(poses))
        for (yaw, pitch), gain in zip(poses, gains):
            posed = face.posed(yaw, pitch, float(gain))
            pairs.append(ImagePair(render(posed, image_size), frontal, identity, (yaw, pitch), posed))
    order = np.random.default_rng([int(seed), 3]).permutation(n_identities)
    n_test = min(max(1, int(round(n_identities * test_fraction))), n_identities - 1)
    test_ids = tuple(sorted(int(i) for i in order[:n_test]))
    train_ids = tuple(sorted(int(i) for i in order[n_test:]))
    return FaceDataset(pairs, train_ids, test_ids, image_size, int(seed), poses)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """``(C, H, W)`` in [-1, 1] -> ``(H, W)`` or ``(H, W, 3)`` bytes."""
    arr = np.clip((np.asarray(img) + 1.0) * 127.5 + 0.5, 0, 255).astype(np.uint8)
    return arr[0] if arr.shape[0] == 1 else np.moveaxis(arr, 0, -1)


def export_pairs(dataset: FaceDataset, out_dir) -> List[Path]:
    """Write PNGs as ``<out>/id<NNN>/yaw<+AA>_pitch<+BB>_{profile,frontal}.png``."""
    from PIL import Image

    out = Path(out_dir)
    written = []
    for pair in dataset.pairs:
        folder = out / f"id{pair.identity:03d}"
        folder.mkdir(parents=True, exist_ok=True)
        stem = f"yaw{pair.pose[0]:+03d}_pitch{pair.pose[1]:+03d}"
        for kind, img in (("profile", pair.profile), ("frontal", pair.frontal)):
            path = folder / f"{stem}_{kind}.png"
            Image.fromarray(to_uint8(img)).save(path)
            written.append(path)
    return written


def load_licensed_dataset(name: str, root) -> FaceDataset:
    """Placeholder for Multi-PIE / CAS-PEAL-R1 / LFW loaders.

    These corpora are distributed under licence and are not bundled; a loader
    must produce a :class:`FaceDataset` whose pairs carry real parser masks
    instead of :class:`FaceParams`.
    """
    raise NotImplementedError(f"loading {name!r} requires licensed data that is not bundled")
