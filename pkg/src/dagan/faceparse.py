"""Region masks and masked regional images.

The masks come from the frontal face: skin, key-point features (eyes, brows,
nose, lips) and the hairline. The same masks are applied to the real frontal
image and to the synthesised one, so each regional discriminator compares
like with like.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Protocol, Sequence

import numpy as np

from .diffgraph import ops
from .diffgraph.tensor import ShapeError, Tensor, as_tensor
from .synthdata import HAIR, KEYPOINT_LABELS, SKIN, FaceParams, ImagePair, frontal_labels, _pixel_grid

REGIONS = ("skin", "keypoint", "hair")


class UnknownFaceError(TypeError):
    pass


@dataclass(frozen=True, eq=False)
class RegionMasks:
    """Skin, key-point and hairline masks, each ``(H, W)`` in [0, 1]."""

    skin: np.ndarray
    keypoint: np.ndarray
    hair: np.ndarray

    def __iter__(self):
        return iter((self.skin, self.keypoint, self.hair))

    def as_dict(self):
        return dict(zip(REGIONS, self))

    @property
    def shape(self):
        return self.skin.shape


@dataclass(frozen=True)
class RegionalImages:
    skin: Tensor
    keypoint: Tensor
    hair: Tensor


class FaceParser(Protocol):
    def parse(self, face) -> RegionMasks: ...


class SyntheticParser:
    """Masks evaluated analytically from a synthetic face's geometry."""

    def __init__(self, size: int = 32):
        self.size = size

    def parse(self, face) -> RegionMasks:
        if isinstance(face, ImagePair):
            face = face.params
        if not isinstance(face, FaceParams):
            raise UnknownFaceError(
                f"the synthetic parser needs FaceParams (or an ImagePair), got {type(face).__name__}")
        x, y = _pixel_grid(self.size)
        labels = frontal_labels(face.geometry, x, y)
        return RegionMasks(
            skin=(labels == SKIN).astype(np.float64),
            keypoint=np.isin(labels, KEYPOINT_LABELS).astype(np.float64),
            hair=(labels == HAIR).astype(np.float64),
        )


def parse(face, size: int = 32) -> RegionMasks:
    return SyntheticParser(size).parse(face)


def stack_masks(masks: Sequence[RegionMasks], dtype=np.float32):
    """Batch masks as three ``(B, 1, H, W)`` arrays (skin, keypoint, hair)."""
    return tuple(np.stack([getattr(m, r) for m in masks])[:, None].astype(dtype) for r in REGIONS)


def apply_mask(image, mask) -> Tensor:
    """``image * mask`` with the mask broadcast over channels; masks are constants."""
    image = as_tensor(image)
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=image.dtype)
    if mask.shape[-2:] != image.shape[-2:]:
        raise ShapeError("apply_masks", f"mask spatial shape {mask.shape[-2:]} != image {image.shape[-2:]}")
    if mask.ndim == 2:
        mask = mask[None] if image.ndim == 3 else mask[None, None]
    return ops.mul(image, Tensor(mask))


def apply_masks(image, masks) -> RegionalImages:
    """Regional images ``(I * M_s, I * M_k, I * M_h)``.

    ``masks`` is a :class:`RegionMasks` or a (skin, keypoint, hair) triple of
    arrays broadcastable against ``image``.
    """
    skin, keypoint, hair = masks
    return RegionalImages(apply_mask(image, skin), apply_mask(image, keypoint), apply_mask(image, hair))


def export_masks(masks: RegionMasks, out_dir, stem: str = "mask") -> List[Path]:
    """Write each mask as an 8-bit PNG (0 / 255)."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, m in masks.as_dict().items():
        path = out / f"{stem}_{name}.png"
        Image.fromarray((np.clip(m, 0, 1) * 255 + 0.5).astype(np.uint8)).save(path)
        paths.append(path)
    return paths
