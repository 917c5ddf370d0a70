"""The discriminator bank (full face, skin, key points, hairline) and its losses."""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Optional, Sequence

import numpy as np

from .diffgraph import ops
from .diffgraph.nn import Conv2d, Linear, Module, init_parameters
from .diffgraph.tensor import ShapeError, Tensor, as_tensor

EPS = 1e-7
REGION_KEYS = ("f", "s", "k", "h")


class Discriminator(Module):
    """Four stride-2 convs with leaky ReLU, global average pool, sigmoid head."""

    def __init__(self, channels: int = 1, base_channels: int = 16, image_size: int = 32, stages: int = 4):
        super().__init__()
        self.channels, self.image_size = channels, image_size
        widths = [channels] + [base_channels * 2 ** i for i in range(stages)]
        self.convs = [Conv2d(widths[i], widths[i + 1], 4, stride=2, padding=1) for i in range(stages)]
        self.head = Linear(widths[-1], 1, gain=1.0)

    def logits(self, image) -> Tensor:
        x = as_tensor(image)
        expected = (self.channels, self.image_size, self.image_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError("discriminate", f"expected (batch, {', '.join(map(str, expected))}), got {x.shape}")
        for conv in self.convs:
            x = ops.leaky_relu(conv(x), 0.2)
        pooled = ops.reduce_mean(x, axis=(2, 3))
        return ops.reshape(self.head(pooled), (x.shape[0],))

    def forward(self, image) -> Tensor:
        return ops.sigmoid(self.logits(image))


def discriminate(D: Discriminator, image) -> Tensor:
    """Probability that ``image`` is real; ``(C, H, W)`` gives a scalar, a batch gives ``(B,)``."""
    image = as_tensor(image)
    if image.ndim == 3:
        return ops.reshape(D(ops.reshape(image, (1,) + image.shape)), ())
    return D(image)


class DiscriminatorBank(Module):
    """Independent D_f, D_s, D_k, D_h with identical architecture."""

    def __init__(self, channels: int = 1, base_channels: int = 16, image_size: int = 32):
        super().__init__()
        self.D_f = Discriminator(channels, base_channels, image_size)
        self.D_s = Discriminator(channels, base_channels, image_size)
        self.D_k = Discriminator(channels, base_channels, image_size)
        self.D_h = Discriminator(channels, base_channels, image_size)

    def __getitem__(self, key: str) -> Discriminator:
        return getattr(self, f"D_{key}")

    def members(self) -> Dict[str, Discriminator]:
        return {k: self[k] for k in REGION_KEYS}


def build_bank(channels: int = 1, base_channels: int = 16, image_size: int = 32, seed: int = 0,
               dtype=np.float32) -> DiscriminatorBank:
    bank = DiscriminatorBank(channels, base_channels, image_size)
    init_parameters(bank, seed, dtype=dtype, prefix="D.")
    return bank


@contextlib.contextmanager
def frozen(modules: Iterable[Module]):
    """Temporarily stop recording gradients for the modules' parameters."""
    params = [p for m in modules for p in m.parameters()]
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, flags):
            p.requires_grad = flag


@dataclass
class AdvLossReport:
    """Per-region adversarial terms; absent regions are ``None``."""

    terms: Dict[str, Tensor]

    @property
    def L_adv(self) -> Tensor:
        total = None
        for key in REGION_KEYS:
            if key in self.terms:
                total = self.terms[key] if total is None else ops.add(total, self.terms[key])
        return total

    def value(self, key: str) -> Optional[float]:
        t = self.terms.get(key)
        return None if t is None else float(t.data)

    def values(self) -> Dict[str, float]:
        return {f"L_{k}": float(self.terms[k].data) for k in REGION_KEYS if k in self.terms}

    def __getattr__(self, name):
        if name.startswith("L_") and name[2:] in REGION_KEYS:
            return self.terms.get(name[2:])
        raise AttributeError(name)


def _log_prob(p: Tensor) -> Tensor:
    return ops.log(ops.clip(p, EPS, 1.0 - EPS))


def _log_one_minus(p: Tensor) -> Tensor:
    return ops.log(ops.clip(ops.sub(1.0, p), EPS, 1.0 - EPS))


def bce_real_fake(p_real: Tensor, p_fake: Tensor) -> Tensor:
    """``-(mean log p_real + mean log(1 - p_fake))``."""
    return ops.scalar_mul(ops.add(ops.reduce_mean(_log_prob(p_real)), ops.reduce_mean(_log_one_minus(p_fake))), -1.0)


def adv_loss_D(bank: DiscriminatorBank, real: Mapping[str, Tensor], fake: Mapping[str, Tensor],
               regions: Sequence[str] = REGION_KEYS) -> AdvLossReport:
    """Discriminator objective per region, as a quantity to minimise.

    ``real``/``fake`` map region keys (``f``, ``s``, ``k``, ``h``) to image
    batches. Fake images are detached here, so no gradient reaches G.
    """
    terms = {}
    for key in regions:
        D = bank[key]
        fake_img = Tensor(as_tensor(fake[key]).data)
        terms[key] = bce_real_fake(D(real[key]), D(fake_img))
    return AdvLossReport(terms)


def adv_loss_G(bank: DiscriminatorBank, fake: Mapping[str, Tensor], regions: Sequence[str] = REGION_KEYS) -> AdvLossReport:
    """Non-saturating generator term ``-log D_j(fake_j)`` per region.

    Discriminator parameters are frozen for the duration, so the backward
    pass only reaches the generator.
    """
    terms = {}
    with frozen(bank[k] for k in regions):
        for key in regions:
            terms[key] = ops.scalar_mul(ops.reduce_mean(_log_prob(bank[key](fake[key]))), -1.0)
    return AdvLossReport(terms)


def regional_views(full: Tensor, masks) -> Dict[str, Tensor]:
    """``{f: I, s: I*M_s, k: I*M_k, h: I*M_h}`` for a batch and its stacked masks."""
    from .faceparse import apply_masks

    regional = apply_masks(full, masks)
    return {"f": as_tensor(full), "s": regional.skin, "k": regional.keypoint, "h": regional.hair}
