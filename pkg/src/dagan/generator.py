"""U-Net generator with optional self-attention in the decoder.

Layer table (the published one is not available, so this is a canonical
reconstruction):

* stem: 3x3 conv, ``channels -> base``, leaky ReLU, full resolution
* encoder stage k = 1..depth: 4x4 stride-2 conv, instance norm, leaky ReLU;
  widths ``base * 2**k`` capped at ``8 * base``
* decoder stage k = 1..depth: 4x4 stride-2 transposed conv, instance norm,
  ReLU, concatenation with encoder stage ``depth - k`` (stage 0 is the stem),
  3x3 conv, instance norm, ReLU; then a self-attention block if k is listed
  in ``attention_stages``
* read-outs: 1x1 conv + tanh on each of the last ``scales`` decoder stages

``depth = ceil(log2(image_size)) - 2``, so the bottleneck is 4x4.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .attention import SelfAttentionBlock
from .diffgraph import ops
from .diffgraph.nn import Conv1x1, Conv2d, ConvTranspose2d, InstanceNorm, Module, init_parameters
from .diffgraph.tensor import ShapeError, Tensor, as_tensor


class DivergenceError(ArithmeticError):
    """A forward pass produced NaN or Inf."""


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 32
    base_channels: int = 16
    channels: int = 1
    scales: int = 3
    attention_stages: Optional[Tuple[int, ...]] = None   # None: the last two decoder stages

    def __post_init__(self):
        if self.image_size < 8 or self.image_size % (2 ** self.depth):
            raise ValueError(f"image_size {self.image_size} must be >= 8 and divisible by 2**{self.depth}")
        if not 1 <= self.scales <= self.depth:
            raise ValueError(f"scales must be in [1, {self.depth}], got {self.scales}")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        stages = self.resolved_attention_stages
        if any(not 1 <= s <= self.depth for s in stages):
            raise ValueError(f"attention stages {stages} outside decoder stages 1..{self.depth}")

    @property
    def depth(self) -> int:
        return math.ceil(math.log2(self.image_size)) - 2

    @property
    def resolved_attention_stages(self) -> Tuple[int, ...]:
        if self.attention_stages is None:
            return tuple(range(max(self.depth - 1, 1), self.depth + 1))
        return tuple(sorted(set(int(s) for s in self.attention_stages)))

    def scale_sizes(self) -> List[int]:
        return [self.image_size // 2 ** (self.scales - 1 - s) for s in range(self.scales)]

    def width(self, stage: int) -> int:
        """Channel width of encoder stage ``stage`` (0 is the stem)."""
        return self.base_channels * 2 ** min(stage, 3)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attention_stages"] = list(self.resolved_attention_stages)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        if d.get("attention_stages") is not None:
            d["attention_stages"] = tuple(d["attention_stages"])
        return cls(**d)


class _EncoderStage(Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = Conv2d(cin, cout, 4, stride=2, padding=1)
        self.norm = InstanceNorm(cout)

    def forward(self, x):
        return ops.leaky_relu(self.norm(self.conv(x)), 0.2)


class _DecoderStage(Module):
    def __init__(self, cin, cskip, cout):
        super().__init__()
        self.up = ConvTranspose2d(cin, cskip, 4, stride=2, padding=1)
        self.up_norm = InstanceNorm(cskip)
        self.conv = Conv2d(2 * cskip, cout, 3, stride=1, padding=1)
        self.norm = InstanceNorm(cout)

    def forward(self, x, skip):
        up = ops.relu(self.up_norm(self.up(x)))
        return ops.relu(self.norm(self.conv(ops.concat([up, skip], axis=1))))


class Generator(Module):
    def __init__(self, config: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.config = cfg = config
        d = cfg.depth
        self.stem = Conv2d(cfg.channels, cfg.width(0), 3, stride=1, padding=1)
        self.encoder = [_EncoderStage(cfg.width(k - 1), cfg.width(k)) for k in range(1, d + 1)]
        self.decoder = [_DecoderStage(cfg.width(d - k + 1), cfg.width(d - k), cfg.width(d - k)) for k in range(1, d + 1)]
        # Keyed by stage so parameter names do not depend on which stages are enabled.
        self.attention = {k: SelfAttentionBlock(cfg.width(d - k)) for k in cfg.resolved_attention_stages}
        for k, block in self.attention.items():
            setattr(self, f"attn{k}", block)
        self.taps = [Conv1x1(cfg.width(d - k), cfg.channels, std=0.05) for k in range(d - cfg.scales + 1, d + 1)]

    def attention_blocks(self) -> List[SelfAttentionBlock]:
        return [self.attention[k] for k in sorted(self.attention)]

    def forward(self, x) -> List[Tensor]:
        x = as_tensor(x)
        cfg = self.config
        expected = (cfg.channels, cfg.image_size, cfg.image_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError("generate", f"expected input (batch, {', '.join(map(str, expected))}), got {x.shape}")
        skips = [ops.leaky_relu(self.stem(x), 0.2)]
        for stage in self.encoder:
            skips.append(stage(skips[-1]))
        h = skips.pop()
        feats = []
        for k, stage in enumerate(self.decoder, start=1):
            h = stage(h, skips.pop())
            if k in self.attention:
                h = self.attention[k](h)
            feats.append(h)
        outputs = [ops.tanh(tap(f)) for tap, f in zip(self.taps, feats[-cfg.scales:])]
        for s, out in enumerate(outputs):
            if not np.all(np.isfinite(out.data)):
                raise DivergenceError(f"generator output at scale {s} contains non-finite values")
        return outputs


def build_generator(config: GeneratorConfig = GeneratorConfig(), seed: int = 0, dtype=np.float32) -> Generator:
    g = Generator(config)
    init_parameters(g, seed, dtype=dtype, prefix="G.")
    return g


def generate(image, G: Generator) -> List[Tensor]:
    """Multi-scale frontal estimate, coarsest first; the last entry is full size.

    Accepts a single ``(C, H, W)`` image or a batch.
    """
    image = as_tensor(image)
    if image.ndim == 3:
        return [ops.reshape(o, o.shape[1:]) for o in G(ops.reshape(image, (1,) + image.shape))]
    return G(image)


def count_parameters(G: Module) -> int:
    return G.count_parameters()
