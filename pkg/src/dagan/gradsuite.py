"""Finite-difference checks for every differentiable piece: raw ops, the attention block, each loss."""

from __future__ import annotations

from typing import Dict, List

import numpy as np

from .attention import SelfAttentionBlock, self_attention
from .diffgraph.gradcheck import OpCase, op_cases, run_op_suite
from .diffgraph.nn import init_parameters
from .discriminators import adv_loss_D, adv_loss_G, bce_real_fake, build_bank, regional_views
from .losses import IdentityEmbedder, identity_loss, pixel_loss, tv_loss

THRESHOLD = 1e-4
KINK_MARGIN = 1e-3


# Central differences are only valid where the function is smooth within
# +-h of the point. Inputs that put a (leaky) ReLU or |.| argument within
# KINK_MARGIN of zero are redrawn.

def _away_from_kinks(draw, distance):
    def make(rng):
        while True:
            inputs = draw(rng)
            if distance(*inputs) >= KINK_MARGIN:
                return inputs
    return make


def _disc_kink_distance(D, image) -> float:
    x, worst = np.asarray(image), np.inf
    for conv in D.convs:
        z = conv(x).data
        worst = min(worst, float(np.abs(z).min()))
        x = np.where(z > 0, z, 0.2 * z)
    return worst


def _embedder_kink_distance(E, image) -> float:
    x, worst = np.asarray(image), np.inf
    for conv in E.convs:
        z = conv(x).data
        worst = min(worst, float(np.abs(z).min()))
        x = np.where(z > 0, z, 0.2 * z)
    x = x.reshape(len(x), -1)
    for fc in (E.fc1, E.fc2):
        z = fc(x).data
        worst = min(worst, float(np.abs(z).min()))
        x = np.maximum(z, 0)
    return worst


def _tv_kink_distance(image) -> float:
    return min(float(np.abs(np.diff(image, axis=-1)).min()), float(np.abs(np.diff(image, axis=-2)).min()))


def _attention_cases() -> List[OpCase]:
    block = SelfAttentionBlock(8)
    init_parameters(block, 7, dtype=np.float64)
    block.mu.data[:] = 0.7
    fixed = [p.data for p in block.weights]
    x0 = np.random.default_rng(11).normal(size=(2, 8, 4, 4))

    # bg shifts every logit in a row by the same amount, so softmax makes its
    # gradient identically zero; it is held fixed (a relative error on an
    # all-zero gradient only measures difference noise).
    def weights(r):
        return [r.normal(scale=0.5, size=w.shape) for i, w in enumerate(fixed) if i != 3]

    def with_fixed_bg(wf, bf, wg, wh, bh, mu):
        return self_attention(x0, wf, bf, wg, fixed[3], wh, bh, mu)

    return [
        OpCase("attention[input]", lambda x: self_attention(x, *fixed), lambda r: [r.normal(size=(2, 8, 4, 4))]),
        OpCase("attention[weights]", with_fixed_bg, weights),
        OpCase("attention[chunked]", lambda x: self_attention(x, *fixed, chunk_size=5),
               lambda r: [r.normal(size=(2, 8, 4, 4))]),
    ]


def _loss_cases() -> List[OpCase]:
    embedder = IdentityEmbedder(3, channels=1, image_size=4, width=4, hidden=(8, 6))
    init_parameters(embedder, 5, dtype=np.float64)
    real = np.random.default_rng(3).uniform(-1, 1, size=(2, 1, 4, 4))
    target = np.random.default_rng(4).uniform(-1, 1, size=(2, 1, 4, 4))

    bank = build_bank(channels=1, base_channels=2, image_size=16, seed=9, dtype=np.float64)
    mrng = np.random.default_rng(6)
    masks = tuple((mrng.uniform(size=(1, 1, 16, 16)) > 0.5).astype(np.float64) for _ in range(3))
    fake_views = regional_views(np.random.default_rng(8).uniform(-1, 1, size=(1, 1, 16, 16)), masks)

    def multi_scale(r):
        return [r.uniform(-1, 1, size=(2, 1, s, s)) for s in (1, 2, 4)]

    def image(shape):
        return lambda r: [r.uniform(-1, 1, size=shape)]

    def pixel_distance(*outs):
        return min(float(np.abs(o - pixel_target(o.shape[-1])).min()) for o in outs)

    def pixel_target(size):
        f = 4 // size
        return target.reshape(2, 1, size, f, size, f).mean(axis=(3, 5))

    def regional_distance(img):
        views = regional_views(img, masks)
        return min(_disc_kink_distance(bank[k], views[k].data) for k in views)

    def unit(shape):
        return lambda r: [r.uniform(0.05, 0.95, size=shape)]

    return [
        OpCase("identity_loss", lambda fake: identity_loss(real, fake, embedder),
               _away_from_kinks(image((2, 1, 4, 4)), lambda x: _embedder_kink_distance(embedder, x))),
        OpCase("pixel_loss", lambda *outs: pixel_loss(target, outs), _away_from_kinks(multi_scale, pixel_distance)),
        OpCase("tv_loss", tv_loss, _away_from_kinks(image((2, 1, 4, 4)), _tv_kink_distance)),
        OpCase("bce_real_fake", bce_real_fake, lambda r: unit((3,))(r) + unit((3,))(r)),
        OpCase("adv_loss_G", lambda fake: adv_loss_G(bank, regional_views(fake, masks)).L_adv,
               _away_from_kinks(image((1, 1, 16, 16)), regional_distance)),
        # The fake branch is detached inside adv_loss_D, so probe through the real one.
        OpCase("adv_loss_D[real]", lambda real: adv_loss_D(bank, regional_views(real, masks), fake_views).L_adv,
               _away_from_kinks(image((1, 1, 16, 16)), regional_distance)),
    ]


def model_cases() -> List[OpCase]:
    return _attention_cases() + _loss_cases()


def all_cases() -> List[OpCase]:
    return op_cases() + model_cases()


def run_suite(trials: int = 5, seed: int = 0) -> Dict[str, float]:
    """Worst relative error per case, ops first, then attention and losses."""
    return run_op_suite(all_cases(), trials=trials, seed=seed)


def failures(table: Dict[str, float], threshold: float = THRESHOLD) -> List[str]:
    return [name for name, err in table.items() if not err <= threshold]
