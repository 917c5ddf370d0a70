"""Generator objective: identity, multi-scale pixel, total-variation, adversarial."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from .diffgraph import ops
from .diffgraph.nn import Conv2d, Linear, Module, init_parameters, ones_init
from .diffgraph.optim import Adam
from .diffgraph.tensor import Parameter, ShapeError, Tensor, as_tensor, backward, no_grad

log = logging.getLogger(__name__)

Number = Union[float, int]


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1    # identity
    lambda2: float = 10.0   # pixel
    lambda3: float = 0.1    # adversarial
    lambda4: float = 1e-4   # total variation

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be a finite non-negative number, got {value}")


# ---------------------------------------------------------------------------
# Identity embedder
# ---------------------------------------------------------------------------

class IdentityEmbedder(Module):
    """Small face classifier; its two hidden fully connected layers are the features.

    ``features(x)`` returns the post-ReLU activations of ``fc1`` and ``fc2``,
    each multiplied by a fixed scale chosen after training so that its mean
    squared norm over the training images is 1 (keeps the identity term on
    the same footing as the pixel term). ``classifier`` maps ``fc2`` to
    identity logits and is used only while training the embedder.
    """

    def __init__(self, n_classes: int, channels: int = 1, image_size: int = 32, width: int = 16,
                 hidden=(128, 64)):
        super().__init__()
        self.image_size, self.channels = image_size, channels
        # Three stride-2 convs, fewer for images smaller than 16 pixels.
        n_down = max(1, min(3, int(np.log2(image_size)) - 1))
        chans = [channels] + [width * 2 ** k for k in range(n_down)]
        self.convs = [Conv2d(chans[k], chans[k + 1], 4, stride=2, padding=1) for k in range(n_down)]
        flat = chans[-1] * (image_size // 2 ** n_down) ** 2
        self.fc1 = Linear(flat, hidden[0])
        self.fc2 = Linear(hidden[0], hidden[1])
        self.classifier = Linear(hidden[1], n_classes, gain=1.0)
        self.feature_scale = Parameter((2,), init=ones_init, trainable=False)
        self.classes: Dict[int, int] = {}
        self.train_accuracy: Optional[float] = None

    def _hidden(self, x) -> List[Tensor]:
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[2] != self.image_size or x.shape[3] != self.image_size:
            raise ShapeError("identity_loss", f"embedder expects {self.image_size}x{self.image_size} input, got {x.shape}")
        h = x
        for conv in self.convs:
            h = ops.leaky_relu(conv(h), 0.2)
        h = ops.reshape(h, (x.shape[0], -1))
        p1 = ops.relu(self.fc1(h))
        p2 = ops.relu(self.fc2(p1))
        return [p1, p2]

    def features(self, x) -> List[Tensor]:
        """Post-activation ``fc1`` and ``fc2`` outputs, each times its calibration scale."""
        return [ops.scalar_mul(h, float(s)) for h, s in zip(self._hidden(x), self.feature_scale.data)]

    def forward(self, x) -> Tensor:
        return self.classifier(self._hidden(x)[1])

    def calibrate(self, images: np.ndarray) -> None:
        """Set each feature scale so the mean squared feature norm over ``images`` is 1."""
        with no_grad():
            hidden = self._hidden(images)
        scales = [1.0 / np.sqrt(max(float(np.mean(np.sum(h.data.astype(np.float64) ** 2, axis=1))), 1e-12))
                  for h in hidden]
        self.feature_scale.data = np.asarray(scales, dtype=self.feature_scale.dtype)

    def embed(self, x) -> np.ndarray:
        """Retrieval descriptor: the last feature layer, as a plain array."""
        with no_grad():
            return self.features(x)[-1].data

    def freeze(self) -> "IdentityEmbedder":
        for p in self.parameters():
            p.trainable = False
        return self


def _augment(images: np.ndarray, rng: np.random.Generator, gain_range=(0.7, 1.3), shift: int = 1,
             noise: float = 0.03) -> np.ndarray:
    gains = rng.uniform(*gain_range, size=(len(images), 1, 1, 1))
    out = np.clip((images + 1.0) * 0.5 * gains, 0.0, 1.0) * 2.0 - 1.0
    if shift:
        for i in range(len(out)):
            dy, dx = rng.integers(-shift, shift + 1, size=2)
            out[i] = np.roll(out[i], (int(dy), int(dx)), axis=(1, 2))
    if noise:
        out = out + rng.normal(0.0, noise, size=out.shape)
    return out


class EmbedderConvergenceError(RuntimeError):
    def __init__(self, accuracy: float, threshold: float):
        super().__init__(f"identity embedder reached only {accuracy:.3f} train accuracy (< {threshold})")
        self.accuracy = accuracy


def train_embedder(pairs, epochs: int = 20, seed: int = 0, batch_size: int = 16, lr: float = 1e-3,
                   dtype=np.float32, min_accuracy: Optional[float] = 0.9, augment: bool = True) -> IdentityEmbedder:
    """Fit the identity classifier on frontal images, then freeze it.

    One epoch visits every pair once, using its frontal image under a random
    illumination gain, a one-pixel jitter and mild noise. Accuracy is measured
    on a fresh augmented pass after training; below ``min_accuracy`` an
    :class:`EmbedderConvergenceError` carrying the accuracy is raised.
    """
    pairs = list(pairs)
    ids = sorted({p.identity for p in pairs})
    classes = {identity: k for k, identity in enumerate(ids)}
    images = np.stack([p.frontal for p in pairs]).astype(np.float64)
    labels = np.array([classes[p.identity] for p in pairs])
    channels, size = images.shape[1], images.shape[2]

    model = IdentityEmbedder(len(ids), channels=channels, image_size=size)
    init_parameters(model, seed, dtype=dtype, prefix="E.")
    model.classes = classes
    opt = Adam(model.trainable_parameters(), lr=lr, betas=(0.9, 0.999))
    rng = np.random.default_rng([int(seed), 5])

    def batches():
        order = rng.permutation(len(images))
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            x = _augment(images[idx], rng) if augment else images[idx]
            yield x.astype(dtype), labels[idx]

    for epoch in range(epochs):
        for x, y in batches():
            logp = ops.log_softmax(model(x), axis=1)
            onehot = np.zeros(logp.shape, dtype=dtype)
            onehot[np.arange(len(y)), y] = 1.0
            loss = ops.scalar_mul(ops.reduce_mean(ops.reduce_sum(ops.mul(logp, Tensor(onehot)), axis=1)), -1.0)
            opt.step(backward(loss))

    hits = 0
    with no_grad():
        for x, y in batches():
            hits += int(np.sum(np.argmax(model(x).data, axis=1) == y))
    model.train_accuracy = hits / len(images)
    model.calibrate(images.astype(dtype))
    log.info("embedder: %d identities, train accuracy %.3f", len(ids), model.train_accuracy)
    model.freeze()
    if min_accuracy is not None and model.train_accuracy < min_accuracy:
        raise EmbedderConvergenceError(model.train_accuracy, min_accuracy)
    return model


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------

def _batch_size(x: Tensor) -> int:
    return x.shape[0] if x.ndim == 4 else 1


def identity_loss(real, fake, embedder) -> Tensor:
    """Sum over feature layers of the squared L2 feature distance, batch-averaged.

    ``embedder.features(x)`` must return the list of feature tensors. The
    real branch is evaluated without recording, so only ``fake`` receives
    gradient.
    """
    real, fake = as_tensor(real), as_tensor(fake)
    if real.shape != fake.shape:
        raise ShapeError("identity_loss", f"real {real.shape} and synthesised {fake.shape} differ")
    with no_grad():
        target = [Tensor(f.data) for f in embedder.features(real)]
    total = None
    for t, f in zip(target, embedder.features(fake)):
        term = ops.reduce_sum(ops.square(ops.sub(f, t)))
        total = term if total is None else ops.add(total, term)
    return ops.scalar_mul(total, 1.0 / _batch_size(real))


def downsample_target(target, size: int) -> Tensor:
    target = as_tensor(target)
    squeeze = target.ndim == 3
    t = ops.reshape(target, (1,) + target.shape) if squeeze else target
    factor = t.shape[-1] // size
    if factor * size != t.shape[-1]:
        raise ShapeError("pixel_loss", f"target size {t.shape[-1]} is not a multiple of scale {size}")
    if factor > 1:
        with no_grad():
            t = ops.avg_pool2d(t, factor)
    return ops.reshape(t, t.shape[1:]) if squeeze else t


def pixel_loss(target, outputs: Sequence, scales: Optional[int] = None) -> Tensor:
    """Mean absolute error per scale, averaged over scales.

    The full-resolution target is mean-pooled to each output's size.
    """
    outputs = [as_tensor(o) for o in outputs]
    if scales is not None and scales != len(outputs):
        raise ValueError(f"expected {scales} scales, got {len(outputs)}")
    if not outputs:
        raise ValueError("pixel_loss needs at least one scale")
    total = None
    for out in outputs:
        ref = downsample_target(target, out.shape[-1])
        if ref.shape != out.shape:
            raise ShapeError("pixel_loss", f"scale output {out.shape} vs target {ref.shape}")
        term = ops.reduce_mean(ops.absolute(ops.sub(out, Tensor(ref.data))))
        total = term if total is None else ops.add(total, term)
    return ops.scalar_mul(total, 1.0 / len(outputs))


def tv_loss(image) -> Tensor:
    """Sum of absolute horizontal and vertical neighbour differences (per image, batch-averaged)."""
    image = as_tensor(image)
    if image.ndim not in (3, 4):
        raise ShapeError("tv_loss", f"expected (C, H, W) or a batch, got {image.shape}")
    lead = (slice(None),) * (image.ndim - 2)
    H, W = image.shape[-2:]
    total = ops.scalar_mul(ops.reduce_sum(image), 0.0)
    if W > 1:
        dx = ops.sub(ops.getitem(image, lead + (slice(None), slice(1, None))),
                     ops.getitem(image, lead + (slice(None), slice(None, -1))))
        total = ops.add(total, ops.reduce_sum(ops.absolute(dx)))
    if H > 1:
        dy = ops.sub(ops.getitem(image, lead + (slice(1, None), slice(None))),
                     ops.getitem(image, lead + (slice(None, -1), slice(None))))
        total = ops.add(total, ops.reduce_sum(ops.absolute(dy)))
    return ops.scalar_mul(total, 1.0 / _batch_size(image))


# ---------------------------------------------------------------------------
# Weighted total
# ---------------------------------------------------------------------------

@dataclass
class LossReport:
    L_ID: float
    L_pixel: float
    L_adv: float
    L_tv: float
    total: float
    adversarial: Dict[str, float] = field(default_factory=dict)   # L_f, L_s, ... when present
    graph: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def as_record(self, step: Optional[int] = None) -> Dict[str, float]:
        rec = {} if step is None else {"step": int(step)}
        rec.update(L_ID=self.L_ID, L_pixel=self.L_pixel)
        rec.update(self.adversarial)
        rec.update(L_tv=self.L_tv, total=self.total)
        return rec


def _value(x) -> float:
    if isinstance(x, Tensor):
        return float(x.data)
    return float(x)


def total_loss(components: Mapping[str, Union[Tensor, Number]], weights: LossWeights = LossWeights(),
               adversarial: Optional[Mapping[str, Union[Tensor, Number]]] = None) -> LossReport:
    """``lambda1*L_ID + lambda2*L_pixel + lambda3*L_adv + lambda4*L_tv``.

    ``components`` holds ``L_ID``, ``L_pixel``, ``L_adv`` and ``L_tv``
    (tensors or numbers). When tensors are given, ``report.graph`` is the
    differentiable total.
    """
    if not isinstance(weights, LossWeights):
        weights = LossWeights(**weights)
    coeffs = {"L_ID": weights.lambda1, "L_pixel": weights.lambda2, "L_adv": weights.lambda3, "L_tv": weights.lambda4}
    graph = None
    total = 0.0
    for name, lam in coeffs.items():
        comp = components.get(name, 0.0)
        total += lam * _value(comp)
        if isinstance(comp, Tensor):
            term = ops.scalar_mul(comp, lam)
            graph = term if graph is None else ops.add(graph, term)
    adv = {f"L_{k}" if not k.startswith("L_") else k: _value(v) for k, v in (adversarial or {}).items()}
    return LossReport(
        L_ID=_value(components.get("L_ID", 0.0)),
        L_pixel=_value(components.get("L_pixel", 0.0)),
        L_adv=_value(components.get("L_adv", 0.0)),
        L_tv=_value(components.get("L_tv", 0.0)),
        total=total,
        adversarial=adv,
        graph=graph,
    )
