"""Alternating adversarial training of the generator against the discriminator bank."""

from __future__ import annotations

import contextlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint
from .diffgraph import backward, no_grad
from .diffgraph.optim import Adam
from .diffgraph.tensor import Tensor
from .discriminators import REGION_KEYS, DiscriminatorBank, adv_loss_D, adv_loss_G, build_bank, regional_views
from .faceparse import SyntheticParser, stack_masks
from .generator import Generator, GeneratorConfig, build_generator
from .losses import (IdentityEmbedder, LossReport, LossWeights, identity_loss, pixel_loss, total_loss,
                     train_embedder, tv_loss)
from .synthdata import DEFAULT_POSES, FaceDataset, make_dataset

log = logging.getLogger(__name__)

# mode -> (self-attention in G, discriminators in play)
MODES: Dict[str, Tuple[bool, Tuple[str, ...]]] = {
    "baseline": (False, ("f",)),
    "self_attention_only": (True, ("f",)),
    "face_attention_only": (False, REGION_KEYS),
    "dual": (True, REGION_KEYS),
    "d_skin_only": (False, ("f", "s")),
    "d_keypoint_only": (False, ("f", "k")),
    "d_hair_only": (False, ("f", "h")),
}

RUNNING_DECAY = 0.98


class ConfigError(ValueError):
    pass


class NonFiniteLossError(ArithmeticError):
    def __init__(self, name: str, step: int):
        super().__init__(f"non-finite value in {name} at step {step}")
        self.name = name
        self.step = step


@dataclass
class TrainConfig:
    # optimisation
    batch_size: int = 8
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    steps: int = 2000
    d_steps_per_g_step: int = 1
    mode: str = "dual"
    seed: int = 0
    checkpoint_interval: int = 0
    dtype: str = "float32"
    # objective
    lambda1: float = 0.1
    lambda2: float = 10.0
    lambda3: float = 0.1
    lambda4: float = 1e-4
    # data and networks
    n_identities: int = 16
    image_size: int = 32
    channels: int = 1
    base_channels: int = 16
    scales: int = 3
    test_fraction: float = 0.25
    poses: Optional[List[List[int]]] = None      # [[yaw, pitch], ...]; None = 13 yaws at pitch 0
    data_seed: Optional[int] = None              # None: same as seed
    embedder_epochs: int = 20

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        if self.d_steps_per_g_step < 1:
            raise ConfigError("d_steps_per_g_step must be >= 1")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        for name in ("lr_g", "lr_d"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        try:
            self.weights
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3, self.lambda4)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype).type

    @property
    def pose_list(self) -> Tuple[Tuple[int, int], ...]:
        return DEFAULT_POSES if self.poses is None else tuple((int(a), int(b)) for a, b in self.poses)

    def generator_config(self) -> GeneratorConfig:
        attention, _ = MODES[self.mode]
        return GeneratorConfig(self.image_size, self.base_channels, self.channels, self.scales,
                               attention_stages=None if attention else ())

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def load_config(path) -> TrainConfig:
    """Read a flat ``key: value`` YAML file whose keys are TrainConfig fields."""
    import yaml

    path = Path(path)
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping of TrainConfig fields")
    return TrainConfig.from_dict(data)


def build_dataset(config: TrainConfig) -> FaceDataset:
    seed = config.seed if config.data_seed is None else config.data_seed
    return make_dataset(config.n_identities, config.pose_list, seed=seed, image_size=config.image_size,
                        channels=config.channels, test_fraction=config.test_fraction)


class PairArrays:
    """Training pairs as stacked arrays, with frontal masks cached per identity."""

    def __init__(self, pairs, image_size: int, dtype=np.float32):
        parser = SyntheticParser(image_size)
        self.pairs = list(pairs)
        self.profile = np.stack([p.profile for p in self.pairs]).astype(dtype)
        self.frontal = np.stack([p.frontal for p in self.pairs]).astype(dtype)
        masks = {}
        for p in self.pairs:
            if p.identity not in masks:
                masks[p.identity] = parser.parse(p.params.frontal())
        self.masks = stack_masks([masks[p.identity] for p in self.pairs], dtype=dtype)

    def __len__(self) -> int:
        return len(self.pairs)

    def batch(self, idx):
        return self.profile[idx], self.frontal[idx], tuple(m[idx] for m in self.masks)


@dataclass
class TrainState:
    config: TrainConfig
    G: Generator
    bank: DiscriminatorBank
    embedder: IdentityEmbedder
    opt_g: Adam
    opt_d: Adam
    rng: np.random.Generator
    step: int = 0
    running: Dict[str, List[float]] = field(default_factory=dict)   # key -> [ema numerator, ema weight]
    g_regions: Tuple[str, ...] = REGION_KEYS
    d_regions: Tuple[str, ...] = REGION_KEYS

    def running_averages(self) -> Dict[str, float]:
        return {k: num / w for k, (num, w) in self.running.items() if w > 0}

    def parameter_snapshot(self) -> Dict[str, Dict[str, np.ndarray]]:
        return {"G": self.G.state_dict(), "D": self.bank.state_dict()}


def init_state(config: TrainConfig, dataset: FaceDataset, embedder: Optional[IdentityEmbedder] = None) -> TrainState:
    dtype = config.np_dtype
    if embedder is None:
        embedder = train_embedder(dataset.split("train"), epochs=config.embedder_epochs, seed=config.seed,
                                  dtype=dtype, min_accuracy=None)
    G = build_generator(config.generator_config(), seed=config.seed, dtype=dtype)
    bank = build_bank(config.channels, config.base_channels, config.image_size, seed=config.seed, dtype=dtype)
    betas = (config.beta1, config.beta2)
    _, regions = MODES[config.mode]
    return TrainState(
        config=config, G=G, bank=bank, embedder=embedder,
        opt_g=Adam(G.trainable_parameters(), lr=config.lr_g, betas=betas),
        opt_d=Adam(bank.trainable_parameters(), lr=config.lr_d, betas=betas),
        rng=np.random.default_rng([int(config.seed), 101]),
        g_regions=regions, d_regions=regions,
    )


def _check_finite(name: str, value: float, step: int) -> None:
    if not np.isfinite(value):
        raise NonFiniteLossError(name, step)


def train_step(state: TrainState, batch) -> Tuple[TrainState, LossReport]:
    """One round of ``d_steps_per_g_step`` discriminator updates then one generator update.

    ``batch`` is ``(profiles, frontals, (skin, keypoint, hair) masks)``.
    The state is updated in place and returned.
    """
    cfg = state.config
    profiles, frontals, masks = batch
    step = state.step + 1
    d_values: Dict[str, float] = {}

    # G is fixed during the discriminator updates, so one recorded forward
    # pass serves every D update (detached) and then the G update.
    outputs = state.G(profiles)
    fake = outputs[-1]
    fake_views_d = regional_views(fake.data, masks)
    real_views = regional_views(frontals, masks)
    for _ in range(cfg.d_steps_per_g_step):
        report_d = adv_loss_D(state.bank, real_views, fake_views_d, state.d_regions)
        d_values = {f"D_{k}": float(v.data) for k, v in report_d.terms.items()}
        for name, v in d_values.items():
            _check_finite(name, v, step)
        state.opt_d.step(backward(report_d.L_adv))

    terms = {
        "L_ID": identity_loss(frontals, fake, state.embedder),
        "L_pixel": pixel_loss(frontals, outputs),
        "L_tv": tv_loss(fake),
    }
    report_g = adv_loss_G(state.bank, regional_views(fake, masks), state.g_regions)
    terms["L_adv"] = report_g.L_adv
    for name, t in list(terms.items()) + [(f"L_{k}", v) for k, v in report_g.terms.items()]:
        _check_finite(name, float(t.data), step)
    report = total_loss(terms, cfg.weights, adversarial=report_g.terms)
    state.opt_g.step(backward(report.graph))
    report.graph = None

    state.step = step
    record = report.as_record()
    record.update(d_values)
    for key, value in record.items():
        num, w = state.running.get(key, [0.0, 0.0])
        state.running[key] = [RUNNING_DECAY * num + value, RUNNING_DECAY * w + 1.0]
    return state, report


def sample_indices(state: TrainState, n: int) -> np.ndarray:
    return state.rng.choice(n, size=state.config.batch_size, replace=n < state.config.batch_size)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_state(state: TrainState, path) -> Path:
    header = {
        "kind": "dagan-train-state",
        "config": state.config.to_dict(),
        "generator": state.G.config.to_dict(),
        "step": state.step,
        "rng": state.rng.bit_generator.state,
        "running": state.running,
        "g_regions": list(state.g_regions),
        "d_regions": list(state.d_regions),
        "frozen": [p.name for p in state.G.parameters() + state.bank.parameters() if not p.trainable],
        "embedder": {"classes": {str(k): v for k, v in state.embedder.classes.items()},
                     "n_classes": len(state.embedder.classes),
                     "train_accuracy": state.embedder.train_accuracy},
    }
    sections = {
        "G": state.G.state_dict(),
        "D": state.bank.state_dict(),
        "E": state.embedder.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
    }
    return checkpoint.save_archive(path, sections, header)


def load_state(path) -> TrainState:
    header, sections = checkpoint.load_archive(path)
    if header.get("kind") != "dagan-train-state":
        raise checkpoint.CheckpointError(f"{path} is not a training checkpoint")
    config = TrainConfig.from_dict(header["config"])
    dtype = config.np_dtype
    G = build_generator(GeneratorConfig.from_dict(header["generator"]), seed=config.seed, dtype=dtype)
    G.load_state_dict(sections["G"])
    bank = build_bank(config.channels, config.base_channels, config.image_size, seed=config.seed, dtype=dtype)
    bank.load_state_dict(sections["D"])
    emb_meta = header["embedder"]
    embedder = IdentityEmbedder(emb_meta["n_classes"], channels=config.channels, image_size=config.image_size)
    from .diffgraph.nn import init_parameters
    init_parameters(embedder, 0, dtype=dtype, prefix="E.")
    embedder.load_state_dict(sections["E"])
    embedder.classes = {int(k): v for k, v in emb_meta["classes"].items()}
    embedder.train_accuracy = emb_meta["train_accuracy"]
    embedder.freeze()
    frozen = set(header.get("frozen", []))
    for p in G.parameters() + bank.parameters():
        p.trainable = p.name not in frozen
    betas = (config.beta1, config.beta2)
    opt_g = Adam(G.trainable_parameters(), lr=config.lr_g, betas=betas)
    opt_g.load_state_dict(sections["opt_g"])
    opt_d = Adam(bank.trainable_parameters(), lr=config.lr_d, betas=betas)
    opt_d.load_state_dict(sections["opt_d"])
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng"]
    return TrainState(config=config, G=G, bank=bank, embedder=embedder, opt_g=opt_g, opt_d=opt_d, rng=rng,
                      step=int(header["step"]), running={k: list(v) for k, v in header["running"].items()},
                      g_regions=tuple(header["g_regions"]), d_regions=tuple(header["d_regions"]))


def load_generator(path) -> Tuple[Generator, IdentityEmbedder, TrainConfig]:
    state = load_state(path)
    return state.G, state.embedder, state.config


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

@contextlib.contextmanager
def single_threaded():
    """Pin BLAS to one thread so reductions happen in a fixed order."""
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def run(config: TrainConfig, dataset: Optional[FaceDataset] = None, out_dir=None, state: Optional[TrainState] = None,
        steps: Optional[int] = None, log_every: int = 0, deterministic: bool = True):
    """Train until ``config.steps`` (or ``steps`` more steps when given).

    Returns ``(state, records)`` where ``records`` holds one dict per step
    (the same content written to ``<out_dir>/train_log.jsonl``).
    """
    dataset = dataset or build_dataset(config)
    state = state or init_state(config, dataset)
    data = PairArrays(dataset.split("train"), config.image_size, dtype=config.np_dtype)
    target = config.steps if steps is None else state.step + steps
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "a" if state.step else "w")
    records = []
    ctx = single_threaded() if deterministic else contextlib.nullcontext()
    try:
        with ctx:
            while state.step < target:
                idx = sample_indices(state, len(data))
                state, report = train_step(state, data.batch(idx))
                rec = {"step": state.step}
                rec.update(report.as_record())
                rec["running_L_pixel"] = state.running_averages()["L_pixel"]
                records.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                if log_every and state.step % log_every == 0:
                    log.info("step %d %s", state.step, " ".join(f"{k}={v:.4f}" for k, v in rec.items() if k != "step"))
                if out is not None and config.checkpoint_interval and state.step % config.checkpoint_interval == 0:
                    save_state(state, out / "checkpoints" / f"step_{state.step:06d}.npz")
    finally:
        if log_fh:
            log_fh.close()
    if out is not None:
        save_state(state, out / "checkpoint.npz")
    return state, records
