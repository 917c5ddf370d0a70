"""Parameter containers and the layers the networks are assembled from."""

from __future__ import annotations

import zlib
from typing import Dict, Iterator, List, Tuple

import numpy as np

from . import ops
from .tensor import Parameter, Tensor


def normal_init(std: float):
    def init(rng, shape, dtype):
        return rng.normal(0.0, std, size=shape).astype(dtype)
    return init


def he_init(fan_in: int, gain: float = 2.0):
    return normal_init(float(np.sqrt(gain / max(fan_in, 1))))


def zeros_init(rng, shape, dtype):
    return np.zeros(shape, dtype=dtype)


def ones_init(rng, shape, dtype):
    return np.ones(shape, dtype=dtype)


class Module:
    """Tree of named parameters and sub-modules.

    Attributes holding a :class:`Parameter` or a :class:`Module` (or a list
    of modules) are registered automatically, in assignment order.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            for i, v in enumerate(value):
                self._children[f"{name}.{i}"] = v
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> List[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            p.assign(state[name])

    def count_parameters(self) -> int:
        return int(sum(p.size for p in self.trainable_parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def init_parameters(module: Module, seed: int, dtype=np.float32, prefix: str = "") -> None:
    """Fill every parameter from an RNG keyed on ``(seed, crc32(name))``.

    Also stamps each parameter with its qualified name and casts it to
    ``dtype``. Keying on the name keeps values stable when unrelated blocks
    are added or removed.
    """
    names = set()
    for name, p in module.named_parameters(prefix):
        if name in names:
            raise ValueError(f"duplicate parameter name {name!r}")
        names.add(name)
        p.name = name
        rng = np.random.default_rng([int(seed), zlib.crc32(name.encode())])
        init = p.init or zeros_init
        p.data = np.asarray(init(rng, p.shape, dtype), dtype=dtype)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0, bias: bool = True):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = Parameter((out_ch, in_ch, kernel, kernel), init=he_init(in_ch * kernel * kernel))
        self.bias = Parameter((out_ch,), init=zeros_init) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 4, stride: int = 2, padding: int = 1, bias: bool = True):
        super().__init__()
        self.stride, self.padding = stride, padding
        fan_in = in_ch * kernel * kernel // (stride * stride)
        self.weight = Parameter((in_ch, out_ch, kernel, kernel), init=he_init(fan_in))
        self.bias = Parameter((out_ch,), init=zeros_init) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Conv1x1(Module):
    def __init__(self, in_ch: int, out_ch: int, bias: bool = True, std: float = None):
        super().__init__()
        self.weight = Parameter((out_ch, in_ch), init=normal_init(std) if std else he_init(in_ch, gain=1.0))
        self.bias = Parameter((out_ch,), init=zeros_init) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv1x1(x, self.weight, self.bias)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, gain: float = 2.0):
        super().__init__()
        self.weight = Parameter((in_features, out_features), init=he_init(in_features, gain))
        self.bias = Parameter((out_features,), init=zeros_init)

    def forward(self, x: Tensor) -> Tensor:
        return ops.add(ops.matmul(x, self.weight), self.bias)


class InstanceNorm(Module):
    """Instance normalisation with a learned per-channel affine."""

    def __init__(self, channels: int):
        super().__init__()
        self.gamma = Parameter((1, channels, 1, 1), init=ones_init)
        self.beta = Parameter((1, channels, 1, 1), init=zeros_init)

    def forward(self, x: Tensor) -> Tensor:
        return ops.add(ops.mul(ops.instance_norm(x), self.gamma), self.beta)
