from __future__ import annotations

from typing import Dict, List, Mapping, Sequence

import numpy as np

from .tensor import Parameter


class Adam:
    """Adaptive-moment gradient descent over a fixed parameter list.

    Moments are stored by parameter name so they can be checkpointed.
    A learning rate of exactly zero leaves parameters untouched.
    """

    def __init__(self, params: Sequence[Parameter], lr: float = 2e-4, betas=(0.5, 0.999), eps: float = 1e-8):
        self.params: List[Parameter] = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)
        self.t = 0
        self.m: Dict[str, np.ndarray] = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v: Dict[str, np.ndarray] = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, grads: Mapping[Parameter, np.ndarray]) -> None:
        self.t += 1
        if self.lr == 0.0:
            return
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in self.params:
            if not p.trainable:
                continue
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[p.name] = b1 * self.m[p.name] + (1.0 - b1) * g
            v = self.v[p.name] = b2 * self.v[p.name] + (1.0 - b2) * (g * g)
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {"t": np.array(self.t, dtype=np.int64)}
        for name in self.m:
            state[f"m/{name}"] = self.m[name]
            state[f"v/{name}"] = self.v[name]
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        self.t = int(state["t"])
        for name in self.m:
            self.m[name] = np.array(state[f"m/{name}"], dtype=self.m[name].dtype)
            self.v[name] = np.array(state[f"v/{name}"], dtype=self.v[name].dtype)
