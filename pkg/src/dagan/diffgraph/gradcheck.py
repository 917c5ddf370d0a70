"""Central finite differences and the per-op gradient check suite."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, backward


class NonFiniteError(ArithmeticError):
    pass


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``x`` (float64).

    ``f`` receives a float64 array of ``x``'s shape and returns a scalar (a
    Python number, 0-d array, or size-1 :class:`Tensor`).
    """
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)

    def evaluate(arr):
        val = f(arr)
        if isinstance(val, Tensor):
            val = val.data
        val = float(np.asarray(val, dtype=np.float64).reshape(-1)[0])
        if not np.isfinite(val):
            raise NonFiniteError(f"f evaluated to {val} during finite differencing")
        return val

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = evaluate(x.copy())
        flat[i] = orig - h
        down = evaluate(x.copy())
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor) over the whole array, as one scalar.

    The denominator is the larger of the two arrays' max-norms, which keeps
    the measure meaningful when individual entries pass near zero.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5,
                    seed_rng: np.random.Generator = None) -> float:
    """Compare backward() of ``sum(w * fn(*inputs))`` with finite differences.

    A random projection ``w`` turns vector outputs into a scalar so every
    output coordinate participates. Returns the worst relative error over
    all inputs.
    """
    rng = seed_rng or np.random.default_rng(0)
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    probe = fn(*[Tensor(x) for x in inputs])
    w = rng.normal(size=probe.shape)

    leaves = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = fn(*leaves)
    grads = backward(out, seed=w)
    worst = 0.0
    for k, leaf in enumerate(leaves):
        analytic = grads.get(leaf, np.zeros_like(leaf.data))

        def scalar(arr, k=k):
            args = [Tensor(a) for a in inputs]
            args[k] = Tensor(arr)
            return float(np.sum(w * fn(*args).data))

        numeric = finite_diff_grad(scalar, inputs[k], h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


@dataclass
class OpCase:
    name: str
    fn: Callable[..., Tensor]
    make_inputs: Callable[[np.random.Generator], List[np.ndarray]]


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def op_cases() -> List[OpCase]:
    """One case per differentiable op in :mod:`dagan.diffgraph.ops`.

    Kinked ops (abs, relu, leaky_relu, clip) get inputs kept away from their
    kinks so the central difference never straddles one.
    """
    n = lambda *s: (lambda r: [r.normal(size=s)])  # noqa: E731
    return [
        OpCase("add", lambda a, b: ops.add(a, b), lambda r: [r.normal(size=(3, 4)), r.normal(size=(1, 4))]),
        OpCase("sub", lambda a, b: ops.sub(a, b), lambda r: [r.normal(size=(2, 3)), r.normal(size=(3,))]),
        OpCase("mul", lambda a, b: ops.mul(a, b), lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(3, 1))]),
        OpCase("scalar_mul", lambda a: ops.scalar_mul(a, -1.7), n(3, 3)),
        OpCase("matmul", lambda a, b: ops.matmul(a, b), lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))]),
        OpCase("transpose", lambda a: ops.transpose(a, (2, 0, 1)), n(2, 3, 4)),
        OpCase("reshape", lambda a: ops.reshape(a, (4, 6)), n(2, 3, 4)),
        OpCase("getitem", lambda a: ops.getitem(a, (slice(None), slice(1, 3))), n(3, 4)),
        OpCase("conv2d_s1", lambda x, w, b: ops.conv2d(x, w, b, stride=1, padding=1),
               lambda r: [r.normal(size=(2, 2, 5, 5)), r.normal(size=(3, 2, 3, 3)), r.normal(size=(3,))]),
        OpCase("conv2d_s2", lambda x, w, b: ops.conv2d(x, w, b, stride=2, padding=1),
               lambda r: [r.normal(size=(2, 2, 6, 6)), r.normal(size=(3, 2, 4, 4)), r.normal(size=(3,))]),
        OpCase("conv_transpose2d", lambda x, w, b: ops.conv_transpose2d(x, w, b, stride=2, padding=1),
               lambda r: [r.normal(size=(2, 3, 3, 3)), r.normal(size=(3, 2, 4, 4)), r.normal(size=(2,))]),
        OpCase("conv1x1", lambda x, w, b: ops.conv1x1(x, w, b),
               lambda r: [r.normal(size=(2, 3, 3, 2)), r.normal(size=(4, 3)), r.normal(size=(4,))]),
        OpCase("leaky_relu", lambda a: ops.leaky_relu(a, 0.2), lambda r: [_away_from_zero(r, (4, 5))]),
        OpCase("relu", ops.relu, lambda r: [_away_from_zero(r, (4, 5))]),
        OpCase("sigmoid", ops.sigmoid, lambda r: [3 * r.normal(size=(4, 5))]),
        OpCase("tanh", ops.tanh, n(4, 5)),
        OpCase("softmax", lambda a: ops.softmax(a, axis=-1), n(3, 5)),
        OpCase("softmax_axis0", lambda a: ops.softmax(a, axis=0), n(4, 3)),
        OpCase("log_softmax", lambda a: ops.log_softmax(a, axis=-1), n(3, 5)),
        OpCase("abs", ops.absolute, lambda r: [_away_from_zero(r, (4, 5))]),
        OpCase("square", ops.square, n(4, 5)),
        OpCase("log", ops.log, lambda r: [r.uniform(0.2, 2.0, size=(4, 5))]),
        OpCase("clip", lambda a: ops.clip(a, -0.5, 0.5),
               lambda r: [np.where(np.abs(np.abs(x := r.normal(size=(4, 5))) - 0.5) < 0.05, 0.0, x)]),
        OpCase("reduce_sum", lambda a: ops.reduce_sum(a, axis=(0, 2)), n(2, 3, 4)),
        OpCase("reduce_mean", lambda a: ops.reduce_mean(a, axis=1, keepdims=True), n(2, 3, 4)),
        OpCase("concat", lambda a, b: ops.concat([a, b], axis=1),
               lambda r: [r.normal(size=(2, 2, 3, 3)), r.normal(size=(2, 3, 3, 3))]),
        OpCase("upsample_nearest", lambda a: ops.upsample_nearest(a, 2), n(2, 2, 3, 3)),
        OpCase("avg_pool2d", lambda a: ops.avg_pool2d(a, 2), n(2, 2, 4, 4)),
        OpCase("instance_norm", ops.instance_norm, n(2, 3, 4, 4)),
    ]


def run_op_suite(cases: Sequence[OpCase] = None, trials: int = 5, seed: int = 0, h: float = 1e-5) -> Dict[str, float]:
    """Worst relative error per case over ``trials`` random instances."""
    cases = op_cases() if cases is None else cases
    table = {}
    for idx, case in enumerate(cases):
        rng = np.random.default_rng([seed, idx])
        worst = 0.0
        for _ in range(trials):
            worst = max(worst, check_gradients(case.fn, case.make_inputs(rng), h=h, seed_rng=rng))
        table[case.name] = worst
    return table
