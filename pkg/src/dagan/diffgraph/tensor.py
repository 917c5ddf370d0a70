"""Eager tensors with a reverse-mode tape.

Every op in :mod:`dagan.diffgraph.ops` returns a new :class:`Tensor`. When
any input requires a gradient (and recording is enabled) the output keeps a
reference to its inputs plus a closure mapping the output gradient to the
input gradients. :func:`backward` walks that tape in reverse topological
order.
"""

from __future__ import annotations

import contextlib
import inspect
import threading
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]


class GraphError(Exception):
    """Base class for errors raised by the differentiable substrate."""


class ShapeError(GraphError, ValueError):
    """Operand shapes are inconsistent with an op's signature."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class UnboundInputError(GraphError, KeyError):
    def __init__(self, names: Iterable[str]):
        names = sorted(names)
        super().__init__(f"unbound graph inputs: {', '.join(names)}")
        self.names = names

    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return self.args[0]


class BackwardError(GraphError):
    """backward() requested on a graph whose forward tape is unavailable."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording them on the tape."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A dense real array plus the bookkeeping needed for reverse mode.

    Tensors are treated as immutable once produced: ops never write into
    their inputs, so a tensor may be shared read-only across threads.
    """

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._needs: Tuple[bool, ...] = ()   # parents' requires_grad when this node was recorded
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._released = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op != "leaf" else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # Operator sugar; implementations live in ops.py.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.reduce_mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A named trainable leaf.

    ``init`` is a callable ``(rng, shape, dtype) -> ndarray`` used by
    :func:`dagan.diffgraph.nn.init_parameters`; parameters are (re)initialised
    from an RNG keyed on their qualified name, so models that differ only by
    an optional block share every common parameter value.
    """

    def __init__(self, shape, init=None, trainable: bool = True, dtype=np.float32, name: str = ""):
        super().__init__(np.zeros(shape, dtype=dtype), requires_grad=trainable)
        self.name = name
        self.init = init

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, value: bool) -> None:
        self.requires_grad = bool(value)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def assign(self, value: ArrayLike) -> None:
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ShapeError("assign", f"parameter {self.name!r} has shape {self.data.shape}, got {value.shape}")
        self.data = value.copy()

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Wrap ``data`` as an op output, recording it on the tape when needed."""
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._needs = tuple(p.requires_grad for p in parents)
        out._backward = backward_fn
    return out


def _toposort(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, needed in zip(node._parents, node._needs):
            if needed and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(output, seed: Optional[ArrayLike] = None, retain_graph: bool = False) -> Dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from ``output``.

    Returns ``{leaf: gradient}`` for every leaf that requires a gradient and
    is reachable from ``output`` (trainable parameters included). The
    gradient is that of ``sum(seed * output)``; ``seed`` defaults to ones.
    Each reached leaf also has its ``.grad`` overwritten.
    """
    if not isinstance(output, Tensor):
        raise BackwardError("backward() needs the output tensor of an evaluated forward pass")
    if output._released:
        raise BackwardError(f"the tape behind {output.op!r} was released by an earlier backward(); "
                            "re-run forward or pass retain_graph=True")
    if seed is None:
        seed_arr = np.ones_like(output.data)
    else:
        seed_arr = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=output.dtype)
        if seed_arr.shape != output.shape:
            raise ShapeError("backward", f"seed shape {seed_arr.shape} != output shape {output.shape}")
    if not output.requires_grad:
        return {}

    order = _toposort(output)
    grads: Dict[int, np.ndarray] = {id(output): seed_arr}
    leaves: Dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            leaves[node] = g
            continue
        parent_grads = node._backward(g)
        for parent, needed, pg in zip(node._parents, node._needs, parent_grads):
            if pg is None or not needed:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if not retain_graph:
            node._parents = ()
            node._needs = ()
            node._backward = None
            node._released = True
    return leaves


def gradients_for(params: Iterable[Tensor], grads: Mapping[Tensor, np.ndarray]) -> Dict[Tensor, np.ndarray]:
    """Complete a backward() result with exact zeros for unreached params."""
    return {p: grads[p] if p in grads else np.zeros_like(p.data) for p in params}


def forward(graph: Callable[..., Tensor], bindings: Mapping[str, ArrayLike]) -> Tensor:
    """Evaluate ``graph`` (a callable over named tensor inputs) on ``bindings``.

    Every parameter of ``graph`` without a default must be bound. Arrays are
    wrapped as constant tensors; pass a ``Tensor`` with ``requires_grad`` to
    differentiate with respect to an input.
    """
    sig = inspect.signature(graph)
    required = {
        name for name, p in sig.parameters.items()
        if p.default is inspect.Parameter.empty
        and p.kind in (inspect.Parameter.POSITIONAL_OR_KEYWORD, inspect.Parameter.KEYWORD_ONLY)
    }
    missing = required - set(bindings)
    if missing:
        raise UnboundInputError(missing)
    kwargs = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in bindings.items()}
    return graph(**kwargs)
