"""Self-attention over spatial positions with a zero-initialised residual gain.

For a feature map ``X`` of shape ``(C, H, W)`` and ``N = H * W``:

    A = f(X), B = g(X)            1x1 convs to C' channels, viewed as C' x N
    M = softmax_rows(A^T B)       N x N, row j is a distribution over sources i
    X'' = X + mu * (h(X) M^T)     i.e. X''_j = X_j + mu * sum_i M_ji h(X)_i

``mu`` starts at exactly 0, so a fresh block is the identity map.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .diffgraph import ops
from .diffgraph.nn import Conv1x1, Module, zeros_init
from .diffgraph.tensor import Parameter, ShapeError, Tensor, as_tensor


def bottleneck_channels(channels: int) -> int:
    return max(channels // 8, 1)


class SelfAttentionBlock(Module):
    def __init__(self, channels: int, key_channels: Optional[int] = None):
        super().__init__()
        self.channels = channels
        self.key_channels = key_channels or bottleneck_channels(channels)
        self.conv_f = Conv1x1(channels, self.key_channels, std=0.1)
        self.conv_g = Conv1x1(channels, self.key_channels, std=0.1)
        self.conv_h = Conv1x1(channels, channels)
        self.mu = Parameter((1,), init=zeros_init)

    def _check(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError("self_attention",
                             f"block expects {self.channels} channels, got input of shape {x.shape}")

    @property
    def weights(self):
        """``(wf, bf, wg, bg, wh, bh, mu)`` in the order :func:`self_attention` takes them."""
        return (self.conv_f.weight, self.conv_f.bias, self.conv_g.weight, self.conv_g.bias,
                self.conv_h.weight, self.conv_h.bias, self.mu)

    def attention_map(self, x) -> Tensor:
        """Row-stochastic ``(batch, N, N)`` map ``softmax_rows(A^T B)``."""
        x = as_tensor(x)
        self._check(x)
        return attention_logits_map(x, *self.weights[:4])

    def forward(self, x, chunk_size: Optional[int] = None) -> Tensor:
        x = as_tensor(x)
        self._check(x)
        return self_attention(x, *self.weights, chunk_size=chunk_size)


def _flat(x: Tensor, w, b) -> Tensor:
    B, _, H, W = x.shape
    y = ops.conv1x1(x, w, b)
    return ops.reshape(y, (B, y.shape[1], H * W))


def attention_logits_map(x, wf, bf, wg, bg) -> Tensor:
    keys, queries = _flat(x, wf, bf), _flat(x, wg, bg)
    return ops.softmax(ops.matmul(ops.transpose(keys, (0, 2, 1)), queries), axis=-1)


def self_attention(x, wf, bf, wg, bg, wh, bh, mu, chunk_size: Optional[int] = None) -> Tensor:
    """Block arithmetic on a batched map with explicit weights (1x1 conv weights are ``(out, in)``)."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    n = H * W
    keys_t = ops.transpose(_flat(x, wf, bf), (0, 2, 1))  # B, N, C'
    queries = _flat(x, wg, bg)
    values_t = ops.transpose(_flat(x, wh, bh), (0, 2, 1))  # B, N, C
    if chunk_size is None or chunk_size >= n:
        attn = ops.softmax(ops.matmul(keys_t, queries), axis=-1)
        mixed = ops.matmul(attn, values_t)
    else:
        # Row blocks of M are built and consumed one at a time; peak memory
        # is chunk_size x N instead of N x N.
        parts = []
        for j0 in range(0, n, chunk_size):
            rows = ops.getitem(keys_t, (slice(None), slice(j0, j0 + chunk_size)))
            parts.append(ops.matmul(ops.softmax(ops.matmul(rows, queries), axis=-1), values_t))
        mixed = ops.concat(parts, axis=1)
    mixed = ops.reshape(ops.transpose(mixed, (0, 2, 1)), (B, C, H, W))
    return ops.add(x, ops.mul(mixed, mu))


def attention_map(x, block: SelfAttentionBlock) -> Tensor:
    """Functional form; accepts ``(C, H, W)`` or batched input."""
    x = as_tensor(x)
    single = x.ndim == 3
    out = block.attention_map(ops.reshape(x, (1,) + x.shape) if single else x)
    return ops.reshape(out, out.shape[1:]) if single else out


def attention_forward(x, block: SelfAttentionBlock, chunk_size: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    single = x.ndim == 3
    out = block(ops.reshape(x, (1,) + x.shape) if single else x, chunk_size=chunk_size)
    return ops.reshape(out, x.shape) if single else out
