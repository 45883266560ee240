"""Temporal interaction among the track tokens of a sliding window.

Three two-layer variants relate the window ``T`` (oldest first):

* ``mamba-cross``: ``T' = mamba(T)``, then cross-attention ``Q=T', K=V=T``
* ``self-cross``:  ``T' = self_attn(T)``, then cross-attention ``Q=T', K=V=T``
* ``self-self``:   ``T' = self_attn(T)``, then attention with ``Q=K=V=T'``

No positional encoding is used here; order enters only through the scan.
"""

from __future__ import annotations

import math
from collections import deque
from typing import Iterator

import numpy as np

from . import tensor as T
from .nn import Block, LayerNorm, Linear, Module, Parameter
from .tensor import ContractError, Tensor

VARIANTS = ("mamba-cross", "self-cross", "self-self")


class WindowBuffer:
    """Ring buffer of post-backbone track tokens, oldest first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("window capacity must be >= 1")
        self.capacity = capacity
        self._slots: deque = deque(maxlen=capacity)

    def push(self, token) -> "WindowBuffer":
        self._slots.append(token)
        return self

    def __len__(self) -> int:
        return len(self._slots)

    def __iter__(self) -> Iterator:
        return iter(self._slots)

    def __getitem__(self, i):
        return self._slots[i]

    def as_sequence(self) -> Tensor:
        """Stack the stored ``(B, 1, D)`` tokens into a ``(B, L, D)`` window."""
        if not self._slots:
            raise ContractError("empty window")
        return T.concat(list(self._slots), axis=1)


def window_push(buf: WindowBuffer, token) -> WindowBuffer:
    return buf.push(token)


def _inv_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class MambaLayer(Module):
    """Residual selective-scan block with a SiLU gate.

    ``T' = T + out(silu(z) * scan(silu(conv(x))))`` where ``(x, z)`` is the
    input projection of ``LayerNorm(T)``.
    """

    def __init__(self, dim: int, rng: np.random.Generator, expand: int = 2,
                 state_dim: int = 16, conv_width: int = 4,
                 dt_min: float = 0.01, dt_max: float = 0.1):
        E = expand * dim
        R = math.ceil(dim / 16)
        self.inner, self.state_dim, self.dt_rank = E, state_dim, R
        self.norm = LayerNorm(dim)
        self.in_proj = Linear(dim, 2 * E, rng)
        self.conv_kernel = Parameter(rng.uniform(-1, 1, (conv_width, E)) / math.sqrt(conv_width))
        self.conv_bias = Parameter(np.zeros(E))
        self.x_proj = Linear(E, R + 2 * state_dim, rng, bias=False)
        self.dt_proj = Linear(R, E, rng)
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), E))
        self.dt_proj.bias.data = _inv_softplus(dt)
        self.A_log = Parameter(np.log(np.tile(np.arange(1, state_dim + 1, dtype=float), (E, 1))))
        self.D_skip = Parameter(np.ones(E))
        self.out_proj = Linear(E, dim, rng)

    def A(self) -> Tensor:
        return -T.exp(self.A_log)

    def forward(self, seq: Tensor) -> Tensor:
        E, N, R = self.inner, self.state_dim, self.dt_rank
        xz = self.in_proj(self.norm(seq))
        x, z = xz[..., :E], xz[..., E:]
        x = T.silu(T.depthwise_causal_conv1d(x, self.conv_kernel) + self.conv_bias)
        dbc = self.x_proj(x)
        delta = T.softplus(self.dt_proj(dbc[..., :R]))
        y = T.selective_scan(x, delta, self.A(), dbc[..., R:R + N], dbc[..., R + N:], self.D_skip)
        return seq + self.out_proj(y * T.silu(z))


def attention_layer(block: Block, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    return block(q, k, v)


class TemporalModule(Module):
    def __init__(self, variant: str, dim: int, num_heads: int, mlp_ratio: float,
                 rng: np.random.Generator, **mamba_kwargs):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
        self.variant = variant
        if variant == "mamba-cross":
            self.first = MambaLayer(dim, rng, **mamba_kwargs)
        else:
            self.first = Block(dim, num_heads, mlp_ratio, rng, cross=True)
        self.second = Block(dim, num_heads, mlp_ratio, rng, cross=True)

    def forward(self, window: Tensor) -> Tensor:
        """``(B, L, D)`` window -> ``(B, L, D)``; position ``L-1`` is the current frame."""
        if window.ndim != 3 or window.shape[1] < 1:
            raise ContractError(f"temporal window must be (B, L>=1, D), got {window.shape}")
        if self.variant == "mamba-cross":
            first = self.first(window)
            return self.second(first, window, window)
        first = self.first(window, window, window)
        if self.variant == "self-cross":
            return self.second(first, window, window)
        return self.second(first, first, first)


def temporal_forward(module: TemporalModule, window: Tensor) -> Tensor:
    return module(window)
