"""Parameter containers and the layers shared by backbone, temporal module and head."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.array(data, dtype=T.DTYPE), requires_grad=True)


class Module:
    """Attribute-walking parameter registry; submodule order is assignment order."""

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = own.keys() - state.keys()
        unexpected = state.keys() - own.keys()
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=T.DTYPE)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


def fan_in_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(fan_in_uniform(rng, d_in, (d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.silu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Unmasked scaled dot-product attention over ``(B, L, D)`` inputs."""

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator):
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by heads {num_heads}")
        self.num_heads = num_heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        B, L, D = x.shape
        return x.reshape(B, L, self.num_heads, D // self.num_heads).transpose(0, 2, 1, 3)

    def weights(self, q_in: Tensor, k_in: Tensor) -> Tensor:
        q, k = self._split(self.q(q_in)), self._split(self.k(k_in))
        dh = q.shape[-1]
        return T.softmax(T.scale(q @ T.swapaxes(k, -1, -2), 1.0 / math.sqrt(dh)), axis=-1)

    def forward(self, q_in: Tensor, k_in: Tensor, v_in: Tensor) -> Tensor:
        att = self.weights(q_in, k_in)                      # (B, H, Lq, Lk)
        ctx = att @ self._split(self.v(v_in))               # (B, H, Lq, dh)
        B, H, Lq, dh = ctx.shape
        return self.out(ctx.transpose(0, 2, 1, 3).reshape(B, Lq, H * dh))


class Block(Module):
    """Pre-norm transformer block: attention sublayer then MLP sublayer.

    With ``cross=True`` the query and the key/value inputs get separate
    pre-norms and ``forward(q, k, v)`` takes all three; otherwise the block
    is plain self-attention over ``forward(x)``.
    """

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float, rng: np.random.Generator,
                 cross: bool = False):
        self.norm_q = LayerNorm(dim)
        self.norm_kv = LayerNorm(dim) if cross else None
        self.attn = MultiHeadAttention(dim, num_heads, rng)
        self.norm_mlp = LayerNorm(dim)
        self.mlp = MLP(dim, int(dim * mlp_ratio), rng)

    def forward(self, q: Tensor, k: Tensor | None = None, v: Tensor | None = None) -> Tensor:
        if self.norm_kv is None:
            qn = kn = vn = self.norm_q(q)
        else:
            if k is None or v is None:
                raise TypeError("cross block needs q, k and v")
            qn = self.norm_q(q)
            kn = self.norm_kv(k)
            vn = kn if v is k else self.norm_kv(v)
        x = q + self.attn(qn, kn, vn)
        return x + self.mlp(self.norm_mlp(x))
