"""Joint template/search/track-token encoder.

Images are embedded by two strided linear patch stages (4x then 4x, effective
stride 16) with a pointwise mixing layer in between, then the token sequence
``[track | template | search]`` runs through ``depth`` global pre-norm
attention blocks with no masking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Block, Linear, Module, Parameter
from .tensor import Tensor

STRIDE = 16
PIXEL_MEAN = np.array([0.485, 0.456, 0.406])
PIXEL_STD = np.array([0.229, 0.224, 0.225])


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    template_size: int = 64
    search_size: int = 128
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        for name in ("template_size", "search_size"):
            if getattr(self, name) % STRIDE:
                raise ConfigError(f"{name}={getattr(self, name)} is not divisible by {STRIDE}")
        if self.embed_dim % self.num_heads:
            raise ConfigError("embed_dim must be divisible by num_heads")
        if self.embed_dim % 2:
            raise ConfigError("embed_dim must be even (the first patch stage uses D/2)")

    @property
    def n_template(self) -> int:
        return (self.template_size // STRIDE) ** 2

    @property
    def n_search(self) -> int:
        return (self.search_size // STRIDE) ** 2


FULL_SCALE = BackboneConfig(template_size=128, search_size=256, embed_dim=512, depth=12, num_heads=8)


def standardize(pixels: np.ndarray) -> np.ndarray:
    """uint8 or [0,1] RGB array -> zero-mean/unit-std input for :class:`PatchEmbed`."""
    x = np.asarray(pixels, dtype=np.float64)
    if pixels.dtype == np.uint8:
        x = x / 255.0
    return (x - PIXEL_MEAN) / PIXEL_STD


def _merge4(x: Tensor) -> Tensor:
    """(B, H, W, C) -> (B, H/4, W/4, 16*C), patch-internal order (dy, dx, c)."""
    B, H, W, C = x.shape
    return (x.reshape(B, H // 4, 4, W // 4, 4, C)
             .transpose(0, 1, 3, 2, 4, 5)
             .reshape(B, H // 4, W // 4, 16 * C))


class PatchEmbed(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        half = dim // 2
        self.stage1 = Linear(48, half, rng)
        self.mix = Linear(half, half, rng)
        self.stage2 = Linear(16 * half, dim, rng)

    def forward(self, image) -> Tensor:
        x = T.as_tensor(image)
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        B, H, W, C = x.shape
        if H % STRIDE or W % STRIDE or C != 3:
            raise ConfigError(f"image shape {x.shape[1:]} must be (16a, 16b, 3)")
        x = self.stage1(_merge4(x))
        x = x + T.silu(self.mix(x))
        x = self.stage2(_merge4(x))
        return x.reshape(B, (H // STRIDE) * (W // STRIDE), x.shape[-1])


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        D = cfg.embed_dim
        self.patch = PatchEmbed(D, rng)
        self.track_seed = Parameter(np.zeros((1, D)))
        self.pos_track = Parameter(rng.normal(0.0, 0.02, (1, D)))
        self.pos_template = Parameter(rng.normal(0.0, 0.02, (cfg.n_template, D)))
        self.pos_search = Parameter(rng.normal(0.0, 0.02, (cfg.n_search, D)))
        self.blocks = [Block(D, cfg.num_heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]

    def add_positional(self, tokens: Tensor, part: str) -> Tensor:
        """Add the learned position table of ``part``; callers apply it exactly once."""
        table = {"track": self.pos_track, "template": self.pos_template, "search": self.pos_search}
        if part not in table:
            raise ValueError(f"unknown token part {part!r}")
        return tokens + table[part]

    def embed_template(self, image) -> Tensor:
        return self.add_positional(self.patch(image), "template")

    def embed_search(self, image) -> Tensor:
        return self.add_positional(self.patch(image), "search")

    def track_tokens(self, batch: int) -> Tensor:
        tok = self.add_positional(self.track_seed, "track")
        return T.broadcast_to(tok.reshape(1, 1, -1), (batch, 1, self.cfg.embed_dim))

    def joint_encode(self, track: Tensor | None, template: Tensor, search: Tensor):
        """Run the global blocks over ``[track | template | search]``.

        Returns ``(track_out, template_out, search_out)``; ``track_out`` is
        ``None`` when ``track`` is ``None`` (the no-track-token ablation).
        """
        nz, nx = template.shape[1], search.shape[1]
        if nz != self.cfg.n_template or nx != self.cfg.n_search:
            raise ConfigError(f"token counts ({nz}, {nx}) != config "
                              f"({self.cfg.n_template}, {self.cfg.n_search})")
        parts = [template, search] if track is None else [track, template, search]
        x = T.concat(parts, axis=1)
        for blk in self.blocks:
            x = blk(x)
        off = 0 if track is None else 1
        t_out = None if track is None else x[:, :1, :]
        return t_out, x[:, off:off + nz, :], x[:, off + nz:, :]
