"""Track-token guidance of the search features, the center head and box decoding."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import ConfigError
from .boxes import BBox
from .nn import Linear, Module
from .tensor import Tensor

# sigmoid(-2.19) ~ 0.1, the usual starting score for center heads
SCORE_PRIOR_BIAS = -2.19


def guide(search: Tensor, track: Tensor) -> tuple[Tensor, Tensor]:
    """Scale each search token by its similarity to the track token.

    ``search`` is ``(B, N_x, D)`` and ``track`` is ``(B, 1, D)``. Returns the
    adjusted features and the scores ``S = sigmoid(<F_x[i], track> / sqrt(D))``
    of shape ``(B, N_x, 1)``.
    """
    D = search.shape[-1]
    if track.shape != (search.shape[0], 1, D):
        raise T.ShapeError(f"track {track.shape} does not match search {search.shape}")
    scores = T.sigmoid(T.scale(search @ T.swapaxes(track, -1, -2), 1.0 / math.sqrt(D)))
    return search * scores, scores


@dataclass
class HeadMaps:
    score: Tensor    # (B, G, G)
    offset: Tensor   # (B, G, G, 2), (dx, dy) inside the cell
    size: Tensor     # (B, G, G, 2), (w, h) normalized to the crop


class _Branch(Module):
    def __init__(self, dim: int, hidden: int, out: int, rng: np.random.Generator):
        self.conv1 = Linear(9 * dim, hidden, rng)
        self.conv2 = Linear(9 * hidden, hidden, rng)
        self.proj = Linear(hidden, out, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = T.silu(self.conv1(T.im2col3x3(x)))
        x = T.silu(self.conv2(T.im2col3x3(x)))
        return T.sigmoid(self.proj(x))


class CenterHead(Module):
    """Score, offset and size branches: two 3x3 convs + a 1x1 projection each."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.score = _Branch(dim, hidden, 1, rng)
        self.score.proj.bias.data[:] = SCORE_PRIOR_BIAS
        self.offset = _Branch(dim, hidden, 2, rng)
        self.size = _Branch(dim, hidden, 2, rng)

    def forward(self, tokens: Tensor) -> HeadMaps:
        B, N, D = tokens.shape
        G = math.isqrt(N)
        if G * G != N:
            raise ConfigError(f"{N} search tokens do not form a square grid")
        grid = tokens.reshape(B, G, G, D)
        score = self.score(grid)
        return HeadMaps(score.reshape(B, G, G), self.offset(grid), self.size(grid))


def hamming_prior(G: int) -> np.ndarray:
    if G < 2:
        raise ConfigError("hamming prior needs G >= 2")
    k = np.arange(G)
    w = 0.54 - 0.46 * np.cos(2 * np.pi * k / (G - 1))
    return np.outer(w, w)


def decode_box(score: np.ndarray, offset: np.ndarray, size: np.ndarray,
               prior: np.ndarray | None = None) -> BBox:
    """Box at the argmax of ``score * prior`` (first row-major index on ties).

    Takes one sample's maps as arrays: ``score (G, G)``, ``offset (G, G, 2)``,
    ``size (G, G, 2)``. Coordinates are normalized to the search crop.
    """
    score = np.asarray(score)
    if prior is not None:
        prior = np.asarray(prior)
        if np.any(prior < 0):
            raise ValueError("prior must be nonnegative")
        score = score * prior
    G = score.shape[0]
    i, j = divmod(int(np.argmax(score)), G)
    ox, oy = offset[i, j]
    w, h = size[i, j]
    return BBox((j + ox) / G, (i + oy) / G, float(w), float(h))


def decode_maps(maps: HeadMaps, prior: np.ndarray | None = None) -> list[BBox]:
    return [decode_box(maps.score.data[b], maps.offset.data[b], maps.size.data[b], prior)
            for b in range(maps.score.shape[0])]
