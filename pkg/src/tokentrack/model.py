"""The full tracker: backbone -> temporal module -> guidance -> center head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig, standardize
from .head import CenterHead, HeadMaps, guide
from .nn import Module
from .temporal import VARIANTS, TemporalModule
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    variant: str = "mamba-cross"
    window: int = 8
    use_track_token: bool = True
    use_temporal: bool = True
    head_hidden: int = 32
    temporal_heads: int = 4
    temporal_mlp_ratio: float = 4.0
    ssm_state: int = 16
    ssm_expand: int = 2
    ssm_conv: int = 4

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.use_temporal and not self.use_track_token:
            raise ValueError("the temporal module needs track tokens (use both ablation flags)")
        if self.window < 1:
            raise ValueError("window must be >= 1")

    @property
    def grid(self) -> int:
        return self.backbone.search_size // 16


@dataclass
class FrameOutput:
    maps: HeadMaps
    track: Tensor | None      # post-backbone track tokens (B, 1, D)
    context: Tensor | None    # context-aware token fed to guidance (B, 1, D)
    similarity: Tensor | None  # (B, N_x, 1)


class TrackerModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        D = cfg.backbone.embed_dim
        self.backbone = Backbone(cfg.backbone, rng)
        self.temporal = (TemporalModule(cfg.variant, D, cfg.temporal_heads, cfg.temporal_mlp_ratio, rng,
                                        state_dim=cfg.ssm_state, expand=cfg.ssm_expand,
                                        conv_width=cfg.ssm_conv)
                         if cfg.use_temporal else None)
        self.head = CenterHead(D, cfg.head_hidden, rng)

    def backbone_parameters(self):
        return [p for n, p in self.named_parameters() if n.startswith("backbone.")]

    # -- pieces ----------------------------------------------------------
    def encode_template(self, pixels: np.ndarray) -> Tensor:
        """``(B, hz, wz, 3)`` crops in [0, 1] -> embedded template tokens."""
        return self.backbone.embed_template(standardize(pixels))

    def encode_frames(self, template: Tensor, pixels: np.ndarray):
        """Joint-encode search crops ``(B, hx, wx, 3)`` against per-row templates."""
        search = self.backbone.embed_search(standardize(pixels))
        track = self.backbone.track_tokens(search.shape[0]) if self.cfg.use_track_token else None
        return self.backbone.joint_encode(track, template, search)

    def context_token(self, window: Tensor) -> Tensor:
        """Window ``(B, L, D)`` of backbone track tokens -> token for the newest frame."""
        if self.temporal is None:
            return window[:, -1:, :]
        return self.temporal(window)[:, -1:, :]

    def predict(self, search_tokens: Tensor, context: Tensor | None):
        if context is None:
            return self.head(search_tokens), None
        adjusted, sim = guide(search_tokens, context)
        return self.head(adjusted), sim

    # -- training path -----------------------------------------------------
    def clip_forward(self, template: np.ndarray, search: np.ndarray) -> FrameOutput:
        """Run ``n`` clips of ``m`` frames; outputs are flattened to ``n*m`` rows.

        Frame ``l`` of a clip sees the window of backbone track tokens of
        frames ``max(0, l-window+1) .. l`` of the same clip, exactly as at
        inference.
        """
        n, m = search.shape[:2]
        z = self.encode_template(template)
        _, Nz, D = z.shape
        z = T.broadcast_to(z.reshape(n, 1, Nz, D), (n, m, Nz, D)).reshape(n * m, Nz, D)
        track, _, x = self.encode_frames(z, search.reshape(n * m, *search.shape[2:]))
        context = None
        if track is not None:
            tok = track.reshape(n, m, D)
            if self.temporal is None:
                context = track
            else:
                outs = []
                for t in range(m):
                    lo = max(0, t + 1 - self.cfg.window)
                    outs.append(self.context_token(tok[:, lo:t + 1, :]))
                context = T.concat(outs, axis=1).reshape(n * m, 1, D)
        maps, sim = self.predict(x, context)
        return FrameOutput(maps, track, context, sim)
