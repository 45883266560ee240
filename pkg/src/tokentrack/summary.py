"""Closed-form parameter and multiply-accumulate counts per module.

MACs are counted for one tracked frame at inference: the patch embedding
and joint encoding of ``[track | template | search]``, the temporal module
over a full window, guidance and the head. Template patch embedding happens
once per sequence and is reported separately. Elementwise work (norms,
activations, softmax) is not counted; the scan counts ``2 * E * N`` per step
(state update and readout).
"""

from __future__ import annotations

import math

from .backbone import BackboneConfig
from .model import ModelConfig


def linear_params(d_in: int, d_out: int, bias: bool = True) -> int:
    return d_in * d_out + (d_out if bias else 0)


def layer_norm_params(dim: int) -> int:
    return 2 * dim


def block_params(dim: int, mlp_ratio: float, cross: bool = False) -> int:
    hidden = int(dim * mlp_ratio)
    norms = (3 if cross else 2) * layer_norm_params(dim)
    return norms + 4 * linear_params(dim, dim) + linear_params(dim, hidden) + linear_params(hidden, dim)


def patch_embed_params(dim: int) -> int:
    half = dim // 2
    return linear_params(48, half) + linear_params(half, half) + linear_params(16 * half, dim)


def backbone_params(cfg: BackboneConfig) -> int:
    D = cfg.embed_dim
    tables = D + D + cfg.n_template * D + cfg.n_search * D   # track seed, positions
    return patch_embed_params(D) + tables + cfg.depth * block_params(D, cfg.mlp_ratio)


def mamba_params(dim: int, expand: int, state: int, conv: int) -> int:
    E, R = expand * dim, math.ceil(dim / 16)
    return (layer_norm_params(dim) + linear_params(dim, 2 * E) + conv * E + E
            + linear_params(E, R + 2 * state, bias=False) + linear_params(R, E)
            + E * state + E + linear_params(E, dim))


def temporal_params(cfg: ModelConfig) -> int:
    if not cfg.use_temporal:
        return 0
    D = cfg.backbone.embed_dim
    second = block_params(D, cfg.temporal_mlp_ratio, cross=True)
    if cfg.variant == "mamba-cross":
        return mamba_params(D, cfg.ssm_expand, cfg.ssm_state, cfg.ssm_conv) + second
    return 2 * second


def head_params(dim: int, hidden: int) -> int:
    return sum(linear_params(9 * dim, hidden) + linear_params(9 * hidden, hidden) + linear_params(hidden, out)
               for out in (1, 2, 2))


def param_counts(cfg: ModelConfig) -> dict[str, int]:
    D = cfg.backbone.embed_dim
    counts = {"backbone": backbone_params(cfg.backbone), "temporal": temporal_params(cfg),
              "head": head_params(D, cfg.head_hidden)}
    counts["total"] = sum(counts.values())
    return counts


def _patch_macs(size: int, dim: int) -> int:
    half = dim // 2
    fine, coarse = (size // 4) ** 2, (size // 16) ** 2
    return fine * (48 * half + half * half) + coarse * 16 * half * dim


def _block_macs(lq: int, lk: int, dim: int, mlp_ratio: float) -> int:
    hidden = int(dim * mlp_ratio)
    proj = 2 * lq * dim * dim + 2 * lk * dim * dim        # q, out on queries; k, v on keys
    return proj + 2 * lq * lk * dim + 2 * lq * dim * hidden


def mac_counts(cfg: ModelConfig) -> dict[str, int]:
    b = cfg.backbone
    D, m = b.embed_dim, cfg.window
    L = b.n_template + b.n_search + (1 if cfg.use_track_token else 0)
    out = {"template_embed": _patch_macs(b.template_size, D),
           "search_embed": _patch_macs(b.search_size, D),
           "backbone_blocks": b.depth * _block_macs(L, L, D, b.mlp_ratio)}
    temporal = 0
    if cfg.use_temporal:
        temporal = _block_macs(m, m, D, cfg.temporal_mlp_ratio)
        if cfg.variant == "mamba-cross":
            E, R, N, K = cfg.ssm_expand * D, math.ceil(D / 16), cfg.ssm_state, cfg.ssm_conv
            temporal += m * (D * 2 * E + K * E + E * (R + 2 * N) + R * E + 2 * E * N + E * D)
        else:
            temporal += _block_macs(m, m, D, cfg.temporal_mlp_ratio)
    out["temporal"] = temporal
    G2, h = b.n_search, cfg.head_hidden
    out["guidance"] = b.n_search * D if cfg.use_track_token else 0
    out["head"] = sum(G2 * (9 * D * h + 9 * h * h + h * o) for o in (1, 2, 2))
    out["per_frame"] = out["search_embed"] + out["backbone_blocks"] + out["temporal"] + out["guidance"] + out["head"]
    return out


def format_summary(name: str, cfg: ModelConfig) -> str:
    p, m = param_counts(cfg), mac_counts(cfg)
    lines = [f"[{name}] variant={cfg.variant if cfg.use_temporal else 'none'} D={cfg.backbone.embed_dim} "
             f"depth={cfg.backbone.depth} template={cfg.backbone.template_size} "
             f"search={cfg.backbone.search_size} window={cfg.window}"]
    lines += [f"  params.{k} = {v}" for k, v in p.items()]
    lines += [f"  macs.{k} = {v}" for k, v in m.items()]
    return "\n".join(lines)
