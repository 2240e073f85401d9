"""Toy diffusion transformer over the assembled token stream."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Any

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .interval_rope import WeRoPEWeights
from .token_stream import Conditions, RopeGeometry, TagEmbedder, TokenAssembler, VIDEO


@dataclass(frozen=True)
class ModelConfig:
    frames: int = 8
    height: int = 4
    width: int = 4
    channels: int = 16
    hidden: int = 128
    depth: int = 4
    heads: int = 4
    d_x: int = 16
    d_y: int = 16
    d_t: int = 32
    base_xy: float = 10000.0
    base_t: float = 10000.0
    rope_mode: str = "we"
    w_p: float = 1.0
    w_n: float = -0.5
    mirrored_right: bool = False
    max_refs: int = 2
    use_tags: bool = True
    tag_len: int = 4
    text_dim: int = 32
    tag_hidden: int = 64
    tag_rows: int = 257
    tag_seed: int = 7
    mlp_ratio: int = 4
    index_init_std: float = 0.5

    @property
    def head_dim(self) -> int:
        return self.d_x + self.d_y + self.d_t

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def geometry(self) -> RopeGeometry:
        return RopeGeometry.build(
            self.d_x, self.d_y, self.d_t, self.base_xy, self.base_t,
            self.rope_mode, WeRoPEWeights(self.w_p, self.w_n), self.mirrored_right,
        )


def timestep_embedding(t: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = (1000.0 * t)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def apply_rotation(x: Tensor, rot: Tensor) -> Tensor:
    """Complex-multiply interleaved pairs of ``x`` (B, h, L, d) by ``rot`` (B, L, d/2, 2)."""
    xr = x.unflatten(-1, (-1, 2))
    a, b = xr[..., 0], xr[..., 1]
    c, s = rot[:, None, ..., 0], rot[:, None, ..., 1]
    return torch.stack([a * c - b * s, a * s + b * c], dim=-1).flatten(-2)


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (1 + scale[:, None]) + shift[:, None]


class Attention(nn.Module):
    def __init__(self, hidden: int, heads: int, head_dim: int):
        super().__init__()
        self.heads, self.head_dim = heads, head_dim
        self.qkv = nn.Linear(hidden, 3 * heads * head_dim)
        self.out = nn.Linear(heads * head_dim, hidden)

    def forward(self, x: Tensor, rot: Tensor) -> Tensor:
        B, L, _ = x.shape
        q, k, v = self.qkv(x).view(B, L, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k = apply_rotation(q, rot), apply_rotation(k, rot)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(self.head_dim)
        y = att.softmax(dim=-1) @ v
        return self.out(y.transpose(1, 2).reshape(B, L, -1))


class Block(nn.Module):
    def __init__(self, hidden: int, heads: int, head_dim: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(hidden, heads, head_dim)
        self.norm2 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(
            nn.Linear(hidden, mlp_ratio * hidden), nn.GELU(approximate="tanh"), nn.Linear(mlp_ratio * hidden, hidden)
        )
        self.ada = nn.Linear(hidden, 6 * hidden)
        nn.init.zeros_(self.ada.weight)
        nn.init.zeros_(self.ada.bias)

    def forward(self, x: Tensor, cond: Tensor, rot: Tensor) -> Tensor:
        s1, c1, g1, s2, c2, g2 = self.ada(F.silu(cond)).chunk(6, dim=-1)
        x = x + g1[:, None] * self.attn(modulate(self.norm1(x), s1, c1), rot)
        return x + g2[:, None] * self.mlp(modulate(self.norm2(x), s2, c2))


class ToyDiT(nn.Module):
    """Velocity predictor ``v(z_t, t, conditions)`` for the video tokens.

    Reference image and tag tokens are concatenated after the video tokens
    and share self-attention; only video-token outputs are returned by
    :meth:`forward`.
    """

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.assembler = TokenAssembler(
            (cfg.frames, cfg.height, cfg.width), cfg.channels, cfg.geometry(),
            cfg.max_refs, cfg.text_dim, cfg.tag_hidden, cfg.tag_len, cfg.use_tags, cfg.index_init_std,
        )
        self.tags = TagEmbedder(cfg.text_dim, cfg.tag_rows, cfg.tag_len, cfg.tag_seed)
        D = cfg.hidden
        self.in_proj = nn.Linear(cfg.channels, D)
        self.stream_embed = nn.Parameter(torch.zeros(3, D))
        self.t_mlp = nn.Sequential(nn.Linear(64, D), nn.SiLU(), nn.Linear(D, D))
        self.text_proj = nn.Linear(cfg.text_dim, D)
        self.null_text = nn.Parameter(torch.zeros(cfg.text_dim))
        self.blocks = nn.ModuleList(Block(D, cfg.heads, cfg.head_dim, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.final_norm = nn.LayerNorm(D, elementwise_affine=False, eps=1e-6)
        self.final_ada = nn.Linear(D, 2 * D)
        self.final = nn.Linear(D, cfg.channels)
        for layer in (self.final_ada, self.final):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward_tokens(self, z_t: Tensor, t: Tensor, cond: Conditions) -> Tensor:
        """Per-token outputs (B, L, C) for the whole assembled sequence."""
        feats, rot = self.assembler(z_t, cond)
        streams = self.assembler.stream_ids(cond.n_refs)
        x = self.in_proj(feats) + self.stream_embed[streams].to(feats.dtype)
        text = torch.where(cond.text_keep[:, None], cond.text.to(feats.dtype), self.null_text.to(feats.dtype))
        c = self.t_mlp(timestep_embedding(t.to(feats.dtype), 64)) + self.text_proj(text)
        for blk in self.blocks:
            x = blk(x, c, rot)
        shift, scale = self.final_ada(F.silu(c)).chunk(2, dim=-1)
        return self.final(modulate(self.final_norm(x), shift, scale))

    def forward(self, z_t: Tensor, t: Tensor, cond: Conditions) -> Tensor:
        out = self.forward_tokens(z_t, t, cond)
        n_video = self.cfg.frames * self.cfg.height * self.cfg.width
        return out[:, :n_video].reshape(z_t.shape)

    def video_mask(self, n_refs: int) -> Tensor:
        return self.assembler.stream_ids(n_refs) == VIDEO
