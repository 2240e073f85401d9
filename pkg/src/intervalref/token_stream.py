"""Unified token stream: video tokens, reference image tokens and word-tag tokens.

Features live in the latent channel space (``C``). Index embeddings are
added to reference features before the model's input projection. Every
token carries a per-pair complex rotation multiplier; for single-phase
tokens it is ``exp(1j * phase)``, for WeRoPE tokens the temporal pairs hold
``sum_j w_j exp(1j * t_j * freqs)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .interval_rope import IntervalSpec, WeRoPEWeights, temporal_multiplier, temporal_terms
from .rope_core import AxisBanks, AxisSplit, phase_1d, phase_3d

STREAMS = ("video", "ref_image", "ref_text")
VIDEO, REF_IMAGE, REF_TEXT = range(3)


@dataclass(frozen=True)
class RopeGeometry:
    split: AxisSplit
    banks: AxisBanks
    mode: str = "we"
    weights: WeRoPEWeights = WeRoPEWeights()
    mirrored_right: bool = False

    @classmethod
    def build(
        cls,
        d_x: int = 16,
        d_y: int = 16,
        d_t: int = 32,
        base_xy: float = 10000.0,
        base_t: float = 10000.0,
        mode: str = "we",
        weights: WeRoPEWeights = WeRoPEWeights(),
        mirrored_right: bool = False,
    ) -> "RopeGeometry":
        split = AxisSplit(d_x, d_y, d_t)
        return cls(split, AxisBanks.from_split(split, base_xy, base_xy, base_t), mode, weights, mirrored_right)

    @property
    def n_pairs(self) -> int:
        return self.split.dim // 2

    def terms(self, interval: IntervalSpec) -> list[tuple[float, float]]:
        return temporal_terms(self.mode, interval, self.weights, self.mirrored_right)

    def multiplier(self, x: float, y: float, terms: list[tuple[float, float]]) -> np.ndarray:
        return np.concatenate([
            np.exp(1j * phase_1d(self.banks.x, x)),
            np.exp(1j * phase_1d(self.banks.y, y)),
            temporal_multiplier(self.banks.t, terms),
        ])


def diagonal_text_phase(position_in_block: int, grid_h: int, grid_w: int, geom: RopeGeometry) -> np.ndarray:
    """Spatial phases for the ``position``-th tag token; temporal part left at 0."""
    if position_in_block < 0:
        raise ValueError(f"position must be >= 0, got {position_in_block}")
    xy = diagonal_coord(position_in_block, grid_h, grid_w)
    return phase_3d(geom.banks, geom.split, xy, xy, 0.0)


def diagonal_coord(position_in_block: int, grid_h: int, grid_w: int) -> int:
    # first coordinate past the largest video index, then one step per token
    return (max(grid_h, grid_w) - 1) + 1 + position_in_block


class TagEmbedder(nn.Module):
    """Fixed random hash-embedding table standing in for a text encoder."""

    def __init__(self, dim: int = 32, rows: int = 257, tokens: int = 4, seed: int = 7):
        super().__init__()
        self.dim, self.rows, self.tokens = dim, rows, tokens
        g = torch.Generator().manual_seed(seed)
        self.register_buffer("table", torch.randn(rows, dim, generator=g, dtype=torch.float64) / dim**0.5)

    def token_ids(self, word: str) -> list[int]:
        return [
            int.from_bytes(hashlib.sha256(f"{word}:{k}".encode()).digest()[:8], "little") % self.rows
            for k in range(self.tokens)
        ]

    def embed(self, word: str) -> Tensor:
        return self.table[self.token_ids(word)]

    def caption(self, words: Sequence[str]) -> Tensor:
        """Global text vector: mean of the words' token embeddings."""
        if not words:
            return torch.zeros(self.dim, dtype=self.table.dtype)
        return torch.stack([self.embed(w).mean(0) for w in words]).mean(0)


class IndexEmbeddingTable(nn.Module):
    def __init__(self, max_refs: int, dim: int, init_std: float = 0.5):
        super().__init__()
        self.max_refs = max_refs
        self.weight = nn.Parameter(torch.randn(max_refs, dim) * init_std)
        if max_refs > 1:
            dist = torch.cdist(self.weight.detach(), self.weight.detach())
            off = dist[~torch.eye(max_refs, dtype=torch.bool)]
            if not bool((off > 0).all()):
                raise RuntimeError("index embeddings collided at initialisation")

    def forward(self, index: Tensor) -> Tensor:
        return self.weight[index]


class TagMLP(nn.Module):
    """Two-layer projection from the text feature space into latent channels."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, activation: nn.Module | None = None):
        super().__init__()
        self.in_dim = in_dim
        self.fc1 = nn.Linear(in_dim, hidden)
        self.act = activation if activation is not None else nn.GELU()
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"tag embeddings have dim {x.shape[-1]}, expected {self.in_dim}")
        return self.fc2(self.act(self.fc1(x)))


@dataclass
class ReferenceSpec:
    image: Tensor  # (H, W, C)
    interval: IntervalSpec
    tag_tokens: Tensor  # (K, E)
    index: int


@dataclass
class SequenceLayout:
    stream: list[str] = field(default_factory=list)
    ref_index: list[int | None] = field(default_factory=list)
    x: list[float] = field(default_factory=list)
    y: list[float] = field(default_factory=list)
    # per token: (weight, phase vector) terms summed after rotation
    phases: list[list[tuple[float, np.ndarray]]] = field(default_factory=list)
    index_embedding_id: list[int | None] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.stream)

    def append(self, stream: str, ref: int | None, x: float, y: float, phases, emb: int | None) -> None:
        self.stream.append(stream)
        self.ref_index.append(ref)
        self.x.append(float(x))
        self.y.append(float(y))
        self.phases.append(phases)
        self.index_embedding_id.append(emb)

    def temporal_part(self, i: int, split: AxisSplit) -> list[tuple[float, np.ndarray]]:
        st = split.slices()[2]
        return [(w, p[st]) for w, p in self.phases[i]]

    def to_json(self) -> str:
        return json.dumps([
            {
                "stream": s,
                "ref_index": r,
                "x": x,
                "y": y,
                "index_embedding_id": e,
                "phases": [{"weight": w, "phase": p.tolist()} for w, p in ph],
            }
            for s, r, x, y, ph, e in zip(self.stream, self.ref_index, self.x, self.y, self.phases, self.index_embedding_id)
        ])


@dataclass
class Conditions:
    """Batched conditioning; ``N`` references per sample (possibly 0)."""

    ref_images: Tensor  # (B, N, H, W, C)
    tag_tokens: Tensor  # (B, N, K, E)
    intervals: list[list[IntervalSpec]]
    text: Tensor  # (B, E)
    ref_keep: Tensor  # (B,) bool
    text_keep: Tensor  # (B,) bool

    @property
    def batch(self) -> int:
        return self.text.shape[0]

    @property
    def n_refs(self) -> int:
        return self.ref_images.shape[1]

    def replace(self, **kw: Any) -> "Conditions":
        d = dict(self.__dict__)
        d.update(kw)
        return Conditions(**d)

    def to(self, dtype: torch.dtype) -> "Conditions":
        return self.replace(ref_images=self.ref_images.to(dtype), tag_tokens=self.tag_tokens.to(dtype), text=self.text.to(dtype))

    def index(self, idx: Sequence[int]) -> "Conditions":
        idx_t = torch.as_tensor(list(idx), dtype=torch.long)
        return Conditions(
            self.ref_images[idx_t], self.tag_tokens[idx_t], [self.intervals[i] for i in idx],
            self.text[idx_t], self.ref_keep[idx_t], self.text_keep[idx_t],
        )


def stack_conditions(items: Sequence[Conditions]) -> Conditions:
    return Conditions(
        torch.cat([c.ref_images for c in items]),
        torch.cat([c.tag_tokens for c in items]),
        [iv for c in items for iv in c.intervals],
        torch.cat([c.text for c in items]),
        torch.cat([c.ref_keep for c in items]),
        torch.cat([c.text_keep for c in items]),
    )


class TokenAssembler(nn.Module):
    """Builds the flat token matrix and per-token rotation multipliers."""

    def __init__(
        self,
        grid: tuple[int, int, int],
        channels: int,
        geom: RopeGeometry,
        max_refs: int = 2,
        text_dim: int = 32,
        tag_hidden: int = 64,
        tag_len: int = 4,
        use_tags: bool = True,
        index_init_std: float = 0.5,
    ):
        super().__init__()
        self.frames, self.height, self.width = grid
        self.channels = channels
        self.geom = geom
        self.max_refs = max_refs
        self.tag_len = tag_len
        self.use_tags = use_tags
        self.index_table = IndexEmbeddingTable(max_refs, channels, index_init_std)
        self.tag_mlp = TagMLP(text_dim, tag_hidden, channels)
        self.null_ref = nn.Parameter(torch.zeros(channels))
        self._video_mult = self._video_multiplier()
        self._ref_cache: dict[IntervalSpec, np.ndarray] = {}

    @property
    def tokens_per_ref(self) -> int:
        return self.height * self.width + (self.tag_len if self.use_tags else 0)

    def seq_len(self, n_refs: int) -> int:
        return self.frames * self.height * self.width + n_refs * self.tokens_per_ref

    def _video_multiplier(self) -> np.ndarray:
        out = []
        for t in range(self.frames):
            for y in range(self.height):
                for x in range(self.width):
                    out.append(self.geom.multiplier(x, y, [(1.0, float(t))]))
        return np.stack(out)

    def ref_multiplier(self, interval: IntervalSpec) -> np.ndarray:
        """Multipliers for one reference block (image tokens then tag tokens)."""
        if interval in self._ref_cache:
            return self._ref_cache[interval]
        terms = self.geom.terms(interval)
        out = [self.geom.multiplier(x, y, terms) for y in range(self.height) for x in range(self.width)]
        if self.use_tags:
            for k in range(self.tag_len):
                xy = diagonal_coord(k, self.height, self.width)
                out.append(self.geom.multiplier(xy, xy, terms))
        block = np.stack(out)
        block.flags.writeable = False
        self._ref_cache[interval] = block
        return block

    def stream_ids(self, n_refs: int) -> Tensor:
        ids = [VIDEO] * (self.frames * self.height * self.width)
        for _ in range(n_refs):
            ids += [REF_IMAGE] * (self.height * self.width)
            if self.use_tags:
                ids += [REF_TEXT] * self.tag_len
        return torch.tensor(ids, dtype=torch.long)

    def multipliers(self, intervals: list[list[IntervalSpec]]) -> np.ndarray:
        """(B, L, pairs) complex128."""
        rows = []
        for ivs in intervals:
            parts = [self._video_mult] + [self.ref_multiplier(iv) for iv in ivs]
            rows.append(np.concatenate(parts))
        return np.stack(rows)

    def _check(self, video: Tensor, cond: Conditions) -> None:
        B, T, H, W, C = video.shape
        if (T, H, W, C) != (self.frames, self.height, self.width, self.channels):
            raise ValueError(f"video grid {(T, H, W, C)} does not match model")
        if cond.n_refs > self.max_refs:
            raise ValueError(f"{cond.n_refs} references exceed max_refs={self.max_refs}")
        if len(cond.intervals) != B or any(len(iv) != cond.n_refs for iv in cond.intervals):
            raise ValueError("intervals must be given per sample and per reference")
        for ivs in cond.intervals:
            for iv in ivs:
                if iv.total_frames != T:
                    raise ValueError(f"interval {iv} is not expressed over {T} frames")

    def features(self, video: Tensor, cond: Conditions) -> Tensor:
        """(B, L, C) token features."""
        self._check(video, cond)
        B = video.shape[0]
        parts = [video.reshape(B, -1, self.channels)]
        keep = cond.ref_keep.view(B, 1, 1).to(torch.bool)
        null = self.null_ref.to(video.dtype)
        for n in range(cond.n_refs):
            e = self.index_table.weight[n].to(video.dtype)
            img = cond.ref_images[:, n].reshape(B, -1, self.channels).to(video.dtype) + e
            parts.append(torch.where(keep, img, null))
            if self.use_tags:
                tags = self.tag_mlp(cond.tag_tokens[:, n, : self.tag_len].to(video.dtype)) + e
                parts.append(torch.where(keep, tags, null))
        return torch.cat(parts, dim=1)

    def forward(self, video: Tensor, cond: Conditions) -> tuple[Tensor, Tensor]:
        """Token features (B, L, C) and rotation multipliers as real (B, L, pairs, 2)."""
        feats = self.features(video, cond)
        mult = self.multipliers(cond.intervals)
        rot = torch.from_numpy(np.stack([mult.real, mult.imag], axis=-1)).to(video.dtype)
        return feats, rot

    def layout(self, n_frames_refs: list[tuple[IntervalSpec, int]]) -> SequenceLayout:
        """Layout records for a single sample; items are (interval, index embedding id)."""
        lay = SequenceLayout()
        g = self.geom
        for t in range(self.frames):
            for y in range(self.height):
                for x in range(self.width):
                    lay.append("video", None, x, y, [(1.0, phase_3d(g.banks, g.split, x, y, t))], None)
        for ref_i, (iv, emb) in enumerate(n_frames_refs):
            terms = g.terms(iv)
            for y in range(self.height):
                for x in range(self.width):
                    lay.append("ref_image", ref_i, x, y, [(w, phase_3d(g.banks, g.split, x, y, tt)) for w, tt in terms], emb)
            if self.use_tags:
                for k in range(self.tag_len):
                    xy = diagonal_coord(k, self.height, self.width)
                    lay.append("ref_text", ref_i, xy, xy, [(w, phase_3d(g.banks, g.split, xy, xy, tt)) for w, tt in terms], emb)
        return lay


def assemble_sequence(
    assembler: TokenAssembler,
    video: Tensor,
    refs: Sequence[ReferenceSpec],
    text: Tensor | None = None,
) -> tuple[Tensor, SequenceLayout]:
    """Single-sample assembly: ``video`` is (T, H, W, C); refs keep their own index."""
    indices = [r.index for r in refs]
    if len(set(indices)) != len(indices):
        raise ValueError(f"duplicate reference index in {indices}")
    if len(refs) > assembler.max_refs:
        raise ValueError(f"{len(refs)} references exceed max_refs={assembler.max_refs}")
    for i in indices:
        if not 0 <= i < assembler.max_refs:
            raise ValueError(f"reference index {i} outside [0, {assembler.max_refs})")
    T = video.shape[0]
    for r in refs:
        if r.interval.total_frames != T or r.interval.t1 > T:
            raise ValueError(f"interval {r.interval} out of range for {T} frames")
    parts = [video.reshape(-1, assembler.channels)]
    for r in refs:
        e = assembler.index_table.weight[r.index].to(video.dtype)
        parts.append(r.image.reshape(-1, assembler.channels).to(video.dtype) + e)
        if assembler.use_tags:
            parts.append(assembler.tag_mlp(r.tag_tokens[: assembler.tag_len].to(video.dtype)) + e)
    layout = assembler.layout([(r.interval, r.index) for r in refs])
    return torch.cat(parts, dim=0), layout
