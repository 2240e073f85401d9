"""Rectified-flow objective, condition dropping, multi-condition CFG and sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import Tensor

from .token_stream import Conditions

VelocityFn = Callable[[Tensor, Tensor, Conditions], Tensor]


class NumericError(FloatingPointError):
    def __init__(self, message: str, step: int | None = None, **diagnostics):
        super().__init__(message)
        self.step = step
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class CFGWeights:
    w_text: float = 8.0
    w_ref: float = 2.0
    w_both: float = 3.0


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 40
    shift: float = 5.66
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not self.shift > 0:
            raise ValueError(f"shift must be > 0, got {self.shift}")


def interpolate(z: Tensor, eps: Tensor, t: Tensor | float) -> Tensor:
    """``(1 - t) z + t eps``; ``t`` is a scalar or one value per batch item."""
    if z.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(z.shape)} vs {tuple(eps.shape)}")
    t = torch.as_tensor(t, dtype=z.dtype)
    if t.ndim == 1:
        t = t.view(-1, *([1] * (z.ndim - 1)))
    return (1 - t) * z + t * eps


def _check_finite(x: Tensor, what: str, step: int | None = None) -> None:
    if not bool(torch.isfinite(x).all()):
        bad = int((~torch.isfinite(x)).sum())
        raise NumericError(f"{what}: {bad} non-finite values" + (f" at step {step}" if step is not None else ""),
                           step=step, n_bad=bad, shape=tuple(x.shape))


def flow_loss(
    model: torch.nn.Module,
    z: Tensor,
    eps: Tensor,
    t: Tensor,
    cond: Conditions,
    ref_targets: Tensor | None = None,
) -> Tensor:
    """Mean squared velocity error over video tokens only.

    ``ref_targets`` (B, L - n_video, C) fills the non-video positions of the
    full-sequence target; those positions are masked out of the mean.
    """
    z_t = interpolate(z, eps, t)
    out = model.forward_tokens(z_t, t, cond)
    _check_finite(out, "model output")
    B, L, C = out.shape
    target_video = (eps - z).reshape(B, -1, C)
    n_video = target_video.shape[1]
    if ref_targets is None:
        ref_targets = torch.zeros(B, L - n_video, C, dtype=out.dtype)
    target = torch.cat([target_video, ref_targets.to(out.dtype)], dim=1)
    mask = torch.zeros(L, dtype=out.dtype)
    mask[:n_video] = 1
    sq = (out - target).pow(2) * mask[None, :, None]
    return sq.sum() / (B * n_video * C)


def drop_conditions(cond: Conditions, p_ref_drop: float, p_text_drop: float, rng: np.random.Generator) -> Conditions:
    """Drop each sample's reference set jointly and its text independently.

    Intervals are untouched, so dropped reference tokens keep their phases.
    """
    for p in (p_ref_drop, p_text_drop):
        if not 0 <= p <= 1:
            raise ValueError(f"drop probability {p} outside [0, 1]")
    B = cond.batch
    drop_ref = torch.from_numpy(rng.random(B) < p_ref_drop)
    drop_text = torch.from_numpy(rng.random(B) < p_text_drop)
    return cond.replace(ref_keep=cond.ref_keep & ~drop_ref, text_keep=cond.text_keep & ~drop_text)


def multi_cfg(model: VelocityFn, z_t: Tensor, t: Tensor, cond: Conditions, w: CFGWeights) -> Tensor:
    """Guided velocity from the four reference/text on-off combinations."""
    off = torch.zeros_like(cond.ref_keep)
    e_both = model(z_t, t, cond)
    e_ref = model(z_t, t, cond.replace(text_keep=off))
    e_text = model(z_t, t, cond.replace(ref_keep=off))
    e_none = model(z_t, t, cond.replace(ref_keep=off, text_keep=off))
    return (
        e_both
        + w.w_text * (e_both - e_ref)
        + w.w_ref * (e_both - e_text)
        + w.w_both * (e_both - e_none)
    )


def time_shift(u, shift: float):
    """Monotone map of [0, 1] onto itself, ``shift * u / (1 + (shift - 1) u)``."""
    return shift * u / (1 + (shift - 1) * u)


def shifted_timesteps(steps: int, shift: float) -> np.ndarray:
    """``steps + 1`` noise levels from 1 to 0 under ``time_shift``."""
    return time_shift(np.linspace(1.0, 0.0, steps + 1), shift)


def initial_noise(shape: tuple[int, ...], seeds: list[int], dtype: torch.dtype = torch.float32) -> Tensor:
    """One independent normal draw per batch item, each from its own seed."""
    per = shape[1:]
    out = [torch.randn(per, generator=torch.Generator().manual_seed(int(s)), dtype=torch.float64) for s in seeds]
    return torch.stack(out).to(dtype)


@torch.no_grad()
def sample(
    model: VelocityFn,
    cond: Conditions,
    cfg: CFGWeights | None,
    sc: SamplerConfig,
    shape: tuple[int, ...],
    seeds: list[int] | None = None,
    dtype: torch.dtype = torch.float32,
    noise: Tensor | None = None,
) -> Tensor:
    """Euler integration from pure noise at level 1 down to level 0.

    ``cfg=None`` uses the plain conditional velocity. Per-item seeds default
    to ``sc.seed + i``.
    """
    if noise is None:
        seeds = seeds if seeds is not None else [sc.seed + i for i in range(shape[0])]
        noise = initial_noise(shape, seeds, dtype)
    x = noise.to(dtype)
    sig = shifted_timesteps(sc.steps, sc.shift)
    B = shape[0]
    for i in range(sc.steps):
        t = torch.full((B,), float(sig[i]), dtype=dtype)
        v = model(x, t, cond) if cfg is None else multi_cfg(model, x, t, cond, cfg)
        x = x + float(sig[i + 1] - sig[i]) * v
        _check_finite(x, "sampler state", step=i)
    return x
