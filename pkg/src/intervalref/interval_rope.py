"""Interval-conditioned temporal encodings for reference tokens.

A reference that should be present over frames ``[t0, t1]`` gets the
standard spatial rotation, while its temporal channels are encoded either
at the interval midpoint (``mid``) or as a weighted sum of rotated copies
at the midpoint and two anchors outside the interval (``we``). ``none``
pins the temporal position at 0.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from .rope_core import AxisBanks, AxisSplit, FrequencyBank, _check_banks, as_complex, as_real, phase_1d

Variant = Literal["none", "mid", "we"]
VARIANTS: tuple[str, ...] = ("none", "mid", "we")


@dataclass(frozen=True)
class IntervalSpec:
    t0: float
    t1: float
    total_frames: int

    def __post_init__(self) -> None:
        vals = (self.t0, self.t1, self.total_frames)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite interval {vals}")
        if self.total_frames < 1:
            raise ValueError(f"total_frames must be >= 1, got {self.total_frames}")
        if not 0 <= self.t0 <= self.t1 <= self.total_frames:
            raise ValueError(
                f"interval [{self.t0}, {self.t1}] outside [0, {self.total_frames}]"
            )

    @property
    def t_mid(self) -> float:
        return (self.t0 + self.t1) / 2

    @property
    def t_left(self) -> float:
        return self.t0 / 2

    def t_right(self, mirrored: bool = False) -> float:
        # mirrored=True puts the anchor halfway between t1 and T instead.
        if mirrored:
            return (self.t1 + self.total_frames) / 2
        return (self.total_frames - self.t1) / 2


@dataclass(frozen=True)
class WeRoPEWeights:
    w_p: float = 1.0
    w_n: float = -0.5

    def __post_init__(self) -> None:
        if not (math.isfinite(self.w_p) and math.isfinite(self.w_n)):
            raise ValueError("WeRoPE weights must be finite")
        if self.w_p <= 0:
            raise ValueError(f"w_p must be positive, got {self.w_p}")
        if self.w_n > 0:
            raise ValueError(f"w_n must be <= 0, got {self.w_n}")


def temporal_terms(
    variant: str,
    interval: IntervalSpec,
    weights: WeRoPEWeights | None = None,
    mirrored_right: bool = False,
) -> list[tuple[float, float]]:
    """(weight, temporal position) pairs whose rotated copies are summed."""
    if variant == "none":
        return [(1.0, 0.0)]
    if variant == "mid":
        return [(1.0, interval.t_mid)]
    if variant == "we":
        w = weights or WeRoPEWeights()
        return [
            (w.w_p, interval.t_mid),
            (w.w_n, interval.t_left),
            (w.w_n, interval.t_right(mirrored_right)),
        ]
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def temporal_multiplier(bank: FrequencyBank, terms: list[tuple[float, float]]) -> np.ndarray:
    """Complex per-pair factor ``sum_j w_j exp(1j * t_j * freqs)``."""
    out = np.zeros(bank.n_pairs, dtype=np.complex128)
    for w, t in terms:
        out += w * np.exp(1j * phase_1d(bank, t))
    return out


def encode_reference(
    v: np.ndarray,
    x: float,
    y: float,
    terms: list[tuple[float, float]],
    banks: AxisBanks,
    split: AxisSplit,
) -> np.ndarray:
    """Standard x/y rotation plus a weighted sum of temporally rotated copies."""
    _check_banks(banks, split)
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != split.dim:
        raise ValueError(f"vector of length {v.shape[-1]} does not match head dim {split.dim}")
    sx, sy, st = split.slices()
    z = as_complex(v)
    out = np.empty_like(z)
    out[..., sx] = z[..., sx] * np.exp(1j * phase_1d(banks.x, x))
    out[..., sy] = z[..., sy] * np.exp(1j * phase_1d(banks.y, y))
    zt = z[..., st]
    acc = np.zeros_like(zt)
    for w, t in terms:
        acc = acc + w * (zt * np.exp(1j * phase_1d(banks.t, t)))
    out[..., st] = acc
    return as_real(out)


def mid_rope(
    v: np.ndarray, x: float, y: float, interval: IntervalSpec, banks: AxisBanks, split: AxisSplit
) -> np.ndarray:
    return encode_reference(v, x, y, temporal_terms("mid", interval), banks, split)


def we_rope(
    v: np.ndarray,
    x: float,
    y: float,
    interval: IntervalSpec,
    w: WeRoPEWeights,
    banks: AxisBanks,
    split: AxisSplit,
    mirrored_right: bool = False,
) -> np.ndarray:
    terms = temporal_terms("we", interval, w, mirrored_right)
    return encode_reference(v, x, y, terms, banks, split)


def unit_decay(bank: FrequencyBank, offsets: np.ndarray) -> np.ndarray:
    """``g(D) = (2/d) * sum_i cos(D * freqs_i)``; equals 1 at ``D = 0``."""
    offsets = np.asarray(offsets, dtype=np.float64)
    return np.cos(np.multiply.outer(offsets, bank.freqs)).mean(axis=-1)


@dataclass(frozen=True)
class DecayProfile:
    offsets: np.ndarray
    scores: np.ndarray
    variant: str
    interval: IntervalSpec
    weights: WeRoPEWeights

    def argmax(self) -> int:
        return int(self.offsets[int(np.argmax(self.scores))])


def decay_profile(
    variant: str,
    interval: IntervalSpec,
    w: WeRoPEWeights | None,
    bank: FrequencyBank,
    mirrored_right: bool = False,
) -> DecayProfile:
    """Normalised rotary score of a unit-pair query at each frame against an
    interval-encoded unit-pair key.

    Scores are computed by rotating and summing complex pairs, not from the
    closed form; :func:`unit_decay` is the independent check.
    """
    w = w or WeRoPEWeights()
    terms = temporal_terms(variant, interval, w, mirrored_right)
    frames = np.arange(interval.total_frames)
    key = temporal_multiplier(bank, terms)  # all-ones pairs times the multiplier
    scores = np.empty(len(frames), dtype=np.float64)
    for i, t in enumerate(frames):
        query = np.exp(1j * phase_1d(bank, t))
        scores[i] = np.real(np.sum(query * np.conj(key))) / bank.n_pairs
    return DecayProfile(frames, scores, variant, interval, w)


PROFILE_COLUMNS = ("frame", "score", "variant", "t0", "t1", "w_p", "w_n")


def write_profile_csv(profile: DecayProfile, path: str | Path) -> None:
    iv, w = profile.interval, profile.weights
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PROFILE_COLUMNS)
        for f, s in zip(profile.offsets, profile.scores):
            writer.writerow([int(f), repr(float(s)), profile.variant, iv.t0, iv.t1, w.w_p, w.w_n])
