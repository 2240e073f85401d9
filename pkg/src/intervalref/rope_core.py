"""Rotary positional embedding primitives.

Complex pairs use the interleaved layout: coordinates ``(2i, 2i+1)`` form
the pair ``v[2i] + 1j * v[2i+1]``. All phase math is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class FrequencyBank:
    """Angular frequencies ``base ** (-2i / dim)`` for ``i < dim // 2``."""

    dim: int
    base: float = 10000.0
    freqs: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.dim < 0 or self.dim % 2:
            raise ValueError(f"bank dim must be even and non-negative, got {self.dim}")
        if not self.base > 1:
            raise ValueError(f"bank base must be > 1, got {self.base}")
        exps = -2.0 * np.arange(self.dim // 2, dtype=np.float64) / max(self.dim, 1)
        freqs = np.power(float(self.base), exps)
        freqs.setflags(write=False)
        object.__setattr__(self, "freqs", freqs)

    @property
    def n_pairs(self) -> int:
        return self.dim // 2


def make_frequency_bank(dim: int, base: float = 10000.0) -> FrequencyBank:
    if dim < 2:
        raise ValueError(f"dim must be >= 2, got {dim}")
    return FrequencyBank(dim, base)


@dataclass(frozen=True)
class AxisSplit:
    """Channel budget per axis; pairs are laid out in (x, y, t) order."""

    d_x: int
    d_y: int
    d_t: int

    def __post_init__(self) -> None:
        for name in ("d_x", "d_y", "d_t"):
            v = getattr(self, name)
            if v < 0 or v % 2:
                raise ValueError(f"{name} must be even and non-negative, got {v}")

    @property
    def dim(self) -> int:
        return self.d_x + self.d_y + self.d_t

    def slices(self) -> tuple[slice, slice, slice]:
        """Pair-index slices for the x, y and t groups."""
        px, py = self.d_x // 2, self.d_y // 2
        pt = self.d_t // 2
        return slice(0, px), slice(px, px + py), slice(px + py, px + py + pt)


@dataclass(frozen=True)
class AxisBanks:
    x: FrequencyBank
    y: FrequencyBank
    t: FrequencyBank

    @classmethod
    def from_split(
        cls,
        split: AxisSplit,
        base_x: float = 10000.0,
        base_y: float = 10000.0,
        base_t: float = 10000.0,
    ) -> "AxisBanks":
        return cls(
            FrequencyBank(split.d_x, base_x),
            FrequencyBank(split.d_y, base_y),
            FrequencyBank(split.d_t, base_t),
        )


def phase_1d(bank: FrequencyBank, n: float) -> np.ndarray:
    n = float(n)
    if not np.isfinite(n):
        raise ValueError(f"position must be finite, got {n}")
    return n * bank.freqs


def _check_banks(banks: AxisBanks, split: AxisSplit) -> None:
    for axis, want in (("x", split.d_x), ("y", split.d_y), ("t", split.d_t)):
        got = getattr(banks, axis).dim
        if got != want:
            raise ValueError(f"{axis}-bank has dim {got}, split expects {want}")


def phase_3d(banks: AxisBanks, split: AxisSplit, x: float, y: float, t: float) -> np.ndarray:
    _check_banks(banks, split)
    return np.concatenate([phase_1d(banks.x, x), phase_1d(banks.y, y), phase_1d(banks.t, t)])


def as_complex(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] % 2:
        raise ValueError(f"vector length must be even, got {v.shape[-1]}")
    return v[..., 0::2] + 1j * v[..., 1::2]


def as_real(z: np.ndarray) -> np.ndarray:
    out = np.empty(z.shape[:-1] + (2 * z.shape[-1],), dtype=np.float64)
    out[..., 0::2] = z.real
    out[..., 1::2] = z.imag
    return out


def rotate(v: np.ndarray, phases: np.ndarray) -> np.ndarray:
    """Multiply each complex pair of ``v`` by ``exp(1j * phases)``."""
    v = np.asarray(v, dtype=np.float64)
    phases = np.asarray(phases, dtype=np.float64)
    if v.shape[-1] != 2 * phases.shape[-1]:
        raise ValueError(f"vector of length {v.shape[-1]} does not match {phases.shape[-1]} phases")
    return as_real(as_complex(v) * np.exp(1j * phases))


def rotary_score(q: np.ndarray, k: np.ndarray, pq: np.ndarray, pk: np.ndarray) -> float:
    """Attention logit ``Re sum_i q_i conj(k_i) exp(1j (pq_i - pk_i))``."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    pq = np.asarray(pq, dtype=np.float64)
    pk = np.asarray(pk, dtype=np.float64)
    if q.shape != k.shape or pq.shape != pk.shape or q.shape[-1] != 2 * pq.shape[-1]:
        raise ValueError(
            f"shape mismatch: q{q.shape} k{k.shape} pq{pq.shape} pk{pk.shape}"
        )
    zq, zk = as_complex(q), as_complex(k)
    return float(np.real(np.sum(zq * np.conj(zk) * np.exp(1j * (pq - pk)))))
