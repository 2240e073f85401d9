"""Timestamp-adherence metrics and benchmark report bookkeeping."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .synth import PresenceInterval

Interval = tuple[float, float]


def _endpoints(iv: Any) -> Interval | None:
    if iv is None:
        return None
    if hasattr(iv, "t0"):
        return float(iv.t0), float(iv.t1)
    a, b = iv
    return float(a), float(b)


def t_iou(pred: Any, gt: Any) -> float:
    """Overlap of two closed intervals as 1-D segments; a missing prediction scores 0."""
    p, g = _endpoints(pred), _endpoints(gt)
    if p is None or g is None:
        return 0.0
    if p == g:
        return 1.0
    inter = max(0.0, min(p[1], g[1]) - max(p[0], g[0]))
    union = max(p[1], g[1]) - min(p[0], g[0])
    return inter / union if union > 0 else 0.0


def t_l2(pred: Any, gt: Any, total_frames: int) -> float:
    """RMS of the start/end errors, each normalised by the frame count.

    Bounded to [0, 1] for endpoints in ``[0, total_frames]``; a missing
    prediction scores 1.
    """
    p, g = _endpoints(pred), _endpoints(gt)
    if p is None or g is None:
        return 1.0
    ds = (p[0] - g[0]) / total_frames
    de = (p[1] - g[1]) / total_frames
    return math.sqrt(ds * ds + de * de) / math.sqrt(2.0)


def peak_correlation(video: np.ndarray, pattern: np.ndarray) -> np.ndarray:
    """Per-frame maximum normalised cross-correlation over all valid placements.

    ``video`` is (T, H, W, C) and ``pattern`` (ph, pw, C). Placements whose
    window has zero variance score 0.
    """
    video = np.asarray(video, dtype=np.float64)
    pattern = np.asarray(pattern, dtype=np.float64)
    ph, pw, c = pattern.shape
    if ph > video.shape[1] or pw > video.shape[2] or c != video.shape[3]:
        raise ValueError(f"pattern {pattern.shape} does not fit frames {video.shape[1:]}")
    p = pattern - pattern.mean()
    pn = np.linalg.norm(p)
    if pn < 1e-12:
        raise ValueError("pattern has zero variance")
    p = p / pn
    # windows: (T, H-ph+1, W-pw+1, C, ph, pw)
    win = sliding_window_view(video, (ph, pw), axis=(1, 2))
    win = np.moveaxis(win, 3, -1).reshape(video.shape[0], win.shape[1], win.shape[2], -1)
    pflat = p.reshape(-1)
    win = win - win.mean(axis=-1, keepdims=True)
    norms = np.linalg.norm(win, axis=-1)
    dots = win @ pflat
    ncc = np.where(norms > 1e-12, dots / np.maximum(norms, 1e-12), 0.0)
    return ncc.reshape(video.shape[0], -1).max(axis=1)


def detect_presence(video: np.ndarray, pattern: np.ndarray, threshold: float) -> PresenceInterval | None:
    """First/last frame whose peak correlation reaches ``threshold``."""
    peaks = peak_correlation(video, pattern)
    hits = np.flatnonzero(peaks >= threshold)
    if hits.size == 0:
        return None
    return PresenceInterval(int(hits[0]), int(hits[-1]), 0)


def pattern_similarity(video: np.ndarray, interval: Any, pattern: np.ndarray) -> float:
    """Mean peak correlation over the inclusive interval frames; NaN if empty."""
    iv = _endpoints(interval)
    if iv is None:
        return math.nan
    lo, hi = int(math.ceil(iv[0])), int(math.floor(iv[1]))
    lo, hi = max(lo, 0), min(hi, len(video) - 1)
    if hi < lo:
        return math.nan
    return float(np.mean(peak_correlation(video[lo:hi + 1], pattern)))


REPORT_COLUMNS = ("case_id", "ref_count", "t_iou", "t_l2", "pattern_sim", "failed")


@dataclass
class ReportRow:
    case_id: str
    ref_count: int
    t_iou: float
    t_l2: float
    pattern_sim: float
    failed: bool = False


@dataclass
class EvalReport:
    rows: list[ReportRow] = field(default_factory=list)

    def add(self, row: ReportRow) -> None:
        self.rows.append(row)

    @property
    def n_failed(self) -> int:
        # failure is per case; all rows of a failed case carry the flag
        return len({r.case_id for r in self.rows if r.failed})

    def aggregates(self) -> dict[str, Any]:
        """Means per ref count (key as string) and overall, failed rows excluded."""
        groups: dict[str, list[ReportRow]] = {}
        for r in self.rows:
            if r.failed:
                continue
            groups.setdefault(str(r.ref_count), []).append(r)
            groups.setdefault("all", []).append(r)
        out: dict[str, Any] = {"n_failed_cases": self.n_failed, "splits": {}}
        for key in sorted(groups, key=lambda k: (k == "all", k)):
            rs = groups[key]
            sims = [r.pattern_sim for r in rs if not math.isnan(r.pattern_sim)]
            out["splits"][key] = {
                "n": len(rs),
                "t_iou": float(np.mean([r.t_iou for r in rs])),
                "t_l2": float(np.mean([r.t_l2 for r in rs])),
                "pattern_sim": float(np.mean(sims)) if sims else math.nan,
            }
        return out

    def write(self, csv_path: str | Path, json_path: str | Path | None = None) -> None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                w.writerow([r.case_id, r.ref_count, repr(r.t_iou), repr(r.t_l2), repr(r.pattern_sim), int(r.failed)])
        if json_path is not None:
            Path(json_path).write_text(json.dumps(self.aggregates(), indent=2, sort_keys=True))

    @classmethod
    def read_csv(cls, path: str | Path) -> "EvalReport":
        rep = cls()
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rep.add(ReportRow(
                    rec["case_id"], int(rec["ref_count"]), float(rec["t_iou"]),
                    float(rec["t_l2"]), float(rec["pattern_sim"]), bool(int(rec["failed"])),
                ))
        return rep


def score_case(
    case_id: str,
    video: np.ndarray,
    refs: Iterable[tuple[np.ndarray, Any]],
    threshold: float,
) -> list[ReportRow]:
    """One row per reference: detect its pattern in ``video`` and score the interval."""
    refs = list(refs)
    rows = []
    T = len(video)
    for pattern, gt in refs:
        pred = detect_presence(video, pattern, threshold)
        rows.append(ReportRow(
            case_id, len(refs), t_iou(pred, gt), t_l2(pred, gt, T),
            pattern_similarity(video, gt, pattern),
        ))
    return rows


def row_dict(row: ReportRow) -> dict[str, Any]:
    return asdict(row)
