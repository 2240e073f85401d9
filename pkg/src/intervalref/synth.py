"""Procedural sprite videos with exact entity mask tracks.

Scenes live on the latent token grid directly: ``video`` has shape
``(frames, height, width, channels)`` and every entity is a rigid
``pattern_size`` block of channel vectors pasted over a noise background
during its presence interval, optionally drifting by a few cells.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy import ndimage

from .interval_rope import IntervalSpec


class GenerationError(RuntimeError):
    """Scene constraints cannot be satisfied (e.g. entities do not fit)."""


class NoPresence(LookupError):
    """The requested entity is never present."""


@dataclass(frozen=True)
class SynthConfig:
    frames: int = 8
    height: int = 4
    width: int = 4
    channels: int = 16
    min_entities: int = 1
    max_entities: int = 2
    max_refs: int = 2
    pattern_size: tuple[int, int] = (2, 2)
    min_len: int = 2
    max_len: int | None = None
    max_drift: int = 1
    background_std: float = 0.5
    gain_range: tuple[float, float] = (0.8, 1.2)
    vocab_size: int = 32
    vocab_seed: int = 1234
    instance_mix: float = 0.5
    coherence: float = 0.0
    area_threshold: int = 4
    placement_tries: int = 64

    def __post_init__(self) -> None:
        if min(self.frames, self.height, self.width, self.channels) < 1:
            raise ValueError("scene dimensions must be >= 1")
        if not 0 <= self.min_entities <= self.max_entities:
            raise ValueError("need 0 <= min_entities <= max_entities")
        if self.max_entities > self.max_refs:
            raise ValueError(f"max_entities {self.max_entities} exceeds max_refs {self.max_refs}")
        if self.max_entities > self.vocab_size:
            raise ValueError("vocabulary too small for unique tags")
        if self.min_len < 1 or self.min_len > self.frames:
            raise ValueError(f"min_len must be in [1, {self.frames}]")
        if not 0 <= self.coherence <= 1 or not 0 <= self.instance_mix <= 1:
            raise ValueError("coherence and instance_mix must lie in [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SynthConfig":
        d = dict(d)
        for key in ("pattern_size", "gain_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def tag_word(index: int) -> str:
    return f"w{index:02d}"


def vocabulary(cfg: SynthConfig) -> list[str]:
    return [tag_word(i) for i in range(cfg.vocab_size)]


def prototypes(cfg: SynthConfig) -> np.ndarray:
    """One fixed appearance prototype per tag word, shape (vocab, ph, pw, C).

    With ``coherence > 0`` a per-word signature shared by all cells is mixed in.
    """
    rng = np.random.default_rng(cfg.vocab_seed)
    ph, pw = cfg.pattern_size
    cells = rng.standard_normal((cfg.vocab_size, ph, pw, cfg.channels))
    if cfg.coherence == 0:
        return cells
    shared = rng.standard_normal((cfg.vocab_size, 1, 1, cfg.channels))
    return _mix_cells(shared, cells, cfg.coherence)


def _mix_cells(shared: np.ndarray, cells: np.ndarray, coherence: float) -> np.ndarray:
    """Unit-variance blend of a signature shared across cells and per-cell noise."""
    return np.sqrt(coherence) * shared + np.sqrt(1 - coherence) * cells


def _standardize(x: np.ndarray) -> np.ndarray:
    x = x - x.mean()
    return x / x.std()


@dataclass
class MaskTrack:
    masks: np.ndarray  # (frames, H, W) bool

    def __post_init__(self) -> None:
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.masks.ndim != 3:
            raise ValueError(f"mask track must be (frames, H, W), got {self.masks.shape}")

    @property
    def areas(self) -> np.ndarray:
        return self.masks.reshape(len(self.masks), -1).sum(axis=1)

    @property
    def frames(self) -> int:
        return len(self.masks)

    def to_rle(self) -> dict[str, Any]:
        return {"shape": list(self.masks.shape), "counts": [rle_encode(m) for m in self.masks]}

    @classmethod
    def from_rle(cls, d: dict[str, Any]) -> "MaskTrack":
        frames, h, w = d["shape"]
        masks = np.stack([rle_decode(c, h * w).reshape(h, w) for c in d["counts"]]) if frames else np.zeros((0, h, w), bool)
        return cls(masks)


def rle_encode(mask: np.ndarray) -> list[int]:
    """Alternating run lengths over the row-major mask, starting with zeros."""
    flat = np.asarray(mask, dtype=bool).ravel()
    counts: list[int] = []
    current, run = False, 0
    for v in flat:
        if v == current:
            run += 1
        else:
            counts.append(run)
            current, run = bool(v), 1
    counts.append(run)
    return counts


def rle_decode(counts: list[int], size: int) -> np.ndarray:
    out = np.zeros(size, dtype=bool)
    pos, val = 0, False
    for c in counts:
        out[pos:pos + c] = val
        pos += c
        val = not val
    if pos != size:
        raise ValueError(f"run lengths sum to {pos}, expected {size}")
    return out


@dataclass(frozen=True)
class PresenceInterval:
    t0: int
    t1: int
    area_threshold: int


def extract_interval(track: MaskTrack, threshold: int) -> PresenceInterval | None:
    """First and last frame whose mask area reaches ``threshold``; None if never."""
    hits = np.flatnonzero(track.areas >= threshold)
    if hits.size == 0:
        return None
    return PresenceInterval(int(hits[0]), int(hits[-1]), threshold)


def mean_track_iou(a: MaskTrack, b: MaskTrack) -> float:
    """Average per-frame mask IoU over frames where both tracks are non-empty."""
    if a.masks.shape != b.masks.shape:
        raise ValueError(f"track shapes differ: {a.masks.shape} vs {b.masks.shape}")
    both = (a.areas > 0) & (b.areas > 0)
    if not both.any():
        return 0.0
    ma, mb = a.masks[both], b.masks[both]
    inter = (ma & mb).reshape(len(ma), -1).sum(1)
    union = (ma | mb).reshape(len(ma), -1).sum(1)
    return float(np.mean(inter / union))


def dedup_tracks(tracks: list[MaskTrack], iou_threshold: float) -> list[MaskTrack]:
    kept: list[MaskTrack] = []
    for tr in tracks:
        if all(mean_track_iou(k, tr) <= iou_threshold for k in kept):
            kept.append(tr)
    return kept


@dataclass
class Entity:
    entity_id: int
    tag: str
    pattern: np.ndarray  # (ph, pw, C)
    track: MaskTrack
    interval: tuple[int, int]  # construction interval, inclusive frames


@dataclass
class SynthScene:
    seed: int
    config: SynthConfig
    video: np.ndarray  # (T, H, W, C) float64
    entities: list[Entity] = field(default_factory=list)

    def entity(self, entity_id: int) -> Entity:
        for e in self.entities:
            if e.entity_id == entity_id:
                return e
        raise KeyError(entity_id)


def _boxes_overlap(a: tuple[int, int], b: tuple[int, int], size: tuple[int, int]) -> bool:
    ph, pw = size
    return abs(a[0] - b[0]) < ph and abs(a[1] - b[1]) < pw


def _trajectory(rng: np.random.Generator, cfg: SynthConfig, length: int) -> list[tuple[int, int]]:
    ph, pw = cfg.pattern_size
    max_r, max_c = cfg.height - ph, cfg.width - pw
    r0, c0 = int(rng.integers(0, max_r + 1)), int(rng.integers(0, max_c + 1))
    d = cfg.max_drift
    r1 = int(np.clip(r0 + rng.integers(-d, d + 1), 0, max_r))
    c1 = int(np.clip(c0 + rng.integers(-d, d + 1), 0, max_c))
    steps = max(length - 1, 1)
    return [
        (int(round(r0 + (r1 - r0) * k / steps)), int(round(c0 + (c1 - c0) * k / steps)))
        for k in range(length)
    ]


def generate_scene(
    rng: np.random.Generator | int,
    cfg: SynthConfig = SynthConfig(),
    n_entities: int | None = None,
    seed: int | None = None,
    intervals: list[tuple[int, int]] | None = None,
) -> SynthScene:
    """Draw a background, then place entities with unique tags and random intervals.

    Passing an int as ``rng`` seeds a fresh generator and records it as the
    scene seed. ``intervals`` fixes the inclusive presence frames per entity.
    """
    if isinstance(rng, (int, np.integer)):
        seed = int(rng) if seed is None else seed
        rng = np.random.default_rng(int(rng))
    ph, pw = cfg.pattern_size
    if ph > cfg.height or pw > cfg.width:
        raise GenerationError(f"pattern {cfg.pattern_size} larger than grid {cfg.height}x{cfg.width}")
    if intervals is not None:
        n_entities = len(intervals)
        for a, b in intervals:
            if not 0 <= a <= b < cfg.frames:
                raise GenerationError(f"interval {(a, b)} outside {cfg.frames} frames")
    if n_entities is None:
        n_entities = int(rng.integers(cfg.min_entities, cfg.max_entities + 1))
    if n_entities > cfg.max_refs:
        raise GenerationError(f"{n_entities} entities exceed max_refs={cfg.max_refs}")
    T = cfg.frames
    video = cfg.background_std * rng.standard_normal((T, cfg.height, cfg.width, cfg.channels))
    protos = prototypes(cfg)
    words = rng.choice(cfg.vocab_size, size=n_entities, replace=False)
    max_len = min(cfg.max_len or T, T)

    def draw(i: int) -> tuple[int, int, list[tuple[int, int]]]:
        if intervals is not None:
            t0, length = intervals[i][0], intervals[i][1] - intervals[i][0] + 1
        else:
            length = int(rng.integers(cfg.min_len, max_len + 1))
            t0 = int(rng.integers(0, T - length + 1))
        return t0, t0 + length - 1, _trajectory(rng, cfg, length)

    def clashes(cand, others) -> bool:
        t0, _, path = cand
        for o0, _o1, opath in others:
            for k, pos in enumerate(path):
                j = t0 + k - o0
                if 0 <= j < len(opath) and _boxes_overlap(pos, opath[j], cfg.pattern_size):
                    return True
        return False

    # restart the whole layout when a later entity cannot fit next to earlier ones
    for _attempt in range(cfg.placement_tries):
        placed: list[tuple[int, int, list[tuple[int, int]]]] = []
        for i in range(n_entities):
            for _ in range(8):
                cand = draw(i)
                if not clashes(cand, placed):
                    placed.append(cand)
                    break
            else:
                break
        if len(placed) == n_entities:
            break
    else:
        raise GenerationError(f"could not place {n_entities} entities without overlap")

    entities = []
    for eid, (word, (t0, t1, path)) in enumerate(zip(words, placed)):
        instance = rng.standard_normal((ph, pw, cfg.channels))
        if cfg.coherence > 0:
            instance = _mix_cells(rng.standard_normal((1, 1, cfg.channels)), instance, cfg.coherence)
        pattern = _standardize((1 - cfg.instance_mix) * protos[word] + cfg.instance_mix * instance)
        masks = np.zeros((T, cfg.height, cfg.width), dtype=bool)
        lo, hi = cfg.gain_range
        for k, (r, c) in enumerate(path):
            f = t0 + k
            video[f, r:r + ph, c:c + pw, :] = rng.uniform(lo, hi) * pattern
            masks[f, r:r + ph, c:c + pw] = True
        entities.append(Entity(eid, tag_word(int(word)), pattern, MaskTrack(masks), (t0, t1)))
    return SynthScene(seed if seed is not None else -1, cfg, video, entities)


def _bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1


def center_crop(frame: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Crop the mask's bounding box from ``frame`` and centre it on a blank grid."""
    r0, r1, c0, c1 = _bbox(mask)
    crop = np.where(mask[r0:r1, c0:c1, None], frame[r0:r1, c0:c1], 0.0)
    out = np.zeros_like(frame)
    h, w = crop.shape[:2]
    top, left = (frame.shape[0] - h) // 2, (frame.shape[1] - w) // 2
    out[top:top + h, left:left + w] = crop
    return out


@dataclass(frozen=True)
class ReferenceSample:
    grid: np.ndarray  # (H, W, C)
    interval: IntervalSpec
    frame: int
    outside: bool


def sample_reference(
    scene: SynthScene,
    entity_id: int,
    window: tuple[int, int],
    rng: np.random.Generator,
    threshold: int | None = None,
) -> ReferenceSample:
    """Crop the entity from a frame outside ``window`` when possible.

    The returned interval is the entity's presence interval clipped to the
    inclusive window and re-indexed so that frame ``window[0]`` is 0.
    """
    ent = scene.entity(entity_id)
    fa, fb = window
    if not 0 <= fa <= fb < scene.video.shape[0]:
        raise ValueError(f"window {window} outside scene of {scene.video.shape[0]} frames")
    present = np.flatnonzero(ent.track.areas > 0)
    if present.size == 0:
        raise NoPresence(f"entity {entity_id} never present")
    thr = scene.config.area_threshold if threshold is None else threshold
    pres = extract_interval(ent.track, thr)
    if pres is None or pres.t1 < fa or pres.t0 > fb:
        raise NoPresence(f"entity {entity_id} not present inside window {window}")
    outside = present[(present < fa) | (present > fb)]
    pool, is_out = (outside, True) if outside.size else (present, False)
    frame = int(rng.choice(pool))
    grid = center_crop(scene.video[frame], ent.track.masks[frame])
    interval = IntervalSpec(max(pres.t0, fa) - fa, min(pres.t1, fb) - fa, fb - fa + 1)
    return ReferenceSample(grid, interval, frame, is_out)


@dataclass(frozen=True)
class AugmentConfig:
    p_flip: float = 0.0
    p_zoom: float = 0.0
    zoom_range: float = 0.15
    jitter: float = 0.0
    p_blur: float = 0.0
    blur_strength: float = 0.3


def flip(grid: np.ndarray) -> np.ndarray:
    return grid[:, ::-1].copy()


def _zoom(grid: np.ndarray, scale: float) -> np.ndarray:
    h, w = grid.shape[:2]
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    out = np.empty_like(grid)
    matrix = np.eye(2) / scale
    offset = center - matrix @ center
    for ch in range(grid.shape[2]):
        out[..., ch] = ndimage.affine_transform(grid[..., ch], matrix, offset=offset, order=1, mode="constant")
    return out


def augment(grid: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Random flip, zoom, per-channel jitter and box blur, in that order."""
    out = np.array(grid, dtype=np.float64, copy=True)
    if cfg.p_flip > 0 and rng.random() < cfg.p_flip:
        out = flip(out)
    if cfg.p_zoom > 0 and rng.random() < cfg.p_zoom:
        out = _zoom(out, 1 + rng.uniform(-cfg.zoom_range, cfg.zoom_range))
    if cfg.jitter > 0:
        out = out + rng.uniform(-cfg.jitter, cfg.jitter, size=(1, 1, out.shape[2]))
    if cfg.p_blur > 0 and rng.random() < cfg.p_blur:
        smooth = ndimage.uniform_filter(out, size=(3, 3, 1), mode="constant")
        out = (1 - cfg.blur_strength) * out + cfg.blur_strength * smooth
    return out


# -- serialization ----------------------------------------------------------

def save_scene(scene: SynthScene, directory: str | Path) -> Path:
    """Write ``manifest.json`` and ``tensors.bin`` (little-endian float64)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    arrays = [("video", scene.video)] + [(f"pattern/{e.entity_id}", e.pattern) for e in scene.entities]
    tensors, offset = [], 0
    with open(d / "tensors.bin", "wb") as fh:
        for name, arr in arrays:
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            fh.write(raw)
            tensors.append({"name": name, "shape": list(arr.shape), "dtype": "<f8", "offset": offset})
            offset += len(raw)
    manifest = {
        "seed": scene.seed,
        "config": scene.config.to_dict(),
        "config_hash": scene.config.digest(),
        "tensors": tensors,
        "entities": [
            {
                "entity_id": e.entity_id,
                "tag": e.tag,
                "interval": list(e.interval),
                "track": e.track.to_rle(),
            }
            for e in scene.entities
        ],
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return d


def load_scene(directory: str | Path) -> SynthScene:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    blob = (d / "tensors.bin").read_bytes()
    arrays = {}
    for t in manifest["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        arrays[t["name"]] = np.frombuffer(blob, dtype=t["dtype"], count=n, offset=t["offset"]).reshape(t["shape"]).astype(np.float64)
    entities = [
        Entity(
            e["entity_id"],
            e["tag"],
            arrays[f"pattern/{e['entity_id']}"],
            MaskTrack.from_rle(e["track"]),
            tuple(e["interval"]),
        )
        for e in manifest["entities"]
    ]
    return SynthScene(manifest["seed"], SynthConfig.from_dict(manifest["config"]), arrays["video"], entities)


def generate_dataset(root: str | Path, seeds: list[int], cfg: SynthConfig) -> list[Path]:
    """Write ``scenes/<seed>/`` for every seed under ``root``."""
    return [save_scene(generate_scene(s, cfg), Path(root) / "scenes" / str(s)) for s in seeds]
