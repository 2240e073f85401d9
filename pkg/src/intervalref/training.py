"""Seeded training loop for the toy model on procedurally generated scenes."""

from __future__ import annotations

import dataclasses
import json
import math
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from .checkpoint import load_into, save_checkpoint
from .flow import NumericError, drop_conditions, flow_loss, time_shift
from .model import ModelConfig, ToyDiT
from .synth import AugmentConfig, SynthConfig, SynthScene, augment, generate_scene, sample_reference
from .token_stream import Conditions, TagEmbedder

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 4000
    batch_size: int = 16
    lr: float = 1e-3
    warmup: int = 200
    schedule: str = "constant"
    min_lr_ratio: float = 0.1
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    t_shift: float = 1.0
    p_ref_drop: float = 0.1
    p_text_drop: float = 0.1
    seed: int = 0
    log_every: int = 50
    ckpt_every: int = 1000

    def __post_init__(self) -> None:
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"schedule must be 'constant' or 'cosine', got {self.schedule!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if not self.lr > 0 or not self.t_shift > 0:
            raise ValueError("lr and t_shift must be positive")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def scene_conditions(
    scenes: Sequence[SynthScene],
    tags: TagEmbedder,
    rng: np.random.Generator | None = None,
    aug: AugmentConfig | None = None,
) -> Conditions:
    """Reference crops, tag tokens, intervals and captions for same-size scenes.

    With ``rng`` the crop frame is sampled (and augmented with ``aug``);
    without it the first present frame is used and nothing is augmented.
    """
    n = len(scenes[0].entities)
    if any(len(s.entities) != n for s in scenes):
        raise ValueError("all scenes in a batch need the same number of entities")
    imgs, toks, ivs, texts = [], [], [], []
    for s in scenes:
        T = s.video.shape[0]
        s_imgs, s_toks, s_ivs = [], [], []
        pick = rng if rng is not None else np.random.default_rng(0)
        for e in s.entities:
            ref = sample_reference(s, e.entity_id, (0, T - 1), pick, threshold=1)
            grid = augment(ref.grid, rng, aug) if (rng is not None and aug is not None) else ref.grid
            s_imgs.append(torch.from_numpy(np.ascontiguousarray(grid)))
            s_toks.append(tags.embed(e.tag))
            s_ivs.append(ref.interval)
        H, W, C = s.video.shape[1:]
        imgs.append(torch.stack(s_imgs) if s_imgs else torch.zeros(0, H, W, C, dtype=torch.float64))
        toks.append(torch.stack(s_toks) if s_toks else torch.zeros(0, tags.tokens, tags.dim, dtype=torch.float64))
        ivs.append(s_ivs)
        texts.append(tags.caption([e.tag for e in s.entities]))
    B = len(scenes)
    return Conditions(
        torch.stack(imgs), torch.stack(toks), ivs, torch.stack(texts),
        torch.ones(B, dtype=torch.bool), torch.ones(B, dtype=torch.bool),
    )


def make_batch(
    step: int,
    tcfg: TrainConfig,
    scfg: SynthConfig,
    tags: TagEmbedder,
    aug: AugmentConfig,
    dtype: torch.dtype = torch.float32,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, Conditions]:
    """(z, eps, t, conditions) for ``step``; a pure function of the seed and step."""
    rng = np.random.default_rng([tcfg.seed, step])
    n_refs = int(rng.integers(scfg.min_entities, scfg.max_entities + 1))
    scenes = [generate_scene(rng, scfg, n_entities=n_refs) for _ in range(tcfg.batch_size)]
    cond = scene_conditions(scenes, tags, rng, aug)
    cond = drop_conditions(cond, tcfg.p_ref_drop, tcfg.p_text_drop, rng)
    z = torch.from_numpy(np.stack([s.video for s in scenes])).to(dtype)
    eps = torch.from_numpy(rng.standard_normal(z.shape)).to(dtype)
    t = torch.from_numpy(time_shift(rng.random(tcfg.batch_size), tcfg.t_shift)).to(dtype)
    return z, eps, t, cond.to(dtype)


def lr_at(step: int, tcfg: TrainConfig) -> float:
    """Linear warmup, then constant or cosine decay to ``min_lr_ratio * lr``."""
    if tcfg.warmup > 0 and step < tcfg.warmup:
        return tcfg.lr * (step + 1) / tcfg.warmup
    if tcfg.schedule == "constant":
        return tcfg.lr
    span = max(1, tcfg.steps - tcfg.warmup)
    frac = min(1.0, (step - max(tcfg.warmup, 0)) / span)
    return tcfg.lr * (tcfg.min_lr_ratio + (1 - tcfg.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * frac)))


def make_optimizer(model: torch.nn.Module, tcfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=tcfg.lr, weight_decay=tcfg.weight_decay)


def build_model(mcfg: ModelConfig, seed: int) -> ToyDiT:
    torch.manual_seed(seed)
    return ToyDiT(mcfg)


def train(
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    scfg: SynthConfig,
    aug: AugmentConfig,
    run_dir: str | Path,
    resume: bool = True,
) -> ToyDiT:
    """Train and checkpoint into ``run_dir/ckpt/``; resumes from ``last.ckpt`` if present."""
    torch.use_deterministic_algorithms(True)
    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "ckpt"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    last = ckpt_dir / "last.ckpt"
    model = build_model(mcfg, tcfg.seed)
    opt = make_optimizer(model, tcfg)
    start = 0
    if resume and last.exists():
        header = load_into(last, model, opt)
        start = int(header["step"])
        log.info("resumed from %s at step %d", last, start)
    header = {"model_config": mcfg.to_dict(), "train_config": tcfg.to_dict(), "synth_config": scfg.to_dict(),
              "augment_config": dataclasses.asdict(aug), "seed": tcfg.seed}
    logs = open(run_dir / "logs.jsonl", "a")
    t_wall = time.time()
    try:
        for step in range(start, tcfg.steps):
            z, eps, t, cond = make_batch(step, tcfg, scfg, model.tags, aug)
            lr = lr_at(step, tcfg)
            for g in opt.param_groups:
                g["lr"] = lr
            try:
                loss = flow_loss(model, z, eps, t, cond)
            except NumericError as exc:
                exc.step = step
                raise
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at step {step}", step=step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if tcfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), tcfg.grad_clip)
            opt.step()
            if step % tcfg.log_every == 0 or step == tcfg.steps - 1:
                rec = {"step": step, "loss": loss.item(), "lr": lr, "wall_time": round(time.time() - t_wall, 3)}
                logs.write(json.dumps(rec) + "\n")
                logs.flush()
                log.info("step %d loss %.4f", step, loss.item())
            if tcfg.ckpt_every and (step + 1) % tcfg.ckpt_every == 0 and step + 1 < tcfg.steps:
                save_checkpoint(last, model, dict(header, step=step + 1), opt)
    finally:
        logs.close()
    save_checkpoint(last, model, dict(header, step=max(tcfg.steps, start)), opt)
    return model


def load_model(path: str | Path) -> tuple[ToyDiT, dict[str, Any]]:
    from .checkpoint import read_checkpoint

    header, _ = read_checkpoint(path)
    model = ToyDiT(ModelConfig.from_dict(header["model_config"]))
    load_into(path, model)
    model.eval()
    return model, header
