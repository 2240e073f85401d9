"""Command-line entry point: ``intervalref <command> [flags]``.

Commands write into ``<root>/<name>/`` with ``config.json``, ``ckpt/``,
``logs.jsonl`` and ``report.csv``. Exit codes: 0 success, 2 usage or config
error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any

import numpy as np

from .benchmark import (
    DETECT_THRESHOLD,
    HELD_OUT_BASE,
    case_scene,
    make_manifest,
    model_videos,
    read_manifest,
    run_benchmark,
    write_manifest,
)
from .flow import CFGWeights, NumericError, SamplerConfig
from .interval_rope import IntervalSpec, WeRoPEWeights, decay_profile, write_profile_csv
from .model import ModelConfig
from .rope_core import make_frequency_bank
from .synth import AugmentConfig, SynthConfig, generate_dataset
from .training import TrainConfig, load_model, train

log = logging.getLogger("intervalref")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class EvalConfig:
    n_per_count: int = 25
    base_seed: int = HELD_OUT_BASE
    threshold: float = DETECT_THRESHOLD
    guidance: bool = True


SECTIONS: dict[str, type] = {
    "model": ModelConfig,
    "train": TrainConfig,
    "synth": SynthConfig,
    "augment": AugmentConfig,
    "sampler": SamplerConfig,
    "cfg": CFGWeights,
    "eval": EvalConfig,
}


@dataclasses.dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    synth: SynthConfig = SynthConfig()
    augment: AugmentConfig = AugmentConfig(jitter=0.05)
    sampler: SamplerConfig = SamplerConfig()
    cfg: CFGWeights = CFGWeights()
    eval: EvalConfig = EvalConfig()

    def to_dict(self) -> dict[str, Any]:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        return cls(**{name: _build(SECTIONS[name], d.get(name, {}), base=getattr(cls(), name)) for name in SECTIONS})

    def merged(self, overrides: dict[str, Any]) -> "RunConfig":
        d = self.to_dict()
        for section, vals in overrides.items():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section {section!r}")
            if not isinstance(vals, dict):
                raise ConfigError(f"config section {section!r} must be an object")
            d[section].update(vals)
        return RunConfig.from_dict(d)


def _type_ok(default: Any, val: Any) -> bool:
    if default is None:
        return True
    if isinstance(default, bool):
        return isinstance(val, bool)
    if isinstance(default, int):
        return isinstance(val, int) and not isinstance(val, bool)
    if isinstance(default, float):
        return isinstance(val, (int, float)) and not isinstance(val, bool)
    return isinstance(val, type(default))


def _build(cls: type, values: dict[str, Any], base: Any) -> Any:
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    merged = dataclasses.asdict(base)
    merged.update(values)
    for name, val in merged.items():
        default = getattr(base, name)
        if isinstance(default, tuple) and isinstance(val, list):
            merged[name] = val = tuple(val)
        if not _type_ok(default, val):
            raise ConfigError(f"{cls.__name__}.{name}: expected {type(default).__name__}, got {val!r}")
    try:
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def load_config(path: str | None, flags: dict[str, dict[str, Any]]) -> RunConfig:
    cfg = RunConfig()
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = cfg.merged(raw)
    flags = {s: {k: v for k, v in vals.items() if v is not None} for s, vals in flags.items()}
    return cfg.merged({s: v for s, v in flags.items() if v})


def _run_dir(args) -> Path:
    return Path(args.root) / args.name


def _read_run_config(run_dir: Path) -> RunConfig:
    path = run_dir / "config.json"
    if not path.exists():
        raise ConfigError(f"no config.json in {run_dir}; run `intervalref train` first")
    return RunConfig.from_dict(json.loads(path.read_text()))


def _write_json(path: Path, obj: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _manifest_for(cfg: RunConfig, path: str | None) -> dict[str, Any]:
    if path:
        if not Path(path).exists():
            raise ConfigError(f"manifest not found: {path}")
        return read_manifest(path)
    return make_manifest(cfg.eval.n_per_count, cfg.synth, base_seed=cfg.eval.base_seed)


def _guidance(cfg: RunConfig) -> CFGWeights | None:
    return cfg.cfg if cfg.eval.guidance else None


# ---- commands ---------------------------------------------------------------

def cmd_profile(args) -> int:
    try:
        iv = IntervalSpec(args.t0, args.t1, args.frames)
        w = WeRoPEWeights(args.wp, args.wn)
        bank = make_frequency_bank(args.d_t, args.base)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    prof = decay_profile(args.variant, iv, w, bank, mirrored_right=args.mirrored)
    write_profile_csv(prof, args.out)
    print(f"wrote {args.out} (argmax frame {prof.argmax()})")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, {})
    seeds = list(range(args.seed, args.seed + args.count))
    out = generate_dataset(args.out, seeds, cfg.synth)
    _write_json(Path(args.out) / "config.json", {"synth": dataclasses.asdict(cfg.synth), "seeds": seeds})
    print(f"wrote {len(seeds)} scenes under {out}")
    return EXIT_OK


def _train_flags(args) -> dict[str, dict[str, Any]]:
    return {
        "model": {"rope_mode": args.rope_mode, "use_tags": False if args.no_tags else None,
                  "hidden": args.hidden, "depth": args.depth, "heads": args.heads},
        "train": {"steps": args.steps, "seed": args.seed, "batch_size": args.batch_size, "lr": args.lr},
    }


def cmd_train(args) -> int:
    run_dir = _run_dir(args)
    flags = _train_flags(args)
    if (run_dir / "config.json").exists() and not args.config:
        cfg = _read_run_config(run_dir).merged({s: {k: v for k, v in d.items() if v is not None} for s, d in flags.items()})
    else:
        cfg = load_config(args.config, flags)
    _write_json(run_dir / "config.json", cfg.to_dict())
    train(cfg.model, cfg.train, cfg.synth, cfg.augment, run_dir, resume=not args.restart)
    print(f"checkpoint: {run_dir / 'ckpt' / 'last.ckpt'}")
    return EXIT_OK


def _load_run_model(run_dir: Path):
    ckpt = run_dir / "ckpt" / "last.ckpt"
    if not ckpt.exists():
        raise ConfigError(f"no checkpoint at {ckpt}")
    model, _ = load_model(ckpt)
    return model


def cmd_sample(args) -> int:
    run_dir = _run_dir(args)
    cfg = _read_run_config(run_dir)
    if args.seed is not None:
        cfg = cfg.merged({"sampler": {"seed": args.seed}})
    manifest = _manifest_for(cfg, args.manifest)
    model = _load_run_model(run_dir)
    scfg = SynthConfig.from_dict(manifest["synth_config"])
    by_count: dict[int, list[dict]] = {}
    for c in manifest["cases"]:
        by_count.setdefault(int(c["ref_count"]), []).append(c)
    videos = {}
    for n, group in sorted(by_count.items()):
        scenes = [case_scene(c, scfg) for c in group]
        for c, v in zip(group, model_videos(model, scenes, group, _guidance(cfg), cfg.sampler)):
            videos[c["case_id"]] = v
    out = Path(args.out) if args.out else run_dir / "samples.npz"
    np.savez(out, **videos)
    write_manifest(manifest, out.with_suffix(".manifest.json"))
    print(f"wrote {len(videos)} samples to {out}")
    return EXIT_OK


def _samples_source(path: Path):
    if not path.exists():
        raise ConfigError(f"samples file not found: {path}")
    data = np.load(path)

    def source(scenes, cases):
        missing = [c["case_id"] for c in cases if c["case_id"] not in data.files]
        if missing:
            raise ConfigError(f"samples file lacks cases {missing[:3]}")
        return np.stack([data[c["case_id"]] for c in cases])

    return source


def _evaluate(run_dir: Path, cfg: RunConfig, manifest: dict, source) -> dict[str, Any]:
    report = run_benchmark(source, manifest, _guidance(cfg), cfg.sampler, cfg.eval.threshold)
    report.write(run_dir / "report.csv", run_dir / "report.json")
    return report.aggregates()


def cmd_eval(args) -> int:
    run_dir = _run_dir(args)
    if args.oracle:
        cfg = load_config(args.config, {})
        run_dir.mkdir(parents=True, exist_ok=True)
        if not (run_dir / "config.json").exists():
            _write_json(run_dir / "config.json", cfg.to_dict())
        source: Any = "oracle"
    else:
        cfg = _read_run_config(run_dir)
        if args.samples:
            source = _samples_source(Path(args.samples))
        else:
            source = _load_run_model(run_dir)
    manifest = _manifest_for(cfg, args.manifest)
    agg = _evaluate(run_dir, cfg, manifest, source)
    print(json.dumps(agg, indent=2, sort_keys=True))
    return EXIT_OK


ABLATION_GRID = [(mode, tags) for mode in ("none", "mid", "we") for tags in (True, False)]
ABLATION_COLUMNS = ("variant", "t_l2", "t_iou", "pattern_sim")


def variant_name(mode: str, tags: bool) -> str:
    return f"{mode}-{'tags' if tags else 'notags'}"


def cmd_ablate(args) -> int:
    root = _run_dir(args)
    base = load_config(args.config, _train_flags(args))
    manifest = _manifest_for(base, args.manifest)
    root.mkdir(parents=True, exist_ok=True)
    write_manifest(manifest, root / "manifest.json")
    rows = []
    for mode, tags in ABLATION_GRID:
        name = variant_name(mode, tags)
        cfg = base.merged({"model": {"rope_mode": mode, "use_tags": tags}})
        run_dir = root / name
        _write_json(run_dir / "config.json", cfg.to_dict())
        log.info("ablation variant %s", name)
        start = time.perf_counter()
        model = train(cfg.model, cfg.train, cfg.synth, cfg.augment, run_dir)
        model.eval()
        agg = _evaluate(run_dir, cfg, manifest, model)
        split = agg["splits"][args.split]
        rows.append({"variant": name, "t_l2": split["t_l2"], "t_iou": split["t_iou"], "pattern_sim": split["pattern_sim"],
                     "pattern_sim_2ref": agg["splits"]["2"]["pattern_sim"] if "2" in agg["splits"] else None,
                     "seconds": time.perf_counter() - start})
    noise = run_benchmark("noise", manifest, None, base.sampler, base.eval.threshold).aggregates()
    with open(root / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (r[k] if k == "variant" else repr(float(r[k]))) for k in ABLATION_COLUMNS})
    _write_json(root / "ablation.json", {"split": args.split, "rows": rows, "noise": noise["splits"][args.split]})
    print(f"{'variant':<14}{'t_l2':>9}{'t_iou':>9}{'pattern_sim':>13}")
    for r in rows:
        print(f"{r['variant']:<14}{r['t_l2']:>9.3f}{r['t_iou']:>9.3f}{r['pattern_sim']:>13.3f}")
    print(f"{'noise':<14}{noise['splits'][args.split]['t_l2']:>9.3f}{noise['splits'][args.split]['t_iou']:>9.3f}")
    return EXIT_OK


# ---- parser -----------------------------------------------------------------

def _add_run(p: argparse.ArgumentParser) -> None:
    p.add_argument("--name", required=True, help="run name under --root")
    p.add_argument("--root", default="run", help="directory holding runs (default: run)")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with model/train/synth/augment/sampler/cfg/eval sections")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--rope-mode", choices=["none", "mid", "we"])
    p.add_argument("--no-tags", action="store_true", help="disable the tag-embedding MLP")
    p.add_argument("--hidden", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--heads", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="intervalref", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="export an attention decay profile as CSV")
    p.add_argument("--variant", choices=["none", "mid", "we"], required=True)
    p.add_argument("--t0", type=int, required=True)
    p.add_argument("--t1", type=int, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--wp", type=float, default=1.0)
    p.add_argument("--wn", type=float, default=-0.5)
    p.add_argument("--d-t", type=int, default=32, help="temporal rotary dims (default 32)")
    p.add_argument("--base", type=float, default=10000.0)
    p.add_argument("--mirrored", action="store_true", help="use the mirrored right anchor (t1+T)/2")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("gen-data", help="write seeded synthetic scenes to disk")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0, help="first scene seed")
    p.add_argument("--config")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train (or resume) a toy model")
    _add_run(p)
    _add_train_flags(p)
    p.add_argument("--restart", action="store_true", help="ignore an existing checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample videos for benchmark cases")
    _add_run(p)
    p.add_argument("--manifest", help="benchmark manifest JSON (default: generated held-out cases)")
    p.add_argument("--seed", type=int, help="sampler seed")
    p.add_argument("--out", help="output .npz (default: <run>/samples.npz)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score a run on the adherence benchmark")
    _add_run(p)
    p.add_argument("--manifest")
    p.add_argument("--samples", help="score videos from `intervalref sample` instead of sampling")
    p.add_argument("--oracle", action="store_true", help="score ground-truth videos")
    p.add_argument("--config", help="config for --oracle runs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="{none, mid, we} x {tags, no tags} comparison table")
    _add_run(p)
    _add_train_flags(p)
    p.add_argument("--manifest")
    p.add_argument("--split", default="all", choices=["1", "2", "all"], help="reference-count split for the table")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        where = f" at step {exc.step}" if exc.step is not None else ""
        print(f"numeric failure{where}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
