"""Command-line interface: synth, train, sample, eval, ablate.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
Every run directory receives the fully materialized config document.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import dresample, metrics, scenegen, trainer
from .config import RunConfig, resolve_seed
from .errors import ConfigError, DataError, NumericError
from .maeprior import FrozenPrior


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg


def _write_png(path: Path, img01: np.ndarray, bands) -> None:
    from PIL import Image

    c = img01.shape[0]
    if c == 1:
        arr = img01[0]
    else:
        use = [b for b in bands if b < c][:3]
        if len(use) < 3:
            use = list(range(min(3, c)))
        arr = np.stack([img01[b] for b in use], axis=-1)
    data = (np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(data).save(path)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    overrides = {}
    if args.n is not None:
        overrides["data.n_samples"] = args.n
    if args.size is not None:
        overrides["data.size"] = args.size
    if args.frames is not None:
        overrides["data.frames"] = args.frames
    if args.channels is not None:
        overrides["data.channels"] = args.channels
    if args.coverage is not None:
        overrides["data.coverage"] = args.coverage
    overrides["data.seed"] = resolve_seed(args.seed, cfg.data.seed)
    cfg = cfg.with_overrides(overrides)

    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise DataError(f"output directory {out} exists; pass --force to overwrite")
    split_cfg = cfg.split_config()
    manifest = scenegen.write_split(split_cfg, cfg.data.seed, out.parent, out.name)
    cfg.save(out / "config.json")
    print(f"wrote {len(manifest.sample_ids)} samples to {out}")
    print(f"mean cloud coverage: {manifest.mean_coverage:.4f}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    overrides = {}
    if args.epochs is not None:
        overrides["train.epochs"] = args.epochs
    overrides["train.seed"] = resolve_seed(args.seed, cfg.train.seed)
    cfg = cfg.with_overrides(overrides)

    manifest = scenegen.load_manifest(Path(args.data))
    samples, report = scenegen.load_split(manifest)
    if report.rejected:
        for sid, reason in report.rejected:
            print(f"rejected {sid}: {reason}", file=sys.stderr)
    if not samples:
        raise DataError("no usable training samples")

    cfg = cfg.with_overrides(
        {
            "data.channels": manifest.channels,
            "data.frames": manifest.frames,
            "data.size": manifest.height,
            "data.aux": manifest.has_aux,
        }
    )
    train_cfg = cfg.train_config(manifest_path=str(args.data))
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.json")
    prepared = trainer.prepare_samples(samples, train_cfg.tau, train_cfg.cloud_radiance)
    _, history = trainer.train_model(prepared, train_cfg, run_dir, log_every=args.log_every)
    final = history[-1]["total"] if history else float("nan")
    print(f"trained {train_cfg.epochs} epochs, {len(history)} steps, final loss {final:.5f}")
    print(f"checkpoints under {run_dir}")
    return 0


def _resolve_sampler(cfg: RunConfig, args, manifest) -> RunConfig:
    overrides = {}
    if args.steps is not None:
        overrides["sampler.steps"] = args.steps
    if args.resample is not None:
        overrides["sampler.resample"] = args.resample
    if args.guide is not None:
        overrides["sampler.guide"] = args.guide
    if args.th is not None:
        overrides["sampler.top_fraction"] = args.th
    overrides["sampler.seed"] = resolve_seed(args.seed, cfg.sampler.seed)
    return cfg.with_overrides(overrides)


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    manifest = scenegen.load_manifest(Path(args.data))
    cfg = _resolve_sampler(cfg, args, manifest)
    model, sched = trainer.load_model(args.ckpt)

    prior = None
    if cfg.sampler.guide == "mae":
        if not args.mae_ckpt:
            raise ConfigError("guide 'mae' needs --mae-ckpt")
        prior = FrozenPrior.load(args.mae_ckpt)
    guide_fn = dresample.make_guide(cfg.sampler.guide, prior)
    sampler_cfg = cfg.sampler_config(mean_coverage=manifest.mean_coverage)

    samples, report = scenegen.load_split(manifest)
    for sid, reason in report.rejected:
        print(f"rejected {sid}: {reason}", file=sys.stderr)
    ids = sorted(samples)
    if args.limit:
        ids = ids[: args.limit]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.json")
    prepared = {p.sample_id: p for p in trainer.prepare_samples({k: samples[k] for k in ids})}

    def run_one(sid: str):
        trace: dict = {}
        pred = trainer.sample_scene(model, sched, prepared[sid], sampler_cfg, guide_fn, trace)
        d = out_dir / sid
        d.mkdir(parents=True, exist_ok=True)
        (d / "pred.f32").write_bytes(np.ascontiguousarray(pred, dtype="<f4").tobytes())
        _write_png(d / "pred.png", pred, cfg.eval.preview_bands)
        (d / "trace.json").write_text(json.dumps(trace, indent=1))
        return sid

    jobs = max(1, args.jobs)
    if jobs == 1:
        for sid in ids:
            run_one(sid)
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(run_one, ids))
    print(f"sampled {len(ids)} scenes -> {out_dir}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    manifest = scenegen.load_manifest(Path(args.data))
    samples, report = scenegen.load_split(manifest)
    for sid, reason in report.rejected:
        print(f"rejected {sid}: {reason}", file=sys.stderr)
    pred_dir = Path(args.pred)
    if not pred_dir.is_dir():
        raise DataError(f"prediction directory not found: {pred_dir}")

    pairs = []
    shape = (manifest.channels, manifest.height, manifest.width)
    for sid in sorted(samples):
        f = pred_dir / sid / "pred.f32"
        if not f.is_file():
            continue
        raw = np.frombuffer(f.read_bytes(), dtype="<f4")
        if raw.size != int(np.prod(shape)):
            raise DataError(f"{f}: expected {np.prod(shape)} values, found {raw.size}")
        pairs.append((sid, raw.reshape(shape).astype(np.float64), samples[sid].y))
    if not pairs:
        raise DataError(f"no predictions found under {pred_dir}")

    report_obj = metrics.evaluate_pairs(pairs, data_range=cfg.eval.data_range)
    out_dir = Path(args.out) if args.out else pred_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    report_obj.write_json(out_dir / "report.json")
    report_obj.write_csv(out_dir / "per_sample.csv")
    for name, value in sorted(report_obj.aggregates().items()):
        print(f"{name}: {value:.6f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    grid_path = Path(args.grid)
    if not grid_path.is_file():
        raise ConfigError(f"grid file not found: {grid_path}")
    grid = json.loads(grid_path.read_text())
    if "variants" not in grid or not isinstance(grid["variants"], list):
        raise ConfigError("grid file needs a 'variants' list")

    manifest = scenegen.load_manifest(Path(args.data))
    samples, _ = scenegen.load_split(manifest)
    eval_manifest = scenegen.load_manifest(Path(args.eval_data)) if args.eval_data else manifest
    eval_samples, _ = scenegen.load_split(eval_manifest)
    if args.limit:
        eval_samples = {k: eval_samples[k] for k in sorted(eval_samples)[: args.limit]}

    base = cfg.with_overrides(grid.get("base", {}))
    base = base.with_overrides(
        {
            "data.channels": manifest.channels,
            "data.frames": manifest.frames,
            "data.size": manifest.height,
            "data.aux": manifest.has_aux,
        }
    )
    variants = []
    sampler_cfgs = {}
    for spec_entry in grid["variants"]:
        name = spec_entry.get("name")
        if not name:
            raise ConfigError("every grid variant needs a name")
        vcfg = base.with_overrides(spec_entry.get("set", {}))
        variants.append((name, vcfg.train_config(manifest_path=str(args.data))))
        sampler_cfgs[name] = vcfg.sampler_config(mean_coverage=manifest.mean_coverage)

    train_prepared = trainer.prepare_samples(samples, base.loss.tau, base.loss.cloud_radiance)
    eval_prepared = trainer.prepare_samples(eval_samples, base.loss.tau, base.loss.cloud_radiance)

    rows = []
    for (name, tc) in variants:
        rows.extend(
            trainer.run_ablation(
                [(name, tc)], train_prepared, eval_prepared, sampler_cfgs[name]
            )
        )
    table = trainer.format_table(rows)
    print(table)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        base.save(out_dir / "config.json")
        (out_dir / "results.json").write_text(json.dumps(rows, indent=1))
        (out_dir / "table.txt").write_text(table + "\n")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="saderkit",
        description="Multi-temporal cloud removal with mean-reverting diffusion.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON run config file")
        p.add_argument(
            "--set", action="append", metavar="KEY=VALUE",
            help="override a config field by dotted path (repeatable)",
        )

    p = sub.add_parser("synth", help="generate a synthetic dataset split")
    add_common(p)
    p.add_argument("--out", required=True, help="split directory to create")
    p.add_argument("--n", type=int, help="number of samples")
    p.add_argument("--size", type=int, help="image height and width")
    p.add_argument("--frames", type=int, help="temporal frames per sample")
    p.add_argument("--channels", type=int, help="spectral channels (1, 3, or 13)")
    p.add_argument("--coverage", type=float, help="target cloud coverage")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--force", action="store_true", help="overwrite an existing split")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the denoiser on a split")
    add_common(p)
    p.add_argument("--data", required=True, help="manifest path or split directory")
    p.add_argument("--out", required=True, help="run directory for checkpoints/logs")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--log-every", type=int, default=0, help="print every N steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample cloud-free predictions")
    add_common(p)
    p.add_argument("--ckpt", required=True, help="denoiser checkpoint")
    p.add_argument("--data", required=True, help="manifest path or split directory")
    p.add_argument("--out", required=True, help="prediction output directory")
    p.add_argument("--steps", type=int, help="sample steps N")
    p.add_argument("--resample", type=int, help="resample rounds per level")
    p.add_argument("--guide", choices=dresample.GUIDE_KINDS)
    p.add_argument("--th", type=float, help="top-deviation selection fraction")
    p.add_argument("--seed", type=int)
    p.add_argument("--mae-ckpt", help="frozen prior checkpoint for --guide mae")
    p.add_argument("--jobs", type=int, default=1, help="concurrent scenes")
    p.add_argument("--limit", type=int, help="sample only the first N scenes")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score predictions against targets")
    add_common(p)
    p.add_argument("--pred", required=True, help="prediction directory from `sample`")
    p.add_argument("--data", required=True, help="manifest path or split directory")
    p.add_argument("--out", help="report directory (defaults to --pred)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train/evaluate a grid of variants")
    add_common(p)
    p.add_argument("--grid", required=True, help="JSON grid of named variants")
    p.add_argument("--data", required=True, help="training manifest")
    p.add_argument("--eval-data", help="evaluation manifest (defaults to --data)")
    p.add_argument("--out", help="results directory")
    p.add_argument("--limit", type=int, help="evaluate only the first N scenes")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
