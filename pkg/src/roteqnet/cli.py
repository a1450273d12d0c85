"""Command line entry point: ``roteqnet <command> ...``.

Exit status is 0 on success, 1 on runtime failure and 2 on an invalid or
missing configuration (the message names the failing JSON path).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shlex
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import bench as bench_mod
from . import data, equivariance, gradcheck, metrics
from .config import ConfigError, RunConfig
from .network import build_model, load_checkpoint, predict_any_size
from .serialization import atomic_write, load_rtqt
from .tensor import precision
from .train import evaluate, train_loop

log = logging.getLogger("roteqnet")


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}") from None


def _csv_ints(text: str) -> list[int]:
    vals = _csv_floats(text)
    if any(v != int(v) or v < 1 for v in vals):
        raise argparse.ArgumentTypeError(f"expected comma separated positive integers, got {text!r}")
    return [int(v) for v in vals]


def _resolve_threads(arg: int | None, configured: int | None) -> int | None:
    """``--threads`` wins over ``ROTEQ_THREADS``, which wins over ``run.threads``."""
    if arg is not None:
        if arg < 1:
            raise ConfigError("--threads", f"expected a positive integer, got {arg}")
        return arg
    env = os.environ.get("ROTEQ_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError("$ROTEQ_THREADS", f"expected a positive integer, got {env!r}") from None
        if n < 1:
            raise ConfigError("$ROTEQ_THREADS", f"expected a positive integer, got {env!r}")
        return n
    return configured


# -- commands ------------------------------------------------------------


def cmd_gen_data(args, cfg: RunConfig) -> int:
    d = cfg.data
    manifest = data.generate_synthetic(d.synthetic, d.n_train, d.n_val, d.patch_size, args.out, workers=d.workers)
    counts = manifest["class_pixel_counts"]
    print(f"wrote {d.n_train} train / {d.n_val} val patches of {d.patch_size}x{d.patch_size} to {args.out}")
    for i, name in enumerate(manifest["class_names"]):
        print(f"  {name:<12} train {counts['train'][i]:>9}  val {counts['val'][i]:>9}")
    return 0


def _check_data_matches(cfg: RunConfig, manifest: dict, images: np.ndarray) -> None:
    if images.shape[1] != cfg.model.in_channels:
        raise ConfigError("$.model.in_channels", f"dataset has {images.shape[1]} bands, config says {cfg.model.in_channels}")
    if len(manifest["class_names"]) != cfg.model.n_classes:
        raise ConfigError(
            "$.model.n_classes", f"dataset has {len(manifest['class_names'])} classes, config says {cfg.model.n_classes}"
        )


def cmd_train(args, cfg: RunConfig) -> int:
    data_dir = args.data or cfg.data.dir
    if data_dir is None:
        raise ConfigError("$.data.dir", "no dataset given (use --data or data.dir)")
    manifest = data.read_manifest(data_dir)
    train_set = data.load_split(data_dir, "train")
    val_set = data.load_split(data_dir, "val") if manifest.get("n_val", 0) else None
    _check_data_matches(cfg, manifest, train_set[0])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "config.json", (cfg.to_json() + "\n").encode())
    atomic_write(out / "command.txt", (shlex.join(args.argv) + "\n").encode())
    with precision(cfg.run.precision):
        model = build_model(cfg.model, seed=cfg.run.seed)
        aug = cfg.augment if _augments(cfg) else None
        result = train_loop(model, train_set, val_set, cfg.sgd, aug, seed=cfg.run.seed, out_dir=out)
    if result.diverged:
        log.error("training diverged; checkpoints hold the last finite parameters")
        return 1
    last = result.history[-1] if result.history else None
    if last and "val" in last:
        print(f"finished {len(result.history)} epochs; final val OA {last['val']['oa']:.4f}")
    print(f"run directory: {out}")
    return 0


def _augments(cfg: RunConfig) -> bool:
    a = cfg.augment
    return a.rotation or a.flip_horizontal > 0 or a.flip_vertical > 0


def cmd_eval(args, _cfg) -> int:
    model = load_checkpoint(args.checkpoint)
    manifest = data.read_manifest(args.data)
    images, labels = data.load_split(args.data, args.split)
    result = evaluate(model, images, labels, batch_size=args.batch_size, n_orientations=args.orientations)
    names = manifest["class_names"]
    print(metrics.report_table(result, names))
    if args.report:
        atomic_write(args.report, metrics.report_csv(result, names).encode())
    return 0


def _read_input(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".rtqt":
        x = load_rtqt(path)
    else:
        from PIL import Image

        with Image.open(path) as img:
            x = np.asarray(img.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"input must be (c, h, w) or (n, c, h, w), got {x.shape}")
    return x


def cmd_predict(args, _cfg) -> int:
    model = load_checkpoint(args.checkpoint)
    x = _read_input(Path(args.input))
    if args.data:
        manifest = data.read_manifest(args.data)
        stats, palette = manifest["band_stats"], manifest["palette"]
    else:
        log.warning("no --data given: normalising with the input's own band statistics and the default palette")
        stats, palette = data.band_statistics(x), data.PALETTE
    x = np.stack([data.zscore(img, stats) for img in x])
    labels = predict_any_size(model, x, n_orientations=args.orientations).argmax(axis=1)
    out = Path(args.out)
    if len(labels) == 1:
        data.export_label_png(labels[0], palette, out)
    else:
        for i, lab in enumerate(labels):
            data.export_label_png(lab, palette, out.with_name(f"{out.stem}_{i:03d}{out.suffix}"))
    print(f"wrote {len(labels)} label map(s) to {out}")
    return 0


def cmd_equicheck(args, _cfg) -> int:
    model = load_checkpoint(args.checkpoint)
    images, _ = data.load_split(args.data, args.split)
    if args.limit:
        images = images[: args.limit]
    results = equivariance.equicheck(model, images, args.angles, n_orientations=args.orientations, crop=args.crop)
    text = equivariance.report_csv(results)
    print(text, end="")
    if args.report:
        atomic_write(args.report, text.encode())
    return 0


def cmd_bench(args, cfg: RunConfig) -> int:
    rows = bench_mod.bench(cfg.model, args.r_list, repeats=args.repeats, tile=args.tile, seed=cfg.run.seed)
    text = bench_mod.report_csv(rows)
    print(text, end="")
    if args.report:
        atomic_write(args.report, text.encode())
    return 0


def cmd_gradcheck(args, _cfg) -> int:
    names = list(gradcheck.SUITES) if args.suite == "all" else [args.suite]
    failed = 0
    for name in names:
        r = gradcheck.run_suite(name, seeds=range(args.seeds))
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {name:<18} max rel err {r.max_rel_error:.3e} (tol {r.tolerance:.0e}), {r.checked} checked, {r.excluded} excluded")
        failed += not r.passed
    return 1 if failed else 0


# -- parser --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="roteqnet", description="Rotation equivariant vector field networks.")
    p.add_argument("--threads", type=int, default=None, help="BLAS threads (overrides ROTEQ_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render the synthetic shapes dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data, needs_config=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True)
    t.add_argument("--data")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train, needs_config=True)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val", choices=("train", "val"))
    e.add_argument("--report", help="write the metrics as CSV")
    e.add_argument("--orientations", type=int, help="override R")
    e.add_argument("--batch-size", type=int, default=8)
    e.set_defaults(func=cmd_eval, needs_config=False)

    pr = sub.add_parser("predict", help="write a palette PNG label map")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--input", required=True, help=".rtqt tensor or an RGB image")
    pr.add_argument("--out", required=True)
    pr.add_argument("--data", help="dataset whose band statistics and palette to use")
    pr.add_argument("--orientations", type=int)
    pr.set_defaults(func=cmd_predict, needs_config=False)

    q = sub.add_parser("equicheck", help="measure rotation equivariance")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--angles", type=_csv_floats, default=[0.0, 90.0, 180.0, 270.0, 45.0])
    q.add_argument("--report")
    q.add_argument("--split", default="val", choices=("train", "val"))
    q.add_argument("--limit", type=int, default=0, help="use the first N patches only")
    q.add_argument("--crop", type=float, default=0.8)
    q.add_argument("--orientations", type=int)
    q.set_defaults(func=cmd_equicheck, needs_config=False)

    b = sub.add_parser("bench", help="single-thread forward timing over R")
    b.add_argument("--config")
    b.add_argument("--R-list", dest="r_list", type=_csv_ints, default=[8, 16, 32, 64, 128])
    b.add_argument("--repeats", type=int, default=15)
    b.add_argument("--tile", type=int, default=128)
    b.add_argument("--report")
    b.set_defaults(func=cmd_bench, needs_config=False)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    gc.add_argument("--suite", default="all", choices=["all", *gradcheck.SUITES])
    gc.add_argument("--seeds", type=int, default=5)
    gc.set_defaults(func=cmd_gradcheck, needs_config=False)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = ["roteqnet", *argv]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = None
        if getattr(args, "config", None):
            cfg = RunConfig.load(args.config)
        elif args.needs_config:
            raise ConfigError("$", "a --config file is required")
        elif args.command == "bench":
            cfg = RunConfig()
        threads = _resolve_threads(args.threads, cfg.run.threads if cfg else None)
        if args.command == "bench":
            threads = 1
        limiter = threadpool_limits(limits=threads) if threads else nullcontext()
        with limiter:
            return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error at {exc.path}: {exc.message}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
