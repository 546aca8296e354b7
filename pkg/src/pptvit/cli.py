"""Command-line entry point.

Exit codes: 0 ok, 1 self-test failure, 2 bad config, 3 bad weights,
4 bad image, 5 schedule violation.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from .config import RunConfig, load_run_config
from .engine import PRESETS, ModelWeights, model_forward
from .exceptions import (
    ConfigError,
    ImageError,
    NumericalError,
    ScheduleError,
    WeightsError,
)
from .fileio import (
    dumps_json,
    normalize_image,
    read_ppm,
    read_weights,
    write_ppm,
    write_weights,
)
from .flops import model_flops
from .numeric import Rng
from .selftest import run_selftest
from .trace import render_patch_map, variance_series, variance_series_csv

EXIT_CODES = {
    ConfigError: 2,
    WeightsError: 3,
    NumericalError: 3,
    ImageError: 4,
    ScheduleError: 5,
}


def _load_config(args):
    if getattr(args, "config", None):
        cfg = load_run_config(args.config)
    else:
        cfg = RunConfig()
    if getattr(args, "preset", None):
        cfg = replace(cfg, model=PRESETS[args.preset])
    if getattr(args, "r", None) is not None:
        layers = [layer for layer, _ in cfg.schedule.stages] or [4, 7, 10]
        cfg = replace(
            cfg, schedule=replace(cfg.schedule, stages=tuple((l, args.r) for l in layers))
        )
    if getattr(args, "budget", None):
        cfg = replace(cfg, schedule=replace(cfg.schedule, budget=args.budget))
    cfg.effective_schedule.validate(cfg.model)
    return cfg


def _load_weights(args, cfg):
    if getattr(args, "weights", None):
        return read_weights(args.weights, cfg.model)
    seed = args.synthetic if getattr(args, "synthetic", None) is not None else cfg.seed
    return ModelWeights.synthetic(cfg.model, seed)


def synthetic_pixels(config, seed):
    """Seeded uint8 test image."""
    n = config.image_size * config.image_size * config.channels
    values = np.floor(Rng(seed).random(n) * 256).astype(np.uint8)
    return values.reshape(config.image_size, config.image_size, config.channels)


def _load_pixels(path, cfg):
    if path is None:
        return synthetic_pixels(cfg.model, cfg.seed)
    if cfg.model.channels != 3:
        raise ImageError("PPM input needs a 3-channel model")
    pixels = read_ppm(path)
    side = cfg.model.image_size
    if pixels.shape != (side, side, 3):
        raise ImageError(f"image is {pixels.shape[1]}x{pixels.shape[0]}, model wants {side}x{side}")
    return pixels


def cmd_run(args):
    cfg = _load_config(args)
    weights = _load_weights(args, cfg)
    pixels = _load_pixels(args.image, cfg)
    image = normalize_image(pixels, cfg.mean, cfg.std)
    observe = args.observe or cfg.observe
    _, report = model_forward(image, weights, cfg.model, cfg.effective_schedule, observe)
    doc = report.to_dict()
    doc["config"] = cfg.to_dict()
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_json(doc))
    viz = args.viz or (cfg.viz and args.out.rsplit(".", 1)[0] + ".ppm")
    if viz:
        write_ppm(viz, render_patch_map(pixels, report.merge_map, cfg.model))
    policies = ",".join(report.policies) or "-"
    print(
        f"top1={report.top1} flops={report.flops.gflops:.3f}G "
        f"reduction={report.flops.reduction_percent:.1f}% policies={policies}"
    )
    return 0


def cmd_flops(args):
    cfg = _load_config(args)
    s = cfg.effective_schedule
    report = model_flops(cfg.model, s.stages, s.budget)
    sys.stdout.write(dumps_json(report.to_dict()))
    return 0


def _parse_list(text, conv):
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise ConfigError("empty list")
    try:
        return [conv(t) for t in items]
    except ValueError as exc:
        raise ConfigError(f"bad list item: {exc}") from None


def _tau(text):
    return math.inf if text.lower() in ("inf", "infinity") else float(text)


def cmd_sweep(args):
    cfg = _load_config(args)
    r_list = _parse_list(args.r_list, int)
    tau_list = _parse_list(args.tau_list, _tau)
    weights = _load_weights(args, cfg)
    image = normalize_image(_load_pixels(args.image, cfg), cfg.mean, cfg.std)
    base = cfg.effective_schedule
    layers = [layer for layer, _ in base.stages] or [4, 7, 10]
    grid = [(r, tau) for r in r_list for tau in tau_list]
    schedules = [
        replace(base, stages=tuple((l, r) for l in layers), tau=tau) for r, tau in grid
    ]
    for s in schedules:
        s.validate(cfg.model)

    def point(schedule):
        _, rep = model_forward(image, weights, cfg.model, schedule)
        return rep

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        reports = list(pool.map(point, schedules))
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["r", "tau", "flops", "prune_stages", "pool_stages"])
        for (r, tau), rep in zip(grid, reports):
            writer.writerow([
                r,
                "inf" if math.isinf(tau) else repr(tau),
                rep.flops.total,
                rep.policies.count("prune"),
                rep.policies.count("pool"),
            ])
    print(f"wrote {len(grid)} rows to {args.out}")
    return 0


def cmd_variance(args):
    cfg = _load_config(args)
    weights = _load_weights(args, cfg)
    if args.image:
        pixel_sets = [_load_pixels(p, cfg) for p in args.image]
    else:
        pixel_sets = [synthetic_pixels(cfg.model, cfg.seed + i) for i in range(args.n_synthetic)]
    reports = [
        model_forward(
            normalize_image(px, cfg.mean, cfg.std), weights, cfg.model,
            cfg.effective_schedule, observe=True,
        )[1]
        for px in pixel_sets
    ]
    text = variance_series_csv(variance_series(reports))
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    print(f"wrote variance series for {len(reports)} image(s) to {args.out}")
    return 0


def cmd_init_weights(args):
    cfg = _load_config(args)
    write_weights(args.out, ModelWeights.synthetic(cfg.model, args.seed), cfg.model)
    return 0


def cmd_selftest(args):
    return 0 if run_selftest() else 1


def _add_model_args(p, weights=True):
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--preset", choices=sorted(PRESETS), help="override the model shape")
    if weights:
        g = p.add_mutually_exclusive_group()
        g.add_argument("--weights", help="PPTW weight file")
        g.add_argument("--synthetic", type=int, metavar="SEED",
                       help="seeded Gaussian weights (default: config seed)")


def build_parser():
    parser = argparse.ArgumentParser(prog="pptvit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="classify one image and write a trace")
    _add_model_args(p)
    p.add_argument("--image", help="binary PPM (P6); default: seeded synthetic image")
    p.add_argument("--out", required=True, help="trace JSON path")
    p.add_argument("--viz", help="write a patch-map PPM here")
    p.add_argument("--observe", action="store_true",
                   help="score every layer, not only compression stages")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("flops", help="print the FLOPs report for a schedule")
    _add_model_args(p, weights=False)
    p.add_argument("--r", type=int, help="tokens removed per stage")
    p.add_argument("--budget", choices=["exact", "capped"])
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("sweep", help="grid over r and tau")
    _add_model_args(p)
    p.add_argument("--r-list", required=True)
    p.add_argument("--tau-list", required=True)
    p.add_argument("--image")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("variance", help="per-layer mean score variance as CSV")
    _add_model_args(p)
    p.add_argument("--image", action="append", help="PPM input (repeatable)")
    p.add_argument("--n-synthetic", type=int, default=4,
                   help="synthetic images to use when no --image is given")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_variance)

    p = sub.add_parser("init-weights", help="write seeded synthetic weights to a file")
    _add_model_args(p, weights=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_weights)

    p = sub.add_parser("selftest", help="run the oracle cross-checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except tuple(EXIT_CODES) as exc:
        code = next(c for t, c in EXIT_CODES.items() if isinstance(exc, t))
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
