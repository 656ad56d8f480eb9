"""Command-line interface: ``python -m rsmoe <command> ...``."""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import time

import numpy as np

from .core import Head, RsmoeError, TileGrid
from .denoise import BENCH1D_RUNS
from .geometry import build_tile_index

log = logging.getLogger("rsmoe")

COMMANDS = ("fit", "render", "denoise", "superres", "eval", "bench1d", "bench")


class ArgumentError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ArgumentError(f"{self.prog}: {message}")


def _on_off(value: str) -> bool:
    v = value.lower()
    if v in ("on", "true", "1", "yes"):
        return True
    if v in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {value!r}")


def _head(value: str) -> Head:
    try:
        return Head.parse(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _int_list(value: str) -> list[int]:
    try:
        return [int(v) for v in value.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}") from None


def _init_scale(value: str):
    if value.lower() == "wl":
        return "wl"
    try:
        return float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'wl', got {value!r}") from None


def _train_options(p, iters_default=10000):
    p.add_argument("--kernels", type=int, default=2500)
    p.add_argument("--iters", type=int, default=iters_default)
    p.add_argument("--head", type=_head, default=Head.SMOE)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tile", type=int, default=16)
    p.add_argument("--lr-frame", choices=("normalized", "pixel"), default="normalized")
    p.add_argument("--learnable-pi", type=_on_off, default=False)
    p.add_argument("--index-refresh", type=int, default=500)
    p.add_argument("--pixel-cull", type=_on_off, default=True,
                   help="drop kernels outside their 99%% ellipse per pixel (off: per-tile lists only)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rsmoe", description="Steered-Gaussian mixture image regression.")
    parser.add_argument("--config", help="key=value file; command-line flags take precedence")
    parser.add_argument("--threads", type=int, default=None, help="worker threads (1 = bit-reproducible)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("fit", help="fit a model to an image")
    p.add_argument("--input", required=True)
    _train_options(p)
    p.add_argument("--raster", type=_on_off, default=True)
    p.add_argument("--init", choices=("random", "segment"), default="random")
    p.add_argument("--init-scale", type=_init_scale, default=5.0)
    p.add_argument("--seg-threshold", type=float, default=10.0)
    p.add_argument("--seg-min-size", type=int, default=16)
    p.add_argument("--model")
    p.add_argument("--trace")
    p.add_argument("--output", help="also render the fitted model to this PNG")

    p = sub.add_parser("render", help="render a model file")
    p.add_argument("--model", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--raster", type=_on_off, default=True)
    p.add_argument("--pixel-cull", type=_on_off, default=True)
    p.add_argument("--tile", type=int, default=16)

    p = sub.add_parser("denoise", help="add noise and denoise with shifted-grid models")
    p.add_argument("--input", required=True)
    p.add_argument("--noise-var", type=float, default=0.01)
    p.add_argument("--noise-seed", type=int, default=0)
    p.add_argument("--hypotheses", type=int, default=16)
    _train_options(p, iters_default=2000)
    p.set_defaults(kernels=1000)
    p.add_argument("--init", choices=("random", "segment"), default="segment")
    p.add_argument("--seg-threshold", type=float, default=10.0)
    p.add_argument("--seg-smooth", type=float, default=2.0)
    p.add_argument("--seg-min-size", type=int, default=None, help="default: max(16, pixels / kernels)")
    p.add_argument("--allocation", choices=("proportional", "equal"), default="proportional")
    p.add_argument("--output", required=True)
    p.add_argument("--noisy-output")
    p.add_argument("--report")

    p = sub.add_parser("superres", help="resample a model on a finer grid")
    p.add_argument("--model", required=True)
    p.add_argument("--scale", type=float, default=2.0)
    p.add_argument("--sharpen", type=float, default=1.0)
    p.add_argument("--output", required=True)
    p.add_argument("--raster", type=_on_off, default=True)

    p = sub.add_parser("eval", help="print 'psnr,ssim' for two images")
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True)

    p = sub.add_parser("bench1d", help="1D noisy step benchmark")
    p.add_argument("--noise-sd", default="paper-default")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--runs", type=int, default=BENCH1D_RUNS, help="average over this many noise draws")

    p = sub.add_parser("bench", help="time training across pool sizes and modes")
    p.add_argument("--input", required=True)
    p.add_argument("--kernels", type=_int_list, default=[500, 1000, 2500])
    p.add_argument("--modes", default="raster,global",
                   help="comma list from raster, global")
    p.add_argument("--head", type=_head, default=Head.SMOE)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tile", type=int, default=16)
    p.add_argument("--model-dir", help="save each trained model here")
    p.add_argument("--output", help="CSV path (default: stdout)")
    return parser


def read_config(path) -> dict:
    out = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ArgumentError(f"cannot read config {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ArgumentError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _with_config(parser, argv):
    """Splice config-file options in right after the command name.

    Later occurrences of an option win in argparse, so explicit flags that
    follow still override the file.
    """
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return argv
    cmd_pos = next((i for i, tok in enumerate(argv) if tok in COMMANDS), None)
    if cmd_pos is None:
        raise ArgumentError(f"missing command, one of: {', '.join(COMMANDS)}")
    sub = parser._subparsers._group_actions[0].choices[argv[cmd_pos]]
    options = {a.dest: a for a in sub._actions if a.option_strings and a.dest != "help"}
    spliced = []
    for key, raw in read_config(known.config).items():
        if key not in options:
            raise ArgumentError(f"unknown config key {key!r} for {argv[cmd_pos]}")
        spliced += [options[key].option_strings[-1], raw]
    return argv[:cmd_pos + 1] + spliced + argv[cmd_pos + 1:]


def _set_threads(n):
    if n is None:
        return
    if n < 1:
        raise ArgumentError("--threads must be >= 1")
    from . import _backend
    if _backend.HAVE_NUMBA:
        import numba
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _train_config(args, rasterized=True):
    from .optim import TrainConfig
    try:
        return TrainConfig(iterations=args.iters, head=args.head, seed=args.seed, tile=args.tile,
                           rasterized=rasterized, learnable_pi=args.learnable_pi,
                           lr_frame=args.lr_frame, index_refresh=args.index_refresh,
                           pixel_cull=args.pixel_cull)
    except ValueError as exc:
        raise ArgumentError(str(exc)) from exc


def write_trace(path, trace):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "mse", "psnr_db"])
        for it, err, db in trace:
            w.writerow([it, repr(float(err)), repr(float(db))])


def _initial_kernels(img, args):
    from .segment import allocate_kernels, random_init, segment_image, wl_scale

    scale = args.init_scale
    if scale == "wl":
        scale = wl_scale(img.shape[1], args.kernels)
    if args.init == "segment":
        seg = segment_image(img, args.seg_threshold, args.seg_min_size)
        log.info("segmentation: %d segments", seg.count)
        return allocate_kernels(seg, img, args.kernels, args.seed, scale)
    return random_init(img, args.kernels, args.seed, scale)


def cmd_fit(args):
    from .io import load_png, save_model, save_png
    from .optim import train
    from .render import render_image

    if args.kernels < 1:
        raise ArgumentError("--kernels must be >= 1")
    img = load_png(args.input)
    H, W, _ = img.shape
    cfg = _train_config(args, args.raster)
    init = _initial_kernels(img, args)

    def progress(it, err):
        log.info("iter %d mse %.6g psnr %.3f dB", it, err, 10 * math.log10(1 / err) if err else math.inf)

    res = train(img, cfg, init, progress=progress)
    log.info("done: %.3f s/iter, final psnr %.3f dB", res.iteration_seconds, res.trace[-1][2])
    if args.model:
        save_model(res.kernels, args.model, cfg.head, W, H)
    if args.trace:
        write_trace(args.trace, res.trace)
    if args.output:
        save_png(render_image(res.kernels, cfg.head, TileGrid(W, H, cfg.tile), res.index), args.output)
    return 0


def cmd_render(args):
    from .io import load_model, save_png
    from .render import render_image

    mf = load_model(args.model)
    grid = TileGrid(mf.width, mf.height, args.tile)
    index = build_tile_index(mf.kernels, grid, pixel_cull=args.pixel_cull) if args.raster else None
    save_png(render_image(mf.kernels, mf.head, grid, index), args.output)
    return 0


def cmd_denoise(args):
    from .denoise import add_gaussian_noise, fuse, train_multi_model
    from .io import load_png, save_png
    from .metrics import psnr, ssim

    clean = load_png(args.input)
    noisy = add_gaussian_noise(clean, args.noise_var, args.noise_seed)
    if args.noisy_output:
        save_png(noisy, args.noisy_output)
    cfg = _train_config(args)
    t0 = time.perf_counter()
    stack = train_multi_model(noisy, cfg, args.hypotheses, args.kernels, init=args.init,
                              seg_threshold=args.seg_threshold, seg_smooth=args.seg_smooth,
                              seg_min_size=args.seg_min_size, allocation=args.allocation,
                              progress=lambda h, im: log.info("hypothesis %d: psnr %.3f dB",
                                                              h, psnr(im, clean)))
    fused = fuse(stack)
    total = time.perf_counter() - t0
    save_png(fused, args.output)
    rows = [("noisy", "", psnr(noisy, clean), ssim(noisy, clean), "")]
    for h, (im, off, sec) in enumerate(zip(stack.images, stack.offsets, stack.seconds)):
        rows.append((f"model_{h}", f"{off[0]}:{off[1]}", psnr(im, clean), ssim(im, clean), sec))
    rows.append(("fused", "", psnr(fused, clean), ssim(fused, clean), total))
    log.info("fused psnr %.3f dB (noisy %.3f dB)", rows[-1][2], rows[0][2])
    if args.report:
        with open(args.report, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["name", "offset", "psnr_db", "ssim", "seconds"])
            w.writerows(rows)
    return 0


def cmd_superres(args):
    from .io import load_model, save_png
    from .resample import superres

    if args.scale < 1:
        raise ArgumentError("--scale must be >= 1")
    if not 0 < args.sharpen <= 1:
        raise ArgumentError("--sharpen must lie in (0, 1]")
    mf = load_model(args.model)
    out = superres(mf.kernels, mf.head, (mf.width, mf.height), args.scale, args.sharpen,
                   rasterized=args.raster)
    save_png(out, args.output)
    return 0


def cmd_eval(args):
    from .io import load_png
    from .metrics import psnr, ssim

    a, b = load_png(args.ref), load_png(args.test)
    print(f"{psnr(a, b)},{ssim(a, b)}")
    return 0


def cmd_bench1d(args):
    from .denoise import BENCH1D_NOISE_SD, bench1d

    if args.noise_sd == "paper-default":
        sd = BENCH1D_NOISE_SD
    else:
        try:
            sd = float(args.noise_sd)
        except ValueError:
            raise ArgumentError(f"--noise-sd expects a number or 'paper-default', got {args.noise_sd!r}") from None
    if sd < 0 or args.runs < 1:
        raise ArgumentError("--noise-sd must be >= 0 and --runs >= 1")
    print("\n".join(bench1d(sd, args.seed, args.runs).lines()))
    return 0


BENCH_COLUMNS = ["kernels", "mode", "head", "iterations", "seconds_per_iter", "psnr_db", "ssim",
                 "avg_kernels_per_block", "flops_proxy"]


def bench_row(img, L, mode, head, iters, seed, tile, model_path=None):
    """Train once and measure; quality and sparsity come from the saved (f32) model."""
    from .io import model_bytes, parse_model, save_model
    from .metrics import psnr, ssim
    from .optim import TrainConfig, train
    from .render import render_image
    from .segment import random_init

    H, W, _ = img.shape
    cfg = TrainConfig(iterations=iters, head=head, seed=seed, tile=tile, rasterized=mode == "raster")
    res = train(img, cfg, random_init(img, L, seed))
    if model_path:
        save_model(res.kernels, model_path, head, W, H)
    stored = parse_model(model_bytes(res.kernels, head, W, H)).kernels
    grid = TileGrid(W, H, tile)
    if mode == "raster":
        index = build_tile_index(stored, grid)
        kpb = index.mean_kernels_per_block()
    else:
        index = None
        kpb = float(L)
    out = render_image(stored, head, grid, index)
    return [L, mode, head.name.lower(), iters, res.iteration_seconds, psnr(out, img), ssim(out, img),
            kpb, 2.0 * kpb]


def cmd_bench(args):
    import os

    from .io import load_png

    modes = [m for m in args.modes.split(",") if m]
    bad = [m for m in modes if m not in ("raster", "global")]
    if bad or not modes:
        raise ArgumentError(f"--modes takes raster and/or global, got {args.modes!r}")
    if not args.kernels or min(args.kernels) < 1:
        raise ArgumentError("--kernels needs positive integers")
    img = load_png(args.input)
    rows = []
    for L in args.kernels:
        for mode in modes:
            path = None
            if args.model_dir:
                os.makedirs(args.model_dir, exist_ok=True)
                path = os.path.join(args.model_dir, f"{mode}_{L}.bin")
            rows.append(bench_row(img, L, mode, args.head, args.iters, args.seed, args.tile, path))
            log.info("bench %s", rows[-1])
    fh = open(args.output, "w", newline="", encoding="utf-8") if args.output else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(BENCH_COLUMNS)
        w.writerows(rows)
    finally:
        if args.output:
            fh.close()
    return 0


_HANDLERS = {"fit": cmd_fit, "render": cmd_render, "denoise": cmd_denoise, "superres": cmd_superres,
             "eval": cmd_eval, "bench1d": cmd_bench1d, "bench": cmd_bench}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _with_config(parser, argv)
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help
            return int(exc.code or 0)
        if args.command is None:
            raise ArgumentError(f"missing command, one of: {', '.join(COMMANDS)}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        _set_threads(args.threads)
        return _HANDLERS[args.command](args)
    except ArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RsmoeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
