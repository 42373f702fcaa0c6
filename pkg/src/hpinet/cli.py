"""``hpinet`` command line: train, infer, eval, inspect.

Exit codes: 0 success, 2 usage/config/format error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from .config import HpiConfig, parse
from .errors import ConfigError, FormatError, HpiError, IntegrityError, NumericError, UsageError
from .imaging import ImagePlane, read_png, write_png
from .metrics import psnr, ssim
from .model import forward, load_checkpoint, trace_matches
from .training import EpochLog, TrainState, degrade, load_dataset, load_train_state, run_training, save_train_state

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


def _threads(args):
    n = 1 if getattr(args, "deterministic", False) else args.threads
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _apply_env_seed(cfg: HpiConfig) -> HpiConfig:
    seed = os.environ.get("HPINET_SEED")
    if seed is None:
        return cfg
    try:
        return cfg.replace(seed=int(seed))
    except ValueError:
        raise ConfigError(f"HPINET_SEED must be an integer, got {seed!r}") from None


def cmd_train(config_path, data_dir, out_path, resume_path=None) -> int:
    try:
        cli_cfg = parse(Path(config_path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from exc
    cfg = _apply_env_seed(cli_cfg.model)
    tc = cli_cfg.train
    dataset = load_dataset(data_dir, cfg.scale)
    state = load_train_state(resume_path, expect=cfg) if resume_path else TrainState.fresh(cfg)

    def report(e: EpochLog):
        print(f"{e.epoch}\t{e.loss:.6f}\t{e.lr:.6g}\t{e.crop}", flush=True)

    run_training(state, tc, dataset, on_epoch=report,
                 checkpoint=lambda st: save_train_state(out_path, st))
    return EXIT_OK


def _load_rgb(path) -> ImagePlane:
    img = read_png(path)
    if img.space != "RGB":
        raise UsageError(f"{path}: expected an RGB image, got {img.space}")
    return img


def cmd_infer(ckpt, input_png, output_png) -> int:
    cfg, params = load_checkpoint(ckpt)
    write_png(output_png, forward(_load_rgb(input_png), params, cfg, "eval"))
    return EXIT_OK


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.10f}"


def cmd_eval(ckpt, hr_dir, scale: int) -> int:
    cfg, params = load_checkpoint(ckpt)
    if scale != cfg.scale:
        raise UsageError(f"checkpoint is for scale {cfg.scale}, asked for {scale}")
    files = sorted(Path(hr_dir).glob("*.png"))
    if not files:
        raise UsageError(f"no PNG images in {hr_dir}")
    rows = []
    for f in files:
        hr = read_png(f)
        if hr.space != "RGB":
            hr = ImagePlane(np.repeat(hr.data, 3, axis=0), "RGB")
        h, w = hr.height - hr.height % scale, hr.width - hr.width % scale
        hr = ImagePlane(hr.data[:, :h, :w], "RGB")
        sr = forward(degrade(hr, scale), params, cfg, "eval")
        p, s = psnr(sr, hr, shave=scale), ssim(sr, hr, shave=scale)
        rows.append((p, s))
        print(f"{f.name}\t{_fmt(p)}\t{s:.6f}")
    finite = [p for p, _ in rows if math.isfinite(p)]
    mean_p = float(np.mean(finite)) if finite else math.inf
    print(f"mean\t{_fmt(mean_p)}\t{float(np.mean([s for _, s in rows])):.6f}")
    return EXIT_OK


def cmd_inspect(ckpt, input_png, out_report) -> int:
    cfg, params = load_checkpoint(ckpt)
    traces = trace_matches(_load_rgb(input_png), params, cfg)
    lines = ["# block\tP\tu\tv\tpartner_u\tpartner_v\tsimilarity"]
    for tr in traces:
        for i, (u, v) in enumerate(tr.origins):
            if tr.partners is None:
                lines.append(f"{tr.block}\t{tr.patch_size}\t{u}\t{v}\t-\t-\t-")
                continue
            pu, pv = tr.origins[tr.partners[i]]
            lines.append(f"{tr.block}\t{tr.patch_size}\t{u}\t{v}\t{pu}\t{pv}\t{tr.similarity[i]:.9g}")
    Path(out_report).write_text("\n".join(lines) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None, help="BLAS thread count")
    common.add_argument("--deterministic", action="store_true", help="force single-threaded numerics")

    ap = argparse.ArgumentParser(prog="hpinet", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", parents=[common])
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p = sub.add_parser("infer", parents=[common])
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p = sub.add_parser("eval", parents=[common])
    p.add_argument("--ckpt", required=True)
    p.add_argument("--hr", required=True)
    p.add_argument("--scale", type=int, required=True)
    p = sub.add_parser("inspect", parents=[common])
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        with _threads(args):
            if args.command == "train":
                return cmd_train(args.config, args.data, args.out, args.resume)
            if args.command == "infer":
                return cmd_infer(args.ckpt, args.input, args.output)
            if args.command == "eval":
                return cmd_eval(args.ckpt, args.hr, args.scale)
            return cmd_inspect(args.ckpt, args.input, args.out)
    except NumericError as exc:
        print(f"hpinet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FormatError, IntegrityError, UsageError, HpiError) as exc:
        print(f"hpinet: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"hpinet: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
