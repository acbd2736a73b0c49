"""Command-line front end.

Subcommands:
  prepare-data  manifest of PGM images -> patch cache
  train         patch cache + sigma + loss kind -> checkpoint + loss CSV
  denoise       checkpoint + image(s) -> denoised image(s)
  eval          checkpoint + clean dir + sigma -> metrics report
  noise         clean image + sigma + seed -> noisy image
  selftest      gradient-check and SURE-unbiasedness suites

Exit codes: 0 success, 1 usage, 2 I/O, 3 file format, 4 numeric failure.
All randomness flows from --seed, fanned into named streams (init, data,
probes, eval) so components are independently reproducible.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data as dat
from . import evaluate as ev
from . import selftest as st
from .loss import NoiseModel
from .model import Denoiser, DenoiserConfig
from .numerics import RngStream
from .train import (STREAM_INIT, Checkpoint, CheckpointError, NumericError,
                    TrainConfig, checkpoint_load, checkpoint_save, train)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_FORMAT = 3
EXIT_NUMERIC = 4


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="suredenoise",
                description="Train and run an unsupervised (SURE) image denoiser.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    pd = sub.add_parser("prepare-data",
                        help="build a patch cache from a manifest of PGM images")
    pd.add_argument("--manifest", required=True, help="text file, one image path per line")
    pd.add_argument("--out", required=True, help="output patch cache file")
    pd.add_argument("--patch-size", type=int, default=40, help="square patch size (default 40)")
    pd.add_argument("--stride", type=int, default=10, help="patch stride (default 10)")
    pd.add_argument("--scales", default="1.0,0.9,0.8,0.7",
                    help="comma-separated rescale factors (default 1.0,0.9,0.8,0.7)")
    pd.add_argument("--modes", default="none,hflip",
                    help="comma-separated augmentations (default none,hflip)")

    tr = sub.add_parser("train",
                        help="train a denoiser on a patch cache")
    tr.add_argument("--data", required=True, help="patch cache from prepare-data")
    tr.add_argument("--loss", choices=["sure", "mse"], default="sure",
                    help="training objective (default sure)")
    tr.add_argument("--sigma", type=float, required=True,
                    help="known noise std on the 0-255 scale")
    tr.add_argument("--epochs", type=int, default=50, help="training epochs (default 50)")
    tr.add_argument("--batch", type=int, default=64, help="batch size (default 64)")
    tr.add_argument("--lr", type=float, default=1e-4, help="initial learning rate (default 1e-4)")
    tr.add_argument("--lr-drop", type=float, default=1e-5,
                    help="learning rate after the drop (default 1e-5)")
    tr.add_argument("--drop-epoch", type=int, default=25,
                    help="last epoch at the initial rate (default 25)")
    tr.add_argument("--depth", type=int, default=16, help="conv layers (default 16)")
    tr.add_argument("--width", type=int, default=64, help="hidden channels (default 64)")
    tr.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    tr.add_argument("--probes", type=int, default=1,
                    help="MC divergence probes per step (default 1)")
    tr.add_argument("--out", required=True, help="output checkpoint path")
    tr.add_argument("--log", required=True, help="output loss CSV path")

    dn = sub.add_parser("denoise",
                        help="denoise PGM image(s) with a trained checkpoint")
    dn.add_argument("--checkpoint", required=True, help="trained checkpoint")
    dn.add_argument("--out-dir", required=True, help="directory for denoised images")
    dn.add_argument("images", nargs="+", help="noisy PGM image(s)")

    evp = sub.add_parser("eval",
                         help="evaluate a checkpoint on clean images + synthetic noise")
    evp.add_argument("--checkpoint", required=True, help="trained checkpoint")
    evp.add_argument("--clean-dir", required=True, help="directory of clean PGM images")
    evp.add_argument("--sigma", type=float, required=True,
                     help="known noise std on the 0-255 scale")
    evp.add_argument("--seed", type=int, default=0, help="noise seed (default 0)")
    evp.add_argument("--csv", help="optional CSV report output path")

    no = sub.add_parser("noise",
                        help="add seeded Gaussian noise to a clean PGM image")
    no.add_argument("--input", required=True, help="clean PGM image")
    no.add_argument("--sigma", type=float, required=True,
                    help="noise std on the 0-255 scale")
    no.add_argument("--seed", type=int, default=0, help="noise seed (default 0)")
    no.add_argument("--output", required=True, help="noisy PGM output path")

    sub.add_parser("selftest",
                   help="run gradient-check and SURE-unbiasedness suites")
    return p


def _cmd_prepare_data(args) -> int:
    paths = dat.read_manifest(args.manifest)
    images, sources = [], []
    for p in paths:
        images.append(dat.load_pgm(p))
        sources.append(Path(p).name)
    scales = tuple(float(s) for s in args.scales.split(","))
    modes = tuple(m.strip() for m in args.modes.split(","))
    patches = dat.prepare_patches(images, sources, patch_size=args.patch_size,
                                  stride=args.stride, scales=scales, modes=modes)
    if len(patches) == 0:
        print("warning: no patches extracted (images smaller than patch size?)",
              file=sys.stderr)
    dat.save_patch_cache(patches, args.out)
    print(f"wrote {len(patches)} patches of size {patches.patch_size} to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    patches = dat.load_patch_cache(args.data)
    config = TrainConfig(
        loss_kind=args.loss, sigma_255=args.sigma, epochs=args.epochs,
        batch_size=args.batch, lr_initial=args.lr, lr_after_drop=args.lr_drop,
        drop_epoch=min(args.drop_epoch, args.epochs), seed=args.seed,
        probes_per_sample=args.probes,
        checkpoint_path=args.out, log_path=args.log,
    )
    print(f"config: loss={config.loss_kind} sigma={config.sigma_255} "
          f"epochs={config.epochs} batch={config.batch_size} "
          f"lr={config.lr_initial}->{config.lr_after_drop}@{config.drop_epoch} "
          f"depth={args.depth} width={args.width} seed={config.seed}")
    model = Denoiser(DenoiserConfig(depth=args.depth, width=args.width),
                     RngStream(config.seed, STREAM_INIT))
    _, rows = train(model, patches, config)
    print(f"trained {len(rows)} steps; final loss {rows[-1].loss:.6f}; "
          f"checkpoint {args.out}; log {args.log}")
    return EXIT_OK


def _load_model(path) -> Denoiser:
    ckpt = checkpoint_load(path)
    model = Denoiser(ckpt.config, RngStream(0, STREAM_INIT))
    ckpt.restore_into(model)
    return model


def _cmd_denoise(args) -> int:
    model = _load_model(args.checkpoint)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for img_path in args.images:
        noisy = dat.load_pgm(img_path)
        _, clipped, elapsed = ev.denoise_image(model, noisy)
        out_path = out_dir / Path(img_path).name
        dat.save_pgm(clipped, out_path)
        print(f"{img_path} -> {out_path} ({elapsed:.3f}s)")
    return EXIT_OK


def _cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    clean_dir = Path(args.clean_dir)
    paths = sorted(clean_dir.glob("*.pgm"))
    if not paths:
        print(f"error: no .pgm files in {clean_dir}", file=sys.stderr)
        return EXIT_IO
    report = ev.evaluate_set(model, paths, NoiseModel.from_255(args.sigma),
                             seed=args.seed, model_id=str(args.checkpoint))
    print(f"sigma={args.sigma} seed={args.seed} model={args.checkpoint}")
    print(report.to_table(), end="")
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8", newline="\n")
    return EXIT_OK


def _cmd_noise(args) -> int:
    clean = dat.load_pgm(args.input)
    rng = RngStream(args.seed, 0)
    sigma = args.sigma / 255.0
    noisy = clean.pixels + rng.normal(clean.pixels.shape, 0.0, sigma)
    dat.save_pgm(dat.GrayImage.from_array(np.clip(noisy, 0.0, 1.0)), args.output)
    print(f"{args.input} + N(0, {args.sigma}^2/255^2) -> {args.output}")
    return EXIT_OK


def run(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "prepare-data":
            return _cmd_prepare_data(args)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "denoise":
            return _cmd_denoise(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "noise":
            return _cmd_noise(args)
        if args.command == "selftest":
            return EXIT_OK if st.run_selftest() else EXIT_NUMERIC
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (dat.PgmError, dat.PatchCacheError, CheckpointError) as e:
        print(f"format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
