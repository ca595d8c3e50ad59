"""Command-line entry point: ``mambair {train,infer,erf,bench,channels,selftest}``."""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import diagnostics
from .blocks import init_state
from .pipeline.checkpoint import CheckpointError
from .pipeline.config import ConfigError, load_config
from .pipeline.data import synthetic_corpus
from .pipeline.imageio import ImageFormatError, image_read, image_write, list_images
from .pipeline.train import (NumericError, load_images, load_state, run_model,
                             self_ensemble_infer, train)

EXIT_OK, EXIT_SELFTEST, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4
SYNTHETIC_TRAIN = (64, 32, 0)   # count, side, seed offset
SYNTHETIC_EVAL = (8, 32, 1)

log = logging.getLogger("mambair")


def _configs(args):
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def _model(args):
    """Model state from ``--checkpoint`` or freshly initialised from the config."""
    if getattr(args, "checkpoint", None):
        state, _, _ = load_state(args.checkpoint)
        return state
    mcfg, tcfg = _configs(args)
    return init_state(mcfg, tcfg.seed, identity_head=getattr(args, "identity_init", False))


def _synthetic(corpus, seed):
    count, side, offset = corpus
    return synthetic_corpus(count, side, seed + offset)


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def cmd_train(args) -> int:
    mcfg, tcfg = _configs(args)
    images = args.input if args.input else _synthetic(SYNTHETIC_TRAIN, tcfg.seed)
    if args.eval:
        held = load_images(args.eval)
    else:
        held = None if args.input else _synthetic(SYNTHETIC_EVAL, tcfg.seed)
    log_path = args.log or os.path.splitext(args.out)[0] + ".csv"
    state = init_state(mcfg, tcfg.seed, identity_head=args.identity_init)
    rep, state = train(mcfg, tcfg, images, args.out, log_path, eval_images=held, resume=args.resume,
                       state=None if args.resume else state)
    msg = f"trained {rep.steps} steps in {rep.seconds:.1f}s -> {args.out}"
    if held:
        msg += f"; Y-PSNR {rep.psnr:.3f} dB (baseline {rep.baseline_psnr:.3f} dB)"
    print(msg)
    return EXIT_OK


def cmd_infer(args) -> int:
    state = _model(args)
    if not args.input:
        raise ConfigError("infer needs --input (an image file or a directory)")
    if os.path.isdir(args.input):
        pairs = [(p, os.path.join(args.out, os.path.basename(p))) for p in list_images(args.input)]
        os.makedirs(args.out, exist_ok=True)
    else:
        pairs = [(args.input, args.out)]
    model = (lambda x: run_model(state, x))
    for src, dst in pairs:
        lq = image_read(src)
        out = self_ensemble_infer(model, lq) if args.ensemble else model(lq)
        image_write(dst, out)
        print(f"{src} -> {dst}")
    return EXIT_OK


def cmd_erf(args) -> int:
    state = _model(args)
    size = (args.size, args.size)
    erf = diagnostics.compute_erf(diagnostics.model_fn(state), size, state.config.in_channels,
                                  mode=args.mode, seed=args.seed or 0)
    stem = os.path.splitext(args.out)[0]
    image_write(stem + ".pgm", diagnostics.erf_pgm(erf))
    _write_text(stem + ".csv", diagnostics.erf_csv(erf))
    print(f"ERF {size[0]}x{size[1]} ({args.mode}): min raw {erf.raw.min():.3e}, "
          f"nonzero {int(np.count_nonzero(erf.raw))}/{erf.raw.size} -> {stem}.pgm, {stem}.csv")
    return EXIT_OK


def cmd_bench(args) -> int:
    state = _model(args)
    sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    variants = args.variant or list(diagnostics.BENCH_VARIANTS)
    records, slopes = diagnostics.complexity_bench(state, sizes, variants, repeats=args.repeats)
    _write_text(args.out, diagnostics.bench_csv(records))
    for name, slope in slopes.items():
        print(f"{name}: log-log slope {slope:.3f}")
    return EXIT_OK


def cmd_channels(args) -> int:
    state = _model(args)
    _, tcfg = _configs(args)
    if args.input:
        inputs = np.stack(load_images(args.input))
    else:
        inputs = np.stack(_synthetic(SYNTHETIC_EVAL, tcfg.seed))
    stats = diagnostics.channel_activation_stats(state, inputs)
    _write_text(args.out, diagnostics.channel_csv(stats))
    print(f"near-zero channel fraction {stats.near_zero_fraction:.3f} -> {args.out}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import all_passed, run_selftest
    return EXIT_OK if all_passed(run_selftest()) else EXIT_SELFTEST


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    common.add_argument("--seed", type=int, help="seed for initialisation, sampling and noise")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mambair", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model and write a checkpoint")
    p.add_argument("--input", metavar="DIR", help="HQ training images (default: synthetic corpus)")
    p.add_argument("--eval", metavar="DIR", help="held-out HQ images")
    p.add_argument("--out", default="mambair.ckpt", metavar="PATH", help="checkpoint path")
    p.add_argument("--log", metavar="PATH", help="CSV metrics log (default: next to the checkpoint)")
    p.add_argument("--resume", metavar="PATH", help="continue from a checkpoint")
    p.add_argument("--identity-init", action="store_true", help="zero the output head before training")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="restore an image or a directory of images")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--identity-init", action="store_true", help="without a checkpoint: zero the output head")
    p.add_argument("--input", metavar="PATH")
    p.add_argument("--out", default="restored.ppm", metavar="PATH")
    p.add_argument("--ensemble", action="store_true", help="average over the 8 dihedral transforms")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("erf", parents=[common], help="effective receptive field heatmap")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--mode", choices=("gray", "random"), default="gray")
    p.add_argument("--out", default="erf.pgm", metavar="PATH")
    p.set_defaults(func=cmd_erf)

    p = sub.add_parser("bench", parents=[common], help="forward-time scaling against full attention")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--variant", action="append", choices=diagnostics.BENCH_VARIANTS)
    p.add_argument("--sizes", default="48,60,72,84,96")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", default="bench.csv", metavar="PATH")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("channels", parents=[common], help="per-channel activation of the last VSSM")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--input", metavar="DIR")
    p.add_argument("--out", default="channels.csv", metavar="PATH")
    p.set_defaults(func=cmd_channels)

    p = sub.add_parser("selftest", parents=[common], help="run the built-in equivalence checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        if isinstance(exc, (ImageFormatError, CheckpointError)):
            print(f"mambair: I/O error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"mambair: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"mambair: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, FloatingPointError) as exc:
        print(f"mambair: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC

