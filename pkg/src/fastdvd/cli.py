"""Command-line entry point: ``fastdvd {denoise,train,add-noise,psnr,bench}``.

Exit codes: 0 success, 1 usage error, 2 I/O error, 3 numeric failure.
``FASTDVD_THREADS`` caps the BLAS thread pool.
"""

import argparse
import logging
import os
import sys
import time

from threadpoolctl import threadpool_limits

from . import __version__
from .errors import (ConfigError, FastDVDError, SequenceIOError, TrainingDivergedError,
                     WeightsFormatError)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _sigma(text):
    v = float(text)
    if not 0 <= v <= 255:
        raise argparse.ArgumentTypeError(f"sigma must be in [0, 255], got {text}")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser():
    p = _Parser(prog="fastdvd", description="Video denoising with a two-step cascade.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("denoise", help="denoise a directory of PNG frames")
    d.add_argument("--input", required=True, help="directory of noisy frames")
    d.add_argument("--output", required=True, help="directory for denoised frames")
    d.add_argument("--sigma", required=True, type=_sigma, help="noise std on the 0-255 scale")
    d.add_argument("--weights", required=True, help="weights file")
    d.add_argument("--no-streaming", action="store_true",
                   help="recompute every first-stage block (slower, same output)")

    t = sub.add_parser("train", help="train a model on a directory of sequences")
    t.add_argument("--data", required=True, help="directory of frame subdirectories")
    t.add_argument("--config", required=True, help="key=value training config")
    t.add_argument("--out", required=True, help="output weights file")
    t.add_argument("--log", help="loss log path (default: OUT.log)")
    t.add_argument("--checkpoints", help="checkpoint directory (default: OUT.checkpoints)")
    t.add_argument("--prefetch", type=int, default=2, help="batches prepared ahead")

    a = sub.add_parser("add-noise", help="add Gaussian noise to frames")
    a.add_argument("--input", required=True)
    a.add_argument("--output", required=True)
    a.add_argument("--sigma", required=True, type=_sigma)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--clip", action="store_true", help="clamp noisy values to [0, 1]")

    s = sub.add_parser("psnr", help="PSNR between two frame directories")
    s.add_argument("--clean", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--csv", help="write per-frame values to this file")

    b = sub.add_parser("bench", help="per-frame latency on random frames")
    b.add_argument("--weights", help="weights file (default: freshly initialized model)")
    b.add_argument("--width", type=_positive, default=960)
    b.add_argument("--height", type=_positive, default=540)
    b.add_argument("--frames", type=_positive, default=20)
    b.add_argument("--sigma", type=_sigma, default=25.0)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--streaming", action="store_true",
                   help="also time the cached pipeline and report the speedup")
    return p


def _need_dir(path, what):
    if not os.path.isdir(path):
        raise FileNotFoundError(f"{what} directory not found: {path}")


def _need_file(path, what):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"{what} file not found: {path}")


def _writable_dir(path, what):
    if os.path.exists(path) and not os.path.isdir(path):
        raise UsageError(f"{what} exists and is not a directory: {path}")


def _parent_exists(path, what):
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise FileNotFoundError(f"{what} parent directory not found: {parent}")


def cmd_denoise(args):
    from .video import denoise_sequence, load_sequence, save_sequence
    from .weights_io import load_weights
    _need_dir(args.input, "input")
    _need_file(args.weights, "weights")
    _writable_dir(args.output, "output")
    weights = load_weights(args.weights)
    seq = load_sequence(args.input)
    start = time.perf_counter()
    out = denoise_sequence(seq, args.sigma, weights, streaming=not args.no_streaming)
    elapsed = time.perf_counter() - start
    save_sequence(out, args.output)
    print(f"denoised {len(out)} frames in {elapsed:.2f} s "
          f"({elapsed / len(out) * 1e3:.1f} ms/frame)")


def cmd_train(args):
    from .model import init_weights
    from .train import load_dataset, load_train_config, train
    from .weights_io import save_weights
    _need_dir(args.data, "data")
    _need_file(args.config, "config")
    _parent_exists(args.out, "output")
    if args.prefetch < 0:
        raise UsageError("--prefetch must be >= 0")
    config = load_train_config(args.config)
    log_path = args.log or f"{args.out}.log"
    ckpt = args.checkpoints or f"{args.out}.checkpoints"
    _parent_exists(log_path, "log")
    _writable_dir(ckpt, "checkpoint")
    dataset = load_dataset(args.data)
    weights = init_weights(config.variant, config.channels, config.seed)

    def progress(epoch, loss):
        print(f"epoch {epoch + 1}/{config.epochs} mean loss {loss:.6g}", flush=True)

    result = train(weights, dataset, config, log_file=log_path, checkpoint_dir=ckpt,
                   prefetch=args.prefetch, progress=progress)
    save_weights(result.weights, args.out)
    print(f"wrote {args.out}")


def cmd_add_noise(args):
    from .video import NoiseSpec, add_awgn, load_sequence, save_sequence
    _need_dir(args.input, "input")
    _writable_dir(args.output, "output")
    seq = load_sequence(args.input)
    save_sequence(add_awgn(seq, NoiseSpec(args.sigma, args.clip, args.seed)), args.output)
    print(f"wrote {len(seq)} noisy frames to {args.output}")


def cmd_psnr(args):
    from .metrics import psnr_sequence
    from .video import load_sequence
    _need_dir(args.clean, "clean")
    _need_dir(args.test, "test")
    if args.csv:
        _parent_exists(args.csv, "csv")
    clean, test = load_sequence(args.clean), load_sequence(args.test)
    if len(clean) != len(test):
        raise UsageError(f"frame counts differ: {len(clean)} clean vs {len(test)} test")
    report = psnr_sequence(clean, test)
    if args.csv:
        report.write_csv(args.csv)
    print(report.text())


def cmd_bench(args):
    from .bench import WARMUP_FRAMES, run_benchmark
    from .model import init_weights
    from .weights_io import load_weights
    if args.frames <= WARMUP_FRAMES:
        raise UsageError(f"--frames must exceed the {WARMUP_FRAMES} warm-up frames")
    if args.weights:
        _need_file(args.weights, "weights")
        weights = load_weights(args.weights)
    else:
        weights = init_weights(seed=args.seed)
    report = run_benchmark(weights, args.width, args.height, args.frames, args.sigma,
                           streaming=args.streaming, seed=args.seed)
    for line in report.lines():
        print(line)


COMMANDS = {
    "denoise": cmd_denoise,
    "train": cmd_train,
    "add-noise": cmd_add_noise,
    "psnr": cmd_psnr,
    "bench": cmd_bench,
}


def _thread_limit():
    raw = os.environ.get("FASTDVD_THREADS", "").strip()
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise UsageError(f"FASTDVD_THREADS must be a positive integer, got {raw!r}")
    return n


def _fail(code, message):
    print(f"fastdvd: error: {message}", file=sys.stderr)
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        threads = _thread_limit()
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=threads):
            COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        return _fail(EXIT_USAGE, exc)
    except (OSError, SequenceIOError, WeightsFormatError) as exc:
        return _fail(EXIT_IO, exc)
    except (TrainingDivergedError, FloatingPointError, FastDVDError, ValueError) as exc:
        return _fail(EXIT_NUMERIC, exc)
    except KeyboardInterrupt:
        return _fail(EXIT_USAGE, "interrupted")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
