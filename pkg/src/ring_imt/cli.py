"""Command-line entry point: ``ring-imt {generate,train,eval,bench}``.

Exit codes: 0 success, 2 usage, 3 I/O or file format, 4 training
divergence, 5 incompatible weights / data. ``RING_IMT_THREADS`` caps the
BLAS thread count.
"""

from __future__ import annotations

import argparse
import collections
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .bench import step_latency
from .evaluation import (
    EmptyWindowError,
    ablation_grid,
    dead_reckoning,
    evaluate,
    identity_prediction,
    mae_deg,
    rate_sweep,
    write_table,
)
from .formats import FormatError, ShapeMismatchError, read_dataset, read_weights, write_dataset, write_weights
from .net import WidthMismatchError, init_params, ring_apply
from .rcmg import DEFAULT_RATES, AblationFlags, ImuModel, RcmgRanges, generate_batch
from .training import NonFiniteGradientError, TrainConfig, TrainingDivergedError, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_INCOMPATIBLE = 5

log = logging.getLogger("ring_imt")


class UsageError(Exception):
    pass


def parse_rates(text: str) -> list[float]:
    """``"40..200:20"`` (inclusive range with step) or ``"40,100,200"``."""
    text = text.strip()
    try:
        if ".." in text:
            lo, rest = text.split("..", 1)
            hi, _, step = rest.partition(":")
            lo, hi, step = float(lo), float(hi), float(step or 1)
            if step <= 0 or hi < lo:
                raise ValueError
            n = int(np.floor((hi - lo) / step + 1e-9)) + 1
            rates = [lo + k * step for k in range(n)]
        else:
            rates = [float(r) for r in text.split(",") if r.strip()]
    except ValueError:
        raise UsageError(f"cannot parse rates {text!r}") from None
    if not rates or min(rates) <= 0:
        raise UsageError("rates must be positive")
    return rates


def parse_flags(text: str) -> AblationFlags:
    try:
        return AblationFlags.from_names(text.replace("|", ",").split(",")) if text else AblationFlags()
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _ranges(args) -> RcmgRanges:
    return RcmgRanges.from_file(args.ranges) if getattr(args, "ranges", None) else RcmgRanges()


def cmd_generate(args) -> int:
    rates = parse_rates(args.rates)
    flags = parse_flags(args.flags)
    model = ImuModel.noiseless() if args.noiseless else ImuModel()
    pairs = generate_batch(args.seed, args.count, flags, rates, args.timesteps, model=model, ranges=_ranges(args))
    write_dataset(args.out, pairs)
    hist = collections.Counter(p.F for p in pairs)
    print(f"wrote {len(pairs)} sequences, T={args.timesteps}, to {args.out}")
    print("flags: " + (", ".join(flags.names()) or "none"))
    for F in sorted(hist):
        print(f"  {F:7.1f} Hz  {hist[F]}")
    return EXIT_OK


def cmd_train(args) -> int:
    pairs = read_dataset(args.data)
    n_val = int(len(pairs) * args.val_fraction)
    train_pairs, val_pairs = pairs[: len(pairs) - n_val], pairs[len(pairs) - n_val :]
    cfg = TrainConfig(
        H=args.H,
        M=args.M,
        batch_size=min(args.batch_size, len(train_pairs)),
        steps=args.steps,
        lr=args.lr,
        warmup_s=args.warmup,
        truncate=args.truncate,
        val_every=args.val_every if val_pairs else 0,
        val_exclude_s=args.val_exclude,
        seed=args.seed,
    )
    log_path = args.log or str(args.out_weights) + ".log.jsonl"
    Path(log_path).write_text("")
    params, records = train(cfg, data=train_pairs, val_data=val_pairs, log_file=log_path)
    write_weights(args.out_weights, params)
    last = records[-1] if records else None
    print(f"wrote weights H={params.H} M={params.M} ({params.size} parameters) to {args.out_weights}")
    if last:
        val = "n/a" if last["val_mae"] is None else f"{last['val_mae']:.2f} deg"
        print(f"final loss {last['loss']:.5f}, validation MAE {val}")
    return EXIT_OK


def _predictor(args, params):
    if args.predictor == "ring":
        return lambda p: ring_apply(p.X, p.parents, params)
    if args.predictor == "dead-reckoning":
        return dead_reckoning
    if args.predictor == "identity":
        return identity_prediction
    return lambda p: p.Y  # "target": sanity check of the metric


def cmd_eval(args) -> int:
    params = None
    if args.predictor == "ring":
        if not args.weights:
            raise UsageError("--weights is required for the ring predictor")
        params = read_weights(args.weights, args.H, args.M)
    predict = _predictor(args, params)
    out = sys.stdout
    pairs = read_dataset(args.data) if args.data else []
    if pairs:
        maes = []
        per_body = []
        for p in pairs:
            total, bodies = mae_deg(predict(p), p.Y, p.parents, p.F, args.exclude, per_body=True)
            maes.append(total)
            per_body.append(bodies)
        rows = [[k, f"{p.F:.1f}", f"{m:.3f}"] + [f"{b:.3f}" for b in pb] for k, (p, m, pb) in enumerate(zip(pairs, maes, per_body))]
        n = len(per_body[0])
        write_table(rows, ["sequence", "rate_hz", "mae_deg"] + [f"body{i + 1}_deg" for i in range(n)], out)
        print(f"# MAE {np.mean(maes):.3f} +- {np.std(maes):.3f} deg over {len(pairs)} sequences "
              f"(first {args.exclude} s excluded)", file=out)
    if args.sweep_rates:
        if not pairs:
            raise UsageError("--sweep-rates needs --data")
        sweep = rate_sweep(predict, pairs, parse_rates(args.sweep_rates), args.exclude)
        rows = [[f"{F:.1f}", f"{m:.3f}", f"{s:.3f}"] for F, m, s in sweep]
        print("# sampling-rate sweep", file=out)
        write_table(rows, ["rate_hz", "mae_deg", "std_deg"], out)
        if args.plot_data:
            with open(args.plot_data, "w") as fh:
                write_table(rows, ["rate_hz", "mae_deg", "std_deg"], fh, delimiter=",")
    if args.ablation:
        seeds = list(range(args.ablation_seed, args.ablation_seed + args.ablation_count))
        grid = ablation_grid(predict, seeds, args.ablation_rate, args.ablation_timesteps, args.exclude)
        print("# ablation", file=out)
        write_table([r.as_row() for r in grid], ["nonrigid", "misaligned", "sparse", "mae_deg", "std_deg"], out)
    if not (pairs or args.ablation):
        raise UsageError("nothing to evaluate: give --data and/or --ablation")
    return EXIT_OK


def cmd_bench(args) -> int:
    params = read_weights(args.weights) if args.weights else init_params(args.H, args.M, 0)
    report = step_latency(params, args.N, args.iterations, warmup=min(50, args.iterations))
    print(f"N={args.N} H={params.H} M={params.M}")
    for line in report.lines(parse_rates(args.rates)):
        print(line)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ring-imt", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a training dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=512)
    g.add_argument("--timesteps", type=int, default=6000)
    g.add_argument("--rates", default="40..200:20")
    g.add_argument("--flags", default="", help="comma list of nonrigid, misaligned, sparse")
    g.add_argument("--ranges", help="key = value file overriding randomization ranges")
    g.add_argument("--noiseless", action="store_true")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train on a dataset file")
    t.add_argument("--data", required=True)
    t.add_argument("--H", type=int, default=256)
    t.add_argument("--M", type=int, default=128)
    t.add_argument("--steps", type=int, default=1000)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--lr", type=float, default=3e-4)
    t.add_argument("--warmup", type=float, default=5.0, help="seconds excluded from the loss")
    t.add_argument("--truncate", type=int, default=None)
    t.add_argument("--val-fraction", type=float, default=0.0)
    t.add_argument("--val-every", type=int, default=100)
    t.add_argument("--val-exclude", type=float, default=5.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--log")
    t.add_argument("--out-weights", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="tracking error tables")
    e.add_argument("--data")
    e.add_argument("--weights")
    e.add_argument("--H", type=int, default=None)
    e.add_argument("--M", type=int, default=None)
    e.add_argument("--predictor", choices=["ring", "dead-reckoning", "identity", "target"], default="ring")
    e.add_argument("--exclude", type=float, default=5.0)
    e.add_argument("--sweep-rates", help='e.g. "40..200:20"')
    e.add_argument("--plot-data", help="CSV file for the rate sweep")
    e.add_argument("--ablation", action="store_true")
    e.add_argument("--ablation-seed", type=int, default=1000)
    e.add_argument("--ablation-count", type=int, default=4)
    e.add_argument("--ablation-rate", type=float, default=100.0)
    e.add_argument("--ablation-timesteps", type=int, default=6000)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="step latency benchmark")
    b.add_argument("--weights")
    b.add_argument("--H", type=int, default=32)
    b.add_argument("--M", type=int, default=16)
    b.add_argument("--N", type=int, default=3)
    b.add_argument("--iterations", type=int, default=1000)
    b.add_argument("--rates", default="40..200:20")
    b.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    threads = os.environ.get("RING_IMT_THREADS")
    try:
        with threadpool_limits(limits=int(threads) if threads else None):
            return args.func(args)
    except (UsageError, EmptyWindowError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (WidthMismatchError, ShapeMismatchError) as exc:
        print(f"incompatible: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (TrainingDivergedError, NonFiniteGradientError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
