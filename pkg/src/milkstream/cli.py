"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 numeric failure, 3 io or format error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .attention import KINDS
from .errors import FormatError, InvalidArgument, NumericFailure, VersionError

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", metavar="PATH", help="key=value config with [section] headers")
    p.add_argument("--attention", metavar="KIND", choices=KINDS)
    p.add_argument("--latency-weight", type=float, metavar="LAMBDA")
    p.add_argument("--k", type=int, metavar="N", help="wait-k lag")
    p.add_argument("--chunk-size", type=int, metavar="N")
    p.add_argument("--noise", type=float, metavar="N", help="stddev of energy noise in training")
    p.add_argument("--emission-rate", type=float, metavar="R")
    p.add_argument("--seed", type=int, metavar="N")
    p.add_argument("--out", metavar="DIR")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="milkstream", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("train", help="train one model and evaluate it on the test split")
    _common(p)
    p = sub.add_parser("sweep", help="latency-quality curves over the lambda / k / cs grids")
    _common(p)
    p = sub.add_parser("decode", help="streaming decode of a tokenised input file")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("input")
    p = sub.add_parser("dump-attention", help="attention matrix and head path for one sentence")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("sentence", nargs="+")
    p = sub.add_parser("delay-histogram", help="initial-delay histogram of trace files")
    _common(p)
    p.add_argument("traces", nargs="+")
    p = sub.add_parser("eval-latency", help="recompute AP/AL/DAL from trace files")
    _common(p)
    p.add_argument("traces", nargs="+")
    return parser


def _config(args) -> harness.RunConfig:
    cfg = harness.load_config(args.config) if args.config else harness.RunConfig()
    return harness.apply_overrides(
        cfg, attention=args.attention, latency_weight=args.latency_weight, k=args.k,
        chunk_size=args.chunk_size, noise=args.noise, emission_rate=args.emission_rate,
        seed=args.seed, out=args.out)


def _out_dir(cfg) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    harness.write_config(cfg, out / "effective_config.ini")
    return out


def _print_rows(rows, keys):
    print("\t".join(keys))
    for r in rows:
        print("\t".join(harness._num(r[k]) if isinstance(r[k], float) else str(r[k]) for k in keys))


def run(args) -> int:
    cfg = _config(args)
    if args.command == "train":
        m = harness.run_train(cfg)
        print(" ".join(f"{k}={harness._num(v)}" for k, v in sorted(m.items())))
    elif args.command == "sweep":
        def show(rec):
            print(",".join(rec.csv_row()), flush=True)
        print(",".join(harness.CSV_HEADER))
        harness.run_sweep(cfg, progress=show)
    elif args.command == "decode":
        out = _out_dir(cfg)
        summaries = harness.run_decode(args.checkpoint, args.input, out, args.k, args.emission_rate)
        _print_rows(summaries, ["sentence", "AP", "AL", "DAL"])
    elif args.command == "dump-attention":
        out = _out_dir(cfg)
        res = harness.dump_attention(args.checkpoint, " ".join(args.sentence), out,
                                     args.k, args.emission_rate)
        print("heads", " ".join(map(str, res.heads)))
    elif args.command == "delay-histogram":
        out = _out_dir(cfg)
        hist = harness.initial_delay_histogram(args.traces)
        harness.write_histogram(hist, out / "delay_histogram.csv", out / "delay_histogram.svg")
        for name, counts in hist.items():
            bins = " ".join(f"{b}:{c}" for b, c in sorted(counts.items()))
            print(f"{name}\tvariance={harness.histogram_variance(counts):.4f}\t{bins}")
    elif args.command == "eval-latency":
        rows = harness.latency_table(args.traces)
        _print_rows(rows, ["system", "sentences", "AP", "AL", "DAL", "max_summary_diff"])
        if any(r["max_summary_diff"] > 1e-9 for r in rows):
            raise NumericFailure("recomputed metrics disagree with the stored summaries")
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (InvalidArgument, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, VersionError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
