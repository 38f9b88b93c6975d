"""Command-line entry point: ``stgraph <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys

from .estimator import ConfigError, NumericalError
from .experiments import (
    coerce_overrides,
    preset,
    read_config_file,
    run_diagnose_bound,
    run_external_stream,
    run_hidden_sweep,
    run_synthetic_iters,
    write_diagnostics,
    write_result,
)
from .graph import InvalidDimensionError, InvalidPartitionError
from .signals import IngestionError, ModelError

EXIT_OK, EXIT_CONFIG, EXIT_INGEST, EXIT_NUMERIC = 0, 2, 3, 4

SUBCOMMANDS = {
    "synth-iters": "synthetic-iters",
    "hidden-sweep": "hidden-sweep",
    "stream": "external-stream",
    "diagnose-bound": "diagnose-bound",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="stgraph", description="Online graph topology inference with hidden nodes.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "synth-iters": "synthetic stream, compare inner-iteration counts",
        "hidden-sweep": "synthetic stream, sweep the number of hidden nodes",
        "stream": "external signal CSV against a full-node batch reference",
        "diagnose-bound": "tracking-bound diagnostics on a small static scene",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--seed", type=int)
        p.add_argument("--trials", type=int)
        p.add_argument("--out", required=True, help="output CSV path")
        p.add_argument("--config", help="flat 'key = value' file")
        p.add_argument("--workers", type=int, help="parallel trial processes")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any configuration key (repeatable)")
        if name == "stream":
            p.add_argument("--signals", required=True, help="input CSV, one column per node")
    return ap


def resolve_spec(args):
    overrides: dict[str, object] = {}
    if args.config:
        overrides.update(read_config_file(args.config))
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip().replace("-", "_")] = v.strip()
    for key in ("seed", "trials", "workers"):
        val = getattr(args, key)
        if val is not None:
            overrides[key] = val
    kind = SUBCOMMANDS[args.command]
    if overrides.get("kind", kind) != kind:
        raise ConfigError(f"config kind {overrides['kind']!r} does not match subcommand {args.command!r}")
    overrides.pop("kind", None)
    return preset(kind, **coerce_overrides(overrides)).validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = resolve_spec(args)
        if args.command == "diagnose-bound":
            diag = run_diagnose_bound(spec)
            paths = write_diagnostics(diag, spec, args.out)
            print(f"bound satisfied at {sum(diag.satisfied)}/{len(diag.satisfied)} diagnostic times "
                  f"(rate {diag.satisfaction_rate:.3f})")
        else:
            if args.command == "synth-iters":
                result = run_synthetic_iters(spec)
            elif args.command == "hidden-sweep":
                result = run_hidden_sweep(spec)
            else:
                result = run_external_stream(spec, args.signals)
            paths = write_result(result, args.out)
            for lab in result.labels:
                print(f"{lab:>18s}  final median err {result.final_median(lab):.4g}")
        print("wrote " + ", ".join(paths))
        return EXIT_OK
    except (ConfigError, InvalidPartitionError, InvalidDimensionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestionError, FileNotFoundError) as exc:
        print(f"ingestion error: {exc}", file=sys.stderr)
        return EXIT_INGEST
    except (NumericalError, ModelError, FloatingPointError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
