"""Command line front-end: ``fedclaims generate|run|report|serve``.

Exit codes: 0 success, 2 configuration/data/report error, 3 training error,
4 protocol or orchestration error, 130 interrupted.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from . import __version__
from .config import load_config
from .errors import (
    AggregationError,
    ChannelError,
    ConfigError,
    DecodeError,
    FedClaimsError,
    IngestionError,
    InputError,
    ModelFileError,
    NumericError,
    OrchestrationError,
    ProtocolError,
    ReportError,
    ShapeError,
    TrainingDivergedError,
    UndefinedDenominatorError,
)
from .metrics import EvaluationReport, comparison_report

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING, EXIT_PROTOCOL, EXIT_INTERRUPTED = 0, 2, 3, 4, 130

_EXIT_CODES = (
    ((ConfigError, IngestionError, ReportError, InputError, ShapeError, ModelFileError,
      UndefinedDenominatorError), EXIT_CONFIG),
    ((TrainingDivergedError, NumericError, AggregationError), EXIT_TRAINING),
    ((ProtocolError, OrchestrationError, ChannelError, DecodeError), EXIT_PROTOCOL),
)


def exit_code(exc: BaseException) -> int:
    for kinds, code in _EXIT_CODES:
        if isinstance(exc, kinds):
            return code
    return 1


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"{text} is not an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedclaims", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment TOML file")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=_u64, help="experiment seed (overrides seed)")

    p = sub.add_parser("generate", help="write per-collaborator train/test CSVs and a manifest")
    common(p)

    p = sub.add_parser("run", help="train local, HFL or VFL models and evaluate them")
    common(p)
    p.add_argument("--mode", required=True, choices=("local", "hfl", "vfl"))
    p.add_argument("--transport", choices=("inproc", "socket"), help="overrides transport.kind")

    p = sub.add_parser("report", help="render local-vs-federated comparison tables")
    p.add_argument("reports", nargs="+", help="report.jsonl files from local and federated runs")
    p.add_argument("--entity", help="row label prefix (default: Collaborator for HFL, Company for VFL)")

    p = sub.add_parser("serve", help="run one protocol role as its own process over TCP")
    common(p)
    p.add_argument("--role", required=True, nargs="+", metavar="ROLE",
                   help="aggregator | collaborator <id> | label-worker | feature-worker <id>")
    p.add_argument("--address", help="overrides transport.address")
    p.add_argument("--protocol-version", type=int, help=argparse.SUPPRESS)
    return parser


def _config(args):
    cfg = load_config(args.config).with_overrides(seed=args.seed, output_dir=args.out)
    if getattr(args, "transport", None):
        cfg = replace(cfg, transport=replace(cfg.transport, kind=args.transport))
    if getattr(args, "address", None):
        cfg = replace(cfg, transport=replace(cfg.transport, address=args.address))
    return cfg


def cmd_generate(args) -> int:
    from .experiment import generate

    out = generate(_config(args))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    from .experiment import run

    cfg = _config(args)
    cfg.check_mode(args.mode)
    out, result = run(cfg, args.mode)
    for r in result.rows:
        print(f"{r.collaborator:>8} {r.split:<5} {r.mode:<5} PE {r.pe:+.4f}  MSE {r.mse:.6g}  n={r.n}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for path in args.reports:
        rows.extend(EvaluationReport.read(path).rows)
    report = EvaluationReport()
    report.extend(rows)  # rejects duplicated (collaborator, split, mode) across files
    local = report.by_mode("local")
    federated = [r for r in report.rows if r.mode != "local"]
    modes = sorted({r.mode for r in federated})
    if len(modes) != 1:
        raise ReportError(f"need rows from exactly one federated mode, found {modes or 'none'}")
    entity = args.entity or ("Company" if modes[0] == "vfl" else "Collaborator")
    sys.stdout.write(comparison_report(local, federated, entity))
    return EXIT_OK


def cmd_serve(args) -> int:
    from .experiment import serve

    role, *rest = args.role
    needs_id = role in ("collaborator", "feature-worker")
    if role not in ("aggregator", "collaborator", "label-worker", "feature-worker"):
        raise ConfigError(f"unknown role {role!r}")
    if needs_id != (len(rest) == 1) or len(rest) > 1:
        raise ConfigError(f"role {role} takes {'one id' if needs_id else 'no arguments'}")
    try:
        role_id = int(rest[0]) if rest else None
    except ValueError:
        raise ConfigError(f"collaborator id must be an integer, got {rest[0]!r}") from None

    def ready(address):
        print(f"listening on {address}", flush=True)

    out = serve(_config(args), role, role_id, args.protocol_version, ready)
    print(f"wrote {out}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "run": cmd_run, "report": cmd_report, "serve": cmd_serve}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except KeyboardInterrupt:
        print("fedclaims: interrupted", file=sys.stderr)
        return EXIT_INTERRUPTED
    except FedClaimsError as exc:
        kind = type(exc).__name__
        print(f"fedclaims: {kind}: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
