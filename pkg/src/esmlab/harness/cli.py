"""``esmlab`` command line. Every RunConfig field is also a ``--section.field`` flag."""
from __future__ import annotations

import argparse
import logging
import sys
import typing
from pathlib import Path

from pydantic import BaseModel

from .. import io
from ..diffcore import ContractError, NumericError
from . import commands, verify
from .config import OUTPUT_ROOT_ENV, ConfigError, RunConfig, load_config, resolve_output

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3

COMMANDS = {
    "train-denoiser": commands.cmd_train_denoiser,
    "roundtrip": commands.cmd_roundtrip,
    "distill": commands.cmd_distill,
    "sweep": commands.cmd_sweep,
    "init-compare": commands.cmd_init_compare,
}

# short spellings for the flags people type most
ALIASES = {"--loss": "distill.loss", "--iterations": "distill.iterations", "--parameter": "sweep.parameter",
           "--values": "sweep.values", "--seeds": "sweep.seeds"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2, which is reserved for numeric failures
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _is_list(annotation) -> bool:
    return typing.get_origin(annotation) is list


def _leaf_fields(model: type[BaseModel], prefix: str = ""):
    for name, field in model.model_fields.items():
        ann = field.annotation
        if isinstance(ann, type) and issubclass(ann, BaseModel):
            yield from _leaf_fields(ann, f"{prefix}{name}.")
        elif name != "schema_version":
            yield f"{prefix}{name}", field


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run config (unknown keys are rejected)")
    g = p.add_argument_group("config fields")
    for path, field in _leaf_fields(RunConfig):
        flag = "--" + path.replace("_", "-") if "." not in path else "--" + path
        g.add_argument(flag, dest=path, default=None, metavar="LIST" if _is_list(field.annotation) else "VALUE",
                       help=field.description)
    for alias, path in ALIASES.items():
        g.add_argument(alias, dest=path, default=None, help=f"same as --{path}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="esmlab", description="Toy-scale exact score matching laboratory.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        _add_config_flags(sub.add_parser(name))
    v = sub.add_parser("verify", help="run the invariant suite")
    v.add_argument("--output-dir", default=None)
    v.add_argument("--inject-fault", choices=verify.FAULTS, default=None)
    return parser


def _updates(args: argparse.Namespace) -> dict:
    lists = {path for path, f in _leaf_fields(RunConfig) if _is_list(f.annotation)}
    out = {}
    for path, _ in _leaf_fields(RunConfig):
        raw = getattr(args, path, None)
        if raw is None:
            continue
        out[path] = [v for v in raw.split(",") if v != ""] if path in lists else raw
    return out


def _base_config(args) -> Path | None:
    if args.config is None and getattr(args, "resume", None):
        resumed = Path(args.resume) / "config.json"
        return resumed if resumed.is_file() else None
    return args.config


def _run_verify(args) -> int:
    rows = verify.run_checks(args.inject_fault)
    out = resolve_output(RunConfig(output_dir=args.output_dir), "verify")
    out.mkdir(parents=True, exist_ok=True)
    io.write_csv(out / "verify.csv", rows, verify.REPORT_COLUMNS)
    width = max(len(f"{r['module']}.{r['property']}") for r in rows)
    for r in rows:
        tag = "PASS" if r["passed"] else "FAIL"
        print(f"{tag}  {r['module'] + '.' + r['property']:<{width}}  measured={r['measured']:.3g} "
              f"threshold={r['threshold']:.3g}  ({r['seconds']:.2f}s) {r['detail']}")
    failed = [r for r in rows if not r["passed"]]
    print(f"{len(rows) - len(failed)}/{len(rows)} properties hold; report: {out / 'verify.csv'}")
    return EXIT_VERIFY if failed else EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "verify":
        return _run_verify(args)
    try:
        cfg = load_config(_base_config(args), _updates(args))
        out = COMMANDS[args.command](cfg)
    except (ConfigError, ContractError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    print(out)
    return EXIT_OK


def entry() -> None:
    sys.exit(main())


__all__ = ["main", "build_parser", "OUTPUT_ROOT_ENV"]
