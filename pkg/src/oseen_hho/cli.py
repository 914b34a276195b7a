"""Command-line driver: ``oseen-hho run ...`` writes a convergence table as CSV."""
from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

from .cases import CaseConsistencyError, kovasznay_case
from .hho_local import AdvectiveStabilization, StabilizationChoice, ViscousStabilization
from .mesh import MeshError, generate_mesh, load_mesh
from .study import StudyFailure, load_manufactured_file, run_convergence_study

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2

MESH_KINDS = ("triangular", "cartesian", "hexagonal-dominant")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _positive_float(flag):
    def parse(text):
        try:
            value = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{flag} expects a number, got {text!r}") from None
        if not (value > 0.0 and math.isfinite(value)):
            raise argparse.ArgumentTypeError(f"{flag} must be positive and finite, got {text!r}")
        return value

    return parse


def _int_list(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--refinements expects comma-separated integers, got {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError("--refinements entries must be positive integers")
    return values


def _advective(text):
    try:
        return AdvectiveStabilization.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"--stabilization: {exc}") from None


def _viscous(text):
    try:
        return ViscousStabilization.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"--viscous-stab: {exc}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="oseen-hho", description="HHO convergence studies for the Oseen problem.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    run = sub.add_parser("run", help="run a convergence study and write CSV")
    run.add_argument("--case", choices=("kovasznay", "manufactured-file"), required=True)
    run.add_argument("--peclet", type=_positive_float("--peclet"), help="Kovasznay Peclet number")
    run.add_argument("--case-file", help="JSON description for --case manufactured-file")
    run.add_argument("--degree", type=int, choices=range(4), required=True, metavar="{0..3}")
    meshes = run.add_mutually_exclusive_group(required=True)
    meshes.add_argument("--mesh-kind", choices=MESH_KINDS)
    meshes.add_argument("--mesh-files", help="comma-separated mesh files, coarse to fine")
    run.add_argument("--refinements", type=_int_list, help="comma-separated subdivision counts")
    run.add_argument("--stabilization", type=_advective, default=AdvectiveStabilization())
    run.add_argument("--viscous-stab", type=_viscous, default=ViscousStabilization())
    run.add_argument("--mode", choices=("full", "condensed"), default="condensed")
    run.add_argument("--verify", action="store_true", help="append flux-balance residual columns")
    run.add_argument("--output", help="CSV path (stdout when omitted)")
    run.add_argument("--quadrature-surplus", type=int, default=4)
    run.add_argument("--threads", type=int, default=1, help="worker threads for local computations")
    return parser


def _mesh_format(path: Path) -> str:
    return "native-json" if path.suffix.lower() == ".json" else "fvca5-text"


def _resolve(args):
    if args.case == "kovasznay":
        if args.peclet is None:
            raise UsageError("--peclet is required for --case kovasznay")
        case = kovasznay_case(args.peclet)
    else:
        if not args.case_file:
            raise UsageError("--case-file is required for --case manufactured-file")
        path = Path(args.case_file)
        if not path.is_file():
            raise UsageError(f"--case-file: no such file {args.case_file!r}")
        case = load_manufactured_file(path)
    if args.quadrature_surplus < 0:
        raise UsageError("--quadrature-surplus must be non-negative")
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    if args.mesh_kind:
        if not args.refinements:
            raise UsageError("--refinements is required with --mesh-kind")
        meshes = [(f"{args.mesh_kind}-{n}", generate_mesh(args.mesh_kind, n, case.domain)) for n in args.refinements]
    else:
        paths = [Path(p) for p in args.mesh_files.split(",") if p]
        for p in paths:
            if not p.is_file():
                raise UsageError(f"--mesh-files: no such file {str(p)!r}")
        meshes = [(p.stem, load_mesh(p, _mesh_format(p))) for p in paths]
    if len(meshes) < 2:
        raise UsageError("at least two meshes are needed (--refinements or --mesh-files)")
    choice = StabilizationChoice(args.viscous_stab, args.stabilization)
    return case, meshes, choice


def _write(text: str, output):
    if output:
        Path(output).write_text(text, encoding="utf-8", newline="")
    else:
        sys.stdout.write(text)


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        case, meshes, choice = _resolve(args)
        if args.verify and choice.viscous.kind != "hho":
            raise UsageError("--verify requires --viscous-stab hho")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, MeshError, CaseConsistencyError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        table = run_convergence_study(
            case,
            meshes,
            args.degree,
            choice,
            args.mode,
            verify=args.verify,
            surplus=args.quadrature_surplus,
            workers=args.threads,
        )
    except StudyFailure as exc:
        _write(exc.table.to_csv(), args.output)
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    _write(table.to_csv(), args.output)
    if any(r.extension for r in table.rows):
        print("note: flux balances for this advective stabilization are an extension", file=sys.stderr)
    return EXIT_OK


def main() -> None:
    sys.exit(cli_main())
