"""Convergence studies over a sequence of meshes and CSV serialization."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assembly import Discretization, SolverError
from .cases import CaseDefinition, Poly2, manufactured_case
from .diagnostics import convergence_rate, error_vs_interpolant, stability_constants
from .flux import numerical_fluxes, verify_balances
from .hho_local import StabilizationChoice
from .mesh import Mesh
from .polyspace import DEFAULT_SURPLUS

__all__ = [
    "BASE_COLUMNS",
    "VERIFY_COLUMNS",
    "ConvergenceRow",
    "ConvergenceTable",
    "StudyFailure",
    "run_convergence_study",
    "load_manufactured_file",
    "format_float",
]

BASE_COLUMNS = (
    "mesh",
    "h",
    "ndof_condensed",
    "err_U",
    "err_P",
    "err_L2",
    "rel_err_U",
    "rel_err_P",
    "rel_err_L2",
    "Pe_h",
)
VERIFY_COLUMNS = ("max_momentum_residual", "max_mass_residual", "max_flux_jump")
RESIDUAL_TOLERANCE = 1e-10
RATE_COLUMNS = ("err_U", "err_P", "err_L2", "rel_err_U", "rel_err_P", "rel_err_L2")


def format_float(x: float) -> str:
    """Shortest round-trip decimal representation, locale independent."""
    return repr(float(x))


@dataclass(frozen=True)
class ConvergenceRow:
    mesh: str
    h: float
    ndof_condensed: int
    err_U: float
    err_P: float
    err_L2: float
    rel_err_U: float
    rel_err_P: float
    rel_err_L2: float
    Pe_h: float
    balances: dict | None = None
    extension: bool = False


@dataclass
class ConvergenceTable:
    rows: list = field(default_factory=list)
    verify: bool = False

    @property
    def columns(self) -> tuple:
        return BASE_COLUMNS + (VERIFY_COLUMNS if self.verify else ())

    def rates(self, column: str) -> list:
        pairs = [(r.h, getattr(r, column)) for r in self.rows]
        if len(pairs) < 2 or any(e <= 0.0 for _, e in pairs):
            return []
        return convergence_rate(pairs)

    def asymptotic_rate(self, column: str) -> float:
        rates = self.rates(column)
        if not rates:
            raise ValueError(f"no rate available for {column}")
        return rates[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for r in self.rows:
            line = [r.mesh, format_float(r.h), str(r.ndof_condensed)]
            line += [format_float(getattr(r, c)) for c in BASE_COLUMNS[3:]]
            if self.verify:
                line += [format_float(r.balances[c]) for c in VERIFY_COLUMNS]
            writer.writerow(line)
        rate_lists = {c: self.rates(c) for c in RATE_COLUMNS}
        for i in range(max(len(self.rows) - 1, 0)):
            line = ["rate", "", ""]
            for c in BASE_COLUMNS[3:]:
                vals = rate_lists.get(c)
                line.append(format_float(vals[i]) if vals else "")
            if self.verify:
                line += [""] * len(VERIFY_COLUMNS)
            writer.writerow(line)
        return buf.getvalue()


class StudyFailure(RuntimeError):
    """A mesh of the study failed; ``table`` holds the rows completed so far."""

    def __init__(self, message: str, table: ConvergenceTable):
        super().__init__(message)
        self.table = table


def run_convergence_study(
    case: CaseDefinition,
    meshes: list,
    k: int,
    stabilization: StabilizationChoice = StabilizationChoice(),
    mode: str = "condensed",
    verify: bool = False,
    surplus: int = DEFAULT_SURPLUS,
    workers: int = 1,
) -> ConvergenceTable:
    """Solve the case on each mesh and tabulate errors against the interpolant.

    ``meshes`` is a list of ``(name, Mesh)`` pairs (or bare meshes), coarse to fine.
    """
    if len(meshes) < 2:
        raise ValueError("a convergence study needs at least two meshes")
    table = ConvergenceTable(verify=verify)
    for i, entry in enumerate(meshes):
        name, mesh = entry if isinstance(entry, tuple) else (f"mesh{i}", entry)
        if not isinstance(mesh, Mesh):
            raise TypeError(f"expected a Mesh for {name!r}")
        try:
            disc = Discretization.build(mesh, case.data, k, stabilization, surplus, workers=workers)
            state, report = disc.solve(mode, workers)
            if not report.residual <= RESIDUAL_TOLERANCE:
                raise SolverError(f"relative residual {report.residual:.3e} exceeds {RESIDUAL_TOLERANCE:g}")
        except (SolverError, np.linalg.LinAlgError, ArithmeticError) as exc:
            raise StudyFailure(f"solve failed on mesh {name!r}: {exc}", table) from exc
        err = error_vs_interpolant(state, case.u, case.p, disc)
        consts = stability_constants_quiet(disc)
        balances = None
        extension = False
        if verify:
            fluxes = numerical_fluxes(state, disc)
            balance = verify_balances(state, fluxes, disc)
            balances = balance.csv_columns()
            extension = balance.extension
        row = ConvergenceRow(
            mesh=name,
            h=float(disc.geom.h),
            ndof_condensed=int(disc.dofmap.n_condensed),
            err_U=err.err_U,
            err_P=err.err_P,
            err_L2=err.err_L2,
            rel_err_U=err.rel_err_U,
            rel_err_P=err.rel_err_P,
            rel_err_L2=err.rel_err_L2,
            Pe_h=consts.Pe_h,
            balances=balances,
            extension=extension,
        )
        if table.rows and not row.h < table.rows[-1].h:
            raise StudyFailure(f"mesh {name!r} is not finer than its predecessor", table)
        table.rows.append(row)
    return table


def stability_constants_quiet(disc: Discretization):
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return stability_constants(disc)


def _poly(value) -> Poly2:
    return Poly2(np.asarray(value, dtype=float))


def load_manufactured_file(path) -> CaseDefinition:
    """Read a manufactured case from JSON.

    Polynomials are coefficient matrices ``c[i][j]`` of ``x^i y^j``.  Keys:
    ``nu``, optional ``mu``, ``p``, ``beta`` (pair), and either ``u`` (pair)
    or a stream function ``psi`` giving ``u = (psi_y, -psi_x)``.  Optional
    ``domain`` as ``[[x0, x1], [y0, y1]]``.
    """
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if "psi" in raw:
        psi = _poly(raw["psi"])
        u = (psi.dy(), -psi.dx())
    else:
        u = tuple(_poly(c) for c in raw["u"])
    beta = tuple(_poly(c) for c in raw["beta"])
    domain = tuple(tuple(float(v) for v in d) for d in raw.get("domain", [[0.0, 1.0], [0.0, 1.0]]))
    return manufactured_case(
        u=u,
        p=_poly(raw.get("p", [[0.0]])),
        beta=beta,
        nu=float(raw["nu"]),
        mu=float(raw.get("mu", 0.0)),
        domain=domain,
        name=raw.get("name", Path(path).stem),
    )
