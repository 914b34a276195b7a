"""Global degrees of freedom, assembly, static condensation and solve."""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .hho_local import (
    LocalElement,
    LocalOperatorSet,
    ProblemData,
    StabilizationChoice,
    build_elements,
    build_local_operators,
    interpolate_local,
)
from .mesh import GeometryCache, Mesh, compute_geometry
from .polyspace import DEFAULT_SURPLUS, dim_cell, dim_face, l2_project

__all__ = [
    "AssemblyError",
    "SolverError",
    "GlobalDofMap",
    "LinearSystem",
    "GlobalDofState",
    "SolveReport",
    "Discretization",
    "build_system",
    "solve",
    "condensed_size",
]


class AssemblyError(ValueError):
    pass


class SolverError(RuntimeError):
    pass


def condensed_size(n_interior_faces: int, n_cells: int, k: int, d: int = 2) -> int:
    """Globally coupled unknowns after static condensation (without the multiplier)."""
    return d * dim_face(k) * n_interior_faces + n_cells


@dataclass(frozen=True, eq=False)
class GlobalDofMap:
    """Numbering of the global unknowns.

    The velocity vector stores every cell and face block (boundary faces
    included).  The solved system uses ``[cell velocities, interior face
    velocities, pressures, multiplier]``.
    """

    k: int
    n_cells: int
    n_faces: int
    boundary_mask: np.ndarray
    face_unknown: np.ndarray  # interior face -> position among interior faces, -1 on boundary

    @property
    def nk(self) -> int:
        return dim_cell(self.k)

    @property
    def nf(self) -> int:
        return dim_face(self.k)

    @property
    def n_interior_faces(self) -> int:
        return int((~self.boundary_mask).sum())

    @property
    def n_velocity(self) -> int:
        return self.n_cells * 2 * self.nk + self.n_faces * 2 * self.nf

    @property
    def n_pressure(self) -> int:
        return self.n_cells * self.nk

    @property
    def face_offset(self) -> int:
        return self.n_cells * 2 * self.nk

    def cell_dofs(self, c: int) -> np.ndarray:
        return np.arange(c * 2 * self.nk, (c + 1) * 2 * self.nk)

    def face_dofs(self, f: int) -> np.ndarray:
        start = self.face_offset + f * 2 * self.nf
        return np.arange(start, start + 2 * self.nf)

    def pressure_dofs(self, c: int) -> np.ndarray:
        return np.arange(c * self.nk, (c + 1) * self.nk)

    def local_dofs(self, element: LocalElement) -> np.ndarray:
        """Global velocity indices of a local vector, in local vector layout."""
        c = element.cell.index
        parts = [self.cell_dofs(c)] + [self.face_dofs(f) for f in element.face_ids]
        return np.concatenate(parts)

    def free_velocity(self) -> np.ndarray:
        """Velocity indices that are unknowns (cells and interior faces)."""
        mask = np.ones(self.n_velocity, dtype=bool)
        for f in np.flatnonzero(self.boundary_mask):
            mask[self.face_dofs(f)] = False
        return np.flatnonzero(mask)

    @property
    def n_full(self) -> int:
        return self.n_cells * 2 * self.nk + self.n_interior_faces * 2 * self.nf + self.n_pressure + 1

    @property
    def n_condensed(self) -> int:
        return condensed_size(self.n_interior_faces, self.n_cells, self.k) + 1


@dataclass(eq=False)
class LinearSystem:
    """Assembled saddle-point system with a zero-mean multiplier row.

    ``matrix`` acts on ``[free velocities, pressures, multiplier]``; the
    momentum rows are ``a_h(u, v) + b_h(v, p)``, the mass rows ``-b_h(u, q) +
    lambda (1, q)``, and the last row enforces ``(p, 1) = 0``.
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    dofmap: GlobalDofMap
    boundary_values: np.ndarray  # full velocity vector, nonzero only on boundary faces
    free: np.ndarray
    ops: list
    mean_row: np.ndarray
    velocity_matrix: sp.csr_matrix  # a_h on all velocity dofs
    coupling_matrix: sp.csr_matrix  # b_h: pressures x all velocity dofs
    load: np.ndarray  # (f, v_h) on all velocity dofs
    boundary_flux_defect: float = 0.0  # net outflow of the projected data before correction


@dataclass(eq=False)
class GlobalDofState:
    velocity: np.ndarray
    pressure: np.ndarray
    dofmap: GlobalDofMap
    provenance: str = "full"

    def local_vector(self, element: LocalElement) -> np.ndarray:
        return self.velocity[self.dofmap.local_dofs(element)]

    def cell_pressure(self, c: int) -> np.ndarray:
        return self.pressure[self.dofmap.pressure_dofs(c)]


@dataclass(frozen=True)
class SolveReport:
    mode: str
    n_unknowns: int
    residual: float
    seconds: float
    multiplier: float


def _scatter(rows, cols, vals, shape) -> sp.csr_matrix:
    if rows:
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        v = np.concatenate(vals)
    else:
        r = c = np.zeros(0, dtype=np.int64)
        v = np.zeros(0)
    return sp.coo_matrix((v, (r, c)), shape=shape).tocsr()


def build_system(
    mesh: Mesh, geom: GeometryCache, ops: list, data: ProblemData, k: int
) -> tuple[LinearSystem, GlobalDofMap]:
    """Assemble the discrete Oseen problem from per-cell operators."""
    if len(ops) != mesh.n_cells or any(op is None for op in ops):
        raise AssemblyError("local operators missing for some cells")
    if any(op.element.k != k for op in ops):
        raise AssemblyError("local operators built with mixed polynomial degrees")
    dofmap = GlobalDofMap(
        k=k,
        n_cells=mesh.n_cells,
        n_faces=mesh.n_faces,
        boundary_mask=mesh.is_boundary_face.copy(),
        face_unknown=np.where(
            mesh.is_boundary_face, -1, np.cumsum(~mesh.is_boundary_face) - 1
        ),
    )
    nv, npr = dofmap.n_velocity, dofmap.n_pressure

    a_rows, a_cols, a_vals = [], [], []
    b_rows, b_cols, b_vals = [], [], []
    load = np.zeros(nv)
    mean_row = np.zeros(npr)
    boundary_values = np.zeros(nv)
    done = np.zeros(mesh.n_faces, dtype=bool)
    for c, op in enumerate(ops):
        e = op.element
        g = dofmap.local_dofs(e)
        pg = dofmap.pressure_dofs(c)
        a_rows.append(np.repeat(g, len(g)))
        a_cols.append(np.tile(g, len(g)))
        a_vals.append(op.A.ravel())
        b_rows.append(np.repeat(pg, len(g)))
        b_cols.append(np.tile(g, len(pg)))
        b_vals.append(op.B.ravel())
        load[g] += op.load
        rule = e.cell.quadrature(e.qdeg)
        mean_row[pg] = rule.weights @ e.cell.basis(k).eval(rule.points)
        for i, f in enumerate(e.face_ids):
            if dofmap.boundary_mask[f] and not done[f]:
                face = e.faces[i]
                coef = l2_project(face, k, data.dirichlet, exactness=e.qdeg)
                boundary_values[dofmap.face_dofs(f)] = coef.T.ravel()
                done[f] = True

    defect = _enforce_flux_compatibility(mesh, geom, ops, dofmap, boundary_values)

    A = _scatter(a_rows, a_cols, a_vals, (nv, nv))
    B = _scatter(b_rows, b_cols, b_vals, (npr, nv))
    free = dofmap.free_velocity()
    bnd = np.setdiff1d(np.arange(nv), free)
    ub = boundary_values[bnd]

    A_ff = A[free][:, free]
    B_f = B[:, free]
    mean = sp.csr_matrix(mean_row.reshape(-1, 1))
    matrix = sp.bmat(
        [
            [A_ff, B_f.T, None],
            [-B_f, None, mean],
            [None, mean.T, None],
        ],
        format="csr",
    )
    rhs = np.concatenate(
        [
            load[free] - A[free][:, bnd] @ ub,
            B[:, bnd] @ ub,
            [0.0],
        ]
    )
    system = LinearSystem(
        matrix=matrix,
        rhs=rhs,
        dofmap=dofmap,
        boundary_values=boundary_values,
        free=free,
        ops=ops,
        mean_row=mean_row,
        velocity_matrix=A,
        coupling_matrix=B,
        load=load,
        boundary_flux_defect=defect,
    )
    return system, dofmap


def _enforce_flux_compatibility(mesh, geom, ops, dofmap, boundary_values) -> float:
    """Remove the net outflow of the projected boundary data.

    With non-polynomial data the quadrature-based projection leaves a small
    net flux, which the pressure multiplier would otherwise absorb.  The
    defect is subtracted as a uniform normal velocity along the boundary.
    Returns the defect before correction.
    """
    bfaces = mesh.boundary_faces
    if len(bfaces) == 0:
        return 0.0
    owner = {}
    for op in ops:
        for i, f in enumerate(op.element.face_ids):
            if dofmap.boundary_mask[f]:
                owner[int(f)] = (op.element, i)
    nf = dofmap.nf
    defect = 0.0
    for f in bfaces:
        e, i = owner[int(f)]
        face, n = e.faces[i], e.normals[i]
        rule = face.quadrature(e.qdeg)
        moments = rule.weights @ face.basis(e.k).eval(rule.points)
        coef = boundary_values[dofmap.face_dofs(f)].reshape(2, nf)
        defect += float(n @ (coef @ moments))
    perimeter = float(geom.face_diameters[bfaces].sum())
    for f in bfaces:
        e, i = owner[int(f)]
        idx = dofmap.face_dofs(f)
        n = e.normals[i]
        boundary_values[idx[0]] -= defect / perimeter * n[0]
        boundary_values[idx[nf]] -= defect / perimeter * n[1]
    return defect


def _unpack(system: LinearSystem, x: np.ndarray, provenance: str) -> GlobalDofState:
    dm = system.dofmap
    vel = system.boundary_values.copy()
    nfree = len(system.free)
    vel[system.free] = x[:nfree]
    pressure = x[nfree : nfree + dm.n_pressure].copy()
    return GlobalDofState(vel, pressure, dm, provenance)


def _factor_solve(matrix: sp.spmatrix, rhs: np.ndarray, refinement_steps: int = 1) -> np.ndarray:
    try:
        lu = spla.splu(sp.csc_matrix(matrix))
    except RuntimeError as exc:
        raise SolverError(
            f"singular factorization ({exc}); suspected duplicate constraint or zero-measure entity"
        ) from exc
    x = lu.solve(rhs)
    if not np.all(np.isfinite(x)):
        raise SolverError("non-finite solution; suspected duplicate constraint or zero-measure entity")
    for _ in range(refinement_steps):
        x = x + lu.solve(rhs - matrix @ x)
    return x


def _pressure_transform(op: LocalOperatorSet) -> tuple[np.ndarray, float]:
    """Change of pressure basis to [1, phi_j - mean(phi_j)]; returns (T, |T|)."""
    e = op.element
    rule = e.cell.quadrature(e.qdeg)
    phi = e.cell.basis(e.k).eval(rule.points)
    integrals = rule.weights @ phi
    area = rule.weights.sum()
    const = integrals[0] / area  # value of the constant basis function
    T = np.eye(e.nk)
    T[0, 0] = 1.0 / const
    T[0, 1:] = -(integrals[1:] / area) / const
    return T, area


@dataclass(eq=False)
class _Condensed:
    lu: tuple
    e_xi: np.ndarray
    e_ix: np.ndarray
    internal: np.ndarray
    external: np.ndarray
    transform: np.ndarray
    ext: np.ndarray  # global velocity indices of the face blocks


def _condense_cell(op: LocalOperatorSet, dofmap: GlobalDofMap):
    e = op.element
    nvec, nk = e.n_vector, e.nk
    ncell = 2 * nk
    T, area = _pressure_transform(op)
    E = np.zeros((nvec + nk, nvec + nk))
    E[:nvec, :nvec] = op.A
    E[:nvec, nvec:] = op.B.T @ T
    E[nvec:, :nvec] = -(T.T @ op.B)
    # internal: cell velocity + non-mean pressure; external: faces + pressure mean
    internal = np.concatenate([np.arange(ncell), nvec + np.arange(1, nk)])
    external = np.concatenate([np.arange(ncell, nvec), [nvec]])
    E_ii = E[np.ix_(internal, internal)]
    E_ix = E[np.ix_(internal, external)]
    E_xi = E[np.ix_(external, internal)]
    try:
        lu = sla.lu_factor(E_ii, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SolverError(f"singular local condensation block on cell {e.cell.index}") from exc
    if np.any(np.abs(np.diag(lu[0])) == 0.0):
        raise SolverError(f"singular local condensation block on cell {e.cell.index}")
    schur = E[np.ix_(external, external)] - E_xi @ sla.lu_solve(lu, E_ix)
    ext = dofmap.local_dofs(e)[ncell:]
    return schur, area, _Condensed(lu, E_xi, E_ix, internal, external, T, ext)


@dataclass(eq=False)
class _CondensedSolver:
    """Local eliminations and the factored global face/mean/multiplier system."""

    system: LinearSystem
    parts: list
    lu: object
    vel_to_cond: np.ndarray
    n_face_unknowns: int
    size: int

    @classmethod
    def build(cls, system: LinearSystem, workers: int = 1) -> "_CondensedSolver":
        dm = system.dofmap
        nf2 = 2 * dm.nf
        n_face_unknowns = dm.n_interior_faces * nf2
        n = n_face_unknowns + dm.n_cells + 1
        lam = n - 1
        # global condensed index of each velocity dof (-1 for cell / boundary dofs)
        vel_to_cond = np.full(dm.n_velocity, -1, dtype=np.int64)
        for f in np.flatnonzero(~dm.boundary_mask):
            vel_to_cond[dm.face_dofs(f)] = dm.face_unknown[f] * nf2 + np.arange(nf2)
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                parts = list(pool.map(lambda op: _condense_cell(op, dm), system.ops))
        else:
            parts = [_condense_cell(op, dm) for op in system.ops]
        rows, cols, vals = [], [], []
        for c, (schur, area, info) in enumerate(parts):
            gidx = np.concatenate([vel_to_cond[info.ext], [n_face_unknowns + c]])
            keep = gidx >= 0
            kidx = gidx[keep]
            rows.append(np.repeat(kidx, len(kidx)))
            cols.append(np.tile(kidx, len(kidx)))
            vals.append(schur[np.ix_(keep, keep)].ravel())
            # multiplier couples the pressure mean only
            rows.append(np.array([n_face_unknowns + c, lam]))
            cols.append(np.array([lam, n_face_unknowns + c]))
            vals.append(np.array([area, area]))
        matrix = sp.csc_matrix(_scatter(rows, cols, vals, (n, n)))
        try:
            lu = spla.splu(matrix)
        except RuntimeError as exc:
            raise SolverError(
                f"singular factorization ({exc}); suspected duplicate constraint or zero-measure entity"
            ) from exc
        return cls(system, parts, lu, vel_to_cond, n_face_unknowns, n)

    def solve(self, loads: list, boundary_values: np.ndarray, extra_rhs: np.ndarray):
        """Solve with per-cell right-hand sides ``loads`` (local transformed layout).

        ``extra_rhs`` is added to the condensed right-hand side as is.
        """
        dm = self.system.dofmap
        rhs = extra_rhs.copy()
        ub = boundary_values
        for c, (schur, _, info) in enumerate(self.parts):
            F = loads[c]
            g = F[info.external] - info.e_xi @ sla.lu_solve(info.lu, F[info.internal])
            gidx = np.concatenate([self.vel_to_cond[info.ext], [self.n_face_unknowns + c]])
            known = gidx < 0
            if known.any():
                g = g - schur[:, known] @ ub[info.ext[known[:-1]]]
            np.add.at(rhs, gidx[~known], g[~known])
        x = self.lu.solve(rhs)
        if not np.all(np.isfinite(x)):
            raise SolverError("non-finite solution; suspected duplicate constraint or zero-measure entity")
        vel = ub.copy()
        nf2 = 2 * dm.nf
        pressure = np.zeros(dm.n_pressure)
        face_x = x[: self.n_face_unknowns]
        for f in np.flatnonzero(~dm.boundary_mask):
            vel[dm.face_dofs(f)] = face_x[dm.face_unknown[f] * nf2 + np.arange(nf2)]
        ncell = 2 * dm.nk
        for c, (_, _, info) in enumerate(self.parts):
            xe = np.concatenate([vel[info.ext], [x[self.n_face_unknowns + c]]])
            xi = sla.lu_solve(info.lu, loads[c][info.internal] - info.e_ix @ xe)
            vel[dm.cell_dofs(c)] = xi[:ncell]
            pressure[dm.pressure_dofs(c)] = info.transform @ np.concatenate([[xe[-1]], xi[ncell:]])
        return vel, pressure, float(x[-1])

    def residual_loads(self, r: np.ndarray):
        """Split a full-system residual into per-cell loads and a condensed remainder."""
        system = self.system
        dm = system.dofmap
        nfree = len(system.free)
        r_vel = np.zeros(dm.n_velocity)
        r_vel[system.free] = r[:nfree]
        r_p = r[nfree : nfree + dm.n_pressure]
        extra = np.zeros(self.size)
        extra[-1] = r[-1]
        loads = []
        ncell = 2 * dm.nk
        for c, (_, _, info) in enumerate(self.parts):
            nvec = ncell + len(info.ext)
            F = np.zeros(nvec + dm.nk)
            F[:ncell] = r_vel[dm.cell_dofs(c)]
            F[nvec:] = info.transform.T @ r_p[dm.pressure_dofs(c)]
            loads.append(F)
        # face residuals enter the condensed rows directly
        cond = self.vel_to_cond >= 0
        np.add.at(extra, self.vel_to_cond[cond], r_vel[cond])
        return loads, extra


def _solve_condensed(system: LinearSystem, workers: int = 1, refinement_steps: int = 1):
    solver = _CondensedSolver.build(system, workers)
    dm = system.dofmap
    loads = []
    for op, (_, _, info) in zip(system.ops, solver.parts):
        F = np.zeros(op.element.n_vector + dm.nk)
        F[: op.element.n_vector] = op.load
        loads.append(F)
    vel, pressure, multiplier = solver.solve(loads, system.boundary_values, np.zeros(solver.size))
    # iterative refinement against the full system, reusing all factorizations
    for _ in range(refinement_steps):
        x = np.concatenate([vel[system.free], pressure, [multiplier]])
        r = system.rhs - system.matrix @ x
        d_loads, extra = solver.residual_loads(r)
        dv, dp, dl = solver.solve(d_loads, np.zeros(dm.n_velocity), extra)
        vel, pressure, multiplier = vel + dv, pressure + dp, multiplier + dl
    return GlobalDofState(vel, pressure, dm, "condensed"), solver.size, multiplier


def _full_residual(system: LinearSystem, state: GlobalDofState, multiplier: float) -> float:
    x = np.concatenate([state.velocity[system.free], state.pressure, [multiplier]])
    r = system.matrix @ x - system.rhs
    scale = np.linalg.norm(system.rhs)
    if scale == 0.0:
        scale = max(np.abs(system.matrix).max() * np.linalg.norm(x), 1e-300)
        return float(np.linalg.norm(r) / scale) if np.linalg.norm(x) > 0 else float(np.linalg.norm(r))
    return float(np.linalg.norm(r) / scale)


def solve(system: LinearSystem, mode: str = "condensed", workers: int = 1):
    """Solve the assembled system; returns ``(GlobalDofState, SolveReport)``."""
    t0 = time.perf_counter()
    if mode == "full":
        x = _factor_solve(system.matrix, system.rhs)
        state = _unpack(system, x, "full")
        n = system.matrix.shape[0]
        multiplier = float(x[-1])
    elif mode == "condensed":
        state, n, multiplier = _solve_condensed(system, workers)
    else:
        raise ValueError(f"unknown solve mode {mode!r}")
    residual = _full_residual(system, state, multiplier)
    report = SolveReport(mode, n, residual, time.perf_counter() - t0, multiplier)
    return state, report


# --------------------------------------------------------------------------
# convenience wrapper


@dataclass(eq=False)
class Discretization:
    """A mesh together with its local operators for one problem and degree."""

    mesh: Mesh
    geom: GeometryCache
    data: ProblemData
    k: int
    choice: StabilizationChoice
    elements: list
    ops: list
    surplus: int = DEFAULT_SURPLUS
    _system: LinearSystem | None = field(default=None, repr=False)

    @classmethod
    def build(
        cls,
        mesh: Mesh,
        data: ProblemData,
        k: int,
        choice: StabilizationChoice = StabilizationChoice(),
        surplus: int = DEFAULT_SURPLUS,
        geom: GeometryCache | None = None,
        workers: int = 1,
    ) -> "Discretization":
        geom = compute_geometry(mesh) if geom is None else geom
        elements = build_elements(mesh, geom, k, surplus)

        def make(e):
            return build_local_operators(e, data, choice)

        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                ops = list(pool.map(make, elements))
        else:
            ops = [make(e) for e in elements]
        return cls(mesh, geom, data, k, choice, elements, ops, surplus)

    @property
    def system(self) -> LinearSystem:
        if self._system is None:
            self._system, _ = build_system(self.mesh, self.geom, self.ops, self.data, self.k)
        return self._system

    @property
    def dofmap(self) -> GlobalDofMap:
        return self.system.dofmap

    def solve(self, mode: str = "condensed", workers: int = 1):
        return solve(self.system, mode, workers)

    def interpolate(self, v) -> np.ndarray:
        """Global interpolant I_h v as a velocity vector."""
        dm = self.dofmap
        out = np.zeros(dm.n_velocity)
        for e in self.elements:
            out[dm.local_dofs(e)] = interpolate_local(e, v)
        return out

    def project_pressure(self, p) -> np.ndarray:
        dm = self.dofmap
        out = np.zeros(dm.n_pressure)
        for c, e in enumerate(self.elements):
            out[dm.pressure_dofs(c)] = l2_project(e.cell, self.k, p, exactness=e.qdeg)
        return out

    def random_velocity(self, rng: np.random.Generator, boundary_compliant: bool = True) -> np.ndarray:
        v = rng.standard_normal(self.dofmap.n_velocity)
        if boundary_compliant:
            keep = np.zeros_like(v, dtype=bool)
            keep[self.system.free] = True
            v[~keep] = 0.0
        return v

    def a_h(self, w: np.ndarray, v: np.ndarray) -> float:
        """a_h(w, v) with trial ``w`` and test ``v`` (full velocity vectors)."""
        return float(v @ (self.system.velocity_matrix @ w))

    def b_h(self, v: np.ndarray, q: np.ndarray) -> float:
        return float(q @ (self.system.coupling_matrix @ v))
