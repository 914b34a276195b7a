"""Discrete norms, stability constants, errors and convergence rates."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .assembly import Discretization, GlobalDofState

__all__ = [
    "NormReport",
    "StabilityConstants",
    "ErrorReport",
    "discrete_norms",
    "error_vs_interpolant",
    "convergence_rate",
    "stability_constants",
    "global_norm_matrices",
]


@dataclass(frozen=True)
class NormReport:
    norm_1: float
    norm_nu: float
    norm_bm: float
    norm_U: float
    norm_aug: float | None
    cell_1: np.ndarray
    cell_nu: np.ndarray
    cell_bm: np.ndarray
    advective_only: bool
    continuity_condition: np.ndarray | None = None


def _local_quadratic(mat: np.ndarray, v: np.ndarray) -> float:
    return float(v @ (mat @ v))


def discrete_norms(v: np.ndarray, disc: Discretization, augmented: bool = False) -> NormReport:
    """Norms of a global velocity vector (or of ``state.velocity``)."""
    if isinstance(v, GlobalDofState):
        v = v.velocity
    dm = disc.dofmap
    n = len(disc.ops)
    c1, cnu, cbm = np.empty(n), np.empty(n), np.empty(n)
    aug = 0.0
    cond = np.zeros(n, dtype=bool) if augmented else None
    advective_only = False
    for c, op in enumerate(disc.ops):
        loc = v[dm.local_dofs(op.element)]
        c1[c] = _local_quadratic(op.norm_1(), loc)
        cnu[c] = _local_quadratic(op.A_nu, loc)
        cbm[c] = _local_quadratic(op.norm_bm(), loc)
        if math.isinf(op.ref.tau):
            advective_only = True
        if augmented:
            vref = op.ref.vref
            h_t = op.element.cell.diameter
            if vref != 0.0:
                g = op.G @ op.element.to_components(loc)
                aug += h_t / vref * float(np.einsum("ic,ij,jc->", g, op.mass, g))
            cond[c] = (vref / (h_t * op.mu) <= 1.0) if op.mu > 0 else vref == 0.0
    nu2, bm2 = cnu.sum(), cbm.sum()
    u2 = nu2 + bm2
    return NormReport(
        norm_1=math.sqrt(max(c1.sum(), 0.0)),
        norm_nu=math.sqrt(max(nu2, 0.0)),
        norm_bm=math.sqrt(max(bm2, 0.0)),
        norm_U=math.sqrt(max(u2, 0.0)),
        norm_aug=math.sqrt(max(u2 + aug, 0.0)) if augmented else None,
        cell_1=c1,
        cell_nu=cnu,
        cell_bm=cbm,
        advective_only=advective_only,
        continuity_condition=cond,
    )


def global_norm_matrices(disc: Discretization) -> dict:
    """Sparse matrices of the squared norms on all velocity dofs (and the pressure L2 mass)."""
    import scipy.sparse as sp

    dm = disc.dofmap
    out = {}
    for name, getter in (
        ("1", lambda op: op.norm_1()),
        ("nu", lambda op: 0.5 * (op.A_nu + op.A_nu.T)),
        ("bm", lambda op: op.norm_bm()),
    ):
        rows, cols, vals = [], [], []
        for op in disc.ops:
            g = dm.local_dofs(op.element)
            m = getter(op)
            rows.append(np.repeat(g, len(g)))
            cols.append(np.tile(g, len(g)))
            vals.append(m.ravel())
        out[name] = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(dm.n_velocity, dm.n_velocity),
        ).tocsr()
    out["U"] = out["nu"] + out["bm"]
    blocks = [op.mass for op in disc.ops]
    out["pressure"] = sp.block_diag(blocks, format="csr")
    # broken L2 of cell velocities
    vel_mass = sp.lil_matrix((dm.n_velocity, dm.n_velocity))
    for c, op in enumerate(disc.ops):
        idx = dm.cell_dofs(c)
        nk = dm.nk
        vel_mass[np.ix_(idx[:nk], idx[:nk])] = op.mass
        vel_mass[np.ix_(idx[nk:], idx[nk:])] = op.mass
    out["L2"] = vel_mass.tocsr()
    return out


@dataclass(frozen=True)
class ErrorReport:
    err_U: float
    err_P: float
    err_L2: float
    norm_U_interp: float
    norm_P_interp: float
    norm_L2_interp: float

    @property
    def rel_err_U(self) -> float:
        return self.err_U / self.norm_U_interp if self.norm_U_interp > 0 else self.err_U

    @property
    def rel_err_P(self) -> float:
        return self.err_P / self.norm_P_interp if self.norm_P_interp > 0 else self.err_P

    @property
    def rel_err_L2(self) -> float:
        return self.err_L2 / self.norm_L2_interp if self.norm_L2_interp > 0 else self.err_L2


def _pressure_norm(disc: Discretization, p: np.ndarray) -> float:
    dm = disc.dofmap
    total = 0.0
    for c, op in enumerate(disc.ops):
        pc = p[dm.pressure_dofs(c)]
        total += float(pc @ op.mass @ pc)
    return math.sqrt(max(total, 0.0))


def _cell_l2_norm(disc: Discretization, v: np.ndarray) -> float:
    dm = disc.dofmap
    nk = dm.nk
    total = 0.0
    for c, op in enumerate(disc.ops):
        vc = v[dm.cell_dofs(c)].reshape(2, nk)
        total += float(np.einsum("ci,ij,cj->", vc, op.mass, vc))
    return math.sqrt(max(total, 0.0))


def error_vs_interpolant(state: GlobalDofState, u, p, disc: Discretization) -> ErrorReport:
    """Errors of a discrete solution against the interpolant of the exact one."""
    dm = disc.dofmap
    if state.dofmap.k != disc.k or len(state.velocity) != dm.n_velocity:
        raise ValueError("state and discretization do not match (mesh or degree)")
    u_i = disc.interpolate(u)
    p_i = disc.project_pressure(p)
    e_u = state.velocity - u_i
    e_p = state.pressure - p_i
    return ErrorReport(
        err_U=discrete_norms(e_u, disc).norm_U,
        err_P=_pressure_norm(disc, e_p),
        err_L2=_cell_l2_norm(disc, e_u),
        norm_U_interp=discrete_norms(u_i, disc).norm_U,
        norm_P_interp=_pressure_norm(disc, p_i),
        norm_L2_interp=_cell_l2_norm(disc, u_i),
    )


def convergence_rate(errors) -> list:
    """Rates between consecutive (h, e) pairs; the asymptotic rate is the last entry."""
    pairs = [(float(h), float(e)) for h, e in errors]
    if len(pairs) < 2:
        raise ValueError("at least two (h, error) pairs are needed")
    for h, e in pairs:
        if not e > 0.0:
            raise ValueError(f"errors must be positive, got {e}")
        if not h > 0.0:
            raise ValueError(f"mesh sizes must be positive, got {h}")
    rates = []
    for (h2, e2), (h1, e1) in zip(pairs, pairs[1:]):
        if not h1 < h2:
            raise ValueError("mesh sizes must be strictly decreasing")
        rates.append((math.log(e2) - math.log(e1)) / (math.log(h2) - math.log(h1)))
    return rates


@dataclass(frozen=True)
class StabilityConstants:
    C_a: float
    C_b: float
    Pe_h: float
    Pe_Omega: float
    tau_h: float
    d_Omega: float


def stability_constants(disc: Discretization) -> StabilityConstants:
    refs = [op.ref for op in disc.ops]
    mu = disc.data.mu
    nu = disc.data.nu
    taus = np.array([r.tau for r in refs])
    if mu == 0.0:
        warnings.warn("mu = 0: coercivity constant C_a degenerates to 0", stacklevel=2)
    c_a = float(min(min(1.0, t * mu) if math.isfinite(t) else (1.0 if mu > 0 else 0.0) for t in taus))
    tau_h = float(taus.min())
    pe_h = max(r.peclet for r in refs)
    d_omega = disc.geom.domain_diameter
    beta_inf = max(r.vref for r in refs)
    tau_inv = 0.0 if math.isinf(tau_h) else 1.0 / tau_h
    c_b = (nu * (1.0 + pe_h) + tau_inv) ** -0.5
    return StabilityConstants(
        C_a=c_a,
        C_b=float(c_b),
        Pe_h=float(pe_h),
        Pe_Omega=float(beta_inf * d_omega / nu),
        tau_h=tau_h,
        d_Omega=float(d_omega),
    )
