"""Numerical momentum fluxes and local balance checks.

Fluxes are stored per (cell, face) as vector polynomials of degree k on the
face (coefficients of shape (k + 1, 2) in the shared face basis), obtained by
L2 projection of the pointwise expressions with the assembly quadrature.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .assembly import Discretization, GlobalDofState
from .hho_local import LocalOperatorSet

__all__ = [
    "UnsupportedStabilization",
    "BoundaryDifference",
    "NumericalFlux",
    "BalanceReport",
    "boundary_residual",
    "numerical_fluxes",
    "verify_balances",
]


class UnsupportedStabilization(ValueError):
    pass


@dataclass(frozen=True)
class BoundaryDifference:
    """A collection of face polynomials alpha_F, coefficients (m, k + 1, 2)."""

    coefficients: np.ndarray

    @classmethod
    def of(cls, op: LocalOperatorSet, local_vector: np.ndarray) -> "BoundaryDifference":
        """Boundary differences (v_F - v_T|F)_F of a local vector."""
        e = op.element
        comps = e.to_components(local_vector)
        out = np.empty((len(e.faces), e.nf, 2))
        for i, face in enumerate(e.faces):
            rule = face.quadrature(e.qdeg)
            psi = face.basis(e.k).eval(rule.points)
            phik = e.cell.basis(e.k).eval(rule.points)
            wpsi = rule.weights[:, None] * psi
            trace = sla.solve(psi.T @ wpsi, wpsi.T @ (phik @ comps[: e.nk]), assume_a="pos")
            out[i] = comps[e.scalar_face_slice(i)] - trace
        return cls(out)

    def as_local_vector(self, op: LocalOperatorSet) -> np.ndarray:
        """The local vector (0, alpha)."""
        e = op.element
        comps = np.zeros((e.n_scalar, 2))
        for i in range(len(e.faces)):
            comps[e.scalar_face_slice(i)] = self.coefficients[i]
        return e.to_vector(comps)


def _face_rows(op: LocalOperatorSet) -> np.ndarray:
    e = op.element
    return np.arange(2 * e.nk, e.n_vector)


def _face_mass_blocks(op: LocalOperatorSet) -> np.ndarray:
    e = op.element
    blocks = []
    for face in e.faces:
        rule = face.quadrature(e.qdeg)
        psi = face.basis(e.k).eval(rule.points)
        m = psi.T @ (rule.weights[:, None] * psi)
        blocks += [m, m]
    return sla.block_diag(*blocks)


def boundary_residual(op: LocalOperatorSet) -> np.ndarray:
    """Matrix mapping a local vector to the boundary residual (R_TF w)_F.

    Rows follow the face part of the vector layout (per face: x then y
    coefficients).  Defined by -sum_F (R_TF w, alpha_F)_F = s(w, (0, alpha)).
    """
    if op.viscous.kind != "hho":
        raise UnsupportedStabilization(
            "boundary residual operator requires a stabilization that depends on its "
            f"arguments only through the difference operators; got {op.viscous}"
        )
    e = op.element
    s_vec = e.vectorize(op.nu * op.S_visc)
    rows = _face_rows(op)
    return -np.linalg.solve(_face_mass_blocks(op), s_vec[rows])


@dataclass(frozen=True)
class NumericalFlux:
    """Flux coefficients per cell: arrays of shape (m_T, k + 1, 2)."""

    consistent: tuple
    stabilization: tuple
    extension: bool  # generalized advective stabilization (not covered by the upwind derivation)

    def total(self, cell: int) -> np.ndarray:
        return self.consistent[cell] + self.stabilization[cell]


def _project(psi, w, values, face_mass_factor):
    return sla.cho_solve(face_mass_factor, psi.T @ (w[:, None] * values))


def numerical_fluxes(state: GlobalDofState, disc: Discretization) -> NumericalFlux:
    data = disc.data
    cons_all, stab_all = [], []
    for c, op in enumerate(disc.ops):
        e = op.element
        loc = state.local_vector(e)
        comps = e.to_components(loc)
        u_t = comps[: e.nk]
        p_t = state.cell_pressure(c)
        rec = op.R @ comps  # (nk1, 2)
        basis_high = e.cell.basis(e.k + 1)
        basis_k = e.cell.basis(e.k)
        res = boundary_residual(op) @ loc
        cons = np.empty((len(e.faces), e.nf, 2))
        stab = np.empty_like(cons)
        for i, (face, n) in enumerate(zip(e.faces, e.normals)):
            rule = face.quadrature(e.qdeg)
            pts, w = rule.points, rule.weights
            psi = face.basis(e.k).eval(pts)
            factor = sla.cho_factor(psi.T @ (w[:, None] * psi))
            grad_r = np.einsum("qid,ic->qcd", basis_high.grad(pts), rec)  # (q, comp, dir)
            phik = basis_k.eval(pts)
            ut = phik @ u_t
            uf = psi @ comps[e.scalar_face_slice(i)]
            pt = phik @ p_t
            sigma = data.beta(pts) @ n
            values = -data.nu * (grad_r @ n) + sigma[:, None] * ut + pt[:, None] * n[None, :]
            cons[i] = _project(psi, w, values, factor)
            if op.advective.kind == "upwind":
                weight = 0.5 * (np.abs(sigma) - sigma)
            else:
                weight = data.nu / face.diameter * op.advective.a_minus(sigma * e.cell.diameter / data.nu)
            stab_vals = weight[:, None] * (ut - uf)
            r_face = res[2 * e.nf * i : 2 * e.nf * (i + 1)].reshape(2, e.nf).T
            stab[i] = r_face + _project(psi, w, stab_vals, factor)
        cons_all.append(cons)
        stab_all.append(stab)
    extension = disc.choice.advective.kind != "upwind"
    return NumericalFlux(tuple(cons_all), tuple(stab_all), extension)


@dataclass(frozen=True)
class BalanceReport:
    momentum: np.ndarray  # per cell, scaled max residual
    mass: np.ndarray  # per cell, scaled max residual
    flux_jump: np.ndarray  # per interior face, scaled
    conservation: float  # |sum over cells of face fluxes - boundary flux sum|, scaled
    extension: bool

    @property
    def max_momentum_residual(self) -> float:
        return float(self.momentum.max()) if self.momentum.size else 0.0

    @property
    def max_mass_residual(self) -> float:
        return float(self.mass.max()) if self.mass.size else 0.0

    @property
    def max_flux_jump(self) -> float:
        return float(self.flux_jump.max()) if self.flux_jump.size else 0.0

    def csv_columns(self) -> dict:
        return {
            "max_momentum_residual": self.max_momentum_residual,
            "max_mass_residual": self.max_mass_residual,
            "max_flux_jump": self.max_flux_jump,
        }


def _ratio(num: float, den: float) -> float:
    return 0.0 if num == 0.0 else num / max(den, 1e-300)


def verify_balances(state: GlobalDofState, fluxes: NumericalFlux, disc: Discretization) -> BalanceReport:
    """Per-cell momentum/mass balance residuals and interface flux jumps.

    Each residual is divided by the largest magnitude of the terms that
    enter it, so values near machine precision mean the balance holds.
    """
    data = disc.data
    mesh = disc.mesh
    momentum = np.zeros(mesh.n_cells)
    mass = np.zeros(mesh.n_cells)
    face_flux = {}
    const_moment = np.zeros(2)
    bnd_moment = np.zeros(2)
    moment_scale = 0.0
    for c, op in enumerate(disc.ops):
        e = op.element
        loc = state.local_vector(e)
        comps = e.to_components(loc)
        u_t = comps[: e.nk]
        p_t = state.cell_pressure(c)
        rule = e.cell.quadrature(e.qdeg)
        w, pts = rule.weights, rule.points
        basis_k = e.cell.basis(e.k)
        phik = basis_k.eval(pts)
        dphik = basis_k.grad(pts)
        nk1 = op.R.shape[0]
        visc = data.nu * (op.stiff_high[: e.nk, :nk1] @ (op.R @ comps))
        adv = np.einsum("qd,qid->qi", data.beta(pts), dphik)
        conv = -(adv.T @ (w[:, None] * (phik @ u_t)))
        react = data.mu * (op.mass @ u_t)
        pq = phik @ p_t
        pres = -np.einsum("q,qic,q->ic", w, dphik, pq)
        forcing = -((w[:, None] * phik).T @ data.f(pts))
        flux_term = np.zeros((e.nk, 2))
        face_scale = 0.0
        phi_total = fluxes.total(c)
        for i, face in enumerate(e.faces):
            rf = face.quadrature(e.qdeg)
            psi = face.basis(e.k).eval(rf.points)
            phif = basis_k.eval(rf.points)
            flux_vals = psi @ phi_total[i]
            contribution = phif.T @ (rf.weights[:, None] * flux_vals)
            flux_term += contribution
            face_scale = max(face_scale, float(np.abs(contribution).max()))
            f = int(e.face_ids[i])
            face_flux.setdefault(f, []).append((phi_total[i], psi, rf.weights))
            integral = rf.weights @ flux_vals
            const_moment += integral
            moment_scale = max(moment_scale, float(np.abs(integral).max()))
            if mesh.is_boundary_face[f]:
                bnd_moment += integral
        terms = [visc, conv, react, pres, flux_term, forcing]
        resid = sum(terms)
        scale = max(face_scale, *(float(np.abs(t).max()) for t in terms))
        momentum[c] = _ratio(float(np.abs(resid).max()), scale)
        div = op.B @ loc
        mass_scale = float((np.abs(op.B) @ np.abs(loc)).max())
        mass[c] = _ratio(float(np.abs(div).max()), mass_scale)

    jumps = []
    for f in mesh.interior_faces:
        (c1, psi, w), (c2, _, _) = face_flux[int(f)]
        s = psi @ (c1 + c2)
        norm_sum = np.sqrt(w @ (s**2).sum(axis=1))
        size = np.sqrt(w @ ((psi @ c1) ** 2).sum(axis=1)) + np.sqrt(w @ ((psi @ c2) ** 2).sum(axis=1))
        jumps.append(_ratio(float(norm_sum), float(size)))
    conservation = _ratio(float(np.abs(const_moment - bnd_moment).max()), moment_scale)
    return BalanceReport(
        momentum=momentum,
        mass=mass,
        flux_jump=np.array(jumps),
        conservation=conservation,
        extension=fluxes.extension,
    )
