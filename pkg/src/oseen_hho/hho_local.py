"""Element-local HHO operators for the Oseen problem.

Local velocity unknowns on a cell T with faces F_1..F_m are stored
entity-major and component-major inside each entity::

    [v_T (x), v_T (y), v_F1 (x), v_F1 (y), ..., v_Fm (x), v_Fm (y)]

The "scalar layout" drops the component axis: [v_T, v_F1, ..., v_Fm].
Every operator except the divergence acts componentwise, so it is built on
the scalar layout and expanded with :meth:`LocalElement.vectorize`.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla

from .mesh import GeometryCache, Mesh
from .polyspace import (
    DEFAULT_SURPLUS,
    Cell,
    Face,
    ProjectionError,
    dim_cell,
    dim_face,
)

__all__ = [
    "ProblemData",
    "ViscousStabilization",
    "AdvectiveStabilization",
    "StabilizationChoice",
    "UndefinedReferenceTime",
    "LocalElement",
    "LocalOperatorSet",
    "ReferenceQuantities",
    "build_elements",
    "build_local_operators",
    "interpolate_local",
    "local_reference_quantities",
    "a_hat_upwind",
    "a_hat_theta",
    "a_hat_scharfetter_gummel",
    "check_a_hat",
]

Field = Callable[[np.ndarray], np.ndarray]


def _zero_vector(points):
    return np.zeros((len(points), 2))


@dataclass
class ProblemData:
    """Coefficients of the Oseen problem.

    ``beta_grad(points)`` returns Jacobians of shape (n, 2, 2) with
    ``J[:, i, j] = d beta_i / d x_j``; when omitted it is estimated by
    central differences and ``lipschitz_estimated`` is set.
    """

    nu: float
    beta: Field = _zero_vector
    mu: float = 0.0
    f: Field = _zero_vector
    dirichlet: Field = _zero_vector
    beta_grad: Field | None = None
    lipschitz: Callable[[int], float] | None = None
    lipschitz_estimated: bool = field(init=False, default=False)

    def __post_init__(self):
        if not self.nu > 0.0:
            raise ValueError(f"viscosity must be positive, got {self.nu}")
        if self.mu < 0.0:
            raise ValueError(f"reaction coefficient must be nonnegative, got {self.mu}")
        if self.beta_grad is None:
            self.lipschitz_estimated = True

    def jacobian(self, points) -> np.ndarray:
        if self.beta_grad is not None:
            return np.asarray(self.beta_grad(points), dtype=float)
        pts = np.asarray(points, dtype=float)
        eps = 1e-6 * max(1.0, float(np.abs(pts).max()))
        jac = np.empty((len(pts), 2, 2))
        for j in range(2):
            step = np.zeros(2)
            step[j] = eps
            jac[:, :, j] = (self.beta(pts + step) - self.beta(pts - step)) / (2 * eps)
        return jac

    def divergence_residual(self, points) -> float:
        """max |div beta| / max(|beta|, tiny) over ``points``."""
        jac = self.jacobian(points)
        div = jac[:, 0, 0] + jac[:, 1, 1]
        scale = max(float(np.abs(self.beta(points)).max()), 1e-300)
        return float(np.abs(div).max() / scale)


# --------------------------------------------------------------------------
# stabilization families


def a_hat_upwind(s):
    return np.abs(s)


def a_hat_theta(theta: float):
    if not 0.5 <= theta <= 1.0:
        raise ValueError(f"theta must lie in [1/2, 1], got {theta}")

    def a_hat(s):
        return (2.0 * theta - 1.0) * np.abs(s)

    return a_hat


def a_hat_scharfetter_gummel(s):
    s = np.asarray(s, dtype=float)
    out = np.empty_like(s)
    small = np.abs(s) < 1e-3
    t = s[small]
    out[small] = t**2 / 6.0 - t**4 / 360.0
    big = s[~small]
    out[~small] = big / np.tanh(0.5 * big) - 2.0
    return out


def check_a_hat(a_hat, s_max: float = 1e3, n: int = 20001) -> float:
    """Check the design conditions on an advective stabilization function.

    Returns the measured growth constant C_A; raises ``ValueError`` when a
    condition fails.
    """
    s = np.linspace(-s_max, s_max, n)
    vals = np.asarray(a_hat(s), dtype=float)
    if abs(float(np.asarray(a_hat(np.array([0.0])))[0])) > 1e-14:
        raise ValueError("A(0) != 0")
    if np.any(vals < -1e-14):
        raise ValueError("A is negative somewhere")
    if np.max(np.abs(vals - vals[::-1])) > 1e-12 * max(1.0, np.abs(vals).max()):
        raise ValueError("A is not even")
    slopes = np.abs(np.diff(vals) / np.diff(s))
    if not np.all(np.isfinite(slopes)) or slopes.max() > 1e3:
        raise ValueError("A is not Lipschitz on the sampled range")
    big = np.abs(s) >= 1.0
    growth = float(np.min(vals[big] / np.abs(s[big])))
    if growth <= 0.0:
        raise ValueError(f"growth condition fails (measured C_A = {growth:g})")
    return growth


@dataclass(frozen=True)
class ViscousStabilization:
    kind: str = "hho"
    eta: float | None = None  # ldgh parameter; None means 1/h_F

    def __post_init__(self):
        if self.kind not in ("hho", "ldgh"):
            raise ValueError(f"unknown viscous stabilization {self.kind!r}")
        if self.eta is not None and not self.eta > 0.0:
            raise ValueError("ldgh parameter must be positive")

    @classmethod
    def parse(cls, text: str) -> "ViscousStabilization":
        name, _, arg = text.partition(":")
        if name == "ldgh" and arg:
            return cls("ldgh", float(arg))
        if arg:
            raise ValueError(f"unexpected parameter in {text!r}")
        return cls(name)

    def __str__(self) -> str:
        return self.kind if self.eta is None else f"{self.kind}:{self.eta:g}"


@dataclass(frozen=True)
class AdvectiveStabilization:
    kind: str = "upwind"
    theta: float = 1.0

    def __post_init__(self):
        if self.kind not in ("upwind", "theta", "scharfetter-gummel"):
            raise ValueError(f"unknown advective stabilization {self.kind!r}")
        if self.kind == "theta":
            a_hat_theta(self.theta)  # range check

    @classmethod
    def parse(cls, text: str) -> "AdvectiveStabilization":
        name, _, arg = text.partition(":")
        if name == "theta":
            return cls("theta", float(arg) if arg else 1.0)
        if arg:
            raise ValueError(f"unexpected parameter in {text!r}")
        return cls(name)

    @property
    def a_hat(self):
        if self.kind == "upwind":
            return a_hat_upwind
        if self.kind == "theta":
            return a_hat_theta(self.theta)
        return a_hat_scharfetter_gummel

    def a_minus(self, s):
        return 0.5 * (self.a_hat(s) - s)

    def validate(self) -> float:
        return check_a_hat(self.a_hat)

    def __str__(self) -> str:
        return f"theta:{self.theta:g}" if self.kind == "theta" else self.kind


@dataclass(frozen=True)
class StabilizationChoice:
    viscous: ViscousStabilization = ViscousStabilization()
    advective: AdvectiveStabilization = AdvectiveStabilization()

    def __post_init__(self):
        if self.advective.kind != "upwind":
            self.advective.validate()


# --------------------------------------------------------------------------
# local elements


@dataclass(eq=False)
class LocalElement:
    """Geometry, bases and quadrature of one cell and its faces."""

    cell: Cell
    faces: list
    face_ids: np.ndarray
    normals: np.ndarray
    k: int
    qdeg: int

    @property
    def nk(self) -> int:
        return dim_cell(self.k)

    @property
    def nf(self) -> int:
        return dim_face(self.k)

    @property
    def n_scalar(self) -> int:
        return self.nk + len(self.faces) * self.nf

    @property
    def n_vector(self) -> int:
        return 2 * self.n_scalar

    def scalar_face_slice(self, i: int) -> slice:
        start = self.nk + i * self.nf
        return slice(start, start + self.nf)

    def vector_face_slice(self, i: int) -> slice:
        start = 2 * self.nk + 2 * i * self.nf
        return slice(start, start + 2 * self.nf)

    def vector_index(self) -> np.ndarray:
        """``idx[c, s]``: vector-layout index of scalar dof ``s`` in component ``c``."""
        nk, nf = self.nk, self.nf
        idx = np.empty((2, self.n_scalar), dtype=np.int64)
        for c in range(2):
            idx[c, :nk] = c * nk + np.arange(nk)
            for i in range(len(self.faces)):
                idx[c, self.scalar_face_slice(i)] = 2 * nk + 2 * i * nf + c * nf + np.arange(nf)
        return idx

    def vectorize(self, a_scalar: np.ndarray) -> np.ndarray:
        idx = self.vector_index()
        out = np.zeros((self.n_vector, self.n_vector))
        for c in range(2):
            out[np.ix_(idx[c], idx[c])] = a_scalar
        return out

    def to_vector(self, scalar_dofs: np.ndarray) -> np.ndarray:
        """Stack per-component scalar dof vectors (n_scalar, 2) into the vector layout."""
        idx = self.vector_index()
        out = np.empty(self.n_vector)
        out[idx[0]] = scalar_dofs[:, 0]
        out[idx[1]] = scalar_dofs[:, 1]
        return out

    def to_components(self, vec: np.ndarray) -> np.ndarray:
        idx = self.vector_index()
        return np.column_stack([vec[idx[0]], vec[idx[1]]])


def build_elements(mesh: Mesh, geom: GeometryCache, k: int, surplus: int = DEFAULT_SURPLUS) -> list:
    """Create a :class:`LocalElement` for every cell.

    Face objects are shared between the two owners so that face bases agree.
    """
    if k < 0:
        raise ValueError("polynomial degree must be >= 0")
    qdeg = 2 * (k + 1) + surplus
    faces = [Face(mesh.vertices[a], mesh.vertices[b]) for a, b in mesh.faces]
    elements = []
    for c in range(mesh.n_cells):
        cf = mesh.cell_faces[c]
        elements.append(
            LocalElement(
                cell=Cell.from_mesh(mesh, geom, c),
                faces=[faces[f] for f in cf],
                face_ids=np.asarray(cf),
                normals=geom.cell_normals[c],
                k=k,
                qdeg=qdeg,
            )
        )
    return elements


def interpolate_local(element: LocalElement, v: Field) -> np.ndarray:
    """Local interpolant I_T v in the vector layout."""
    k = element.k
    out = np.empty((element.n_scalar, 2))
    cell = element.cell
    rule = cell.quadrature(element.qdeg)
    phi = cell.basis(k).eval(rule.points)
    wphi = rule.weights[:, None] * phi
    out[: element.nk] = sla.cho_solve(sla.cho_factor(phi.T @ wphi), wphi.T @ v(rule.points))
    for i, face in enumerate(element.faces):
        rf = face.quadrature(element.qdeg)
        psi = face.basis(k).eval(rf.points)
        wpsi = rf.weights[:, None] * psi
        out[element.scalar_face_slice(i)] = sla.cho_solve(
            sla.cho_factor(psi.T @ wpsi), wpsi.T @ v(rf.points)
        )
    return element.to_vector(out)


# --------------------------------------------------------------------------
# reference quantities


class UndefinedReferenceTime(ValueError):
    pass


@dataclass(frozen=True)
class ReferenceQuantities:
    """Local reference velocity, Lipschitz bound, time and Peclet numbers.

    ``tau`` is ``inf`` when both the reaction and the Lipschitz bound vanish
    and the degenerate case was allowed.
    """

    vref: float
    lipschitz: float
    tau: float
    face_peclet: tuple  # per face, sampled Pe_TF at face quadrature nodes
    peclet: float
    lipschitz_estimated: bool = False

    @property
    def tau_inv(self) -> float:
        return 0.0 if math.isinf(self.tau) else 1.0 / self.tau


def local_reference_quantities(
    element: LocalElement, data: ProblemData, allow_degenerate: bool = False
) -> ReferenceQuantities:
    cell = element.cell
    rule = cell.quadrature(element.qdeg)
    face_pts = [f.quadrature(element.qdeg).points for f in element.faces]
    pts = np.vstack([rule.points, cell.vertices, *face_pts])
    vref = float(np.linalg.norm(data.beta(pts), axis=1).max())
    if data.lipschitz is not None and cell.index >= 0:
        lip = float(data.lipschitz(cell.index))
    else:
        jac = data.jacobian(pts)
        lip = float(np.linalg.norm(jac, axis=2).max())
    rate = max(data.mu, lip)
    if rate > 0.0:
        tau = 1.0 / rate
    elif allow_degenerate:
        tau = math.inf
    else:
        raise UndefinedReferenceTime(
            f"cell {cell.index}: mu = 0 and beta is constant, the reference time is undefined; "
            "drop the reaction part of the advection norm (allow_degenerate=True)"
        )
    face_pe = []
    for face, n in zip(element.faces, element.normals):
        rf = face.quadrature(element.qdeg)
        sigma = data.beta(rf.points) @ n
        face_pe.append(sigma * cell.diameter / data.nu)
    peclet = max(float(np.abs(p).max()) for p in face_pe)
    return ReferenceQuantities(
        vref=vref,
        lipschitz=lip,
        tau=tau,
        face_peclet=tuple(face_pe),
        peclet=peclet,
        lipschitz_estimated=data.lipschitz is None and data.beta_grad is None,
    )


# --------------------------------------------------------------------------
# local operators


@dataclass(eq=False)
class LocalOperatorSet:
    """Matrices of the local HHO construction on one cell.

    Scalar-layout operators: ``R`` (to P^{k+1}), ``I_high`` (interpolation of
    P^{k+1}), ``Delta``, ``G`` (advective derivative), ``S_visc`` (viscous
    stabilization, without the factor nu), ``consistency`` (gradient Gram of
    R, without nu).  Vector-layout: ``A_nu``, ``A_bm``, ``D``, ``B`` and the
    norm matrices.  Bilinear-form matrices are indexed ``[test, trial]``.
    """

    element: LocalElement
    mass_high: np.ndarray
    stiff_high: np.ndarray
    R: np.ndarray
    I_high: np.ndarray
    Delta: np.ndarray
    S_visc: np.ndarray
    consistency: np.ndarray
    G: np.ndarray
    D: np.ndarray
    B: np.ndarray
    A_nu: np.ndarray
    A_bm: np.ndarray
    S_minus: np.ndarray
    S_plus: np.ndarray
    jump_abs_sigma: np.ndarray
    jump_h: np.ndarray
    load: np.ndarray
    ref: ReferenceQuantities
    nu: float
    mu: float
    viscous: ViscousStabilization
    advective: AdvectiveStabilization

    @property
    def mass(self) -> np.ndarray:
        nk = self.element.nk
        return self.mass_high[:nk, :nk]

    @property
    def stiffness(self) -> np.ndarray:
        nk = self.element.nk
        return self.stiff_high[:nk, :nk]

    @property
    def cell_selector(self) -> np.ndarray:
        """Scalar layout -> cell coefficients."""
        e = self.element
        return np.eye(e.nk, e.n_scalar)

    @property
    def A(self) -> np.ndarray:
        return self.A_nu + self.A_bm

    def norm_1(self) -> np.ndarray:
        """Matrix of the discrete H1-like seminorm ||.||_{1,T}^2 (vector layout)."""
        e = self.element
        s = np.zeros((e.n_scalar, e.n_scalar))
        s[: e.nk, : e.nk] = self.stiffness
        return e.vectorize(s + self.jump_h)

    def norm_bm(self) -> np.ndarray:
        """Matrix of the advection-reaction norm contribution (vector layout)."""
        e = self.element
        s = 0.5 * self.jump_abs_sigma
        s[: e.nk, : e.nk] += self.ref.tau_inv * self.mass
        return e.vectorize(s)

    def reconstruct(self, vec: np.ndarray) -> np.ndarray:
        """Coefficients (dim P^{k+1}, 2) of r_T applied to a local vector."""
        return self.R @ self.element.to_components(vec)


def _cell_face_jump(psi, phi_k, element, i):
    """Values at face nodes of v_F - v_T as a map from the scalar layout."""
    z = np.zeros((psi.shape[0], element.n_scalar))
    z[:, : element.nk] = -phi_k
    z[:, element.scalar_face_slice(i)] = psi
    return z


def build_local_operators(
    element: LocalElement,
    data: ProblemData,
    choice: StabilizationChoice = StabilizationChoice(),
    allow_degenerate: bool = True,
) -> LocalOperatorSet:
    k, nk, ns = element.k, element.nk, element.n_scalar
    cell = element.cell
    basis_high = cell.basis(k + 1)
    nk1 = basis_high.dim
    rule = cell.quadrature(element.qdeg)
    w = rule.weights
    phi1 = basis_high.eval(rule.points)
    dphi1 = basis_high.grad(rule.points)
    phik = phi1[:, :nk]
    dphik = dphi1[:, :nk]
    mass1 = phi1.T @ (w[:, None] * phi1)
    stiff1 = np.einsum("q,qid,qjd->ij", w, dphi1, dphi1)
    massk = mass1[:nk, :nk]

    beta_cell = data.beta(rule.points)
    adv = np.einsum("qd,qjd->qj", beta_cell, dphik)  # (beta . grad) phi_j

    rec_rhs = np.zeros((nk1, ns))
    rec_rhs[:, :nk] = stiff1[:, :nk]
    g_rhs = np.zeros((nk, ns))
    g_rhs[:, :nk] = (w[:, None] * phik).T @ adv
    d_rhs = np.zeros((nk, element.n_vector))
    vidx = element.vector_index()
    for c in range(2):
        d_rhs[:, vidx[c, :nk]] = -np.einsum("q,qi,qj->ij", w, dphik[:, :, c], phik)
    interp = np.zeros((ns, nk1))
    try:
        mass_factor = sla.cho_factor(massk)
    except np.linalg.LinAlgError as exc:
        raise ProjectionError(f"singular mass matrix on cell {cell.index}") from exc
    interp[:nk] = sla.cho_solve(mass_factor, mass1[:nk])

    s_visc = np.zeros((ns, ns))
    s_minus = np.zeros((ns, ns))
    s_plus = np.zeros((ns, ns))
    jump_abs = np.zeros((ns, ns))
    jump_h = np.zeros((ns, ns))
    face_data = []
    ref = local_reference_quantities(element, data, allow_degenerate=allow_degenerate)
    a_minus = None if choice.advective.kind == "upwind" else choice.advective.a_minus

    for i, (face, n) in enumerate(zip(element.faces, element.normals)):
        rf = face.quadrature(element.qdeg)
        wf = rf.weights
        psi = face.basis(k).eval(rf.points)
        phi1_f = basis_high.eval(rf.points)
        dphi1_f = basis_high.grad(rf.points)
        phik_f = phi1_f[:, :nk]
        dn = dphi1_f @ n  # normal derivatives of P^{k+1} basis
        sl = element.scalar_face_slice(i)
        hf = face.diameter

        # reconstruction: (grad v_T, grad w) + sum (v_F - v_T, grad w . n)
        rec_rhs[:, :nk] -= dn.T @ (wf[:, None] * phik_f)
        rec_rhs[:, sl] += dn.T @ (wf[:, None] * psi)

        face_mass = psi.T @ (wf[:, None] * psi)
        interp[sl] = sla.cho_solve(sla.cho_factor(face_mass), psi.T @ (wf[:, None] * phi1_f))

        sigma = data.beta(rf.points) @ n
        g_rhs[:, :nk] -= phik_f.T @ ((wf * sigma)[:, None] * phik_f)
        g_rhs[:, sl] += phik_f.T @ ((wf * sigma)[:, None] * psi)
        for c in range(2):
            d_rhs[:, vidx[c, sl]] += phik_f.T @ ((wf * n[c])[:, None] * psi)

        z = _cell_face_jump(psi, phik_f, element, i)
        if a_minus is None:
            weight_minus = 0.5 * (np.abs(sigma) - sigma)
        else:
            weight_minus = data.nu / hf * a_minus(sigma * cell.diameter / data.nu)
        s_minus += z.T @ ((wf * weight_minus)[:, None] * z)
        s_plus += z.T @ ((wf * 0.5 * (np.abs(sigma) + sigma))[:, None] * z)
        jump_abs += z.T @ ((wf * np.abs(sigma))[:, None] * z)
        jump_h += z.T @ (wf[:, None] * z) / hf
        face_data.append((psi, phik_f, wf, hf, z))

    # reconstruction: gradient equations on non-constant functions, mean condition on constants
    R = np.empty((nk1, ns))
    try:
        R[1:] = np.linalg.solve(stiff1[1:, 1:], rec_rhs[1:])
    except np.linalg.LinAlgError as exc:
        raise ProjectionError(f"singular reconstruction stiffness on cell {cell.index}") from exc
    mean1 = w @ phi1
    R[0] = -(mean1[1:] @ R[1:])
    R[0, :nk] += w @ phik
    R[0] /= mean1[0]

    delta = interp @ R
    delta[np.diag_indices(ns)] -= 1.0

    if choice.viscous.kind == "hho":
        for i, (psi, phik_f, wf, hf, _) in enumerate(face_data):
            zf = psi @ delta[element.scalar_face_slice(i)] - phik_f @ delta[:nk]
            s_visc += zf.T @ (wf[:, None] * zf) / hf
    else:
        for psi, phik_f, wf, hf, z in face_data:
            eta = 1.0 / hf if choice.viscous.eta is None else choice.viscous.eta
            s_visc += eta * (z.T @ (wf[:, None] * z))

    consistency = R.T @ stiff1 @ R
    G = sla.cho_solve(mass_factor, g_rhs)
    D = sla.cho_solve(mass_factor, d_rhs)

    sel = np.eye(nk, ns)
    # a_bm(w, v) = -(w_T, G v) + mu (w_T, v_T) + s^-(w, v), stored [test v, trial w]
    adv_form = -(G.T @ massk @ sel) + data.mu * (sel.T @ massk @ sel) + s_minus
    A_nu = element.vectorize(data.nu * (consistency + s_visc))
    A_bm = element.vectorize(adv_form)

    fvals = data.f(rule.points)
    load_scalar = np.zeros((ns, 2))
    load_scalar[:nk] = (w[:, None] * phik).T @ fvals
    load = element.to_vector(load_scalar)

    return LocalOperatorSet(
        element=element,
        mass_high=mass1,
        stiff_high=stiff1,
        R=R,
        I_high=interp,
        Delta=delta,
        S_visc=s_visc,
        consistency=consistency,
        G=G,
        D=D,
        B=-(massk @ D),
        A_nu=A_nu,
        A_bm=A_bm,
        S_minus=s_minus,
        S_plus=s_plus,
        jump_abs_sigma=jump_abs,
        jump_h=jump_h,
        load=load,
        ref=ref,
        nu=data.nu,
        mu=data.mu,
        viscous=choice.viscous,
        advective=choice.advective,
    )


def warn_estimated_lipschitz(data: ProblemData) -> None:
    if data.lipschitz_estimated:
        warnings.warn("Lipschitz bound of beta estimated by finite differences", stacklevel=2)
