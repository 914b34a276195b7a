"""Test cases: Kovasznay flow and manufactured polynomial solutions."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.signal import convolve2d

from .hho_local import ProblemData
from .mesh import KOVASZNAY_DOMAIN

__all__ = [
    "CaseDefinition",
    "CaseConsistencyError",
    "KovasznayParams",
    "Poly2",
    "kovasznay_case",
    "manufactured_case",
]


class CaseConsistencyError(ValueError):
    pass


@dataclass(eq=False)
class CaseDefinition:
    """Exact solution, problem data and domain of a benchmark.

    ``grad_u(points)`` returns (n, 2, 2) Jacobians ``J[:, i, j] = d u_i/d x_j``.
    """

    name: str
    u: Callable
    grad_u: Callable
    laplacian_u: Callable
    p: Callable
    grad_p: Callable
    data: ProblemData
    domain: tuple
    metadata: dict

    def __post_init__(self):
        self.check()

    def sample_points(self, n: int = 1000, seed: int = 0) -> np.ndarray:
        rng = np.random.default_rng(seed)
        (x0, x1), (y0, y1) = self.domain
        return np.column_stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n)])

    def momentum_residual(self, points) -> np.ndarray:
        d = self.data
        u = self.u(points)
        conv = np.einsum("qj,qij->qi", d.beta(points), self.grad_u(points))
        lhs = -d.nu * self.laplacian_u(points) + conv + d.mu * u + self.grad_p(points)
        return d.f(points) - lhs

    def check(self, n: int = 1000) -> None:
        pts = self.sample_points(n)
        jac = self.grad_u(pts)
        uscale = max(float(np.abs(jac).max()), float(np.abs(self.u(pts)).max()), 1e-300)
        div = np.abs(jac[:, 0, 0] + jac[:, 1, 1]).max()
        if div > 1e-10 * uscale:
            raise CaseConsistencyError(f"{self.name}: exact velocity is not solenoidal ({div:.3e})")
        d = self.data
        terms = [
            d.nu * np.abs(self.laplacian_u(pts)).max(),
            np.abs(d.beta(pts)).max() * np.abs(jac).max(),
            d.mu * np.abs(self.u(pts)).max(),
            np.abs(self.grad_p(pts)).max(),
            np.abs(d.f(pts)).max(),
        ]
        scale = max(max(terms), 1e-300)
        res = np.abs(self.momentum_residual(pts)).max()
        if res > 1e-8 * scale:
            raise CaseConsistencyError(f"{self.name}: forcing inconsistent with the momentum equation ({res:.3e})")


# --------------------------------------------------------------------------
# Kovasznay


@dataclass(frozen=True)
class KovasznayParams:
    peclet: float

    def __post_init__(self):
        if not self.peclet > 0.0:
            raise ValueError(f"Peclet number must be positive, got {self.peclet}")

    @property
    def lam(self) -> float:
        # Pe - sqrt(Pe^2 + 4 pi^2) without cancellation
        pe = self.peclet
        return -4.0 * math.pi**2 / (pe + math.sqrt(pe * pe + 4.0 * math.pi**2))

    @property
    def nu(self) -> float:
        return 1.0 / (2.0 * self.peclet)

    @property
    def p_bar(self) -> float:
        lam = self.lam
        # mean of exp(2 lam x)/2 over (-0.5, 1.5) x (0, 2)
        return math.expm1(4.0 * lam) * math.exp(-lam) / (8.0 * lam)


def _kovasznay_p_bar_quadrature(lam: float) -> float:
    x, w = np.polynomial.legendre.leggauss(60)
    xs = 0.5 + x  # (-0.5, 1.5)
    return float(0.5 * (w * 0.5 * np.exp(2.0 * lam * xs)).sum())


def kovasznay_case(peclet: float) -> CaseDefinition:
    params = KovasznayParams(peclet)
    lam, nu = params.lam, params.nu
    p_bar = params.p_bar
    check = _kovasznay_p_bar_quadrature(lam)
    if abs(check - p_bar) > 1e-10 * max(1.0, abs(p_bar)):
        raise CaseConsistencyError(f"pressure mean mismatch: closed form {p_bar} vs quadrature {check}")
    tp = 2.0 * math.pi

    def u(pts):
        x, y = pts[:, 0], pts[:, 1]
        e = np.exp(lam * x)
        return np.column_stack([1.0 - e * np.cos(tp * y), lam / tp * e * np.sin(tp * y)])

    def grad_u(pts):
        x, y = pts[:, 0], pts[:, 1]
        e = np.exp(lam * x)
        c, s = np.cos(tp * y), np.sin(tp * y)
        jac = np.empty((len(pts), 2, 2))
        jac[:, 0, 0] = -lam * e * c
        jac[:, 0, 1] = tp * e * s
        jac[:, 1, 0] = lam**2 / tp * e * s
        jac[:, 1, 1] = lam * e * c
        return jac

    def laplacian_u(pts):
        x, y = pts[:, 0], pts[:, 1]
        e = np.exp(lam * x)
        k2 = tp**2 - lam**2
        return np.column_stack([k2 * e * np.cos(tp * y), -lam / tp * k2 * e * np.sin(tp * y)])

    def p(pts):
        return p_bar - 0.5 * np.exp(2.0 * lam * pts[:, 0])

    def grad_p(pts):
        return np.column_stack([-lam * np.exp(2.0 * lam * pts[:, 0]), np.zeros(len(pts))])

    def f(pts):
        conv = np.einsum("qj,qij->qi", u(pts), grad_u(pts))
        return -nu * laplacian_u(pts) + conv + grad_p(pts)

    data = ProblemData(nu=nu, beta=u, mu=0.0, f=f, dirichlet=u, beta_grad=grad_u)
    return CaseDefinition(
        name=f"kovasznay(Pe={peclet:g})",
        u=u,
        grad_u=grad_u,
        laplacian_u=laplacian_u,
        p=p,
        grad_p=grad_p,
        data=data,
        domain=KOVASZNAY_DOMAIN,
        metadata={"lambda": lam, "p_bar": p_bar, "peclet": peclet, "boundary": "non-homogeneous strong projection"},
    )


# --------------------------------------------------------------------------
# manufactured polynomial solutions


class Poly2:
    """Bivariate polynomial sum c[i, j] x^i y^j."""

    def __init__(self, coef):
        c = np.atleast_2d(np.asarray(coef, dtype=float))
        self.coef = c

    @classmethod
    def from_terms(cls, terms: dict) -> "Poly2":
        deg = max(max(i, j) for i, j in terms) if terms else 0
        c = np.zeros((deg + 1, deg + 1))
        for (i, j), v in terms.items():
            c[i, j] += v
        return cls(c)

    def __call__(self, pts) -> np.ndarray:
        return np.polynomial.polynomial.polyval2d(pts[:, 0], pts[:, 1], self.coef)

    def dx(self) -> "Poly2":
        return Poly2(np.polynomial.polynomial.polyder(self.coef, axis=0)) if self.coef.shape[0] > 1 else Poly2(0.0)

    def dy(self) -> "Poly2":
        return Poly2(np.polynomial.polynomial.polyder(self.coef, axis=1)) if self.coef.shape[1] > 1 else Poly2(0.0)

    def __add__(self, other) -> "Poly2":
        other = other if isinstance(other, Poly2) else Poly2(other)
        shape = np.maximum(self.coef.shape, other.coef.shape)
        out = np.zeros(shape)
        out[: self.coef.shape[0], : self.coef.shape[1]] += self.coef
        out[: other.coef.shape[0], : other.coef.shape[1]] += other.coef
        return Poly2(out)

    def __neg__(self) -> "Poly2":
        return Poly2(-self.coef)

    def __sub__(self, other) -> "Poly2":
        return self + (-(other if isinstance(other, Poly2) else Poly2(other)))

    def __mul__(self, other) -> "Poly2":
        if isinstance(other, Poly2):
            return Poly2(convolve2d(self.coef, other.coef))
        return Poly2(self.coef * float(other))

    __rmul__ = __mul__

    def is_zero(self, tol: float = 0.0) -> bool:
        return bool(np.all(np.abs(self.coef) <= tol))

    def integrate_rectangle(self, domain) -> float:
        (x0, x1), (y0, y1) = domain
        i = np.arange(self.coef.shape[0])[:, None]
        j = np.arange(self.coef.shape[1])[None, :]
        ix = (x1 ** (i + 1) - x0 ** (i + 1)) / (i + 1)
        iy = (y1 ** (j + 1) - y0 ** (j + 1)) / (j + 1)
        return float((self.coef * ix * iy).sum())

    @property
    def degree(self) -> int:
        nz = np.argwhere(np.abs(self.coef) > 0)
        return int(nz.sum(axis=1).max()) if len(nz) else 0


def _vec(fx: Poly2, fy: Poly2):
    return lambda pts: np.column_stack([fx(pts), fy(pts)])


def manufactured_case(
    u: tuple,
    p: Poly2,
    beta: tuple,
    nu: float,
    mu: float = 0.0,
    domain=((0.0, 1.0), (0.0, 1.0)),
    name: str = "manufactured",
) -> CaseDefinition:
    """Polynomial exact solution with the forcing computed by polynomial calculus.

    ``u`` and ``beta`` are pairs of :class:`Poly2`; both must be solenoidal.
    ``p`` is shifted to zero mean over ``domain``.
    """
    ux, uy = (q if isinstance(q, Poly2) else Poly2(q) for q in u)
    bx, by = (q if isinstance(q, Poly2) else Poly2(q) for q in beta)
    p = p if isinstance(p, Poly2) else Poly2(p)
    if not (ux.dx() + uy.dy()).is_zero(1e-12):
        raise CaseConsistencyError("velocity is not divergence-free")
    if not (bx.dx() + by.dy()).is_zero(1e-12):
        raise CaseConsistencyError("advection field is not divergence-free")
    (x0, x1), (y0, y1) = domain
    p = p - p.integrate_rectangle(domain) / ((x1 - x0) * (y1 - y0))

    lap = [c.dx().dx() + c.dy().dy() for c in (ux, uy)]
    conv = [bx * c.dx() + by * c.dy() for c in (ux, uy)]
    fx = -nu * lap[0] + conv[0] + mu * ux + p.dx()
    fy = -nu * lap[1] + conv[1] + mu * uy + p.dy()

    def jac_of(cx, cy):
        polys = ((cx.dx(), cx.dy()), (cy.dx(), cy.dy()))

        def jac(pts):
            out = np.empty((len(pts), 2, 2))
            for i in range(2):
                for j in range(2):
                    out[:, i, j] = polys[i][j](pts)
            return out

        return jac

    data = ProblemData(
        nu=nu,
        beta=_vec(bx, by),
        mu=mu,
        f=_vec(fx, fy),
        dirichlet=_vec(ux, uy),
        beta_grad=jac_of(bx, by),
    )
    return CaseDefinition(
        name=name,
        u=_vec(ux, uy),
        grad_u=jac_of(ux, uy),
        laplacian_u=_vec(*lap),
        p=p,
        grad_p=_vec(p.dx(), p.dy()),
        data=data,
        domain=domain,
        metadata={"forcing": (fx, fy), "pressure": p},
    )
