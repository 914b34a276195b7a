"""Scaled monomial bases, polygon quadrature and local projectors."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg as sla
from scipy.special import roots_jacobi

from .mesh import GeometryCache, Mesh

__all__ = [
    "ProjectionError",
    "QuadratureError",
    "monomial_exponents",
    "dim_cell",
    "dim_face",
    "Cell",
    "Face",
    "CellBasis",
    "FaceBasis",
    "QuadratureRule",
    "quadrature_rule",
    "l2_project",
    "elliptic_project",
    "DEFAULT_SURPLUS",
]

DEFAULT_SURPLUS = 4


class QuadratureError(ValueError):
    pass


class ProjectionError(ValueError):
    pass


def dim_cell(degree: int) -> int:
    return (degree + 1) * (degree + 2) // 2


def dim_face(degree: int) -> int:
    return degree + 1


@lru_cache(maxsize=None)
def monomial_exponents(degree: int) -> np.ndarray:
    """Exponents (a, b) with a + b <= degree in graded-lex order."""
    exps = [(d - b, b) for d in range(degree + 1) for b in range(d + 1)]
    out = np.array(exps, dtype=np.int64).reshape(-1, 2)
    out.setflags(write=False)
    return out


# --------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    kind: str
    points: np.ndarray
    weights: np.ndarray
    degree: int

    def integrate(self, values: np.ndarray) -> np.ndarray:
        return np.tensordot(self.weights, values, axes=(0, 0))


@lru_cache(maxsize=None)
def _gauss_legendre01(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def _reference_triangle(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Collapsed Gauss rule on the triangle (0,0), (1,0), (0,1)."""
    n = max(1, math.ceil((degree + 1) / 2))
    u, wu = _gauss_legendre01(n)
    t, wt = roots_jacobi(n, 1.0, 0.0)
    v = 0.5 * (t + 1.0)
    wv = 0.25 * wt
    U, V = np.meshgrid(u, v, indexing="ij")
    pts = np.column_stack([(U * (1.0 - V)).ravel(), V.ravel()])
    w = np.outer(wu, wv).ravel()
    return pts, w


def _triangle_rule(a, b, c, degree: int) -> tuple[np.ndarray, np.ndarray]:
    ref, w = _reference_triangle(degree)
    e1, e2 = b - a, c - a
    jac = e1[0] * e2[1] - e1[1] * e2[0]
    pts = a + ref[:, :1] * e1 + ref[:, 1:] * e2
    return pts, w * jac


def _segment_rule(a, b, degree: int) -> tuple[np.ndarray, np.ndarray]:
    n = max(1, math.ceil((degree + 1) / 2))
    s, w = _gauss_legendre01(n)
    length = float(np.hypot(*(b - a)))
    return a + s[:, None] * (b - a), w * length


# --------------------------------------------------------------------------
# geometric entities


@dataclass(eq=False)
class Cell:
    """A polygonal mesh cell with counterclockwise ``vertices``."""

    vertices: np.ndarray
    centroid: np.ndarray
    diameter: float
    area: float
    index: int = -1
    _rules: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_vertices(cls, vertices) -> "Cell":
        pts = np.asarray(vertices, dtype=float)
        x, y = pts[:, 0], pts[:, 1]
        xn, yn = np.roll(x, -1), np.roll(y, -1)
        cross = x * yn - xn * y
        area = 0.5 * cross.sum()
        centroid = np.array([((x + xn) * cross).sum(), ((y + yn) * cross).sum()]) / (6.0 * area)
        diff = pts[:, None, :] - pts[None, :, :]
        diam = float(np.sqrt((diff**2).sum(-1)).max())
        return cls(pts, centroid, diam, float(area))

    @classmethod
    def from_mesh(cls, mesh: Mesh, geom: GeometryCache, c: int) -> "Cell":
        return cls(
            mesh.vertices[mesh.cells[c]],
            geom.cell_centroids[c],
            float(geom.cell_diameters[c]),
            float(geom.cell_areas[c]),
            index=c,
        )

    def quadrature(self, degree: int) -> QuadratureRule:
        rule = self._rules.get(degree)
        if rule is None:
            rule = quadrature_rule(self, degree)
            self._rules[degree] = rule
        return rule

    def basis(self, degree: int) -> "CellBasis":
        return CellBasis(degree, self.centroid, self.diameter)


@dataclass(eq=False)
class Face:
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        t = self.b - self.a
        self.length = float(np.hypot(*t))
        self.tangent = t / self.length
        self.midpoint = 0.5 * (self.a + self.b)
        self._rules = {}

    @property
    def diameter(self) -> float:
        return self.length

    def quadrature(self, degree: int) -> QuadratureRule:
        rule = self._rules.get(degree)
        if rule is None:
            rule = quadrature_rule(self, degree)
            self._rules[degree] = rule
        return rule

    def basis(self, degree: int) -> "FaceBasis":
        return FaceBasis(degree, self.midpoint, self.tangent, self.length)


def quadrature_rule(entity, exactness: int) -> QuadratureRule:
    """Quadrature exact for polynomials of total degree ``exactness``.

    Cells are split into triangles from the centroid (triangles are used
    as they are); faces use a Gauss-Legendre rule.
    """
    if exactness < 0:
        raise ValueError("exactness must be >= 0")
    if isinstance(entity, Face):
        pts, w = _segment_rule(entity.a, entity.b, exactness)
        return QuadratureRule("face", pts, w, exactness)
    verts = entity.vertices
    if len(verts) == 3:
        pts, w = _triangle_rule(verts[0], verts[1], verts[2], exactness)
        return QuadratureRule("cell", pts, w, exactness)
    xc = entity.centroid
    parts_p, parts_w = [], []
    for i in range(len(verts)):
        a, b = verts[i], verts[(i + 1) % len(verts)]
        cross = (a[0] - xc[0]) * (b[1] - xc[1]) - (a[1] - xc[1]) * (b[0] - xc[0])
        if cross <= 0.0:
            raise QuadratureError(
                f"cell {entity.index} is not star-shaped with respect to its centroid"
            )
        p, w = _triangle_rule(xc, a, b, exactness)
        parts_p.append(p)
        parts_w.append(w)
    return QuadratureRule("cell", np.concatenate(parts_p), np.concatenate(parts_w), exactness)


# --------------------------------------------------------------------------
# bases


@dataclass(frozen=True, eq=False)
class CellBasis:
    """Scaled monomials ((x - x_T)/h_T)^a ((y - y_T)/h_T)^b.

    With ``transform`` set, the basis is ``monomials @ transform`` (an upper
    triangular change of basis, so the first ``dim_cell(l)`` functions still
    span P^l for every l <= degree).
    """

    degree: int
    center: np.ndarray
    scale: float
    transform: np.ndarray | None = None

    @property
    def exponents(self) -> np.ndarray:
        return monomial_exponents(self.degree)

    @property
    def dim(self) -> int:
        return dim_cell(self.degree)

    def _powers(self, points, degree):
        z = (np.asarray(points, dtype=float) - self.center) / self.scale
        px = z[:, :1] ** np.arange(degree + 1)
        py = z[:, 1:] ** np.arange(degree + 1)
        return px, py

    def eval(self, points) -> np.ndarray:
        e = self.exponents
        px, py = self._powers(points, self.degree)
        vals = px[:, e[:, 0]] * py[:, e[:, 1]]
        return vals if self.transform is None else vals @ self.transform

    def grad(self, points) -> np.ndarray:
        """Gradients, shape (npts, dim, 2)."""
        e = self.exponents
        px, py = self._powers(points, self.degree)
        ex, ey = e[:, 0], e[:, 1]
        dpx = np.zeros_like(px)
        dpy = np.zeros_like(py)
        dpx[:, 1:] = px[:, :-1] * np.arange(1, self.degree + 1)
        dpy[:, 1:] = py[:, :-1] * np.arange(1, self.degree + 1)
        gx = dpx[:, ex] * py[:, ey] / self.scale
        gy = px[:, ex] * dpy[:, ey] / self.scale
        g = np.stack([gx, gy], axis=-1)
        if self.transform is not None:
            g = np.einsum("pid,ij->pjd", g, self.transform)
        return g

    def orthonormalized(self, rule: QuadratureRule) -> "CellBasis":
        """Return the Gram-Cholesky orthonormalization of this basis on ``rule``."""
        phi = self.eval(rule.points)
        gram = phi.T @ (rule.weights[:, None] * phi)
        lower = np.linalg.cholesky(gram)
        inv = sla.solve_triangular(lower, np.eye(self.dim), lower=True).T
        base = np.eye(self.dim) if self.transform is None else self.transform
        return CellBasis(self.degree, self.center, self.scale, base @ inv)


@dataclass(frozen=True, eq=False)
class FaceBasis:
    """1D monomials ((x - x_F) . t_F / h_F)^i."""

    degree: int
    midpoint: np.ndarray
    tangent: np.ndarray
    scale: float

    @property
    def dim(self) -> int:
        return dim_face(self.degree)

    def coordinate(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.midpoint) @ self.tangent / self.scale

    def eval(self, points) -> np.ndarray:
        s = self.coordinate(points)
        return s[:, None] ** np.arange(self.degree + 1)


# --------------------------------------------------------------------------
# projectors


def _values(f, points) -> np.ndarray:
    vals = f(points) if callable(f) else np.broadcast_to(np.asarray(f, float), (len(points),))
    vals = np.asarray(vals, dtype=float)
    if vals.ndim == 0:
        vals = np.full(len(points), float(vals))
    return vals


def _gram_solve(gram: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    try:
        factor = sla.cho_factor(gram)
    except np.linalg.LinAlgError as exc:
        raise ProjectionError(f"singular Gram matrix on {what} (degenerate geometry)") from exc
    return sla.cho_solve(factor, rhs)


def l2_project(entity, l: int, f, exactness: int | None = None, basis=None) -> np.ndarray:
    """Coefficients of the L2-orthogonal projection of ``f`` onto P^l(entity).

    ``f`` maps an (n, 2) array of points to (n,) or (n, m) values; for
    vector-valued ``f`` the coefficients have shape (dim, m).
    """
    if exactness is None:
        exactness = 2 * l + DEFAULT_SURPLUS
    rule = entity.quadrature(exactness)
    basis = entity.basis(l) if basis is None else basis
    phi = basis.eval(rule.points)
    wphi = rule.weights[:, None] * phi
    gram = phi.T @ wphi
    rhs = wphi.T @ _values(f, rule.points)
    kind = "face" if isinstance(entity, Face) else f"cell {getattr(entity, 'index', -1)}"
    return _gram_solve(gram, rhs, kind)


def elliptic_project(cell: Cell, l: int, f, grad_f, exactness: int | None = None, basis=None) -> np.ndarray:
    """Coefficients of the elliptic projection of ``f`` onto P^l(cell).

    ``grad_f`` maps (n, 2) points to (n, 2) gradients.
    """
    if exactness is None:
        exactness = 2 * l + DEFAULT_SURPLUS
    rule = cell.quadrature(exactness)
    basis = cell.basis(l) if basis is None else basis
    w = rule.weights
    phi = basis.eval(rule.points)
    dphi = basis.grad(rule.points)
    fv = _values(f, rule.points)
    gf = np.asarray(grad_f(rule.points), dtype=float)
    stiff = np.einsum("q,qid,qjd->ij", w, dphi, dphi)
    rhs = np.einsum("q,qid,qd->i", w, dphi, gf)
    mean_row = w @ phi
    # gradient equations are void on constants (index 0); close with the mean condition
    system = stiff.copy()
    system[0] = mean_row
    rhs = rhs.copy()
    rhs[0] = w @ fv
    try:
        return np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError as exc:
        raise ProjectionError(f"singular elliptic system on cell {cell.index}") from exc
