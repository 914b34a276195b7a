"""Polygonal meshes: representation, generators, file I/O and geometry.

Only two-dimensional meshes with straight faces are supported.  Cells are
stored as counterclockwise vertex loops; faces (edges) and their owner cells
are always derived from the cells.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "MeshError",
    "MeshParseError",
    "MeshTopologyError",
    "MeshValidationError",
    "Mesh",
    "GeometryCache",
    "MeshQualityReport",
    "load_mesh",
    "save_mesh",
    "generate_mesh",
    "compute_geometry",
    "validate_mesh",
    "UNIT_SQUARE",
    "KOVASZNAY_DOMAIN",
]

UNIT_SQUARE = ((0.0, 1.0), (0.0, 1.0))
KOVASZNAY_DOMAIN = ((-0.5, 1.5), (0.0, 2.0))


class MeshError(Exception):
    """Base class for mesh failures."""


class MeshParseError(MeshError):
    pass


class MeshTopologyError(MeshError):
    pass


class MeshValidationError(MeshError):
    pass


@dataclass(frozen=True, eq=False)
class Mesh:
    """Element-face pair of a 2D polygonal mesh.

    ``face_cells[f]`` holds the owner cells of face ``f``; the second entry
    is ``-1`` on boundary faces.  ``cell_faces[c][i]`` is the face joining
    vertices ``cells[c][i]`` and ``cells[c][i + 1]``.
    """

    vertices: np.ndarray
    cells: tuple
    faces: np.ndarray
    face_cells: np.ndarray
    cell_faces: tuple
    dim: int = 2

    @classmethod
    def from_cells(cls, vertices, cells) -> "Mesh":
        vertices = np.ascontiguousarray(vertices, dtype=float)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise MeshParseError(f"vertices must have shape (n, 2), got {vertices.shape}")
        nv = len(vertices)
        cells = tuple(np.asarray(c, dtype=np.int64) for c in cells)
        if not cells:
            raise MeshTopologyError("mesh has no cells")

        edge_index: dict[tuple[int, int], int] = {}
        faces: list[tuple[int, int]] = []
        owners: list[list[int]] = []
        cell_faces = []
        for c, loop in enumerate(cells):
            if len(loop) < 3:
                raise MeshTopologyError(f"cell {c} has fewer than 3 vertices")
            if loop.min() < 0 or loop.max() >= nv:
                raise MeshTopologyError(f"cell {c} references a missing vertex")
            if len(set(loop.tolist())) != len(loop):
                raise MeshTopologyError(f"cell {c} repeats a vertex")
            cf = np.empty(len(loop), dtype=np.int64)
            for i in range(len(loop)):
                a, b = int(loop[i]), int(loop[(i + 1) % len(loop)])
                key = (a, b) if a < b else (b, a)
                f = edge_index.get(key)
                if f is None:
                    f = len(faces)
                    edge_index[key] = f
                    faces.append(key)
                    owners.append([])
                owners[f].append(c)
                cf[i] = f
            cell_faces.append(cf)

        face_cells = np.full((len(faces), 2), -1, dtype=np.int64)
        for f, own in enumerate(owners):
            if len(own) > 2:
                raise MeshTopologyError(f"face {f} {faces[f]} is shared by {len(own)} cells")
            if len(own) == 2 and own[0] == own[1]:
                raise MeshTopologyError(f"face {f} {faces[f]} appears twice in cell {own[0]}")
            face_cells[f, : len(own)] = own

        mesh = cls(
            vertices=vertices,
            cells=cells,
            faces=np.array(faces, dtype=np.int64).reshape(-1, 2),
            face_cells=face_cells,
            cell_faces=tuple(cell_faces),
        )
        for c, loop in enumerate(cells):
            area, _ = _signed_area_centroid(vertices[loop])
            if area < 0.0:
                raise MeshValidationError(f"cell {c} is inverted (clockwise vertex loop)")
        mesh._check_closed_boundary()
        return mesh

    def _check_closed_boundary(self) -> None:
        # oriented boundary edges must form closed loops
        balance = np.zeros(len(self.vertices), dtype=np.int64)
        for f in self.boundary_faces:
            c = self.face_cells[f, 0]
            a, b = self.oriented_face(c, f)
            balance[a] += 1
            balance[b] -= 1
        bad = np.flatnonzero(balance)
        if bad.size:
            raise MeshTopologyError(f"open boundary at vertex {int(bad[0])}")

    def oriented_face(self, cell: int, face: int) -> tuple[int, int]:
        """Vertices of ``face`` in the traversal order of ``cell``."""
        loop = self.cells[cell]
        i = int(np.flatnonzero(self.cell_faces[cell] == face)[0])
        return int(loop[i]), int(loop[(i + 1) % len(loop)])

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def boundary_faces(self) -> np.ndarray:
        return np.flatnonzero(self.face_cells[:, 1] < 0)

    @property
    def interior_faces(self) -> np.ndarray:
        return np.flatnonzero(self.face_cells[:, 1] >= 0)

    @property
    def is_boundary_face(self) -> np.ndarray:
        return self.face_cells[:, 1] < 0

    def bounding_box(self) -> tuple[tuple[float, float], tuple[float, float]]:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return (float(lo[0]), float(hi[0])), (float(lo[1]), float(hi[1]))


@dataclass(frozen=True, eq=False)
class GeometryCache:
    """Per-cell and per-face geometric quantities.

    ``cell_normals[c]`` lists the unit normals of the faces of ``c`` (in the
    order of ``mesh.cell_faces[c]``) pointing out of ``c``.
    """

    cell_diameters: np.ndarray
    cell_areas: np.ndarray
    cell_signed_areas: np.ndarray
    cell_centroids: np.ndarray
    face_diameters: np.ndarray
    face_midpoints: np.ndarray
    face_normals: np.ndarray  # (nf, 2): normal pointing out of face_cells[f, 0]
    cell_normals: tuple
    h: float
    domain_diameter: float

    @property
    def face_measures(self) -> np.ndarray:
        return self.face_diameters

    def normal(self, mesh: Mesh, cell: int, face: int) -> np.ndarray:
        sign = 1.0 if mesh.face_cells[face, 0] == cell else -1.0
        return sign * self.face_normals[face]


@dataclass(frozen=True)
class MeshQualityReport:
    min_face_cell_ratio: float
    max_face_cell_ratio: float
    max_faces_per_cell: int
    min_cell_measure: float
    star_shaped: tuple


def _signed_area_centroid(pts: np.ndarray) -> tuple[float, np.ndarray]:
    x, y = pts[:, 0], pts[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * cross.sum()
    if area == 0.0:
        return 0.0, pts.mean(axis=0)
    cx = ((x + xn) * cross).sum() / (6.0 * area)
    cy = ((y + yn) * cross).sum() / (6.0 * area)
    return float(area), np.array([cx, cy])


def _diameter(pts: np.ndarray) -> float:
    diff = pts[:, None, :] - pts[None, :, :]
    return float(np.sqrt((diff**2).sum(axis=-1)).max())


def compute_geometry(mesh: Mesh) -> GeometryCache:
    nc = mesh.n_cells
    diam = np.empty(nc)
    areas = np.empty(nc)
    centroids = np.empty((nc, 2))
    for c, loop in enumerate(mesh.cells):
        pts = mesh.vertices[loop]
        area, centroid = _signed_area_centroid(pts)
        diam[c] = _diameter(pts)
        if abs(area) <= 1e-14 * diam[c] ** 2:
            raise MeshValidationError(f"cell {c} is degenerate (zero area)")
        areas[c] = area
        centroids[c] = centroid

    a = mesh.vertices[mesh.faces[:, 0]]
    b = mesh.vertices[mesh.faces[:, 1]]
    tangent = b - a
    lengths = np.linalg.norm(tangent, axis=1)
    if np.any(lengths <= 0.0):
        f = int(np.flatnonzero(lengths <= 0.0)[0])
        raise MeshValidationError(f"face {f} has zero length")
    midpoints = 0.5 * (a + b)

    # normal of f seen from its first owner, from that owner's traversal order
    normals = np.empty((mesh.n_faces, 2))
    for f in range(mesh.n_faces):
        c = mesh.face_cells[f, 0]
        p, q = mesh.oriented_face(c, f)
        t = mesh.vertices[q] - mesh.vertices[p]
        normals[f] = np.array([t[1], -t[0]]) / lengths[f]

    cell_normals = []
    for c, cf in enumerate(mesh.cell_faces):
        sign = np.where(mesh.face_cells[cf, 0] == c, 1.0, -1.0)
        cell_normals.append(normals[cf] * sign[:, None])

    return GeometryCache(
        cell_diameters=diam,
        cell_areas=np.abs(areas),
        cell_signed_areas=areas,
        cell_centroids=centroids,
        face_diameters=lengths,
        face_midpoints=midpoints,
        face_normals=normals,
        cell_normals=tuple(cell_normals),
        h=float(diam.max()),
        domain_diameter=_diameter(mesh.vertices[np.unique(mesh.faces[mesh.boundary_faces])]),
    )


def _is_star_shaped(pts: np.ndarray, center: np.ndarray) -> bool:
    d0 = pts - center
    d1 = np.roll(pts, -1, axis=0) - center
    cross = d0[:, 0] * d1[:, 1] - d0[:, 1] * d1[:, 0]
    return bool(np.all(cross > 0.0))


def validate_mesh(mesh: Mesh, geom: GeometryCache) -> MeshQualityReport:
    """Audit a mesh; hard invariant violations raise ``MeshValidationError``."""
    inverted = np.flatnonzero(geom.cell_signed_areas <= 0.0)
    if inverted.size:
        raise MeshValidationError(f"cell {int(inverted[0])} is inverted (clockwise or zero area)")

    for f in mesh.interior_faces:
        c0, c1 = mesh.face_cells[f]
        n0 = geom.cell_normals[c0][mesh.cell_faces[c0] == f][0]
        n1 = geom.cell_normals[c1][mesh.cell_faces[c1] == f][0]
        if np.abs(n0 + n1).max() > 1e-12:
            raise MeshValidationError(f"face {int(f)}: normals of cells {c0} and {c1} are not opposite")

    star = []
    ratios = []
    for c, loop in enumerate(mesh.cells):
        pts = mesh.vertices[loop]
        cf = mesh.cell_faces[c]
        nrm = geom.cell_normals[c]
        hf = geom.face_diameters[cf]
        closure = (hf[:, None] * nrm).sum(axis=0)
        if np.abs(closure).max() > 1e-12 * hf.sum():
            raise MeshValidationError(f"cell {c} is not closed")
        is_star = _is_star_shaped(pts, geom.cell_centroids[c])
        if is_star:
            outward = ((geom.face_midpoints[cf] - geom.cell_centroids[c]) * nrm).sum(axis=1)
            if np.any(outward <= 0.0):
                raise MeshValidationError(f"cell {c} has an inward face normal")
        star.append(is_star)
        ratios.append(hf / geom.cell_diameters[c])

    ratios = np.concatenate(ratios)
    return MeshQualityReport(
        min_face_cell_ratio=float(ratios.min()),
        max_face_cell_ratio=float(ratios.max()),
        max_faces_per_cell=max(len(c) for c in mesh.cells),
        min_cell_measure=float(geom.cell_areas.min()),
        star_shaped=tuple(star),
    )


# --------------------------------------------------------------------------
# generators


def _check_domain(domain) -> tuple[float, float, float, float]:
    (x0, x1), (y0, y1) = domain
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"domain {domain} has non-positive area")
    return float(x0), float(x1), float(y0), float(y1)


def _structured_vertices(n: int, x0, x1, y0, y1) -> np.ndarray:
    xs = np.linspace(x0, x1, n + 1)
    ys = np.linspace(y0, y1, n + 1)
    X, Y = np.meshgrid(xs, ys)
    return np.column_stack([X.ravel(), Y.ravel()])


def _clip_to_rectangle(poly: np.ndarray, x0, x1, y0, y1) -> np.ndarray:
    """Sutherland-Hodgman clipping of a convex polygon."""
    planes = [(0, x0, 1.0), (0, x1, -1.0), (1, y0, 1.0), (1, y1, -1.0)]
    out = [tuple(p) for p in poly]
    for axis, value, side in planes:
        if not out:
            break
        src, out = out, []
        for i, cur in enumerate(src):
            prev = src[i - 1]
            cin = side * (cur[axis] - value) >= 0.0
            pin = side * (prev[axis] - value) >= 0.0
            if cin != pin:
                t = (value - prev[axis]) / (cur[axis] - prev[axis])
                pt = [prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])]
                pt[axis] = value
                out.append(tuple(pt))
            if cin:
                out.append(tuple(cur))
    return np.array(out).reshape(-1, 2)


def _hexagonal_mesh(n: int, x0, x1, y0, y1) -> tuple[np.ndarray, list]:
    width, height = x1 - x0, y1 - y0
    hy = height / (2.0 * n)  # half height of a hexagon
    a_regular = 2.0 * hy / math.sqrt(3.0)
    m = max(1, int(round(width / (1.5 * a_regular))))
    ax = width / (1.5 * m)  # stretched so that the boundary passes through column centers
    template = np.array(
        [[ax, 0.0], [ax / 2, hy], [-ax / 2, hy], [-ax, 0.0], [-ax / 2, -hy], [ax / 2, -hy]]
    )
    scale = max(width, height)
    tol = 1e-9 * scale
    index: dict[tuple[int, int], int] = {}
    verts: list[tuple[float, float]] = []
    cells = []
    for i in range(m + 1):
        cx = x0 + 1.5 * ax * i
        shift = hy if i % 2 else 0.0
        for j in range(-1, n + 2):
            cy = y0 + 2.0 * hy * j + shift
            poly = _clip_to_rectangle(template + [cx, cy], x0, x1, y0, y1)
            if len(poly) < 3:
                continue
            area, _ = _signed_area_centroid(poly)
            if area <= 1e-10 * hy * ax:
                continue
            loop = []
            for p in poly:
                key = (int(round(p[0] / tol)), int(round(p[1] / tol)))
                v = index.get(key)
                if v is None:
                    v = len(verts)
                    index[key] = v
                    verts.append((float(p[0]), float(p[1])))
                if not loop or loop[-1] != v:
                    loop.append(v)
            if loop[0] == loop[-1]:
                loop.pop()
            cells.append(loop)
    return np.array(verts), cells


def generate_mesh(kind: str, n: int, domain=UNIT_SQUARE) -> Mesh:
    """Generate a mesh of an axis-aligned rectangle.

    ``kind`` is one of ``"triangular"`` (n x n squares cut along one
    diagonal), ``"cartesian"`` (n x n squares) or ``"hexagonal-dominant"``
    (n rows of hexagons clipped to the rectangle).
    """
    if n < 1:
        raise ValueError(f"subdivision count must be >= 1, got {n}")
    x0, x1, y0, y1 = _check_domain(domain)
    if kind == "cartesian":
        verts = _structured_vertices(n, x0, x1, y0, y1)
        cells = []
        for j in range(n):
            for i in range(n):
                v = j * (n + 1) + i
                cells.append([v, v + 1, v + n + 2, v + n + 1])
    elif kind == "triangular":
        verts = _structured_vertices(n, x0, x1, y0, y1)
        cells = []
        for j in range(n):
            for i in range(n):
                v = j * (n + 1) + i
                cells.append([v, v + 1, v + n + 2])
                cells.append([v, v + n + 2, v + n + 1])
    elif kind in ("hexagonal-dominant", "hexagonal"):
        verts, cells = _hexagonal_mesh(n, x0, x1, y0, y1)
    else:
        raise ValueError(f"unknown mesh kind {kind!r}")
    return Mesh.from_cells(verts, cells)


# --------------------------------------------------------------------------
# file I/O

_FVCA_SECTIONS = {
    "triangles": 3,
    "quadrangles": 4,
    "pentagons": 5,
    "hexagons": 6,
    "heptagons": 7,
    "octagons": 8,
    "polygons": None,
}


def _read_native(text: str) -> Mesh:
    try:
        doc = json.loads(text)
        dim = int(doc.get("dim", 2))
        verts = np.array(doc["vertices"], dtype=float)
        cells = [list(map(int, c)) for c in doc["cells"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise MeshParseError(f"malformed native mesh: {exc}") from exc
    if dim != 2:
        raise MeshParseError(f"only dim = 2 is supported, got {dim}")
    return Mesh.from_cells(verts.reshape(-1, 2), cells)


def _read_fvca5(text: str) -> Mesh:
    """Read the FVCA5 benchmark text layout.

    Grammar (keywords case-insensitive, blank lines ignored)::

        vertices
        <nv>
        <x> <y>                      nv lines
        triangles | quadrangles | pentagons | hexagons | heptagons | octagons
        <nc>
        <i1> ... <im>                nc lines, 1-based vertex indices
        polygons
        <nc>
        <m> <i1> ... <im>            nc lines, leading vertex count
        edges ... | all edges ...    (any section whose header starts with "edges"
        <ne>                          or "all edges"; each line starts with two
        <i1> <i2> [...]               1-based vertex indices)

    Cell sections may appear in any order and may be empty.  Cells are
    reoriented counterclockwise.  A full edge list ("all edges") is checked
    against the edges derived from the cells.
    """
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    pos = 0
    verts = None
    cells: list[list[int]] = []
    listed_edges = None

    def read_count() -> int:
        nonlocal pos
        if pos >= len(lines):
            raise MeshParseError("unexpected end of file (missing count)")
        try:
            value = int(lines[pos].split()[0])
        except ValueError as exc:
            raise MeshParseError(f"line {pos + 1}: expected an integer count") from exc
        pos += 1
        return value

    def read_rows(count: int) -> list[list[str]]:
        nonlocal pos
        if pos + count > len(lines):
            raise MeshParseError(f"line {pos + 1}: section truncated")
        rows = [lines[i].split() for i in range(pos, pos + count)]
        pos += count
        return rows

    while pos < len(lines):
        header = lines[pos].lower()
        pos += 1
        try:
            if header.startswith("vertices"):
                verts = np.array([[float(r[0]), float(r[1])] for r in read_rows(read_count())])
            elif header in _FVCA_SECTIONS:
                size = _FVCA_SECTIONS[header]
                for r in read_rows(read_count()):
                    idx = [int(t) for t in r]
                    if size is None:
                        idx = idx[1 : 1 + idx[0]]
                    else:
                        idx = idx[:size]
                    cells.append([i - 1 for i in idx])
            elif header.startswith("edges") or header.startswith("all edges"):
                rows = read_rows(read_count())
                if header.startswith("all edges"):
                    listed_edges = {tuple(sorted((int(r[0]) - 1, int(r[1]) - 1))) for r in rows}
            else:
                raise MeshParseError(f"line {pos}: unknown section {lines[pos - 1]!r}")
        except (ValueError, IndexError) as exc:
            raise MeshParseError(f"section ending near line {pos}: {exc}") from exc

    if verts is None:
        raise MeshParseError("no vertices section")
    if not cells:
        raise MeshParseError("no cell sections")
    oriented = []
    for c in cells:
        area, _ = _signed_area_centroid(verts[c])
        oriented.append(c if area >= 0.0 else c[::-1])
    mesh = Mesh.from_cells(verts, oriented)
    if listed_edges is not None:
        derived = {tuple(f) for f in mesh.faces.tolist()}
        extra = sorted(listed_edges - derived)
        if extra:
            raise MeshTopologyError(f"dangling face {extra[0]} listed in file but bounding no cell")
        missing = sorted(derived - listed_edges)
        if missing:
            raise MeshTopologyError(f"face {missing[0]} bounds a cell but is not listed")
    return mesh


def load_mesh(path, format: str = "native-json") -> Mesh:
    text = Path(path).read_text(encoding="utf-8")
    if format == "native-json":
        return _read_native(text)
    if format == "fvca5-text":
        return _read_fvca5(text)
    raise ValueError(f"unknown mesh format {format!r}")


def save_mesh(mesh: Mesh, path, format: str = "native-json") -> None:
    path = Path(path)
    if format == "native-json":
        doc = {
            "dim": mesh.dim,
            "vertices": mesh.vertices.tolist(),
            "cells": [c.tolist() for c in mesh.cells],
        }
        path.write_text(json.dumps(doc), encoding="utf-8")
        return
    if format != "fvca5-text":
        raise ValueError(f"unknown mesh format {format!r}")
    out = ["vertices", str(len(mesh.vertices))]
    out += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    by_size: dict[int, list] = {}
    for c in mesh.cells:
        by_size.setdefault(len(c), []).append(c)
    names = {v: k for k, v in _FVCA_SECTIONS.items() if v is not None}
    for size in sorted(by_size):
        group = by_size[size]
        if size in names:
            out += [names[size], str(len(group))]
            out += [" ".join(str(i + 1) for i in c) for c in group]
        else:
            out += ["polygons", str(len(group))]
            out += [f"{size} " + " ".join(str(i + 1) for i in c) for c in group]
    bfaces = mesh.faces[mesh.boundary_faces]
    out += ["edges of the boundary", str(len(bfaces))]
    out += [f"{a + 1} {b + 1}" for a, b in bfaces.tolist()]
    out += ["all edges", str(mesh.n_faces)]
    for f, (a, b) in enumerate(mesh.faces.tolist()):
        c0, c1 = mesh.face_cells[f]
        out.append(f"{a + 1} {b + 1} {c0 + 1} {c1 + 1 if c1 >= 0 else 0}")
    path.write_text("\n".join(out) + "\n", encoding="utf-8")
