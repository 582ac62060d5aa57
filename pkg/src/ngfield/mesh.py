"""Piecewise-linear finite element meshes and operator assembly.

Meshes are segment meshes in 1D and triangulations in 2D.  Assembly uses
mass lumping, so the mass matrix is the diagonal matrix of basis integrals
``h``; the stiffness matrix ``G`` is assembled exactly element by element.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from numba import njit
from scipy.sparse.csgraph import connected_components

from .errors import (DegenerateElement, InputError, InvalidGeometry, InvalidInterval,
                     LocationOutsideMesh, NonPositiveKappa, UnsupportedAlpha)

SNAP_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Mesh:
    """Simplicial mesh.

    Attributes
    ----------
    dim : int
        1 (segments) or 2 (triangles).
    nodes : ndarray, shape (n, dim)
    elements : ndarray of int, shape (m, dim + 1)
    interior : ndarray of bool, shape (n,)
        False for nodes in the boundary-extension band.
    """

    dim: int
    nodes: np.ndarray
    elements: np.ndarray
    interior: np.ndarray

    def __post_init__(self):
        nodes = np.atleast_2d(np.asarray(self.nodes, dtype=float))
        if self.dim == 1 and nodes.shape[0] == 1 and nodes.shape[1] != 1:
            nodes = nodes.T
        elements = np.atleast_2d(np.asarray(self.elements, dtype=np.int64))
        interior = np.asarray(self.interior, dtype=bool)
        if self.dim not in (1, 2):
            raise InvalidGeometry(f"dimension must be 1 or 2, got {self.dim}")
        if nodes.shape[1] != self.dim or elements.shape[1] != self.dim + 1:
            raise InvalidGeometry("node or element arrays do not match the dimension")
        n = nodes.shape[0]
        if interior.shape != (n,):
            raise InvalidGeometry("interior flags must have one entry per node")
        if elements.size and (elements.min() < 0 or elements.max() >= n):
            raise InvalidGeometry("element node index out of range")
        for a in range(self.dim + 1):
            for b in range(a + 1, self.dim + 1):
                if np.any(elements[:, a] == elements[:, b]):
                    raise InvalidGeometry("element with repeated node index")
        for name, arr in (("nodes", nodes), ("elements", elements), ("interior", interior)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        measures = element_measures(self)
        bad = np.flatnonzero(~(measures > 0))
        if bad.size:
            raise DegenerateElement(f"element {int(bad[0])} has non-positive measure")
        if n > 1:
            ncomp, _ = connected_components(_node_adjacency(self), directed=False)
            if ncomp != 1:
                raise InvalidGeometry(f"mesh is not connected ({ncomp} components)")

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    def total_measure(self) -> float:
        return float(np.sum(element_measures(self)))

    def bounding_box(self):
        return self.nodes.min(axis=0), self.nodes.max(axis=0)


def _node_adjacency(mesh: Mesh) -> sp.csr_matrix:
    e = mesh.elements
    k = e.shape[1]
    rows = np.concatenate([e[:, a] for a in range(k) for b in range(k) if a != b])
    cols = np.concatenate([e[:, b] for a in range(k) for b in range(k) if a != b])
    return sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes))


def element_measures(mesh: Mesh) -> np.ndarray:
    """Signed-free lengths (1D) or areas (2D) of all elements."""
    p = mesh.nodes[mesh.elements]
    if mesh.dim == 1:
        return np.abs(p[:, 1, 0] - p[:, 0, 0])
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def build_mesh_1d(a: float, b: float, n: int) -> Mesh:
    """Uniform segment mesh of [a, b] with ``n`` nodes."""
    if not (a < b):
        raise InvalidInterval(f"need a < b, got ({a}, {b})")
    if n < 2:
        raise InvalidInterval(f"need at least two nodes, got {n}")
    step = (b - a) / (n - 1)
    x = a + step * np.arange(n)
    x[-1] = b
    elements = np.column_stack([np.arange(n - 1), np.arange(1, n)])
    return Mesh(1, x[:, None], elements, np.ones(n, dtype=bool))


def _axis_coordinates(lo, hi, edge, width, ext_edge):
    ncell = max(1, int(round((hi - lo) / edge)))
    step = (hi - lo) / ncell
    inner = lo + step * np.arange(ncell + 1)
    inner[-1] = hi
    if width <= 0:
        return inner
    nb = max(1, int(math.ceil(width / ext_edge - 1e-9)))
    bstep = width / nb
    left = lo - bstep * np.arange(nb, 0, -1)
    right = hi + bstep * np.arange(1, nb + 1)
    return np.concatenate([left, inner, right])


def build_mesh_2d(domain, target_edge: float, extension_width: float = 0.0,
                  extension_edge: float | None = None) -> Mesh:
    """Structured triangulation of a rectangle with an optional coarse outer band.

    Parameters
    ----------
    domain : (x0, x1, y0, y1)
    target_edge : float
        Grid spacing inside the rectangle (rounded so cells tile it exactly).
    extension_width : float
        Width of the band added on every side.
    extension_edge : float, optional
        Grid spacing across the band; defaults to ``4 * target_edge``.

    Each grid cell is split along the same diagonal, so on square cells the
    stiffness matrix reduces to the five-point stencil.
    """
    x0, x1, y0, y1 = map(float, domain)
    if not (x0 < x1 and y0 < y1):
        raise InvalidGeometry(f"empty rectangle {domain}")
    if not target_edge > 0:
        raise InvalidGeometry("target_edge must be positive")
    if extension_width < 0:
        raise InvalidGeometry("extension_width must be nonnegative")
    if extension_edge is None:
        extension_edge = 4.0 * target_edge
    if extension_width > 0 and not extension_edge > 0:
        raise InvalidGeometry("extension_edge must be positive")
    xs = _axis_coordinates(x0, x1, target_edge, extension_width, extension_edge)
    ys = _axis_coordinates(y0, y1, target_edge, extension_width, extension_edge)
    nx, ny = xs.size, ys.size
    gx, gy = np.meshgrid(xs, ys)
    nodes = np.column_stack([gx.ravel(), gy.ravel()])
    idx = np.arange(nx * ny).reshape(ny, nx)
    ll = idx[:-1, :-1].ravel()
    lr = idx[:-1, 1:].ravel()
    ul = idx[1:, :-1].ravel()
    ur = idx[1:, 1:].ravel()
    tri = np.vstack([np.column_stack([ll, lr, ur]), np.column_stack([ll, ur, ul])])
    tol = 1e-9 * max(x1 - x0, y1 - y0)
    interior = ((nodes[:, 0] >= x0 - tol) & (nodes[:, 0] <= x1 + tol)
                & (nodes[:, 1] >= y0 - tol) & (nodes[:, 1] <= y1 + tol))
    return Mesh(2, nodes, tri, interior)


def default_extension(kappa: float, target_edge: float, smoothness: float = 1.0):
    """Band width of two correlation ranges and a twice coarser spacing."""
    practical_range = math.sqrt(8.0 * smoothness) / kappa
    return 2.0 * practical_range, 2.0 * target_edge


@dataclass(frozen=True, eq=False)
class FemOperators:
    """Lumped mass vector ``h`` and stiffness matrix ``G`` of a mesh."""

    h: np.ndarray
    G: sp.csc_matrix

    @property
    def n(self) -> int:
        return self.h.shape[0]

    @property
    def C(self) -> sp.csc_matrix:
        """Lumped (diagonal) mass matrix."""
        return sp.diags(self.h).tocsc()


def assemble_operators(mesh: Mesh) -> FemOperators:
    p = mesh.nodes[mesh.elements]
    n = mesh.n_nodes
    e = mesh.elements
    meas = element_measures(mesh)
    if np.any(~(meas > 0)):
        raise DegenerateElement("element with non-positive measure")
    k = mesh.dim + 1
    h = np.bincount(e.ravel(), weights=np.repeat(meas / k, k), minlength=n).astype(float)
    if mesh.dim == 1:
        grads = np.stack([-1.0 / (p[:, 1, 0] - p[:, 0, 0]), 1.0 / (p[:, 1, 0] - p[:, 0, 0])], axis=1)[:, :, None]
    else:
        x = p[:, :, 0]
        y = p[:, :, 1]
        twice = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
        grads = np.empty((e.shape[0], 3, 2))
        for i in range(3):
            j, l = (i + 1) % 3, (i + 2) % 3
            grads[:, i, 0] = (y[:, j] - y[:, l]) / twice
            grads[:, i, 1] = (x[:, l] - x[:, j]) / twice
    local = np.einsum("eid,ejd->eij", grads, grads) * meas[:, None, None]
    rows = np.repeat(e, k, axis=1).ravel()
    cols = np.tile(e, (1, k)).ravel()
    G = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsc()
    G.sum_duplicates()
    G.eliminate_zeros()
    G.sort_indices()
    h.setflags(write=False)
    return FemOperators(h=h, G=G)


def build_K(ops: FemOperators, kappa: float) -> sp.csc_matrix:
    """``kappa^2 C + G`` with lumped C."""
    if not kappa > 0:
        raise NonPositiveKappa(f"kappa must be positive, got {kappa}")
    K = (ops.G + sp.diags(kappa ** 2 * ops.h)).tocsc()
    K.sort_indices()
    return K


def build_K_alpha(ops: FemOperators, kappa: float, alpha: int) -> sp.csc_matrix:
    """Discrete operator of the fractional order alpha/2 (alpha in {2, 4})."""
    if alpha not in (2, 4):
        raise UnsupportedAlpha(f"alpha must be 2 or 4, got {alpha}")
    K = build_K(ops, kappa)
    if alpha == 2:
        return K
    Ka = (K @ sp.diags(1.0 / ops.h) @ K).tocsc()
    Ka = 0.5 * (Ka + Ka.T)
    Ka = sp.csc_matrix(Ka)
    Ka.sort_indices()
    return Ka


@dataclass(frozen=True, eq=False)
class ObservationMatrix:
    """Basis function values at a set of locations.

    ``matrix`` is (n_locations x n_nodes) CSR; rows listed in ``outside`` lie
    outside the mesh and are empty.
    """

    matrix: sp.csr_matrix
    outside: np.ndarray

    @property
    def shape(self):
        return self.matrix.shape

    def rows(self):
        """Per-location list of (node, weight) pairs."""
        m = self.matrix
        return [list(zip(m.indices[m.indptr[i]:m.indptr[i + 1]].tolist(),
                         m.data[m.indptr[i]:m.indptr[i + 1]].tolist())) for i in range(m.shape[0])]


@njit(cache=True)
def _locate_points(pts, P, cell_ptr, cell_elems, origin, cell_size, ncell, dim):
    npts = pts.shape[0]
    k = dim + 1
    found = np.full(npts, -1, dtype=np.int64)
    bary = np.zeros((npts, k))
    for q in range(npts):
        ci = np.empty(dim, dtype=np.int64)
        inside_grid = True
        for d in range(dim):
            c = int(np.floor((pts[q, d] - origin[d]) / cell_size[d]))
            if c == ncell[d]:
                c = ncell[d] - 1
            if c < 0 or c >= ncell[d]:
                inside_grid = False
            ci[d] = c
        if not inside_grid:
            continue
        cell = ci[0] if dim == 1 else ci[1] * ncell[0] + ci[0]
        best = -1
        best_min = -np.inf
        lam = np.empty(k)
        for t in range(cell_ptr[cell], cell_ptr[cell + 1]):
            el = cell_elems[t]
            if dim == 1:
                a = P[el, 0, 0]
                b = P[el, 1, 0]
                lam[1] = (pts[q, 0] - a) / (b - a)
                lam[0] = 1.0 - lam[1]
            else:
                x0 = P[el, 0, 0]
                y0 = P[el, 0, 1]
                d1x = P[el, 1, 0] - x0
                d1y = P[el, 1, 1] - y0
                d2x = P[el, 2, 0] - x0
                d2y = P[el, 2, 1] - y0
                det = d1x * d2y - d1y * d2x
                rx = pts[q, 0] - x0
                ry = pts[q, 1] - y0
                lam[1] = (rx * d2y - ry * d2x) / det
                lam[2] = (d1x * ry - d1y * rx) / det
                lam[0] = 1.0 - lam[1] - lam[2]
            mn = lam.min()
            if mn > best_min:
                best_min = mn
                best = el
                for i in range(k):
                    bary[q, i] = lam[i]
            if mn >= 0.0:
                break
        if best >= 0 and best_min >= -1e-10:
            found[q] = best
    return found, bary


class PointLocator:
    """Uniform background grid over element bounding boxes."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        P = mesh.nodes[mesh.elements]
        self._P = np.ascontiguousarray(P)
        lo = P.min(axis=1)
        hi = P.max(axis=1)
        glo, ghi = mesh.nodes.min(axis=0), mesh.nodes.max(axis=0)
        extent = np.maximum(ghi - glo, 1e-12)
        m = mesh.n_elements
        per_axis = max(1, int(round(m ** (1.0 / mesh.dim))))
        ncell = np.full(mesh.dim, per_axis, dtype=np.int64)
        cell_size = extent / ncell
        eps = 1e-9 * extent
        c_lo = np.clip(np.floor((lo - eps - glo) / cell_size).astype(np.int64), 0, ncell - 1)
        c_hi = np.clip(np.floor((hi + eps - glo) / cell_size).astype(np.int64), 0, ncell - 1)
        cells, elems = [], []
        if mesh.dim == 1:
            for el in range(m):
                r = np.arange(c_lo[el, 0], c_hi[el, 0] + 1)
                cells.append(r)
                elems.append(np.full(r.size, el))
        else:
            for el in range(m):
                gx, gy = np.meshgrid(np.arange(c_lo[el, 0], c_hi[el, 0] + 1),
                                     np.arange(c_lo[el, 1], c_hi[el, 1] + 1))
                r = (gy * ncell[0] + gx).ravel()
                cells.append(r)
                elems.append(np.full(r.size, el))
        cells = np.concatenate(cells)
        elems = np.concatenate(elems)
        order = np.argsort(cells, kind="stable")
        total = int(np.prod(ncell))
        self._cell_ptr = np.zeros(total + 1, dtype=np.int64)
        np.cumsum(np.bincount(cells, minlength=total), out=self._cell_ptr[1:])
        self._cell_elems = elems[order].astype(np.int64)
        self._origin = glo.astype(float)
        self._cell_size = cell_size.astype(float)
        self._ncell = ncell

    def locate(self, points):
        pts = np.ascontiguousarray(np.atleast_2d(np.asarray(points, dtype=float)))
        if self.mesh.dim == 1 and pts.shape[1] != 1:
            pts = pts.reshape(-1, 1)
        if pts.shape[1] != self.mesh.dim:
            raise InputError(f"locations must have {self.mesh.dim} coordinate(s)")
        return _locate_points(pts, self._P, self._cell_ptr, self._cell_elems, self._origin,
                              self._cell_size, self._ncell, self.mesh.dim)


def build_observation_matrix(mesh: Mesh, locations, strict: bool = True,
                             locator: PointLocator | None = None) -> ObservationMatrix:
    """Piecewise-linear interpolation weights of ``locations``.

    With ``strict=True`` any location outside the mesh raises
    :class:`LocationOutsideMesh`; otherwise those rows are left empty and
    their indices reported in ``outside``.
    """
    locs = np.asarray(locations, dtype=float)
    if locs.size == 0:
        return ObservationMatrix(sp.csr_matrix((0, mesh.n_nodes)), np.zeros(0, dtype=np.int64))
    locs = locs.reshape(-1, mesh.dim)
    locator = locator or PointLocator(mesh)
    el, bary = locator.locate(locs)
    outside = np.flatnonzero(el < 0)
    if strict and outside.size:
        raise LocationOutsideMesh(outside)
    bary = np.where(np.abs(bary) < SNAP_TOL, 0.0, bary)
    bary = np.where(np.abs(bary - 1.0) < SNAP_TOL, 1.0, bary)
    bary = np.clip(bary, 0.0, 1.0)
    sums = bary.sum(axis=1, keepdims=True)
    bary = np.where(sums > 0, bary / np.where(sums > 0, sums, 1.0), bary)
    ok = el >= 0
    k = mesh.dim + 1
    rows = np.repeat(np.flatnonzero(ok), k)
    cols = mesh.elements[el[ok]].ravel()
    vals = bary[ok].ravel()
    keep = vals != 0.0
    A = sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(locs.shape[0], mesh.n_nodes))
    A.sort_indices()
    return ObservationMatrix(A, outside)


def write_mesh(path, mesh: Mesh) -> None:
    """Plain-text mesh: ``dim n_nodes n_elements`` header, node lines, element lines.

    Node lines carry the coordinates followed by the interior flag (0/1).
    """
    lines = [f"{mesh.dim} {mesh.n_nodes} {mesh.n_elements}"]
    for xy, flag in zip(mesh.nodes, mesh.interior):
        lines.append(" ".join(format(v, ".17g") for v in xy) + f" {int(flag)}")
    for el in mesh.elements:
        lines.append(" ".join(str(int(i)) for i in el))
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> Mesh:
    """Read the format written by :func:`write_mesh`; the flag column is optional."""
    text = Path(path).read_text().split("\n")
    rows = [ln.split() for ln in text if ln.strip() and not ln.lstrip().startswith("#")]
    try:
        dim, nn, ne = (int(v) for v in rows[0])
        node_rows = rows[1:1 + nn]
        elem_rows = rows[1 + nn:1 + nn + ne]
        if len(node_rows) != nn or len(elem_rows) != ne:
            raise ValueError("truncated file")
        nodes = np.array([[float(v) for v in r[:dim]] for r in node_rows])
        interior = np.array([bool(int(r[dim])) if len(r) > dim else True for r in node_rows])
        elements = np.array([[int(v) for v in r] for r in elem_rows], dtype=np.int64)
    except (ValueError, IndexError) as exc:
        raise InvalidGeometry(f"cannot parse mesh file {path}: {exc}") from None
    return Mesh(dim, nodes, elements.reshape(ne, dim + 1), interior)
