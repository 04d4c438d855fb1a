"""P1 finite elements on uniform intervals and squares.

Meshes are structured (the square is split into right triangles along the
lower-left to upper-right diagonal of every cell) so that all outputs are
bit-reproducible. Dirac sources are loaded through the transposition pairing
``delta_x0(phi_i) = phi_i(x0)``, i.e. by the barycentric coordinates of ``x0``
in its containing element.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .sparse_linalg import SparseMatrix, csr_from_triplets

_BARY_TOL = 1e-12


class DomainError(ValueError):
    """A point lies outside the computational domain."""


class MeshError(ValueError):
    """Invalid mesh parameters."""


@dataclass(frozen=True)
class ProblemConfig:
    """Constant-coefficient advection-diffusion-reaction problem on a box.

    ``domain_length`` is the interval length or the side of the square.
    ``initial_condition`` is ``None`` for u0 = 0, otherwise nodal samples.
    """

    dim: int
    domain_length: float
    advection: np.ndarray
    reaction: float
    horizon: float
    support_end: float
    obs_start: float
    initial_condition: np.ndarray | None = None

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError("dim must be 1 or 2")
        a = np.atleast_1d(np.asarray(self.advection, dtype=float))
        if a.size == 1 and self.dim == 2 and a[0] == 0.0:
            a = np.zeros(2)
        if a.shape != (self.dim,):
            raise ValueError(f"advection must have length {self.dim}")
        object.__setattr__(self, "advection", a)
        if not self.domain_length > 0:
            raise ValueError("domain_length must be positive")
        if not (0 < self.support_end < self.obs_start < self.horizon):
            raise ValueError("require 0 < T0 < T1 < T")

    @property
    def volume(self) -> float:
        return self.domain_length ** self.dim

    @property
    def shifted_reaction(self) -> float:
        """mu + |A|^2/4, the reaction seen after removing advection."""
        return float(self.reaction + self.advection @ self.advection / 4.0)


@dataclass(frozen=True, eq=False)
class SpaceMesh:
    dim: int
    domain_length: float
    mesh_size: float
    node_coords: np.ndarray          # (n_nodes, dim)
    elements: np.ndarray             # (n_elem, dim + 1)
    boundary_nodes: np.ndarray       # sorted node ids
    boundary_edges: np.ndarray       # (n_edges, dim) node ids; 1D: single points
    boundary_normals: np.ndarray     # (n_edges, dim) outward unit normals
    n_per_axis: int                  # elements per axis
    _bary: tuple = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.node_coords.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    def node_index(self, *ij: int) -> int:
        if self.dim == 1:
            return int(ij[0])
        i, j = ij
        return int(i + j * (self.n_per_axis + 1))

    def element_areas(self) -> np.ndarray:
        p = self.node_coords[self.elements]
        if self.dim == 1:
            return (p[:, 1, 0] - p[:, 0, 0])
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def boundary_distance(self, x) -> float:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return float(np.min(np.minimum(x, self.domain_length - x)))

    def contains(self, x, tol: float = 1e-12) -> bool:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return x.shape == (self.dim,) and bool(np.all(x >= -tol) and np.all(x <= self.domain_length + tol))


def _divisions(length: float, h: float) -> int:
    if not h > 0 or not length > 0:
        raise MeshError("mesh size and length must be positive")
    if h >= length:
        raise MeshError("mesh size must be smaller than the domain")
    ratio = length / h
    n = int(round(ratio))
    if abs(ratio - n) > 1e-6 * max(1.0, ratio):
        raise MeshError(f"domain length {length} is not an integer multiple of h={h}")
    return n


def build_interval_mesh(length: float, h: float) -> SpaceMesh:
    n = _divisions(length, h)
    x = np.linspace(0.0, length, n + 1)
    elements = np.column_stack([np.arange(n), np.arange(1, n + 1)])
    bnodes = np.array([0, n])
    return SpaceMesh(
        dim=1, domain_length=float(length), mesh_size=length / n,
        node_coords=x[:, None], elements=elements, boundary_nodes=bnodes,
        boundary_edges=bnodes[:, None], boundary_normals=np.array([[-1.0], [1.0]]),
        n_per_axis=n,
    )


def build_square_mesh(length: float, h: float) -> SpaceMesh:
    n = _divisions(length, h)
    g = np.linspace(0.0, length, n + 1)
    xx, yy = np.meshgrid(g, g, indexing="xy")
    coords = np.column_stack([xx.ravel(), yy.ravel()])

    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    i = i.ravel()
    j = j.ravel()
    a = i + j * (n + 1)
    b = a + 1
    c = a + (n + 1) + 1
    d = a + (n + 1)
    elements = np.empty((2 * n * n, 3), dtype=np.int64)
    elements[0::2] = np.column_stack([a, b, c])
    elements[1::2] = np.column_stack([a, c, d])

    k = np.arange(n)
    s = n + 1
    bottom = np.column_stack([k, k + 1])
    right = np.column_stack([n + k * s, n + (k + 1) * s])
    top = np.column_stack([n * s + k + 1, n * s + k])
    left = np.column_stack([(k + 1) * s, k * s])
    edges = np.vstack([bottom, right, top, left])
    normals = np.vstack([
        np.tile([0.0, -1.0], (n, 1)), np.tile([1.0, 0.0], (n, 1)),
        np.tile([0.0, 1.0], (n, 1)), np.tile([-1.0, 0.0], (n, 1)),
    ])
    return SpaceMesh(
        dim=2, domain_length=float(length), mesh_size=length / n,
        node_coords=coords, elements=elements,
        boundary_nodes=np.unique(edges), boundary_edges=edges,
        boundary_normals=normals, n_per_axis=n,
    )


class Operators(NamedTuple):
    mass: SparseMatrix
    spatial: SparseMatrix


def _element_gradients(mesh: SpaceMesh) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the barycentric basis per element, shape (n_elem, dim+1, dim)."""
    p = mesh.node_coords[mesh.elements]
    area = mesh.element_areas()
    if mesh.dim == 1:
        g = np.stack([-1.0 / area, 1.0 / area], axis=1)[:, :, None]
        return g, area
    x, y = p[..., 0], p[..., 1]
    twice = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    gx = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1) / twice[:, None]
    gy = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1) / twice[:, None]
    return np.stack([gx, gy], axis=2), area


def _scatter(mesh: SpaceMesh, local: np.ndarray) -> SparseMatrix:
    k = mesh.dim + 1
    rows = np.repeat(mesh.elements, k, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, k)).ravel()
    return csr_from_triplets((rows, cols, local.reshape(-1)), mesh.n_nodes, mesh.n_nodes)


def assemble_operators(mesh: SpaceMesh, advection=None, reaction: float = 0.0) -> Operators:
    """Consistent mass and the spatial operator of ``-Lap u + A.grad u + mu u``.

    ``spatial[i, j] = (grad phi_j, grad phi_i) + (A.grad phi_j, phi_i) + mu (phi_j, phi_i)``.
    No boundary terms: the homogeneous Neumann condition is natural.
    """
    a = np.zeros(mesh.dim) if advection is None else np.atleast_1d(np.asarray(advection, float))
    if a.shape != (mesh.dim,):
        raise ValueError("advection has the wrong dimension")
    grads, area = _element_gradients(mesh)
    k = mesh.dim + 1
    if mesh.dim == 1:
        ref_mass = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    else:
        ref_mass = (np.ones((3, 3)) + np.eye(3)) / 12.0
    mass_loc = area[:, None, None] * ref_mass[None]
    stiff_loc = area[:, None, None] * np.einsum("eid,ejd->eij", grads, grads)
    # (A.grad phi_j) is constant per element; integral of phi_i is area/k
    adv_loc = (area / k)[:, None, None] * np.broadcast_to(
        (grads @ a)[:, None, :], (grads.shape[0], k, k))
    mass = _scatter(mesh, mass_loc)
    spatial = _scatter(mesh, stiff_loc + adv_loc + reaction * mass_loc)
    return Operators(mass, spatial)


def _barycentric_all(mesh: SpaceMesh, x: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of ``x`` in every element, shape (n_elem, dim+1)."""
    if mesh._bary is None:
        p = mesh.node_coords[mesh.elements]
        if mesh.dim == 1:
            cache = (p[:, 0, 0], p[:, 1, 0] - p[:, 0, 0])
        else:
            t = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # columns are edge vectors
            cache = (p[:, 0], np.linalg.inv(t))
        object.__setattr__(mesh, "_bary", cache)
    origin, inv = mesh._bary
    if mesh.dim == 1:
        s = (x[0] - origin) / inv
        return np.column_stack([1.0 - s, s])
    loc = np.einsum("eij,ej->ei", inv, x[None, :] - origin)
    return np.column_stack([1.0 - loc.sum(axis=1), loc])


def locate(mesh: SpaceMesh, x) -> tuple[int, np.ndarray, np.ndarray]:
    """Containing element, its node ids and the barycentric weights of ``x``.

    Points on shared faces go to the lowest-indexed element containing them.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if not mesh.contains(x):
        raise DomainError(f"point {x} lies outside the domain")
    bary = _barycentric_all(mesh, x)
    inside = np.flatnonzero(bary.min(axis=1) >= -_BARY_TOL * max(1.0, mesh.domain_length / mesh.mesh_size))
    if inside.size == 0:
        raise DomainError(f"no element contains {x}")
    e = int(inside[0])
    w = np.clip(bary[e], 0.0, 1.0)
    return e, mesh.elements[e].copy(), w / w.sum()


def point_source_load(mesh: SpaceMesh, x0) -> np.ndarray:
    """Nodal vector ``phi_i(x0)`` representing the Dirac mass at ``x0``."""
    _, nodes, w = locate(mesh, x0)
    out = np.zeros(mesh.n_nodes)
    np.add.at(out, nodes, w)
    return out


def evaluate_field(mesh: SpaceMesh, coeffs, x):
    """P1 interpolation of nodal ``coeffs`` at ``x``.

    ``coeffs`` may carry trailing axes (for example time), in which case the
    result has those axes.
    """
    _, nodes, w = locate(mesh, x)
    c = np.asarray(coeffs)
    return np.tensordot(w, c[nodes], axes=(0, 0))


class BoundaryQuadrature(NamedTuple):
    boundary_index: np.ndarray
    boundary_mass: SparseMatrix
    weights: np.ndarray


def boundary_quadrature(mesh: SpaceMesh) -> BoundaryQuadrature:
    """Trapezoid weights on the boundary nodes (unit point weights in 1D)."""
    idx = mesh.boundary_nodes
    if mesh.dim == 1:
        w = np.ones(2)
    else:
        pos = np.searchsorted(idx, mesh.boundary_edges)
        w = np.zeros(idx.size)
        np.add.at(w, pos.ravel(), 0.5 * mesh.mesh_size)
    n = idx.size
    mass = csr_from_triplets((np.arange(n), np.arange(n), w), n, n)
    return BoundaryQuadrature(idx, mass, w)


def boundary_flux_weights(mesh: SpaceMesh, flux: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> np.ndarray:
    """Per-boundary-node weights ``w`` with ``sum_b w_b u_b ~ int_{dOmega} u g dsigma``.

    ``flux(points, normals)`` evaluates ``g`` at boundary points with the
    outward normal of the edge being integrated, so corners of the square get
    one contribution per adjacent edge. The result may be complex.
    """
    idx = mesh.boundary_nodes
    if mesh.dim == 1:
        pts = mesh.node_coords[idx]
        return np.asarray(flux(pts, mesh.boundary_normals))
    edges = mesh.boundary_edges
    pts = mesh.node_coords[edges.ravel()]
    normals = np.repeat(mesh.boundary_normals, 2, axis=0)
    vals = np.asarray(flux(pts, normals)) * (0.5 * mesh.mesh_size)
    out = np.zeros(idx.size, dtype=vals.dtype)
    np.add.at(out, np.searchsorted(idx, edges.ravel()), vals)
    return out


def restriction_indices(fine: SpaceMesh, coarse: SpaceMesh) -> np.ndarray:
    """Fine-mesh node ids coinciding with every coarse node."""
    if fine.dim != coarse.dim or not np.isclose(fine.domain_length, coarse.domain_length):
        raise MeshError("meshes describe different domains")
    ratio = fine.n_per_axis / coarse.n_per_axis
    r = int(round(ratio))
    if abs(ratio - r) > 1e-9:
        raise MeshError("coarse mesh is not nested in the fine mesh")
    if fine.dim == 1:
        return np.arange(coarse.n_nodes) * r
    i, j = np.meshgrid(np.arange(coarse.n_per_axis + 1), np.arange(coarse.n_per_axis + 1), indexing="xy")
    return (i.ravel() * r + j.ravel() * r * (fine.n_per_axis + 1)).astype(np.int64)


@dataclass(frozen=True, eq=False)
class SourceModel:
    """``N`` point sources with amplitudes sampled on a common time grid.

    Amplitudes are piecewise linear between samples and zero outside the grid.
    """

    locations: np.ndarray
    amplitude_grid: np.ndarray
    amplitudes: np.ndarray
    strict_support: bool = False

    def __post_init__(self):
        loc = np.asarray(self.locations, dtype=float)
        if loc.ndim == 1:  # a single point
            loc = loc.reshape(1, -1)
        grid = np.asarray(self.amplitude_grid, dtype=float)
        amps = np.atleast_2d(np.asarray(self.amplitudes, dtype=float))
        if amps.shape != (loc.shape[0], grid.size):
            raise ValueError("amplitudes must have shape (n_sources, len(amplitude_grid))")
        if grid.size > 1 and np.any(np.diff(grid) <= 0):
            raise ValueError("amplitude grid must be increasing")
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "amplitude_grid", grid)
        object.__setattr__(self, "amplitudes", amps)

    @property
    def n_sources(self) -> int:
        return self.locations.shape[0]

    @classmethod
    def from_functions(cls, locations, functions: Sequence[Callable], grid, **kw) -> "SourceModel":
        grid = np.asarray(grid, dtype=float)
        amps = np.array([np.broadcast_to(np.asarray(f(grid), dtype=float), grid.shape) for f in functions])
        return cls(np.atleast_2d(np.asarray(locations, float)), grid, amps, **kw)

    def amplitude_at(self, t) -> np.ndarray:
        """Amplitudes at times ``t``, shape (n_sources, len(t))."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.array([np.interp(t, self.amplitude_grid, a, left=0.0, right=0.0)
                         for a in self.amplitudes])

    def amplitude_function(self, k: int) -> Callable[[float], float]:
        g, a = self.amplitude_grid, self.amplitudes[k]
        return lambda s: np.interp(s, g, a, left=0.0, right=0.0)

    def support_violation(self, support_end: float) -> float:
        """Largest |amplitude| sampled after ``support_end``."""
        late = self.amplitude_grid > support_end
        return float(np.abs(self.amplitudes[:, late]).max()) if late.any() else 0.0

    def validate(self, mesh: SpaceMesh, config: ProblemConfig | None = None):
        if self.locations.shape[1] != mesh.dim:
            raise ValueError("source dimension does not match the mesh")
        for x in self.locations:
            if mesh.boundary_distance(x) < 2 * mesh.mesh_size - 1e-12:
                raise DomainError(f"source {x} is closer than 2h to the boundary")
        if self.strict_support and config is not None:
            if self.support_violation(config.support_end) > 1e-12:
                raise ValueError("amplitudes do not vanish after the support end T0")
