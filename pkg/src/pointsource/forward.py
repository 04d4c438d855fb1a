"""Backward Euler propagation of the advection-diffusion problem with point sources.

Besides the FEM solver this module holds two analytic references used to
validate it: a Neumann eigenfunction expansion on boxes (A = 0 only) and the
free-space heat kernel convolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy import integrate

from .fem import (ProblemConfig, SourceModel, SpaceMesh, assemble_operators,
                  locate, restriction_indices)
from .sparse_linalg import SolveOptions, factorize


class GridError(ValueError):
    """Incompatible time grids or array shapes."""


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    t_end: float
    dt: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1 or not self.dt > 0:
            raise GridError("time grid needs at least one positive step")
        span = self.t_end - self.t0
        if abs(self.n_steps * self.dt - span) > 1e-12 * max(1.0, abs(span)):
            raise GridError("n_steps * dt must equal t_end - t0")

    @classmethod
    def uniform(cls, t_end: float, dt: float, t0: float = 0.0) -> "TimeGrid":
        ratio = (t_end - t0) / dt
        n = int(round(ratio))
        if n < 1 or abs(ratio - n) > 1e-6 * max(1.0, ratio):
            raise GridError(f"span {t_end - t0} is not a multiple of dt={dt}")
        return cls(t0, t_end, (t_end - t0) / n, n)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.n_steps + 1, self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        return w


@dataclass(frozen=True, eq=False)
class BoundaryTrace:
    """Boundary values at every time level plus the snapshot at ``grid.t_end``.

    ``values`` has shape ``(n_steps + 1, n_boundary_nodes)``; ``field`` holds
    the full nodal history when it was requested.
    """

    grid: TimeGrid
    boundary_index: np.ndarray
    values: np.ndarray
    final_snapshot: np.ndarray
    field: np.ndarray | None = None

    def __post_init__(self):
        if self.values.shape != (self.grid.n_steps + 1, self.boundary_index.size):
            raise GridError("trace values do not match grid and boundary index")

    def sup_norm(self) -> float:
        return float(np.abs(self.values).max()) if self.values.size else 0.0

    def with_values(self, values: np.ndarray) -> "BoundaryTrace":
        return BoundaryTrace(self.grid, self.boundary_index, values, self.final_snapshot, self.field)


class Stepper:
    """Factorized backward Euler system ``(M + dt K) u^{n+1} = M u^n + dt f^{n+1}``."""

    def __init__(self, config: ProblemConfig, mesh: SpaceMesh, dt: float,
                 solve_opts: SolveOptions | None = None):
        if config.dim != mesh.dim:
            raise GridError("config and mesh dimensions differ")
        self.config = config
        self.mesh = mesh
        self.dt = float(dt)
        ops = assemble_operators(mesh, config.advection, config.reaction)
        self.operators = ops
        self.mass = ops.mass.to_scipy()
        self.system = ops.mass + ops.spatial.scale(self.dt)
        self._opts = solve_opts
        self.solve = factorize(self.system, solve_opts)
        self._solve_t = None

    def solve_transpose(self, rhs: np.ndarray) -> np.ndarray:
        """Solve with the transposed system matrix (factorized on first use)."""
        if self._solve_t is None:
            self._solve_t = factorize(self.system.transpose(), self._opts)
        return self._solve_t(rhs)

    def march(self, u0: np.ndarray, n_steps: int, load: Callable[[int], np.ndarray] | None,
              record: np.ndarray, keep_field: bool = False):
        """Advance ``n_steps`` steps from ``u0`` (vector or column stack).

        ``load(n)`` returns the nodal source at time level ``n`` (n >= 1).
        Returns ``(recorded rows, final state, field or None)``.
        """
        u = np.array(u0, dtype=float)
        rows = np.empty((n_steps + 1, record.size) + u.shape[1:])
        rows[0] = u[record]
        field = np.empty((n_steps + 1,) + u.shape) if keep_field else None
        if keep_field:
            field[0] = u
        for n in range(1, n_steps + 1):
            rhs = self.mass @ u
            if load is not None:
                rhs += self.dt * load(n)
            u = self.solve(rhs)
            rows[n] = u[record]
            if keep_field:
                field[n] = u
        return rows, u, field


def source_load_matrix(mesh: SpaceMesh, locations) -> sp.csr_matrix:
    """Sparse (n_nodes, N) matrix whose columns are the Dirac load vectors."""
    locations = np.atleast_2d(locations)
    rows, cols, vals = [], [], []
    for k, x in enumerate(locations):
        _, nodes, w = locate(mesh, x)
        rows.extend(nodes)
        cols.extend([k] * len(nodes))
        vals.extend(w)
    return sp.csr_matrix((vals, (rows, cols)), shape=(mesh.n_nodes, locations.shape[0]))


def _initial_state(config: ProblemConfig, mesh: SpaceMesh) -> np.ndarray:
    if config.initial_condition is None:
        return np.zeros(mesh.n_nodes)
    u0 = np.asarray(config.initial_condition, dtype=float)
    if u0.shape != (mesh.n_nodes,):
        raise GridError("initial condition must have one value per node")
    return u0


def step_amplitudes(sources: SourceModel, grid: TimeGrid) -> np.ndarray:
    """Amplitudes at the time levels of ``grid``, shape (N, n_steps + 1)."""
    g = sources.amplitude_grid
    tol = 1e-9 * max(1.0, grid.t_end)
    if g.size and (grid.t0 < g[0] - tol or grid.t_end > g[-1] + tol):
        raise GridError("amplitude grid does not cover the simulation window")
    return sources.amplitude_at(grid.times)


def simulate(config: ProblemConfig, mesh: SpaceMesh, sources: SourceModel, grid: TimeGrid, *,
             keep_field: bool = False, stepper: Stepper | None = None,
             solve_opts: SolveOptions | None = None) -> BoundaryTrace:
    """Boundary trace of the FEM / backward Euler solution.

    The source is evaluated at the new time level (fully implicit).
    """
    if stepper is None:
        stepper = Stepper(config, mesh, grid.dt, solve_opts)
    elif not math.isclose(stepper.dt, grid.dt, rel_tol=1e-12):
        raise GridError("stepper was built for a different time step")
    if sources.locations.shape[1] != mesh.dim:
        raise GridError("source dimension does not match the mesh")
    b = source_load_matrix(mesh, sources.locations)
    amps = step_amplitudes(sources, grid)
    rows, final, field = stepper.march(
        _initial_state(config, mesh), grid.n_steps, lambda n: b @ amps[:, n],
        mesh.boundary_nodes, keep_field)
    return BoundaryTrace(grid, mesh.boundary_nodes.copy(), rows, final, field)


def extend_in_time(config: ProblemConfig, mesh: SpaceMesh, snapshot, t_ext: float,
                   grid_ext: TimeGrid | None = None, *, stepper: Stepper | None = None,
                   keep_field: bool = False) -> BoundaryTrace:
    """Source-free continuation from ``snapshot`` at T over ``(T, T + t_ext)``.

    Without ``grid_ext`` the step of ``stepper`` (or the mesh size) is used
    and the span is rounded up to a whole number of steps.
    """
    snapshot = np.asarray(snapshot, dtype=float)
    if snapshot.shape != (mesh.n_nodes,):
        raise GridError("snapshot length does not match the mesh")
    if grid_ext is None:
        # round the span up to whole steps
        dt = stepper.dt if stepper is not None else mesh.mesh_size
        n = max(1, math.ceil(t_ext / dt - 1e-9))
        grid_ext = TimeGrid(config.horizon, config.horizon + n * dt, dt, n)
    elif not math.isclose(grid_ext.t_end - grid_ext.t0, t_ext, rel_tol=1e-9):
        raise GridError("extension grid does not span t_ext")
    if stepper is None or not math.isclose(stepper.dt, grid_ext.dt, rel_tol=1e-12):
        stepper = Stepper(config, mesh, grid_ext.dt)
    rows, final, field = stepper.march(snapshot, grid_ext.n_steps, None, mesh.boundary_nodes, keep_field)
    return BoundaryTrace(grid_ext, mesh.boundary_nodes.copy(), rows, final, field)


def default_tail_length(config: ProblemConfig, floor: float = 1e-8) -> tuple[float, bool]:
    """Extension length with ``exp(-mu t_ext) <= floor``; flag is True when truncated."""
    mu = config.reaction
    if mu > 0:
        return math.log(1.0 / floor) / mu, False
    return 10.0 * config.horizon, True


def restrict_trace(trace: BoundaryTrace, fine: SpaceMesh, coarse: SpaceMesh,
                   grid: TimeGrid) -> BoundaryTrace:
    """Resample fine-grid data onto a coarse mesh and time grid.

    Space: nodal restriction (meshes must be nested). Time: linear interpolation.
    """
    ids = restriction_indices(fine, coarse)
    fine_pos = {int(n): k for k, n in enumerate(trace.boundary_index)}
    try:
        cols = np.array([fine_pos[int(ids[b])] for b in coarse.boundary_nodes])
    except KeyError as exc:
        raise GridError("coarse boundary node missing from the fine trace") from exc
    tf = trace.grid.times
    tc = grid.times
    if tc[0] < tf[0] - 1e-12 or tc[-1] > tf[-1] + 1e-9:
        raise GridError("coarse time grid exceeds the data window")
    vals = trace.values[:, cols]
    out = np.column_stack([np.interp(tc, tf, vals[:, j]) for j in range(vals.shape[1])])
    snap = trace.final_snapshot[ids]
    return BoundaryTrace(grid, coarse.boundary_nodes.copy(), out, snap)


# ---------------------------------------------------------------------------
# analytic references

def _segment_weights(a: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Weights of the exact integral of exp(-a (delta - s)) times a linear hat.

    Returns (w_left, w_right) so that the integral over one segment of
    ``exp(-a (delta - s)) * lam(s)`` equals ``w_left lam(0) + w_right lam(delta)``.
    """
    x = a * delta
    small = np.abs(x) < 1e-2
    xs = np.where(small, 1.0, x)
    e = np.exp(-xs)
    g0 = np.where(small, 0.5 - x / 3 + x**2 / 8 - x**3 / 30 + x**4 / 144,
                  (1.0 - e * (1.0 + xs)) / xs**2)
    g1 = np.where(small, 1.0 - x / 2 + x**2 / 6 - x**3 / 24 + x**4 / 120, -np.expm1(-xs) / xs)
    return delta * g0, delta * (g1 - g0)


def _neumann_modes(config: ProblemConfig, n_modes: int, points: np.ndarray):
    """Eigenvalues and orthonormal eigenfunction values at ``points`` (n_pts, dim)."""
    ell = config.domain_length
    m = np.arange(n_modes)
    lam1 = (m * np.pi / ell) ** 2
    norm = np.where(m == 0, math.sqrt(1.0 / ell), math.sqrt(2.0 / ell))
    phi_axis = [norm[None, :] * np.cos(np.outer(points[:, d], m * np.pi / ell)) for d in range(config.dim)]
    if config.dim == 1:
        return lam1, phi_axis[0]
    lam = (lam1[:, None] + lam1[None, :]).ravel()
    phi = (phi_axis[0][:, :, None] * phi_axis[1][:, None, :]).reshape(points.shape[0], -1)
    return lam, phi


def spectral_reference(config: ProblemConfig, sources: SourceModel, x_eval, t, n_modes: int = 2048):
    """Neumann eigenfunction expansion of the exact solution (A = 0, boxes).

    ``n_modes`` counts modes per axis. The time convolution of each mode with
    the piecewise-linear amplitudes is evaluated exactly, segment by segment.
    Returns an array of shape ``(len(t), len(x_eval))`` (scalars are squeezed).
    """
    if np.any(config.advection != 0):
        raise ValueError("spectral reference requires A = 0")
    x_eval = np.asarray(x_eval, dtype=float)
    scalar_x = x_eval.ndim == 0 or (x_eval.ndim == 1 and config.dim > 1)
    pts = np.atleast_2d(x_eval.reshape(-1, config.dim))
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t_arr < 0) or np.any(np.diff(t_arr) < 0):
        raise ValueError("evaluation times must be sorted and non-negative")

    rates, phi_x = _neumann_modes(config, n_modes, pts)
    rates = rates + config.reaction
    _, phi_src = _neumann_modes(config, n_modes, sources.locations)

    g = sources.amplitude_grid
    breaks = np.unique(np.concatenate([[0.0], g[(g > 0) & (g < t_arr[-1])], t_arr]))
    lam = sources.amplitude_at(breaks)                      # (N, n_breaks)
    coeff = np.zeros((sources.n_sources, rates.size))
    out = np.zeros((t_arr.size, pts.shape[0]))
    want = np.searchsorted(breaks, t_arr)
    k_out = 0
    while k_out < t_arr.size and want[k_out] == 0:
        k_out += 1
    cache: dict[float, tuple] = {}
    for j in range(1, breaks.size):
        delta = breaks[j] - breaks[j - 1]
        key = round(delta, 15)
        if key not in cache:
            cache[key] = (np.exp(-rates * delta),) + _segment_weights(rates, delta)
        decay, wl, wr = cache[key]
        coeff = coeff * decay + lam[:, j - 1, None] * wl + lam[:, j, None] * wr
        while k_out < t_arr.size and want[k_out] == j:
            out[k_out] = ((phi_src * coeff).sum(axis=0)) @ phi_x.T
            k_out += 1
    if config.initial_condition is not None:
        raise ValueError("spectral reference supports zero initial data only")
    if np.ndim(t) == 0 and scalar_x:
        return float(out[0, 0])
    if np.ndim(t) == 0:
        return out[0]
    if scalar_x:
        return out[:, 0]
    return out


def freespace_kernel(config: ProblemConfig, location, amplitude: Callable[[float], float], x, t: float,
                     epsabs: float = 1e-10) -> float:
    """Whole-space solution generated by one point source.

    ``y(x,t) = (4 pi)^{-d/2} e^{A.(x-x_j)/2} int_0^t e^{tau0 (t-s)} lam(s)
    e^{-|x-x_j|^2 / (4 (t-s))} (t-s)^{-d/2} ds`` with ``tau0 = -|A|^2/4 - mu``,
    integrated after the substitution ``t - s = r^2``.
    """
    xj = np.atleast_1d(np.asarray(location, dtype=float))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    r2 = float((x - xj) @ (x - xj))
    if r2 == 0.0:
        raise ValueError("kernel is singular at the source location")
    if t <= 0:
        return 0.0
    d = config.dim
    a = config.advection
    tau0 = -float(a @ a) / 4.0 - config.reaction

    def integrand(r):
        if r == 0.0:
            return 0.0
        return 2.0 * math.exp(tau0 * r * r - r2 / (4.0 * r * r)) * amplitude(t - r * r) * r ** (1 - d)

    val, _ = integrate.quad(integrand, 0.0, math.sqrt(t), epsabs=epsabs, epsrel=1e-10, limit=400)
    return (4.0 * math.pi) ** (-d / 2.0) * math.exp(float(a @ (x - xj)) / 2.0) * val
