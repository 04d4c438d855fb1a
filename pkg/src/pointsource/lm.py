"""Levenberg-Marquardt reconstruction of point-source locations and amplitudes.

Each iterate minimizes the linearized misfit with separate Tikhonov terms on
the location and amplitude increments:

    |r + J_x dx + J_l dl|^2 + beta_x |dx|^2 + beta_l dl' W dl

where ``W`` realizes the L2(0, T) norm. Both penalties decay geometrically
between iterations.

Amplitudes live on the inversion time grid. With the load taken at the new
time level, ``lambda(t^0)`` never enters the discrete forward map, so the free
values are ``lambda(t^1) .. lambda(t^n)`` and ``lambda(t^0)`` is copied from
``lambda(t^1)``.

Because the discrete problem is time invariant, the trace caused by a source
with amplitude ``l`` is a discrete convolution of ``l`` with the response to a
unit impulse at the first step. One impulse march per source therefore gives
the whole amplitude Jacobian, and impulses at shifted locations give the
finite-difference location Jacobian.
"""

from __future__ import annotations

import csv
import enum
import itertools
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fem import ProblemConfig, SpaceMesh, boundary_quadrature
from .forward import (BoundaryTrace, GridError, Stepper, TimeGrid,
                      _initial_state, source_load_matrix)
from .sparse_linalg import SolveOptions, SolverError, conjugate_gradient


class LmError(RuntimeError):
    """Unrecoverable failure of the iteration."""


class StopRule(str, enum.Enum):
    max_iters = "max_iters"
    discrepancy = "discrepancy"


class StopReason(str, enum.Enum):
    max_iters = "max_iters"
    discrepancy = "discrepancy"
    aborted = "aborted"


@dataclass(frozen=True, eq=False)
class LmParams:
    """Source locations (N, d) and amplitudes (N, n_steps + 1) on the inversion grid."""

    locations: np.ndarray
    amplitudes: np.ndarray

    def __post_init__(self):
        loc = np.asarray(self.locations, dtype=float)
        if loc.ndim == 1:
            loc = loc.reshape(1, -1)
        amp = np.atleast_2d(np.asarray(self.amplitudes, dtype=float))
        if amp.shape[0] != loc.shape[0]:
            raise ValueError("one amplitude row per source required")
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "amplitudes", amp)

    @property
    def n_sources(self) -> int:
        return self.locations.shape[0]

    def copy(self) -> "LmParams":
        return LmParams(self.locations.copy(), self.amplitudes.copy())


@dataclass(frozen=True)
class LmSchedule:
    beta_x0: float = 1.0
    beta_l0: float = 5.0
    gamma_x: float = 0.8
    gamma_l: float = 0.8
    max_iters: int = 100
    fd_step: float | None = None
    gn_solver: SolveOptions = field(default_factory=lambda: SolveOptions("cg", rel_tol=1e-10, max_iter=20000))
    stop_rule: StopRule = StopRule.discrepancy
    eta: float = 1.1

    def __post_init__(self):
        if not (self.beta_x0 > 0 and self.beta_l0 > 0):
            raise ValueError("initial regularization weights must be positive")
        if not (0 < self.gamma_x < 1 and 0 < self.gamma_l < 1):
            raise ValueError("decay factors must lie in (0, 1)")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        if self.fd_step is not None and not self.fd_step > 0:
            raise ValueError("fd_step must be positive")
        object.__setattr__(self, "stop_rule", StopRule(self.stop_rule))


@dataclass
class IterateRecord:
    iteration: int
    residual: float
    location_errors: tuple = ()
    amplitude_error: float = float("nan")
    beta_x: float = float("nan")
    beta_l: float = float("nan")


@dataclass
class ReconstructionResult:
    final: LmParams
    history: list
    stop_reason: StopReason
    wall_time: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def residual_norms(self) -> np.ndarray:
        return np.array([h.residual for h in self.history])


# ---------------------------------------------------------------------------
# forward model on the inversion grid

def interior_box(mesh: SpaceMesh) -> tuple[float, float]:
    """Coordinate range keeping a point at least 2h away from the boundary."""
    return 2.0 * mesh.mesh_size, mesh.domain_length - 2.0 * mesh.mesh_size


def clamp_locations(locations: np.ndarray, mesh: SpaceMesh) -> np.ndarray:
    lo, hi = interior_box(mesh)
    return np.clip(locations, lo, hi)


def mirror_first(amplitudes: np.ndarray) -> np.ndarray:
    """Copy the first free amplitude value onto ``t^0``."""
    out = np.array(amplitudes, dtype=float)
    out[:, 0] = out[:, 1]
    return out


def amplitude_weights(grid: TimeGrid) -> np.ndarray:
    """L2(0, T) weights of the free amplitude values (``t^0`` folded onto ``t^1``)."""
    w = grid.trapezoid_weights()
    free = w[1:].copy()
    free[0] += w[0]
    return free


class ForwardModel:
    """Inversion-grid forward map with cached factorization and weights."""

    def __init__(self, config: ProblemConfig, mesh: SpaceMesh, grid: TimeGrid,
                 stepper: Stepper | None = None):
        if stepper is None:
            stepper = Stepper(config, mesh, grid.dt)
        elif not math.isclose(stepper.dt, grid.dt, rel_tol=1e-12):
            raise GridError("stepper was built for a different time step")
        self.config, self.mesh, self.grid, self.stepper = config, mesh, grid, stepper
        bq = boundary_quadrature(mesh)
        self.boundary_index = bq.boundary_index
        self.sqrt_w = np.sqrt(np.outer(grid.trapezoid_weights(), bq.weights))
        self.u0 = _initial_state(config, mesh)
        self._free = None

    @property
    def n_steps(self) -> int:
        return self.grid.n_steps

    def free_response(self) -> np.ndarray:
        """Trace of the source-free evolution of the initial state."""
        if self._free is None:
            rows, _, _ = self.stepper.march(self.u0, self.n_steps, None, self.boundary_index)
            self._free = rows
        return self._free

    def impulse_responses(self, locations: np.ndarray) -> np.ndarray:
        """Boundary traces (n_steps + 1, nb, n_points) for unit impulses at step 1."""
        locations = np.atleast_2d(locations)
        b = source_load_matrix(self.mesh, locations).toarray()
        zero = np.zeros_like(b)

        def load(n):
            return b if n == 1 else zero

        rows, _, _ = self.stepper.march(zero, self.n_steps, load, self.boundary_index)
        return rows

    def convolve(self, impulse: np.ndarray, amps_free: np.ndarray) -> np.ndarray:
        """Trace (n_steps + 1, nb) of one source with free amplitudes ``amps_free``."""
        n = self.n_steps
        out = np.zeros_like(impulse)
        for j in range(1, n + 1):
            a = amps_free[j - 1]
            if a != 0.0:
                out[j:] += a * impulse[1:n - j + 2]
        return out

    def toeplitz(self, impulse: np.ndarray) -> np.ndarray:
        """Weighted amplitude Jacobian block, shape ((n_steps + 1) * nb, n_steps)."""
        n = self.n_steps
        nb = impulse.shape[1]
        idx = np.arange(n + 1)[:, None] - np.arange(1, n + 1)[None, :] + 1
        mask = idx >= 1
        blk = impulse[np.where(mask, idx, 0)]            # (n+1, n, nb)
        blk[~mask] = 0.0
        blk = blk * self.sqrt_w[:, None, :]
        return blk.transpose(0, 2, 1).reshape((n + 1) * nb, n)

    def trace(self, params: LmParams) -> np.ndarray:
        imp = self.impulse_responses(params.locations)
        out = self.free_response().copy()
        for k in range(params.n_sources):
            out += self.convolve(imp[:, :, k], params.amplitudes[k, 1:])
        return out

    def weighted(self, values: np.ndarray) -> np.ndarray:
        return (self.sqrt_w * values).ravel()


def _check_data(data: BoundaryTrace, model: ForwardModel):
    g = data.grid
    if g.n_steps != model.grid.n_steps or not math.isclose(g.dt, model.grid.dt, rel_tol=1e-12):
        raise GridError("data grid differs from the inversion grid")
    if not np.array_equal(data.boundary_index, model.boundary_index):
        raise GridError("data boundary nodes differ from the inversion mesh")


def residual(params: LmParams, data: BoundaryTrace, config: ProblemConfig, mesh: SpaceMesh,
             grid: TimeGrid, *, model: ForwardModel | None = None) -> np.ndarray:
    """Weighted misfit vector; its squared norm approximates the L2 boundary misfit."""
    model = model or ForwardModel(config, mesh, grid)
    _check_data(data, model)
    return model.weighted(model.trace(params) - data.values)


@dataclass
class LocationJacobian:
    matrix: np.ndarray
    one_sided: list


def _fd_columns(model: ForwardModel, params: LmParams, h_fd: float):
    """Shifted location sets and their divisors for every (source, axis)."""
    mesh = model.mesh
    pts, cols, one_sided = [], [], []
    for k, x in enumerate(params.locations):
        for i in range(mesh.dim):
            e = np.zeros(mesh.dim)
            e[i] = h_fd
            plus_ok, minus_ok = mesh.contains(x + e), mesh.contains(x - e)
            if plus_ok and minus_ok:
                xp, xm, div = x + e, x - e, 2 * h_fd
            elif plus_ok:
                xp, xm, div = x + e, x, h_fd
                one_sided.append((k, i, "forward"))
            elif minus_ok:
                xp, xm, div = x, x - e, h_fd
                one_sided.append((k, i, "backward"))
            else:
                raise LmError("finite-difference step leaves the domain in both directions")
            cols.append((k, len(pts), len(pts) + 1, div))
            pts.extend([xp, xm])
    return np.array(pts), cols, one_sided


def jacobian_x(params: LmParams, config: ProblemConfig, mesh: SpaceMesh, grid: TimeGrid, *,
               h_fd: float | None = None, model: ForwardModel | None = None) -> LocationJacobian:
    """Central-difference Jacobian of the weighted residual in the locations.

    Columns are ordered source-major (x_1 axes, then x_2 axes, ...).
    Steps that would leave the domain fall back to one-sided differences and
    are listed in ``one_sided``.
    """
    model = model or ForwardModel(config, mesh, grid)
    h_fd = mesh.mesh_size / 4 if h_fd is None else h_fd
    pts, cols, one_sided = _fd_columns(model, params, h_fd)
    imp = model.impulse_responses(pts)
    return _assemble_jx(model, params, imp, cols, one_sided)


def _assemble_jx(model, params, imp, cols, one_sided):
    out = np.empty((model.sqrt_w.size, len(cols)))
    for c, (k, ip, im, div) in enumerate(cols):
        diff = model.convolve(imp[:, :, ip] - imp[:, :, im], params.amplitudes[k, 1:]) / div
        out[:, c] = model.weighted(diff)
    return LocationJacobian(out, one_sided)


def apply_jacobian_lambda(params: LmParams, dl, config: ProblemConfig, mesh: SpaceMesh, grid: TimeGrid,
                          *, stepper: Stepper | None = None) -> np.ndarray:
    """Weighted boundary trace of one forward solve driven by ``dl`` at the sources.

    ``dl`` has shape (N, n_steps + 1); its ``t^0`` column has no effect.
    """
    stepper = stepper or Stepper(config, mesh, grid.dt)
    dl = np.atleast_2d(np.asarray(dl, dtype=float))
    if dl.shape != params.amplitudes.shape:
        raise GridError("increment shape does not match the amplitudes")
    b = source_load_matrix(mesh, params.locations)
    rows, _, _ = stepper.march(np.zeros(mesh.n_nodes), grid.n_steps, lambda n: b @ dl[:, n],
                               mesh.boundary_nodes)
    bq = boundary_quadrature(mesh)
    return (np.sqrt(np.outer(grid.trapezoid_weights(), bq.weights)) * rows).ravel()


def apply_jacobian_lambda_adjoint(params: LmParams, r, config: ProblemConfig, mesh: SpaceMesh,
                                  grid: TimeGrid, *, stepper: Stepper | None = None) -> np.ndarray:
    """Transpose of :func:`apply_jacobian_lambda` by a backward-in-time solve.

    Runs ``q^m = S^{-T}(P' s_m r_m + M' q^{m+1})`` from the last step down and
    samples ``dt q^m`` at the sources; the ``t^0`` entry is zero.
    """
    stepper = stepper or Stepper(config, mesh, grid.dt)
    bq = boundary_quadrature(mesh)
    n = grid.n_steps
    r = np.asarray(r, dtype=float).reshape(n + 1, bq.weights.size)
    rho = r * np.sqrt(np.outer(grid.trapezoid_weights(), bq.weights))
    b = source_load_matrix(mesh, params.locations)
    mass_t = stepper.mass.T.tocsr()
    out = np.zeros((params.n_sources, n + 1))
    q = np.zeros(mesh.n_nodes)
    for m in range(n, 0, -1):
        rhs = mass_t @ q
        rhs[mesh.boundary_nodes] += rho[m]
        q = stepper.solve_transpose(rhs)
        out[:, m] = stepper.dt * (b.T @ q)
    return out


# ---------------------------------------------------------------------------
# iteration

@dataclass
class StepOutcome:
    params: LmParams
    residual: np.ndarray
    beta_x: float
    beta_l: float
    retried: bool
    cg_iterations: int
    one_sided: list


class _Linearization:
    """Residual and Jacobian blocks at one iterate."""

    def __init__(self, model: ForwardModel, params: LmParams, data: BoundaryTrace, h_fd: float):
        self.params = params
        pts, cols, self.one_sided = _fd_columns(model, params, h_fd)
        all_pts = np.vstack([params.locations, pts])
        imp = model.impulse_responses(all_pts)
        n_src = params.n_sources
        base = model.free_response().copy()
        for k in range(n_src):
            base += model.convolve(imp[:, :, k], params.amplitudes[k, 1:])
        self.r = model.weighted(base - data.values)
        shifted = [(k, ip + n_src, im + n_src, div) for k, ip, im, div in cols]
        self.jx = _assemble_jx(model, params, imp, shifted, self.one_sided).matrix
        self.jl = np.hstack([model.toeplitz(imp[:, :, k]) for k in range(n_src)])


def _solve_normal(lin: _Linearization, beta_x: float, beta_l: float, w_l: np.ndarray, opts: SolveOptions):
    j = np.hstack([lin.jx, lin.jl])
    n_x = lin.jx.shape[1]
    pen = np.concatenate([np.full(n_x, beta_x), beta_l * np.tile(w_l, lin.jl.shape[1] // w_l.size)])
    normal = j.T @ j
    normal[np.diag_indices_from(normal)] += pen
    rhs = -(j.T @ lin.r)
    diag = normal.diagonal().copy()
    x, its, _ = conjugate_gradient(lambda v: normal @ v, rhs, precond=1.0 / diag,
                                   rel_tol=opts.rel_tol, max_iter=opts.max_iter)
    return x[:n_x], x[n_x:], its


def _apply_update(params: LmParams, dx, dl, mesh: SpaceMesh) -> LmParams:
    n_src, d = params.locations.shape
    loc = clamp_locations(params.locations + dx.reshape(n_src, d), mesh)
    amps = params.amplitudes.copy()
    amps[:, 1:] += dl.reshape(n_src, -1)
    return LmParams(loc, mirror_first(amps))


def lm_step(params: LmParams, data: BoundaryTrace, beta_x: float, beta_l: float, schedule: LmSchedule,
            config: ProblemConfig, mesh: SpaceMesh, grid: TimeGrid, *, model: ForwardModel | None = None,
            lin: _Linearization | None = None, require_decrease: bool = True) -> StepOutcome:
    """One damped Gauss-Newton step with a single doubling retry.

    The step is retried with both weights doubled when CG fails or (with
    ``require_decrease``) the weighted residual grows. A second failure raises
    :class:`LmError`.
    """
    if not (beta_x > 0 and beta_l > 0):
        raise ValueError("regularization weights must be positive")
    model = model or ForwardModel(config, mesh, grid)
    _check_data(data, model)
    h_fd = schedule.fd_step or mesh.mesh_size / 4
    lin = lin or _Linearization(model, params, data, h_fd)
    w_l = amplitude_weights(grid)
    r0 = np.linalg.norm(lin.r)
    last_err = None
    for attempt in range(2):
        bx, bl = beta_x * 2**attempt, beta_l * 2**attempt
        try:
            dx, dl, its = _solve_normal(lin, bx, bl, w_l, schedule.gn_solver)
        except SolverError as exc:
            last_err = f"CG failure: {exc}"
            continue
        new = _apply_update(params, dx, dl, mesh)
        r_new = model.weighted(model.trace(new) - data.values)
        if require_decrease and np.linalg.norm(r_new) > r0:
            last_err = f"residual increased from {r0:.6e} to {np.linalg.norm(r_new):.6e}"
            continue
        return StepOutcome(new, r_new, bx, bl, attempt > 0, its, lin.one_sided)
    raise LmError(f"step rejected twice ({last_err})")


def noise_norm(delta: float, data_sup: float, config: ProblemConfig, mesh: SpaceMesh) -> float:
    """Expected weighted residual norm of i.i.d. noise with std ``delta * data_sup``."""
    perimeter = float(boundary_quadrature(mesh).weights.sum())
    return delta * data_sup * math.sqrt(config.horizon * perimeter)


def location_error(est: np.ndarray, truth: np.ndarray) -> tuple[float, tuple]:
    """Summed Euclidean error minimized over source relabelings, plus per-source errors."""
    est = np.atleast_2d(est)
    truth = np.atleast_2d(truth)
    best = None
    for perm in itertools.permutations(range(truth.shape[0])):
        per = np.linalg.norm(est[list(perm)] - truth, axis=1)
        if best is None or per.sum() < best[0]:
            best = (float(per.sum()), tuple(float(v) for v in per), perm)
    return best[0], best[1]


def best_permutation(est: np.ndarray, truth: np.ndarray) -> tuple:
    est = np.atleast_2d(est)
    truth = np.atleast_2d(truth)
    return min(itertools.permutations(range(truth.shape[0])),
               key=lambda p: np.linalg.norm(est[list(p)] - truth, axis=1).sum())


def amplitude_error(est: LmParams, truth_locations, truth_amplitudes, grid: TimeGrid) -> float:
    """Trapezoid L1(0, T) amplitude error summed over sources, using the location relabeling."""
    perm = list(best_permutation(est.locations, truth_locations))
    diff = np.abs(est.amplitudes[perm] - np.atleast_2d(truth_amplitudes))
    return float((diff @ grid.trapezoid_weights()).sum())


def run_lm(init: LmParams, data: BoundaryTrace, schedule: LmSchedule, config: ProblemConfig,
           mesh: SpaceMesh, grid: TimeGrid, *, noise_level: float | None = None,
           truth: LmParams | None = None, model: ForwardModel | None = None) -> ReconstructionResult:
    """Iterate damped Gauss-Newton steps with geometrically decaying weights.

    ``noise_level`` is the absolute noise norm for the discrepancy rule
    (see :func:`noise_norm`); without it the run goes to ``max_iters``.
    ``truth`` only feeds the error columns of the history.
    """
    t_start = time.perf_counter()
    model = model or ForwardModel(config, mesh, grid)
    _check_data(data, model)
    if init.amplitudes.shape != (init.n_sources, grid.n_steps + 1):
        raise GridError("initial amplitudes must live on the inversion grid")
    params = LmParams(clamp_locations(init.locations, mesh), mirror_first(init.amplitudes))
    h_fd = schedule.fd_step or mesh.mesh_size / 4
    bx, bl = schedule.beta_x0, schedule.beta_l0
    use_disc = schedule.stop_rule is StopRule.discrepancy and noise_level is not None
    target = schedule.eta * noise_level if use_disc else -1.0

    def record(it, p, rnorm, bx_, bl_):
        if truth is not None:
            _, per = location_error(p.locations, truth.locations)
            aerr = amplitude_error(p, truth.locations, truth.amplitudes, grid)
        else:
            per, aerr = (), float("nan")
        return IterateRecord(it, float(rnorm), per, aerr, bx_, bl_)

    lin = _Linearization(model, params, data, h_fd)
    rnorm = float(np.linalg.norm(lin.r))
    history = [record(0, params, rnorm, bx, bl)]
    diagnostics: dict = {"one_sided": [], "retries": 0, "cg_iterations": []}
    reason = StopReason.max_iters
    for it in range(1, schedule.max_iters + 1):
        if rnorm <= target:
            reason = StopReason.discrepancy
            break
        try:
            out = lm_step(params, data, bx, bl, schedule, config, mesh, grid, model=model, lin=lin)
        except LmError as exc:
            diagnostics["abort"] = str(exc)
            reason = StopReason.aborted
            break
        diagnostics["one_sided"].extend((it,) + o for o in out.one_sided)
        diagnostics["retries"] += int(out.retried)
        diagnostics["cg_iterations"].append(out.cg_iterations)
        params = out.params
        history.append(record(it, params, np.linalg.norm(out.residual), out.beta_x, out.beta_l))
        bx, bl = out.beta_x * schedule.gamma_x, out.beta_l * schedule.gamma_l
        lin = _Linearization(model, params, data, h_fd)
        rnorm = float(np.linalg.norm(lin.r))
    else:
        if rnorm <= target:
            reason = StopReason.discrepancy
    return ReconstructionResult(params, history, reason, time.perf_counter() - t_start, diagnostics)


def write_history_csv(path, history, run: str | None = None, append: bool = False) -> None:
    """Iteration history as CSV (iteration, residual, per-source errors, betas)."""
    path = Path(path)
    n_loc = max((len(h.location_errors) for h in history), default=0)
    header = (["run"] if run is not None else []) + ["iteration", "residual"] + \
        [f"location_error_{k + 1}" for k in range(n_loc)] + ["amplitude_l1_error", "beta_x", "beta_lambda"]
    new_file = not (append and path.exists())
    with path.open("a" if append else "w", newline="") as fh:
        wr = csv.writer(fh)
        if new_file:
            wr.writerow(header)
        for h in history:
            locs = list(h.location_errors) + [float("nan")] * (n_loc - len(h.location_errors))
            row = [h.iteration, repr(h.residual)] + [repr(float(v)) for v in locs] + \
                [repr(float(h.amplitude_error)), repr(float(h.beta_x)), repr(float(h.beta_l))]
            wr.writerow(([run] if run is not None else []) + row)
