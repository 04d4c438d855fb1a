"""Non-iterative source recovery from boundary data.

Every method here pairs the measured boundary trace with closed-form solutions
``v`` of the adjoint equation ``-Lap v - A.grad v + (mu + z) v = 0``. For such
``v`` the pairing

    R(v) = int_0^T int_dOmega u (d_nu v + (A.nu) v) + int_Omega u(T) v
         = sum_j (int_0^T lambda_j) v(x_j)

isolates source information without solving a PDE. Locations follow from
ratios or power moments of ``R``; the amplitude of a single source follows
from a band-limited inversion of its Laplace transform.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .fem import (DomainError, ProblemConfig, SpaceMesh, assemble_operators,
                  boundary_flux_weights)
from .forward import BoundaryTrace, TimeGrid


class RecoveryError(ArithmeticError):
    """Raised when the data carry no usable source information."""


class ProbeKind(str, Enum):
    exp_probe = "exp_probe"
    poly_probe = "poly_probe"
    laplace_probe = "laplace_probe"
    affine_1d = "affine_1d"


@dataclass(frozen=True)
class CaloricProbe:
    """Closed-form solution of the shifted adjoint equation.

    exp_probe / laplace_probe: ``v = e^{-A.(x-a)/2} e^{kappa w.(x-a)}`` with
    ``kappa = sqrt(mu + |A|^2/4 + z)``; exp_probe is the ``z = 0`` case.
    poly_probe: ``v = e^{-A.(x-a)/2} (zeta - zeta_a)^k`` with ``zeta = x1 + i x2``.
    affine_1d: ``v = e^{-A (x-a)/2} (x - a)^k`` with ``k`` in {0, 1}.
    """

    kind: ProbeKind
    advection: np.ndarray
    reaction: float
    direction: np.ndarray | None = None
    z: complex = 0.0
    degree: int = 0
    anchor: np.ndarray | None = None

    def __post_init__(self):
        kind = ProbeKind(self.kind)
        object.__setattr__(self, "kind", kind)
        a = np.atleast_1d(np.asarray(self.advection, dtype=float))
        object.__setattr__(self, "advection", a)
        d = a.size
        anchor = np.zeros(d) if self.anchor is None else np.atleast_1d(np.asarray(self.anchor, float))
        if anchor.shape != (d,):
            raise ValueError("anchor dimension does not match advection")
        object.__setattr__(self, "anchor", anchor)
        shift = self.reaction + float(a @ a) / 4.0
        if kind in (ProbeKind.exp_probe, ProbeKind.laplace_probe):
            if self.direction is None:
                raise ValueError("exponential probes need a direction")
            w = np.atleast_1d(np.asarray(self.direction, dtype=float))
            if w.shape != (d,) or not math.isclose(float(w @ w), 1.0, rel_tol=1e-12):
                raise ValueError("direction must be a unit vector of the problem dimension")
            object.__setattr__(self, "direction", w)
            if kind is ProbeKind.exp_probe and self.z != 0:
                raise ValueError("exp_probe is the z = 0 member; use laplace_probe")
        elif kind is ProbeKind.poly_probe:
            if d != 2:
                raise ValueError("poly_probe is two-dimensional")
        elif kind is ProbeKind.affine_1d:
            if d != 1:
                raise ValueError("affine_1d is one-dimensional")
            if self.degree not in (0, 1):
                raise ValueError("affine_1d degree must be 0 or 1")
        if kind in (ProbeKind.poly_probe, ProbeKind.affine_1d):
            if self.z != 0 or abs(shift) > 1e-12:
                raise ValueError("polynomial probes require mu = -|A|^2/4 and z = 0")
            if self.degree < 0:
                raise ValueError("degree must be non-negative")

    @property
    def kappa(self) -> complex:
        k = np.sqrt(complex(self.reaction + float(self.advection @ self.advection) / 4.0 + self.z))
        return complex(k)

    def _split(self, x):
        x = np.asarray(x, dtype=float)
        pts = x.reshape(-1, self.advection.size)
        return x, pts - self.anchor

    def _parts(self, y):
        """Envelope, polynomial/exponential factor and its gradient at offsets ``y``."""
        env = np.exp(-(y @ self.advection) / 2.0)
        if self.kind in (ProbeKind.exp_probe, ProbeKind.laplace_probe):
            k = self.kappa
            p = np.exp(k * (y @ self.direction))
            gp = k * p[:, None] * self.direction[None, :]
        elif self.kind is ProbeKind.poly_probe:
            zeta = y[:, 0] + 1j * y[:, 1]
            k = self.degree
            p = zeta ** k
            dp = k * zeta ** (k - 1) if k > 0 else np.zeros_like(zeta)
            gp = np.stack([dp, 1j * dp], axis=1)
        else:
            k = self.degree
            p = y[:, 0] ** k
            gp = (np.full_like(p, float(k)) if k == 1 else np.zeros_like(p))[:, None]
        return env, p, gp

    def value(self, x):
        """Probe values; the trailing coordinate axis is dropped (scalars allowed in 1D)."""
        x = np.asarray(x, dtype=float)
        d = self.advection.size
        out = self._eval_pts(x.reshape(-1, d))
        if d > 1 or (x.ndim > 1 and x.shape[-1] == 1):
            return out.reshape(x.shape[:-1])
        return out.reshape(x.shape)

    def gradient(self, x) -> np.ndarray:
        _, y = self._split(x)
        env, p, gp = self._parts(y)
        return env[:, None] * (gp - 0.5 * p[:, None] * self.advection[None, :])

    def boundary_operator(self, points, normals) -> np.ndarray:
        """``d_nu v + (A.nu) v`` at boundary points with outward normals."""
        _, y = self._split(points)
        env, p, gp = self._parts(y)
        grad_plus = env[:, None] * (gp + 0.5 * p[:, None] * self.advection[None, :])
        n = np.asarray(normals, dtype=float).reshape(y.shape)
        return (grad_plus * n).sum(axis=1)

    def nodal(self, mesh: SpaceMesh) -> np.ndarray:
        _, y = self._split(mesh.node_coords)
        env, p, _ = self._parts(y)
        return env * p

    def residual(self, x, h_fd: float) -> np.ndarray:
        """Centered finite-difference value of the adjoint operator applied to ``v``."""
        _, y = self._split(x)
        pts = y + self.anchor
        d = pts.shape[1]
        f = lambda q: self._eval_pts(q)
        v0 = f(pts)
        lap = np.zeros_like(v0)
        adv = np.zeros_like(v0)
        for i in range(d):
            e = np.zeros(d)
            e[i] = h_fd
            vp, vm = f(pts + e), f(pts - e)
            lap += (vp - 2 * v0 + vm) / h_fd**2
            adv += self.advection[i] * (vp - vm) / (2 * h_fd)
        return -lap - adv + (self.reaction + self.z) * v0

    def _eval_pts(self, pts):
        env, p, _ = self._parts(pts - self.anchor)
        return env * p


def make_probe(config: ProblemConfig, kind, **kw) -> CaloricProbe:
    return CaloricProbe(kind, config.advection, config.reaction, **kw)


def _check_probe(probe: CaloricProbe, config: ProblemConfig):
    if probe.advection.size != config.dim:
        raise ValueError("probe dimension does not match the problem")
    if not (np.allclose(probe.advection, config.advection) and math.isclose(probe.reaction, config.reaction)):
        raise ValueError("probe coefficients differ from the problem coefficients")


def reciprocity_gap(trace: BoundaryTrace, probe: CaloricProbe, config: ProblemConfig,
                    mesh: SpaceMesh, mass=None) -> complex:
    """Boundary-plus-final-time pairing of the data with a steady probe.

    The time integral uses the trapezoid rule on the trace grid and the
    boundary integral uses per-edge trapezoid weights; the final snapshot is
    paired through the mass matrix (pass ``mass`` to reuse an assembled one).
    """
    _check_probe(probe, config)
    if probe.z != 0:
        raise ValueError("reciprocity_gap needs a steady (z = 0) probe")
    w_bnd = boundary_flux_weights(mesh, probe.boundary_operator)
    w_t = trace.grid.trapezoid_weights()
    boundary = w_t @ (trace.values @ w_bnd)
    if mass is None:
        mass = assemble_operators(mesh).mass.to_scipy()
    volume = probe.nodal(mesh) @ (mass @ trace.final_snapshot)
    return complex(boundary + volume)


def _trace_scale(trace: BoundaryTrace, config: ProblemConfig) -> float:
    return max(trace.sup_norm(), float(np.abs(trace.final_snapshot).max(initial=0.0))) * config.horizon


def _exp_pair(trace, config, mesh, axis, mass):
    d = config.dim
    e = np.zeros(d)
    e[axis] = 1.0
    plus = reciprocity_gap(trace, make_probe(config, "exp_probe", direction=e), config, mesh, mass)
    minus = reciprocity_gap(trace, make_probe(config, "exp_probe", direction=-e), config, mesh, mass)
    return plus, minus


@dataclass(frozen=True)
class LocationEstimate:
    location: np.ndarray
    raw: np.ndarray
    clamped: bool


def recover_location_single(trace: BoundaryTrace, config: ProblemConfig, mesh: SpaceMesh) -> LocationEstimate:
    """Single-source location from exponential probe ratios along each axis.

    ``R(v_{+e_i}) / R(v_{-e_i}) = exp(2 kappa x_i)`` with ``kappa`` real.
    """
    shift = config.shifted_reaction
    if shift <= 0:
        raise RecoveryError("mu + |A|^2/4 <= 0 gives oscillatory probes; use the polynomial moments")
    kappa = math.sqrt(shift)
    scale = _trace_scale(trace, config)
    mass = assemble_operators(mesh).mass.to_scipy()
    raw = np.empty(config.dim)
    for i in range(config.dim):
        plus, minus = _exp_pair(trace, config, mesh, i, mass)
        thresh = 1e-12 * max(scale, 1e-300)
        if abs(plus) <= thresh or abs(minus) <= thresh or scale == 0.0:
            raise RecoveryError("amplitude integral vanishes")
        ratio = (plus / minus).real
        if ratio <= 0:
            raise RecoveryError("probe ratio is not positive; data too noisy for this method")
        raw[i] = math.log(ratio) / (2.0 * kappa)
    lo, hi = 0.0, config.domain_length
    loc = np.clip(raw, lo, hi)
    return LocationEstimate(loc, raw, bool(np.any(loc != raw)))


def recover_location_1d(trace: BoundaryTrace, config: ProblemConfig, mesh: SpaceMesh) -> float:
    """1D location as the ratio ``R(x e^{-Ax/2}) / R(e^{-Ax/2})`` (needs mu = -A^2/4)."""
    if config.dim != 1:
        raise ValueError("recover_location_1d is one-dimensional")
    mass = assemble_operators(mesh).mass.to_scipy()
    r0 = reciprocity_gap(trace, make_probe(config, "affine_1d", degree=0), config, mesh, mass)
    r1 = reciprocity_gap(trace, make_probe(config, "affine_1d", degree=1), config, mesh, mass)
    scale = _trace_scale(trace, config)
    if scale == 0.0 or abs(r0) <= 1e-12 * scale:
        raise RecoveryError("amplitude integral vanishes")
    return float((r1 / r0).real)


@dataclass(frozen=True)
class MomentSequence:
    """Power sums ``G_k = sum_j c_j z_j^k``, ``k = 0..K-1``."""

    values: np.ndarray
    family: str = "poly_probe"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex).ravel()
        if v.size < 2:
            raise ValueError("need at least two moments")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size

    @classmethod
    def synthetic(cls, nodes, weights, K: int) -> "MomentSequence":
        z = np.asarray(nodes, dtype=complex)
        c = np.asarray(weights, dtype=complex)
        k = np.arange(K)
        return cls((c[None, :] * z[None, :] ** k[:, None]).sum(axis=1))


def harmonic_moments(trace: BoundaryTrace, config: ProblemConfig, mesh: SpaceMesh, K: int) -> MomentSequence:
    """Moments from the harmonic polynomial probes of degrees ``0..K-1``."""
    if config.dim != 2:
        raise ValueError("harmonic moments need a two-dimensional problem")
    if abs(config.shifted_reaction) > 1e-12:
        raise ValueError("harmonic moments require mu = -|A|^2/4")
    mass = assemble_operators(mesh).mass.to_scipy()
    vals = [reciprocity_gap(trace, make_probe(config, "poly_probe", degree=k), config, mesh, mass)
            for k in range(K)]
    return MomentSequence(np.array(vals))


def prony_recover(moments: MomentSequence, n: int, rank_tol: float = 1e-10):
    """Nodes and weights of ``G_k = sum_j c_j z_j^k`` by the Hankel pencil.

    Returns ``(nodes, weights)`` sorted by real then imaginary part of the node.
    """
    g = moments.values
    K = g.size
    if n < 1 or K < 2 * n:
        raise ValueError(f"need at least {2 * n} moments for {n} nodes")
    rows = K - n
    h0 = np.array([[g[i + j] for j in range(n)] for i in range(rows)])
    h1 = np.array([[g[i + j + 1] for j in range(n)] for i in range(rows)])
    s = np.linalg.svd(h0, compute_uv=False)
    if s[0] == 0 or s[-1] / s[0] < rank_tol:
        raise RecoveryError("sources collapsed or N overestimated")
    pencil = np.linalg.lstsq(h0, h1, rcond=None)[0]
    nodes = np.linalg.eigvals(pencil)
    # ties in the real part are decided by the imaginary part, not by round-off
    scale = max(float(np.abs(nodes).max()), 1.0)
    key = np.round(nodes.real / (1e-8 * scale))
    order = np.lexsort((nodes.imag, key))
    nodes = nodes[order]
    vander = nodes[None, :] ** np.arange(K)[:, None]
    weights = np.linalg.lstsq(vander, g, rcond=None)[0]
    return nodes, weights


# ---------------------------------------------------------------------------
# Laplace-domain amplitude recovery

def default_abscissa(config: ProblemConfig) -> float:
    return 1.0 + abs(config.reaction) + float(config.advection @ config.advection) / 4.0


def laplace_weights(grid: TimeGrid, z) -> np.ndarray:
    """Trapezoid weights ``w_n e^{-z t_n}``, shape (len(z), n_steps + 1)."""
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    return grid.trapezoid_weights()[None, :] * np.exp(-np.outer(z, grid.times))


@dataclass(frozen=True)
class LaplaceValue:
    value: np.ndarray
    warning: str | None = None


def laplace_boundary_functional(trace: BoundaryTrace, ext_trace: BoundaryTrace | None, z, config: ProblemConfig,
                                mesh: SpaceMesh, anchor=None, direction=None, *,
                                chunk: int = 64) -> LaplaceValue:
    """``int_dOmega u_hat(z) (d_nu v_z + (A.nu) v_z)`` for one or many ``z``.

    ``u_hat`` is the time Laplace transform of the boundary data on (0, T)
    followed by the source-free continuation ``ext_trace``. When the
    continuation ends at a finite time its final state is paired with
    ``e^{-z T_end} v_z`` so that the truncated tail does not bias the result.
    Each probe is normalized so that ``v_z(anchor) = 1``.
    """
    z_arr = np.atleast_1d(np.asarray(z, dtype=complex))
    d = config.dim
    anchor = np.full(d, 0.5 * config.domain_length) if anchor is None else np.atleast_1d(np.asarray(anchor, float))
    if direction is None:
        direction = np.eye(d)[0]
    warn = None
    if ext_trace is None:
        warn = "no time extension supplied; Laplace tail beyond T is omitted"
    elif config.reaction <= 0:
        warn = "mu <= 0: Laplace tail truncated at the end of the extension"
    if warn:
        warnings.warn(warn, RuntimeWarning, stacklevel=2)
    mass = None
    out = np.empty(z_arr.size, dtype=complex)
    for start in range(0, z_arr.size, chunk):
        zc = z_arr[start:start + chunk]
        u_hat = laplace_weights(trace.grid, zc) @ trace.values
        end_state = None
        if ext_trace is not None:
            if not math.isclose(ext_trace.grid.t0, trace.grid.t_end, abs_tol=1e-9):
                raise ValueError("extension must start where the data end")
            u_hat = u_hat + laplace_weights(ext_trace.grid, zc) @ ext_trace.values
            end_state = ext_trace.final_snapshot
            t_end = ext_trace.grid.t_end
        else:
            end_state = trace.final_snapshot
            t_end = trace.grid.t_end
        for j, zj in enumerate(zc):
            probe = make_probe(config, "laplace_probe", direction=direction, z=zj, anchor=anchor)
            wb = boundary_flux_weights(mesh, probe.boundary_operator)
            val = u_hat[j] @ wb
            if ext_trace is not None:
                if mass is None:
                    mass = assemble_operators(mesh).mass.to_scipy()
                val += np.exp(-zj * t_end) * (probe.nodal(mesh) @ (mass @ end_state))
            out[start + j] = val
    return LaplaceValue(out, warn)


def estimate_noise_scale(trace: BoundaryTrace) -> float:
    """Relative noise level from second time differences of the boundary data.

    For i.i.d. noise of standard deviation s, the second difference has
    variance 6 s^2; smooth signal content contributes only O(dt^2).
    """
    v = trace.values
    sup = trace.sup_norm()
    if v.shape[0] < 3 or sup == 0.0:
        return 0.0
    d2 = v[2:] - 2 * v[1:-1] + v[:-2]
    return float(np.sqrt(np.mean(d2**2) / 6.0) / sup)


def default_radius(gamma: float, c1: float = 1.0, r_max: float = 200.0) -> float:
    if gamma <= 0:
        return r_max
    return float(min(max(c1 * math.log(1.0 / gamma) ** 2 if gamma < 1 else 1.0, 1.0), r_max))


def _taper(kind: str, tau: np.ndarray, radius: float) -> np.ndarray:
    if kind == "none":
        return np.ones_like(tau)
    x = tau / radius
    if kind == "lanczos":
        return np.sinc(x)
    if kind == "hann":
        return 0.5 * (1.0 + np.cos(np.pi * x))
    if kind == "fejer":
        return 1.0 - np.abs(x)
    raise ValueError(f"unknown window {kind!r}")


def invert_band_limited(sigma: float, tau: np.ndarray, hat_values: np.ndarray, t: np.ndarray,
                        window: str = "lanczos") -> tuple[np.ndarray, np.ndarray]:
    """``e^{sigma t}/(2 pi) int e^{i tau t} w(tau) hat(sigma + i tau) dtau`` by trapezoid.

    Returns the real part and the discarded imaginary part.
    """
    radius = float(np.max(np.abs(tau)))
    wq = np.full(tau.size, tau[1] - tau[0])
    wq[0] *= 0.5
    wq[-1] *= 0.5
    coef = wq * _taper(window, tau, radius) * hat_values
    vals = np.exp(sigma * t) / (2 * np.pi) * (np.exp(1j * np.outer(t, tau)) @ coef)
    return vals.real, vals.imag


@dataclass(frozen=True)
class AmplitudeEstimate:
    sigma: float
    frequencies: np.ndarray
    hat_values: np.ndarray
    times: np.ndarray
    time_samples: np.ndarray
    imag_residue: float
    radius: float
    noise_scale: float | None = None
    window: str = "lanczos"
    warnings: tuple = field(default_factory=tuple)


def recover_amplitude(trace: BoundaryTrace, ext_trace: BoundaryTrace | None, x_hat, config: ProblemConfig,
                      mesh: SpaceMesh, sigma: float | None = None, radius: float | None = None,
                      n_freq: int = 1201, *, window: str = "lanczos", average_directions: bool = False,
                      times=None) -> AmplitudeEstimate:
    """Single-source amplitude from the Laplace functional on ``sigma + i[-R, R]``.

    ``window`` tapers the truncated spectrum to suppress Gibbs ringing at
    amplitude jumps (``"none"`` is the plain truncated integral). With
    ``average_directions`` the functional is averaged over all signed axes.
    """
    x_hat = np.atleast_1d(np.asarray(x_hat, dtype=float))
    if x_hat.shape != (config.dim,) or not mesh.contains(x_hat) or mesh.boundary_distance(x_hat) <= 0:
        raise DomainError("x_hat must be an interior point")
    if n_freq < 3 or n_freq % 2 == 0:
        raise ValueError("n_freq must be odd and at least 3")
    gamma = None
    if radius is None:
        gamma = estimate_noise_scale(trace)
        radius = default_radius(gamma)
    if not radius > 0:
        raise ValueError("radius must be positive")
    sigma = default_abscissa(config) if sigma is None else float(sigma)
    tau = np.linspace(-radius, radius, n_freq)
    z = sigma + 1j * tau
    dirs = [np.eye(config.dim)[0]]
    if average_directions:
        dirs = [s * e for e in np.eye(config.dim) for s in (1.0, -1.0)]
    hat = np.zeros(n_freq, dtype=complex)
    msgs = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for w in dirs:
            lv = laplace_boundary_functional(trace, ext_trace, z, config, mesh, anchor=x_hat, direction=w)
            hat += lv.value
            if lv.warning and lv.warning not in msgs:
                msgs.append(lv.warning)
    hat /= len(dirs)
    if times is None:
        times = trace.grid.times
    times = np.asarray(times, dtype=float)
    re, im = invert_band_limited(sigma, tau, hat, times, window)
    resid = float(np.sqrt(np.mean(im**2)) / max(np.sqrt(np.mean(re**2)), 1e-300)) if re.any() else 0.0
    return AmplitudeEstimate(sigma, tau, hat, times, re, resid, float(radius), gamma, window, tuple(msgs))


def write_locations_csv(path, rows) -> None:
    """Rows of (run id, coordinates...) to CSV."""
    path = Path(path)
    rows = list(rows)
    dim = len(rows[0][1]) if rows else 0
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["run"] + [f"x{i + 1}" for i in range(dim)])
        for run, x in rows:
            wr.writerow([run] + [repr(float(v)) for v in x])


def write_amplitude_csv(path, estimate: AmplitudeEstimate) -> None:
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["time", "value"])
        for t, v in zip(estimate.times, estimate.time_samples):
            wr.writerow([repr(float(t)), repr(float(v))])
