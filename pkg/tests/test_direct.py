import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pointsource.direct import (CaloricProbe, MomentSequence, RecoveryError, harmonic_moments,
                                invert_band_limited, laplace_boundary_functional, make_probe,
                                prony_recover, reciprocity_gap, recover_amplitude, recover_location_1d,
                                recover_location_single)
from pointsource.fem import DomainError, ProblemConfig, SourceModel, build_interval_mesh, build_square_mesh
from pointsource.forward import (BoundaryTrace, Stepper, TimeGrid, default_tail_length, extend_in_time,
                                 simulate)

LAM_INT = 0.5 * (1 - math.exp(-10)) / 5


def ex1_cfg(mu=1.0):
    return ProblemConfig(1, 1.0, [0.0], mu, 2.0, 1.0, 1.5)


def ex1_data(h, x0=0.5, mu=1.0, lam=None):
    cfg = ex1_cfg(mu)
    mesh = build_interval_mesh(1.0, h)
    grid = TimeGrid.uniform(2.0, h)
    lam = lam or (lambda t: 0.5 * np.exp(-5 * t))
    src = SourceModel.from_functions([[x0]], [lam], grid.times)
    return cfg, mesh, grid, simulate(cfg, mesh, src, grid)


def zero_trace(mesh, grid):
    nb = mesh.boundary_nodes.size
    return BoundaryTrace(grid, mesh.boundary_nodes, np.zeros((grid.n_steps + 1, nb)), np.zeros(mesh.n_nodes))


PROBES = [
    dict(kind="exp_probe", advection=[0.6, -0.3], reaction=1.0, direction=[0.6, 0.8]),
    dict(kind="exp_probe", advection=[0.5], reaction=0.2, direction=[-1.0]),
    dict(kind="laplace_probe", advection=[0.4, 0.2], reaction=1.0, direction=[0.0, 1.0], z=2 + 3j,
         anchor=[0.5, 0.5]),
    dict(kind="poly_probe", advection=[1.0, 0.0], reaction=-0.25, degree=3),
    dict(kind="affine_1d", advection=[0.8], reaction=-0.16, degree=1),
]


@pytest.mark.parametrize("kw", PROBES)
def test_probe_residual_second_order(kw):
    p = CaloricProbe(**kw)
    d = p.advection.size
    pts = np.random.default_rng(0).uniform(0.1, 0.9, (100, d))
    e1 = np.abs(p.residual(pts, 1e-2)).max()
    e2 = np.abs(p.residual(pts, 5e-3)).max()
    assert e1 > 0
    assert math.log2(e1 / e2) > 1.8


@pytest.mark.parametrize("kw", PROBES)
def test_probe_gradient_matches_fd(kw):
    p = CaloricProbe(**kw)
    d = p.advection.size
    x = np.full(d, 0.37)
    g = p.gradient(x)[0]
    for i in range(d):
        e = np.zeros(d)
        e[i] = 1e-6
        fd = (p.value(x + e) - p.value(x - e)) / 2e-6
        assert complex(np.ravel(fd)[0]) == pytest.approx(complex(g[i]), rel=1e-7, abs=1e-9)


def test_probe_validation():
    with pytest.raises(ValueError):
        CaloricProbe("poly_probe", [0.0, 0.0], 1.0)
    with pytest.raises(ValueError):
        CaloricProbe("exp_probe", [0.0], 1.0, direction=[1.0], z=1.0)
    with pytest.raises(ValueError):
        CaloricProbe("exp_probe", [0.0, 0.0], 1.0, direction=[1.0, 1.0])
    with pytest.raises(ValueError):
        CaloricProbe("affine_1d", [0.0], 0.0, degree=2)
    assert CaloricProbe("laplace_probe", [0.0], -3.0, direction=[1.0], z=-1.0).kappa == pytest.approx(2j)


def test_reciprocity_zero_trace():
    mesh = build_square_mesh(1.0, 0.1)
    grid = TimeGrid.uniform(2.0, 0.1)
    cfg = ProblemConfig(2, 1.0, [0.0, 0.0], 0.0, 2.0, 1.0, 1.5)
    tr = zero_trace(mesh, grid)
    for k in range(4):
        assert reciprocity_gap(tr, make_probe(cfg, "poly_probe", degree=k), cfg, mesh) == 0
    assert not harmonic_moments(tr, cfg, mesh, 4).values.any()


def test_reciprocity_incompatible_probe():
    cfg, mesh, grid, tr = ex1_data(0.05)
    with pytest.raises(ValueError):
        reciprocity_gap(tr, CaloricProbe("affine_1d", [0.0], 0.0, degree=1), cfg, mesh)


def test_reciprocity_linearity():
    cfg, mesh, grid, tr = ex1_data(0.01)
    p1 = make_probe(cfg, "exp_probe", direction=[1.0])
    p2 = make_probe(cfg, "exp_probe", direction=[-1.0])
    r1, r2 = reciprocity_gap(tr, p1, cfg, mesh), reciprocity_gap(tr, p2, cfg, mesh)
    # the pairing is linear in the probe through its boundary weights and nodal values
    from pointsource.fem import assemble_operators, boundary_flux_weights
    w = boundary_flux_weights(mesh, lambda p, n: p1.boundary_operator(p, n) + p2.boundary_operator(p, n))
    mass = assemble_operators(mesh).mass.to_scipy()
    both = (tr.grid.trapezoid_weights() @ (tr.values @ w)
            + (p1.nodal(mesh) + p2.nodal(mesh)) @ (mass @ tr.final_snapshot))
    assert both == pytest.approx(r1 + r2, rel=1e-13)


def test_reciprocity_ex1_value_and_order():
    exact = LAM_INT * math.exp(0.5)
    errs = []
    for h in (4e-3, 2e-3, 1e-3):
        cfg, mesh, grid, tr = ex1_data(h)
        r = reciprocity_gap(tr, make_probe(cfg, "exp_probe", direction=[1.0]), cfg, mesh)
        errs.append(abs(r - exact) / exact)
    assert errs[-1] <= 0.01
    assert math.log2(errs[0] / errs[2]) / 2 >= 0.8


def test_location_single_1d_and_2d():
    cfg, mesh, grid, tr = ex1_data(1e-3)
    est = recover_location_single(tr, cfg, mesh)
    assert abs(est.location[0] - 0.5) <= 2e-3
    assert not est.clamped
    h = 2e-2
    cfg2 = ProblemConfig(2, 1.0, [0.0, 0.0], 1.0, 2.0, 1.0, 1.5)
    mesh2 = build_square_mesh(1.0, h)
    grid2 = TimeGrid.uniform(2.0, h)
    src = SourceModel.from_functions([[0.5, 0.5]], [lambda t: 0.5 * np.exp(-5 * t)], grid2.times)
    est2 = recover_location_single(simulate(cfg2, mesh2, src, grid2), cfg2, mesh2)
    np.testing.assert_allclose(est2.location, [0.5, 0.5], atol=2 * h)


def test_location_single_zero_trace():
    cfg, mesh, grid, _ = ex1_data(0.05)
    with pytest.raises(RecoveryError):
        recover_location_single(zero_trace(mesh, grid), cfg, mesh)


def _synthetic_ratio(x0, kappa):
    # R(v_{+e}) / R(v_{-e}) for one source with unit integral
    return math.exp(kappa * x0) / math.exp(-kappa * x0)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.05, 0.95), st.floats(-0.5, 0.5))
def test_exp_ratio_exact_and_equivariant(x1, x2, shift):
    kappa = 1.3
    est = [math.log(_synthetic_ratio(x, kappa)) / (2 * kappa) for x in (x1, x2)]
    np.testing.assert_allclose(est, [x1, x2], atol=1e-12)
    moved = [math.log(_synthetic_ratio(x + shift, kappa)) / (2 * kappa) for x in (x1, x2)]
    np.testing.assert_allclose(np.subtract(moved, est), shift, atol=1e-12)


def test_location_1d_affine_fem():
    h = 2e-3
    cfg = ProblemConfig(1, 1.0, [0.0], 0.0, 2.0, 1.0, 1.5)
    mesh = build_interval_mesh(1.0, h)
    grid = TimeGrid.uniform(2.0, h)
    src = SourceModel.from_functions([[0.37]], [lambda t: (t <= 1.0).astype(float)], grid.times)
    tr = simulate(cfg, mesh, src, grid)
    assert abs(recover_location_1d(tr, cfg, mesh) - 0.37) <= 2 * h
    with pytest.raises(RecoveryError):
        recover_location_1d(zero_trace(mesh, grid), cfg, mesh)


def test_moment_synthesis_example():
    m = MomentSequence.synthetic([0.25 + 0.25j, 0.75 + 0.75j], [1, 1], 3)
    np.testing.assert_allclose(m.values, [2, 1 + 1j, (0.25 + 0.25j) ** 2 + (0.75 + 0.75j) ** 2])
    assert m.values[2] == pytest.approx(1.25j)


def test_prony_examples():
    z, c = prony_recover(MomentSequence([2, 1 + 1j]), 1)
    assert z[0] == pytest.approx((1 + 1j) / 2)
    assert c[0] == pytest.approx(2)
    nodes = np.array([0.25 + 0.25j, 0.75 + 0.75j])
    z, c = prony_recover(MomentSequence.synthetic(nodes, [0.1, 0.2], 4), 2)
    np.testing.assert_allclose(z, nodes, atol=1e-10)
    np.testing.assert_allclose(c, [0.1, 0.2], atol=1e-10)
    with pytest.raises(RecoveryError):
        prony_recover(MomentSequence.synthetic([0.3 + 0.4j, 0.3 + 0.4j], [1, 1], 4), 2)
    with pytest.raises(ValueError):
        prony_recover(MomentSequence([1, 2, 3]), 2)


_coord = st.floats(0.05, 0.95)


@settings(max_examples=60, deadline=None)
@given(st.tuples(_coord, _coord, _coord, _coord), st.floats(0.2, 2.0), st.floats(0.2, 2.0))
def test_prony_roundtrip(xy, c1, c2):
    z = np.array([xy[0] + 1j * xy[1], xy[2] + 1j * xy[3]])
    if abs(z[0] - z[1]) < 0.1:
        return
    order = np.lexsort((z.imag, np.round(z.real, 8)))
    nodes, w = prony_recover(MomentSequence.synthetic(z, [c1, c2], 4), 2)
    np.testing.assert_allclose(nodes, z[order], atol=1e-10)
    np.testing.assert_allclose(w, np.array([c1, c2])[order], atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.complex_numbers(max_magnitude=1.0, allow_nan=False, allow_infinity=False),
       st.floats(0.1, 5.0) | st.floats(-5.0, -0.1))
def test_single_moment_ratio(z1, c1):
    g = MomentSequence.synthetic([z1], [c1], 2).values
    assert g[1] / g[0] == pytest.approx(z1, abs=1e-14)


def test_harmonic_moments_fem_prony():
    h = 2e-2
    cfg = ProblemConfig(2, 1.0, [0.0, 0.0], 0.0, 2.0, 1.0, 1.5)
    mesh = build_square_mesh(1.0, h)
    grid = TimeGrid.uniform(2.0, h)
    src = SourceModel.from_functions([[0.25, 0.25], [0.75, 0.75]],
                                     [lambda t: 0.5 * np.exp(-5 * t), lambda t: 0.25 * np.exp(-4 * t)], grid.times)
    mom = harmonic_moments(simulate(cfg, mesh, src, grid), cfg, mesh, 4)
    nodes, w = prony_recover(mom, 2)
    np.testing.assert_allclose(nodes, [0.25 + 0.25j, 0.75 + 0.75j], atol=3 * h)
    # weights carry the O(h) consistency error of the gap (about 5% at this h)
    np.testing.assert_allclose(w.real, [0.1 * (1 - math.exp(-10)), 0.0625 * (1 - math.exp(-8))], rtol=0.1)


def _ex1_with_tail(h):
    cfg, mesh, grid, tr = ex1_data(h)
    t_ext, _ = default_tail_length(cfg)
    st_ = Stepper(cfg, mesh, h)
    ext = extend_in_time(cfg, mesh, tr.final_snapshot, t_ext, stepper=st_)
    return cfg, mesh, tr, ext


def test_laplace_functional_closed_form():
    cfg, mesh, tr, ext = _ex1_with_tail(1e-3)
    sig = 2.0
    z = sig + np.arange(5.0)
    got = laplace_boundary_functional(tr, ext, z, cfg, mesh, anchor=[0.5]).value
    exact = 0.5 / (z + 5) * (1 - np.exp(-(z + 5) * 2.0))
    np.testing.assert_allclose(got.real, exact, rtol=0.02)
    np.testing.assert_allclose(got.imag, 0.0, atol=1e-14)


def test_laplace_functional_symmetry_and_zero():
    cfg, mesh, tr, ext = _ex1_with_tail(1e-2)
    z = np.array([2 + 3j, 2 - 3j])
    v = laplace_boundary_functional(tr, ext, z, cfg, mesh).value
    assert v[1] == pytest.approx(np.conj(v[0]), rel=1e-12)
    zt = zero_trace(mesh, tr.grid)
    ze = zero_trace(mesh, ext.grid)
    assert not laplace_boundary_functional(zt, ze, z, cfg, mesh).value.any()
    with pytest.warns(RuntimeWarning):
        lv = laplace_boundary_functional(tr, None, z, cfg, mesh)
    assert lv.warning


def _analytic_hat(z):
    return 0.5 / (z + 5) * (1 - np.exp(-(z + 5) * 2.0))


def _inversion_error(radius, window="lanczos"):
    sig = 2.0
    tau = np.linspace(-radius, radius, 1201)
    t = np.linspace(0.05, 1.5, 600)
    re, _ = invert_band_limited(sig, tau, _analytic_hat(sig + 1j * tau), t, window)
    lam = 0.5 * np.exp(-5 * t)
    return math.sqrt(np.trapezoid((re - lam) ** 2, t) / np.trapezoid(lam**2, t))


def test_band_limited_inversion_r60():
    assert _inversion_error(60.0) <= 0.05


def test_band_limited_inversion_monotone_in_radius():
    errs = [_inversion_error(r) for r in (5, 10, 20, 40, 60, 80)]
    assert all(a > b for a, b in zip(errs, errs[1:]))


def test_inversion_zero_input():
    tau = np.linspace(-10, 10, 101)
    re, im = invert_band_limited(1.0, tau, np.zeros(101, complex), np.linspace(0, 2, 11))
    assert not re.any() and not im.any()


def test_recover_amplitude_end_to_end():
    cfg, mesh, tr, ext = _ex1_with_tail(1e-3)
    est = recover_amplitude(tr, ext, [0.5], cfg, mesh)
    lam = 0.5 * np.exp(-5 * est.times)
    err = math.sqrt(np.trapezoid((est.time_samples - lam) ** 2, est.times) / np.trapezoid(lam**2, est.times))
    assert err <= 0.15
    # conjugate symmetry of the sampled transform
    np.testing.assert_allclose(est.hat_values[::-1], np.conj(est.hat_values), rtol=1e-10, atol=1e-14)


def test_recover_amplitude_errors_and_zero():
    cfg, mesh, tr, ext = _ex1_with_tail(2e-2)
    with pytest.raises(DomainError):
        recover_amplitude(tr, ext, [1.5], cfg, mesh, radius=10)
    with pytest.raises(ValueError):
        recover_amplitude(tr, ext, [0.5], cfg, mesh, radius=0.0)
    with pytest.raises(ValueError):
        recover_amplitude(tr, ext, [0.5], cfg, mesh, radius=10, n_freq=100)
    zt, ze = zero_trace(mesh, tr.grid), zero_trace(mesh, ext.grid)
    est = recover_amplitude(zt, ze, [0.5], cfg, mesh, radius=10, n_freq=101)
    assert not est.time_samples.any()
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        recover_amplitude(tr, ext, [0.5], cfg, mesh, radius=10, n_freq=101, average_directions=True)
