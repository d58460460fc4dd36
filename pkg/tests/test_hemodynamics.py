import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

import oracles
from hemoatlas import hemodynamics as hd
from hemoatlas.fem import FESpace, assemble_boundary_mass
from hemoatlas.mesh import extract_boundary

mp.mp.dps = 40


# -- helpers -------------------------------------------------------------------


def flow_ops(mesh, wall=None, coeff=1.0, **kw):
    """Flow operators on a whole small mesh; ``wall`` defaults to its boundary."""
    space = FESpace(mesh.nodes, mesh.tets)
    if wall is None:
        wall = extract_boundary(mesh).triangles
    params = kw.pop("params", hd.FlowParams(eps_leray=0.0, eps_visc=0.0))
    return hd.FlowOperators.build(space, np.asarray(wall), coeff, params, **kw)


@pytest.fixture(scope="module")
def cylinder_ops(small_cylinder):
    _, mesh, s = small_cylinder
    omega = mesh.omega
    space = FESpace.from_subdomain(omega)
    params = hd.FlowParams()
    coeff = hd.boundary_coefficient(params, s.total_area, np.ones(omega.n_nodes))
    return hd.FlowOperators.build(space, omega.localize(s.triangles), coeff, params)


def state_with(ops, p, u=None, mu=None):
    n = ops.space.n
    u = np.zeros((n, 3)) if u is None else u
    mu = np.full(n, 56e-3) if mu is None else mu
    z = np.zeros(n)
    return hd.FlowState(p=p.copy(), p_prev=p.copy(), u=u, u_smooth=u.copy(), mu=mu, pb=z, pb_prev=z.copy())


# -- pulse ---------------------------------------------------------------------


def test_blackman_harris_window():
    t = np.linspace(0, 1, 1001)
    w = hd.blackman_harris(t)
    assert hd.blackman_harris(0.5) == pytest.approx(1.0, abs=1e-15)
    assert abs(hd.blackman_harris(0.0)) < 1e-4
    assert np.allclose(w, w[::-1], atol=1e-15)
    assert np.allclose(hd.blackman_harris(t + 1), w, atol=1e-14)
    assert np.all(w <= 1 + 1e-15)


def _mp_shape(spec, phase):
    out = mp.mpf(0)
    a = [mp.mpf(v) for v in (0.35875, 0.48829, 0.14128, 0.01168)]
    for wgt, L, t0 in zip(spec.weights, spec.durations, spec.starts):
        x = (phase - mp.mpf(t0)) % 1
        if x < L:
            tau = 2 * mp.pi * x / mp.mpf(L)
            out += mp.mpf(wgt) * (a[0] - a[1] * mp.cos(tau) + a[2] * mp.cos(2 * tau) - a[3] * mp.cos(3 * tau))
    return out


def mp_extrema(spec):
    """Global max and min of the unscaled waveform: coarse scan, then Newton on the derivative."""
    grid = np.linspace(0, 1, 4001)
    vals = spec.shape(grid)
    res = []
    for k in (int(np.argmax(vals)), int(np.argmin(vals))):
        x0 = mp.mpf(grid[k])
        f = lambda s: _mp_shape(spec, s)  # noqa: E731
        try:
            xs = mp.findroot(lambda s: mp.diff(f, s), x0)
            res.append(f(xs))
        except (ValueError, ZeroDivisionError):
            res.append(f(x0))
        res[-1] = max(res[-1], f(x0)) if k == int(np.argmax(vals)) else min(res[-1], f(x0))
    return res


def test_pulse_swing_is_fifty_mmhg():
    spec = hd.PulseSpec()
    hi, lo = mp_extrema(spec)
    swing = mp.mpf(spec.amplitude) * (hi - lo)
    assert abs(swing / mp.mpf(50 * hd.MMHG) - 1) < 1e-9
    assert spec.pulse_pressure == pytest.approx(6666.1, rel=1e-12)


@pytest.mark.parametrize("bpm, cycle", [(60, 1.0), (80, 0.75)])
def test_pulse_periodicity(bpm, cycle):
    spec = hd.PulseSpec.from_bpm(bpm, spheres=(hd.Sphere((0, 0, 0), 1.0),))
    assert spec.cycle == pytest.approx(cycle, rel=1e-15)
    t = np.linspace(0, cycle, 777, endpoint=False)
    x = np.zeros((1, 3))
    a = np.array([hd.pulse_pressure(x, s, spec)[0] for s in t])
    b = np.array([hd.pulse_pressure(x, s + 3 * cycle, spec)[0] for s in t])
    assert np.max(np.abs(a - b)) <= 1e-9 * spec.pulse_pressure
    assert a.max() - a.min() <= spec.pulse_pressure * (1 + 1e-12)


def test_pulse_zero_outside_spheres():
    spec = hd.PulseSpec(spheres=(hd.Sphere((0, 0, 0), 1e-2), hd.Sphere((0, 0, 0.05), 3e-3)))
    r = np.random.default_rng(4)
    x = r.uniform(-0.1, 0.1, (5000, 3))
    inside = spec.support(x)
    for t in (0.1, 0.33, 0.5, 0.9):
        v = hd.pulse_pressure(x, t, spec)
        assert np.all(v[~inside] == 0.0)
        assert np.all(v[inside] == spec.temporal(t))
    assert hd.pulse_pressure(np.array([0, 0, 0.052]), 0.4, spec) == spec.temporal(0.4)


def test_pulse_scales_linearly():
    a = hd.PulseSpec(pulse_pressure=1000.0)
    b = hd.PulseSpec(pulse_pressure=3000.0)
    t = np.linspace(0, 1, 101)
    assert np.allclose(3 * a.temporal(t), b.temporal(t), rtol=1e-14, atol=0)
    assert hd.PulseSpec(pulse_pressure=0.0).amplitude == 0.0


@pytest.mark.parametrize("kw", [dict(weights=(0.5, -0.3, 0.25)), dict(durations=(0.5, 1.5, 0.6)), dict(starts=(0.0, 1.0, 0.3)), dict(cycle=0.0)])
def test_pulse_rejects_bad_parameters(kw):
    with pytest.raises(ValueError):
        hd.PulseSpec(**kw)


# -- rheology ------------------------------------------------------------------


def mp_carreau(g, p=hd.ViscosityParams()):
    g = mp.mpf(g)
    mu0, mui, lam, n, a = (mp.mpf(v) for v in (p.mu0, p.mu_inf, p.relaxation, p.n, p.a))
    return mui + (mu0 - mui) * (1 + (lam * g) ** a) ** ((n - 1) / a)


def test_carreau_yasuda_limits_and_oracle():
    p = hd.ViscosityParams()
    assert hd.carreau_yasuda(0.0) == 56e-3
    assert hd.carreau_yasuda(1e9) - 3.45e-3 < 1e-8
    g = 1 / p.relaxation
    assert abs(hd.carreau_yasuda(g) / mp_carreau(g) - 1) < 1e-12
    for g in (1e-3, 0.1, 7.5, 300.0):
        assert abs(hd.carreau_yasuda(g) / mp_carreau(g) - 1) < 1e-12


def test_carreau_yasuda_monotone_and_bounded():
    g = np.logspace(-4, 6, 2000)
    mu = hd.carreau_yasuda(g)
    assert np.all(np.diff(mu) < 0)
    assert np.all((mu > 3.45e-3) & (mu <= 56e-3))


def test_viscosity_params_validated():
    with pytest.raises(ValueError):
        hd.ViscosityParams(mu0=1e-3)
    with pytest.raises(ValueError):
        hd.ViscosityParams(n=1.2)


def test_shear_rate_simple_shear(two_tet_mesh):
    sp = FESpace(two_tet_mesh.nodes, two_tet_mesh.tets)
    x = two_tet_mesh.nodes
    u = np.column_stack([2.5 * x[:, 1], np.zeros(len(x)), np.zeros(len(x))])
    assert np.allclose(hd.shear_rate(sp, u), 2.5, rtol=1e-13)
    # rigid rotation has no strain
    w = np.array([0.3, -1.0, 2.0])
    assert np.allclose(hd.shear_rate(sp, np.cross(w, x)), 0.0, atol=1e-13)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=9, max_size=9), st.integers(0, 10_000))
def test_shear_rate_frame_invariant(entries, seed):
    from conftest import REF_TET
    from hemoatlas.mesh import VESSEL, TetMesh

    G = np.array(entries).reshape(3, 3)
    Rm = Rotation.random(random_state=seed).as_matrix()
    m1 = TetMesh.from_arrays(REF_TET, [[0, 1, 2, 3]], [VESSEL])
    m2 = TetMesh.from_arrays(REF_TET @ Rm.T, [[0, 1, 2, 3]], [VESSEL])
    g1 = hd.shear_rate(FESpace(m1.nodes, m1.tets), m1.nodes @ G.T)
    # the same flow seen in the rotated frame: u'(x') = R G R^T x'
    g2 = hd.shear_rate(FESpace(m2.nodes, m2.tets), m2.nodes @ (Rm @ G @ Rm.T).T)
    assert np.allclose(g1, g2, atol=1e-12)


# -- Helmholtz filter -----------------------------------------------------------


def test_helmholtz_identity_and_constants(small_cylinder):
    _, mesh, _ = small_cylinder
    sp = FESpace.from_subdomain(mesh.omega)
    r = np.random.default_rng(5).normal(size=(sp.n, 3))
    assert np.array_equal(hd.helmholtz_smooth(sp, r, 0.0), r)
    ones = np.ones(sp.n)
    assert np.allclose(hd.helmholtz_smooth(sp, ones, 2e-4), 1.0, rtol=1e-9)
    with pytest.raises(ValueError):
        hd.HelmholtzFilter(sp, -1.0)


def test_helmholtz_matches_dense(four_tet_mesh):
    nodes, tets = four_tet_mesh.nodes, four_tet_mesh.tets
    sp = FESpace(nodes, tets)
    x = np.zeros(sp.n)
    x[4] = 1.0
    l = 0.3
    M = oracles.dense_mass(nodes, tets, np.ones(sp.n))
    K = oracles.dense_stiffness(nodes, tets, np.ones(sp.n))
    ref = np.linalg.solve(M + l**2 * K, M @ x)
    assert np.allclose(hd.helmholtz_smooth(sp, x, l), ref, rtol=1e-9, atol=1e-12)
    # smoothing lowers the spike and keeps the mass
    out = hd.helmholtz_smooth(sp, x, l)
    assert out[4] < 1
    assert (M @ out).sum() == pytest.approx((M @ x).sum(), rel=1e-9)


# -- boundary coefficients --------------------------------------------------------


def test_zeta_and_nu_bar_against_oracle():
    p = hd.FlowParams()
    area = 0.01
    mu, Q, Aa, pr = (mp.mpf(v) for v in (p.mu, p.flow, p.arteriole_area, p.pressure))
    zeta = 8 * mp.pi * mu * Q / (mp.mpf(area) * Aa * pr)
    b2 = mp.mpf(p.beta_dist) ** 2
    nu = (1 + b2) * mp.mpf(area) * Aa * pr / (8 * mp.pi * mu * b2 * mp.mpf(p.volume))
    assert abs(hd.compute_zeta(p, area) / zeta - 1) < 1e-13
    assert abs(hd.compute_nu_bar(p, area) / nu - 1) < 1e-13
    assert hd.compute_zeta(p, area) == pytest.approx(138.2, rel=2e-3)


def test_nu_bar_unit_case():
    p = hd.FlowParams(mu=1.0, arteriole_area=1.0, pressure=1.0, beta_dist=1.0, volume=1.0)
    assert hd.compute_nu_bar(p, 1.0) == pytest.approx(2 / (8 * np.pi), rel=1e-15)


def test_boundary_coefficient_modes():
    p = hd.FlowParams()
    lam = np.array([0.5, 1.0, 2.0])
    z = hd.compute_zeta(p, 0.01)
    assert np.allclose(hd.boundary_coefficient(p, 0.01, lam), z * lam, rtol=1e-15)
    nu = hd.compute_nu_bar(p, 0.01)
    assert np.allclose(hd.boundary_coefficient(p, 0.01, lam, "wave"), lam / (z * nu**2), rtol=1e-14)
    with pytest.raises(ValueError, match="unknown"):
        hd.boundary_coefficient(p, 0.01, lam, "other")


# -- discrete operators against dense quadrature ------------------------------------


@pytest.fixture
def random_fields(two_tet_mesh):
    r = np.random.default_rng(11)
    n = two_tet_mesh.n_nodes
    return r.normal(size=(n, 3)), r.normal(size=(n, 3)), r.uniform(0.01, 0.05, n), r.normal(size=n)


def test_convection_matrix_dense(two_tet_mesh, random_fields):
    _, us, _, _ = random_fields
    sp = FESpace(two_tet_mesh.nodes, two_tet_mesh.tets)
    H = hd.convection_matrix(sp, us, 1050.0).toarray()
    ref = oracles.dense_convection(two_tet_mesh.nodes, two_tet_mesh.tets, us, 1050.0)
    assert np.max(np.abs(H - ref)) <= 1e-12 * np.abs(ref).max()


def test_viscous_matrix_dense(two_tet_mesh, random_fields):
    _, _, mu, _ = random_fields
    sp = FESpace(two_tet_mesh.nodes, two_tet_mesh.tets)
    L = hd.viscous_matrix(sp, mu).toarray()
    ref = oracles.dense_viscous(two_tet_mesh.nodes, two_tet_mesh.tets, mu)
    assert np.max(np.abs(L - ref)) <= 1e-12 * np.abs(ref).max()


def test_viscous_constant_mu_kills_rigid_translation(small_cylinder):
    _, mesh, _ = small_cylinder
    sp = FESpace.from_subdomain(mesh.omega)
    L = hd.viscous_matrix(sp, np.full(sp.n, 4e-3))
    for a in range(3):
        u = np.zeros((sp.n, 3))
        u[:, a] = 1.0
        assert np.max(np.abs(L @ u.ravel(order="F"))) < 1e-14


def test_pressure_gradient_and_rhs_dense(two_tet_mesh, random_fields):
    u, us, mu, p = random_fields
    nodes, tets = two_tet_mesh.nodes, two_tet_mesh.tets
    sp = FESpace(nodes, tets)
    Q = hd.pressure_gradient_load(sp, p)
    assert np.allclose(Q, oracles.dense_pressure_gradient(nodes, tets, p), rtol=1e-12, atol=1e-14)
    D = hd.assemble_ppe_rhs(sp, u, us, mu, 1050.0)
    ref = oracles.dense_ppe_rhs(nodes, tets, u, us, mu, 1050.0)
    assert np.max(np.abs(D - ref)) <= 1e-12 * np.abs(ref).max()


def test_ppe_rhs_vanishes_at_rest(two_tet_mesh):
    sp = FESpace(two_tet_mesh.nodes, two_tet_mesh.tets)
    z = np.zeros((sp.n, 3))
    assert np.all(hd.assemble_ppe_rhs(sp, z, z, np.full(sp.n, 0.05), 1050.0) == 0)
    # uniform flow has no gradient either
    one = np.tile([1.0, -2.0, 0.5], (sp.n, 1))
    assert np.allclose(hd.assemble_ppe_rhs(sp, one, one, np.arange(sp.n, dtype=float), 1050.0), 0, atol=1e-12)


def test_body_force_total():
    from conftest import REF_TET
    from hemoatlas.mesh import VESSEL, TetMesh

    m = TetMesh.from_arrays(REF_TET, [[0, 1, 2, 3]], [VESSEL])
    F = hd.body_force_load(FESpace(m.nodes, m.tets), 1000.0, [0, 0, -9.81])
    assert np.allclose(F.sum(0), [0, 0, 1000.0 * 9.81 / 6], rtol=1e-14)


# -- pressure recursion ----------------------------------------------------------------


def test_constant_pressure_fixed_point(cylinder_ops):
    ops = cylinder_ops
    p0 = np.full(ops.space.n, 87 * hd.MMHG)
    st_ = state_with(ops, p0)
    pb = np.zeros(ops.space.n)
    for _ in range(100):
        p = hd.pressure_step(st_, ops, pb)
        st_.p_prev, st_.p = st_.p, p
        st_.step += 1
    assert np.max(np.abs(st_.p - p0)) / np.abs(p0).max() < 1e-10


def test_pressure_step_dense_oracle(two_tet_mesh, random_fields):
    u, us, mu, p = random_fields
    nodes, tets = two_tet_mesh.nodes, two_tet_mesh.tets
    wall = extract_boundary(two_tet_mesh).triangles[:3]
    coeff = np.linspace(50, 150, len(nodes))
    ops = flow_ops(two_tet_mesh, wall, coeff)
    r = np.random.default_rng(2)
    st_ = hd.FlowState(p=p, p_prev=r.normal(size=len(p)), u=u, u_smooth=us, mu=mu, pb=r.normal(size=len(p)), pb_prev=r.normal(size=len(p)))
    pb_k = r.normal(size=len(p))
    dt = ops.params.dt
    K = oracles.dense_stiffness(nodes, tets, np.ones(len(nodes)))
    M = oracles.dense_boundary_mass(nodes, wall, coeff)
    D = oracles.dense_ppe_rhs(nodes, tets, u, us, mu, ops.params.rho)
    rhs = dt**2 * D + M @ (2 * st_.p - st_.p_prev) + M @ (pb_k - 2 * st_.pb + st_.pb_prev)
    ref = np.linalg.solve(dt**2 * K + M, rhs)
    assert np.allclose(hd.pressure_step(st_, ops, pb_k), ref, rtol=1e-9, atol=1e-12 * np.abs(ref).max())


def test_pressure_step_linear_in_pulse(cylinder_ops):
    ops = cylinder_ops
    n = ops.space.n
    z = np.zeros(n)
    base = state_with(ops, z)
    pb = np.zeros(n)
    pb[ops.boundary_nodes[:10]] = 1.0
    p1 = hd.pressure_step(base, ops, pb)
    p2 = hd.pressure_step(base, ops, 2.5 * pb)
    assert np.allclose(p2, 2.5 * p1, rtol=1e-8, atol=1e-12)
    assert p1.max() > 0


# -- velocity recursion ------------------------------------------------------------------


@pytest.mark.parametrize("scheme", ["explicit", "semi-implicit"])
def test_rest_state_preserved(cylinder_ops, scheme):
    ops = cylinder_ops
    ops_flat = hd.FlowOperators(
        space=ops.space, boundary_nodes=ops.boundary_nodes, K=ops.K, M=ops.M, C=ops.C,
        params=hd.FlowParams(gravity=(0.0, 0.0, 0.0)), leray=ops.leray, visc_filter=ops.visc_filter,
    )
    p = np.full(ops.space.n, 11000.0)
    st_ = state_with(ops_flat, p)
    for _ in range(100):
        mu = hd.update_viscosity(st_, ops_flat)
        st_.u = hd.velocity_step(st_, p, mu, ops_flat, scheme)
        st_.step += 1
    assert np.max(np.abs(st_.u)) < 1e-14


def test_body_force_accelerates_along_gravity(four_tet_mesh):
    outer = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]]
    ops = flow_ops(four_tet_mesh, outer, params=hd.FlowParams(eps_leray=0, eps_visc=0, gravity=(0, 0, -9.81)))
    n = ops.space.n
    st_ = state_with(ops, np.zeros(n))
    u = hd.velocity_step(st_, np.zeros(n), np.full(n, 56e-3), ops, "explicit")
    C = oracles.dense_mass(four_tet_mesh.nodes, four_tet_mesh.tets, np.full(n, 1050.0))
    f = ops.free
    ref = -ops.params.dt * np.linalg.solve(C[np.ix_(f, f)], ops.force[f])
    assert np.allclose(u[f], ref, rtol=1e-10)
    assert u[f, 2].min() < 0 and np.all(u[ops.boundary_nodes] == 0)


@pytest.mark.parametrize("scheme", ["explicit", "semi-implicit"])
@pytest.mark.parametrize("wall", [[[0, 1, 2]], [[0, 1, 2], [0, 1, 3]]])
def test_velocity_step_dense_oracle(two_tet_mesh, random_fields, scheme, wall):
    u, us, mu, p = random_fields
    nodes, tets = two_tet_mesh.nodes, two_tet_mesh.tets
    ops = flow_ops(two_tet_mesh, wall, params=hd.FlowParams(eps_leray=0, eps_visc=0, dt=1e-3))
    n = len(nodes)
    u = u.copy()
    u[ops.boundary_nodes] = 0.0
    st_ = hd.FlowState(p=p, p_prev=p, u=u, u_smooth=us, mu=mu, pb=p, pb_prev=p)
    rho, dt = ops.params.rho, ops.params.dt
    C = oracles.dense_mass(nodes, tets, np.full(n, rho))
    H = oracles.dense_convection(nodes, tets, us, rho)
    L = oracles.dense_viscous(nodes, tets, mu)
    A = np.kron(np.eye(3), H) + L
    Cb = np.kron(np.eye(3), C)
    b = (-oracles.dense_pressure_gradient(nodes, tets, p) - ops.force).ravel(order="F")
    u3 = u.ravel(order="F")
    f = ops.free3
    ref = np.zeros(3 * n)
    if scheme == "explicit":
        ref[f] = u3[f] + dt * np.linalg.solve(Cb[np.ix_(f, f)], (b - A @ u3)[f])
    else:
        ref[f] = np.linalg.solve((Cb + dt * A)[np.ix_(f, f)], (Cb @ u3 + dt * b)[f])
    got = hd.velocity_step(st_, p, mu, ops, scheme).ravel(order="F")
    assert np.allclose(got, ref, rtol=1e-9, atol=1e-12 * np.abs(ref).max())


def test_velocity_no_slip(cylinder_ops):
    ops = cylinder_ops
    n = ops.space.n
    p = ops.space.points[:, 2] * 1e5
    u = hd.velocity_step(state_with(ops, p), p, np.full(n, 56e-3), ops)
    assert np.all(u[ops.boundary_nodes] == 0)
    assert np.abs(u).max() > 0


def test_advance_and_nan_abort(cylinder_ops):
    ops = cylinder_ops
    n = ops.space.n
    st_ = hd.initial_state(ops, 10000.0, np.zeros(n))
    nxt = hd.advance(st_, ops, np.zeros(n))
    assert nxt.step == 1 and nxt.time == pytest.approx(ops.params.dt)
    assert np.array_equal(nxt.p_prev, st_.p)
    bad = st_.copy()
    bad.u[0, 0] = np.nan
    with pytest.raises(hd.NumericalAbort) as info:
        hd.advance(bad, ops, np.zeros(n))
    assert info.value.step == 1


def test_hydrostatic_mode_cancels_force(cylinder_ops):
    ops = cylinder_ops
    h = hd.FlowOperators(
        space=ops.space, boundary_nodes=ops.boundary_nodes, K=ops.K, M=ops.M, C=ops.C,
        params=ops.params, leray=ops.leray, visc_filter=ops.visc_filter, gravity_mode="hydrostatic",
    )
    assert np.all(h.force == 0)
    # the head equals rho g.(x - x_ref) with zero mean over the wall
    x = ops.space.points
    ref = x[ops.boundary_nodes].mean(axis=0)
    assert np.allclose(h.hydrostatic, ops.params.rho * (x - ref) @ np.array(ops.params.gravity), rtol=1e-14, atol=1e-12)
    assert abs(h.hydrostatic[ops.boundary_nodes].mean()) < 1e-9 * np.abs(h.hydrostatic).max()
    with pytest.raises(ValueError):
        hd.FlowOperators(space=ops.space, boundary_nodes=ops.boundary_nodes, K=ops.K, M=ops.M, C=ops.C, params=ops.params, gravity_mode="x")


def test_boundary_mass_uses_coefficient(two_tet_mesh):
    wall = extract_boundary(two_tet_mesh).triangles
    ops = flow_ops(two_tet_mesh, wall, 3.0)
    ref = assemble_boundary_mass(two_tet_mesh.nodes, wall, 3.0, two_tet_mesh.n_nodes)
    assert np.allclose(ops.M.toarray(), ref.toarray(), rtol=1e-15)
