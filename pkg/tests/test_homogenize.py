import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beolhomog.fem import HexModel, MicroBC, ThermalField
from beolhomog.homogenize import (
    effective_heat_capacity,
    homogenize_rve,
    rve_ramp_study,
    sensitivity_fields,
    steady_correctors,
    steady_kappa,
    transient_kappa,
    upscale,
    upscale_batch,
)
from beolhomog.materials import AL, SIO2, W
from beolhomog.rve import MaterialGrid

from conftest import random_grid

UM = 1e-6


def dense_oracle(grid, dt=None):
    """Dense-LU correctors and the energy form (X_i)^T A (X_j + w_j) / V.

    Independent of the PCG solver and of the flux-average evaluation.
    """
    m = HexModel(grid)
    K = m.K.toarray()
    A = K if dt is None else K + m.M.toarray() / dt
    f = m.free
    X = m.X
    w = np.zeros_like(X)
    w[f] = np.linalg.solve(A[np.ix_(f, f)], -(A @ X)[f])
    kappa = X.T @ A @ (X + w) / grid.volume
    return kappa, w


def harmonic(values, weights):
    return 1.0 / np.sum(weights / values)


def test_dense_oracle_steady():
    g = random_grid(np.random.default_rng(11))
    sym, raw, asym = steady_kappa(g, return_raw=True)
    ref, _ = dense_oracle(g)
    np.testing.assert_allclose(raw, ref, rtol=1e-8)
    np.testing.assert_allclose(sym, 0.5 * (ref + ref.T), rtol=1e-8)
    assert asym < 1e-8


@pytest.mark.parametrize("dt", [1e-9, 1e-7, 1e-4])
def test_dense_oracle_transient(dt):
    g = random_grid(np.random.default_rng(12))
    ref, w_ref = dense_oracle(g, dt)
    np.testing.assert_allclose(transient_kappa(g, dt), ref, rtol=1e-8, atol=1e-10 * np.abs(ref).max())
    w = sensitivity_fields(g, dt).w
    np.testing.assert_allclose(w, w_ref, atol=1e-8 * np.abs(w_ref).max())


def test_transient_between_steady_and_no_fluctuation():
    g = random_grid(np.random.default_rng(13))
    ss, _ = dense_oracle(g)
    for dt in (1e-9, 1e-8, 1e-7):
        full = transient_kappa(g, dt)
        bare = transient_kappa(g, dt, include_fluctuation=False)
        # w-omitted result in the homogeneous-flux sense: <kappa> + inertia moment
        assert np.linalg.norm(full - ss) <= np.linalg.norm(bare - ss)
        assert np.linalg.norm(full - ss) > 0


def test_homogeneous_inertia_correction_exact():
    L = 4 * UM
    g = MaterialGrid.uniform(SIO2, (4, 4, 4), (1 * UM,) * 3)
    dt = 1e-6
    bare = transient_kappa(g, dt, include_fluctuation=False)
    corr = SIO2.rho_cp / dt * L**2 / 12
    np.testing.assert_allclose(bare, (SIO2.kappa + corr) * np.eye(3), rtol=1e-12, atol=1e-12 * corr)


def test_heat_capacity_examples():
    g = MaterialGrid.uniform(SIO2, (3, 3, 3), (1 * UM,) * 3)
    assert effective_heat_capacity(g) == 2.2e6
    vox = np.zeros((2, 2, 2), dtype=int)
    vox[:, :, 1] = 1
    half = MaterialGrid((2, 2, 2), (UM,) * 3, (0, 0, 0), vox, (SIO2, AL))
    assert effective_heat_capacity(half) == pytest.approx((2.43e6 + 2.2e6) / 2, rel=1e-15)


def test_heat_capacity_range(rve10):
    c = effective_heat_capacity(rve10)
    assert 2.2e6 <= c <= 2.58e6


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_steady_kappa_bounds(seed):
    rng = np.random.default_rng(seed)
    g = random_grid(rng, shape=(3, 4, 3))
    sym, raw, asym = steady_kappa(g, return_raw=True)
    ev = np.linalg.eigvalsh(sym)
    k = g.kappa
    wts = np.full(k.size, 1.0 / k.size)
    assert ev.min() >= harmonic(k, wts) * (1 - 1e-9)
    assert ev.max() <= k.mean() * (1 + 1e-9)
    assert asym < 1e-8


def test_mesh_independence_homogeneous():
    ref = None
    for n in (2, 3, 4, 6):
        g = MaterialGrid.uniform(W, (n, n, n), (6 * UM / n,) * 3)
        k = steady_kappa(g)
        if ref is None:
            ref = k
        np.testing.assert_allclose(k, ref, rtol=1e-12, atol=1e-12 * W.kappa)


def test_theta_bar_independence():
    g = random_grid(np.random.default_rng(3))
    m = HexModel(g)
    # 1 K per micrometre against a 300 K offset
    a = m.solve_steady(MicroBC(0.0, (1e6, 0, 0)))
    b = m.solve_steady(MicroBC(300.0, (1e6, 0, 0)))
    qa = m.average(-m.kappa_e[:, None, None] * m.gp_gradients(a.values))
    qb = m.average(-m.kappa_e[:, None, None] * m.gp_gradients(b.values))
    np.testing.assert_allclose(qa, qb, rtol=1e-6, atol=1e-6 * np.abs(qa).max())


def test_sensitivity_steady_limit():
    g = random_grid(np.random.default_rng(21), shape=(5, 4, 4))
    w_ss = steady_correctors(g)
    w = sensitivity_fields(g, 1e6).w
    assert np.linalg.norm(w - w_ss) / np.linalg.norm(w_ss) < 1e-6


def test_sensitivity_zero_on_boundary():
    g = random_grid(np.random.default_rng(22))
    w = sensitivity_fields(g, 1e-8).w
    assert np.all(w[g.boundary_nodes()] == 0.0)


def test_sensitivity_homogeneous_odd():
    n = 4
    g = MaterialGrid.uniform(SIO2, (n, n, n), (UM,) * 3)
    m = HexModel(g)
    # conduction part of the load vanishes on interior nodes
    np.testing.assert_allclose((m.K @ m.X)[m.free], 0, atol=1e-12 * np.abs(m.K @ m.X).max())
    w = sensitivity_fields(g, 1e-8).w
    # mirror x -> -x maps node (i, j, k) to (n - i, j, k)
    idx = np.arange(g.n_nodes).reshape((n + 1,) * 3, order="F")
    mirror = idx[::-1].ravel(order="F")
    np.testing.assert_allclose(w[mirror, 0], -w[:, 0], atol=1e-10 * np.abs(w).max())
    np.testing.assert_allclose(w[mirror, 1], w[:, 1], atol=1e-10 * np.abs(w).max())
    assert np.abs(w[:, 0]).max() > 0


def test_sensitivity_rejects_bad_dt():
    g = random_grid(np.random.default_rng(1), shape=(2, 2, 2))
    with pytest.raises(ValueError):
        sensitivity_fields(g, 0.0)


def test_correction_scales_inverse_dt():
    g = random_grid(np.random.default_rng(5))
    ss = steady_kappa(g, return_raw=True)[1]
    dts = np.array([1e-3, 1e-2, 1e-1])
    corr = [np.linalg.norm(transient_kappa(g, dt) - ss) for dt in dts]
    slope = np.polyfit(np.log(dts), np.log(corr), 1)[0]
    assert slope == pytest.approx(-1.0, abs=0.05)


def test_upscale_steady_equals_average():
    g = random_grid(np.random.default_rng(6))
    m = HexModel(g)
    s = m.solve_steady(MicroBC(300.0, (1e4, -2e3, 5e3)))
    up = upscale(m, s, s, 1e-6)
    assert up.eps_dot_bar == 0.0
    np.testing.assert_array_equal(up.q_bar, up.q_avg)


def test_upscale_uniform_heating_symmetric():
    g = MaterialGrid.uniform(SIO2, (4, 4, 4), (UM,) * 3)
    m = HexModel(g)
    s0 = ThermalField(np.full(m.n_nodes, 300.0))
    s1 = m.step(s0, lambda t: MicroBC(301.0), 1e-7)
    up = upscale(m, s1, s0, 1e-7)
    assert up.eps_dot_bar > 0
    np.testing.assert_allclose(up.q_bar, 0, atol=1e-12 * up.eps_dot_bar * 4 * UM)


def test_upscale_batch_matches_single():
    g = random_grid(np.random.default_rng(7))
    m = HexModel(g)
    rng = np.random.default_rng(8)
    theta = 300 + rng.normal(size=(m.n_nodes, 3))
    prev = 300 + rng.normal(size=(m.n_nodes, 3))
    qb, eb = upscale_batch(m, theta, prev, 1e-6)
    for k in range(3):
        up = upscale(m, ThermalField(theta[:, k]), ThermalField(prev[:, k]), 1e-6)
        np.testing.assert_allclose(qb[k], up.q_bar, rtol=1e-10)
        assert eb[k] == pytest.approx(up.eps_dot_bar, rel=1e-10)


def test_homogenize_rve_record(rve10):
    p = homogenize_rve(rve10, dt_list=[1e-3], rve_size=10 * UM)
    assert set(p.kappa_transient) == {1e-3}
    np.testing.assert_allclose(p.kappa(), p.kappa_ss)
    k = p.kappa(1e-3)
    np.testing.assert_allclose(k, k.T)
    assert p.rho_cp_eff == effective_heat_capacity(rve10)
    assert p.metal_fraction == rve10.metal_fraction()
    # layered BEOL: through-thickness conduction is the weakest direction
    assert p.kappa_ss[2, 2] <= max(p.kappa_ss[0, 0], p.kappa_ss[1, 1])


def test_ramp_overshoot_grows_with_rate():
    vox = np.zeros((2, 2, 6), dtype=int)
    vox[:, :, :3] = 1
    g = MaterialGrid((2, 2, 6), (UM, UM, 0.5 * UM), (0, 0, 0), vox, (SIO2, AL))
    shoots = []
    for t in (1e-5, 1e-6, 1e-7):
        series = rve_ramp_study(g, t, t / 20, t_end=2 * t)
        shoots.append(np.max(np.abs(series.qbar_z - series.qavg_z)))
    assert shoots[0] < shoots[1] < shoots[2]


def test_ramp_validation(tmp_path):
    g = random_grid(np.random.default_rng(1), shape=(2, 2, 2))
    with pytest.raises(ValueError):
        rve_ramp_study(g, 1e-6, 1e-7)
    series = rve_ramp_study(g, 2e-6, 1e-7, t_end=3e-6)
    path = tmp_path / "ramp.csv"
    series.write_csv(path, ["hdr"])
    lines = path.read_text().splitlines()
    assert lines[0] == "# hdr" and lines[1] == "time_s,qbar_z,qavg_z,qss_z"
    assert len(lines) == 2 + 30
