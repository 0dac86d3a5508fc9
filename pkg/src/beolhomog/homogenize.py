"""
Scale transition between an RVE and a macroscale material point.

Micro temperatures are split as theta = theta_bar + grad_bar . (x - xc) + fluct,
with the fluctuation vanishing on the RVE boundary. Upscaled quantities:

    eps_dot_bar = < rho cp dtheta/dt >
    q_bar       = < q - eps_dot (x - xc) >

Effective conductivities are reported as kappa = -d q_bar / d grad_bar so
that they are positive definite under q = -kappa grad(theta).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .fem import HexModel, MicroBC, ThermalField


@dataclass
class HomogenizedProps:
    rho_cp_eff: float
    kappa_ss: np.ndarray  # symmetrized
    kappa_transient: dict = field(default_factory=dict)  # dt -> raw 3x3
    kappa_ss_raw: np.ndarray = None
    asymmetry: float = 0.0
    rve_window: object = None
    rve_size: float = None
    metal_fraction: float = None

    def kappa(self, dt=None) -> np.ndarray:
        """Steady tensor for ``dt=None``, else the symmetric part of the transient one."""
        if dt is None:
            return self.kappa_ss
        k = self.kappa_transient[dt]
        return 0.5 * (k + k.T)


@dataclass(frozen=True)
class UpscaledState:
    q_bar: np.ndarray  # W/m^2, includes the inertia moment
    eps_dot_bar: float  # W/m^3
    q_avg: np.ndarray = None  # plain flux average, diagnostic


@dataclass(frozen=True)
class SensitivityFields:
    dt: float
    w: np.ndarray  # (n_nodes, 3): fluctuation per unit macro gradient, zero on the boundary


def _model(grid_or_model) -> HexModel:
    return grid_or_model if isinstance(grid_or_model, HexModel) else HexModel(grid_or_model)


def effective_heat_capacity(grid) -> float:
    """Volume average of rho*cp over equal voxels, correctly rounded.

    Summed exactly per material in rational arithmetic so the result does
    not depend on voxel order.
    """
    grid = grid.grid if isinstance(grid, HexModel) else grid
    counts = np.bincount(grid.voxel_material.ravel(), minlength=len(grid.materials))
    total = sum(int(c) * Fraction(m.rho_cp) for c, m in zip(counts, grid.materials))
    return float(total / int(counts.sum()))


def upscale(grid, state: ThermalField, prev: ThermalField, dt: float) -> UpscaledState:
    m = _model(grid)
    theta = np.asarray(state.values)
    rate = (theta - np.asarray(prev.values)) / dt
    eps_dot = m.rho_cp_e[:, None] * m.gp_values(rate)  # (ne, 8)
    q = -m.kappa_e[:, None, None] * m.gp_gradients(theta)  # (ne, 8, 3)
    q_avg = m.average(q)
    moment = m.average(eps_dot[:, :, None] * m.gp_positions)
    return UpscaledState(q_avg - moment, float(m.average(eps_dot)), q_avg)


def upscale_batch(m: HexModel, theta, prev, dt: float):
    """Vectorized `upscale` over columns of (n_nodes, k) arrays; returns (q_bar (k, 3), eps_dot_bar (k,))."""
    theta = np.asarray(theta)
    rate = (theta - np.asarray(prev)) / dt
    eps = m.rho_cp_e[:, None, None] * np.einsum("ga,eak->egk", m.quad.N, rate[m.conn])
    grad = np.einsum("gia,eak->egik", m.quad.dN, theta[m.conn])
    w = m.quad.w / m.grid.volume
    q_avg = -np.einsum("g,e,egik->ki", w, m.kappa_e, grad)
    moment = np.einsum("g,egk,egi->ki", w, eps, m.gp_positions)
    return q_avg - moment, np.einsum("g,egk->k", w, eps)


def _conduction_part(m: HexModel, w) -> np.ndarray:
    """< kappa (I + grad w) > with column j built from w[:, j]."""
    out = np.empty((3, 3))
    for j in range(3):
        g = m.gp_gradients(w[:, j])
        g[:, :, j] += 1.0
        out[:, j] = m.average(m.kappa_e[:, None, None] * g)
    return out


def steady_correctors(grid) -> np.ndarray:
    """(n, 3) fluctuation fields for unit macro gradients in steady state."""
    m = _model(grid)
    X = m.X
    rhs = -(m.K @ X)
    w, _ = m.solve_dirichlet(np.zeros_like(X), rhs=rhs)
    return w


def steady_kappa(grid, return_raw: bool = False):
    """Steady effective conductivity from three unit-gradient solves.

    Returns the symmetrized tensor, or ``(sym, raw, asymmetry)`` when
    ``return_raw`` is set, asymmetry being ||K - K^T|| / ||K||.
    """
    m = _model(grid)
    X = m.X
    sol, _ = m.solve_dirichlet(X, x0=X)
    raw = np.empty((3, 3))
    for j in range(3):
        q = -m.kappa_e[:, None, None] * m.gp_gradients(sol[:, j])
        raw[:, j] = -m.average(q)
    sym = 0.5 * (raw + raw.T)
    if return_raw:
        return sym, raw, float(np.linalg.norm(raw - raw.T) / np.linalg.norm(raw))
    return sym


def sensitivity_fields(grid, dt: float) -> SensitivityFields:
    """Solve (M/dt + K) w_j = -(M/dt + K) x_j on interior nodes, w_j = 0 on the boundary."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    m = _model(grid)
    X = m.X
    A = m.operator(dt)
    w, _ = m.solve_dirichlet(np.zeros_like(X), rhs=-(A @ X), dt=dt)
    return SensitivityFields(float(dt), w)


def transient_kappa(grid, dt: float, include_fluctuation: bool = True, sens: SensitivityFields = None) -> np.ndarray:
    """Transient effective conductivity for a backward-Euler step ``dt``.

    kappa_ij = < kappa (delta_ij + d_i w_j) + rho cp/dt (x - xc)_i ((x - xc)_j + w_j) >

    With ``include_fluctuation=False`` w is dropped everywhere (diagnostic).
    Returned as computed, without symmetrization.
    """
    m = _model(grid)
    if include_fluctuation:
        w = (sens or sensitivity_fields(m, dt)).w
    else:
        w = np.zeros_like(m.X)
    cond = _conduction_part(m, w)
    pos = m.gp_positions
    c = (m.rho_cp_e / dt)[:, None]
    inertia = np.empty((3, 3))
    for j in range(3):
        xw = pos[:, :, j] + m.gp_values(w[:, j])
        inertia[:, j] = m.average((c * xw)[:, :, None] * pos)
    return cond + inertia


def fluctuation(grid, state: ThermalField, bc: MicroBC) -> np.ndarray:
    m = _model(grid)
    return np.asarray(state.values) - m.affine(bc)


def fluctuation_averages(grid, state: ThermalField, bc: MicroBC):
    """(<fluct>, <grad fluct>) for a micro solution under the affine BC."""
    m = _model(grid)
    f = fluctuation(m, state, bc)
    return float(m.average(m.gp_values(f))), m.average(m.gp_gradients(f))


def hill_mandel_terms(grid, state, prev, dt, d_theta_bar, d_grad_bar, d_fluct):
    """Both sides of the macro/micro virtual power balance.

    Left: d_theta_bar * eps_dot_bar - d_grad_bar . q_bar (from `upscale`).
    Right: < dtheta eps_dot - grad(dtheta) . q > by direct quadrature with
    dtheta = d_theta_bar + d_grad_bar . (x - xc) + d_fluct.
    """
    m = _model(grid)
    up = upscale(m, state, prev, dt)
    d_grad_bar = np.asarray(d_grad_bar, dtype=float)
    lhs = d_theta_bar * up.eps_dot_bar - d_grad_bar @ up.q_bar
    dtheta = d_theta_bar + m.X @ d_grad_bar + np.asarray(d_fluct)
    theta = np.asarray(state.values)
    eps_dot = m.rho_cp_e[:, None] * m.gp_values((theta - np.asarray(prev.values)) / dt)
    q = -m.kappa_e[:, None, None] * m.gp_gradients(theta)
    power = m.gp_values(dtheta) * eps_dot - np.einsum("egi,egi->eg", m.gp_gradients(dtheta), q)
    rhs = float(m.average(power))
    scale = abs(d_theta_bar * up.eps_dot_bar) + float(np.abs(d_grad_bar * up.q_bar).sum())
    return float(lhs), rhs, scale


def homogenize_rve(grid, dt_list=(), window=None, rve_size=None, background: int = 0) -> HomogenizedProps:
    m = HexModel(grid)
    sym, raw, asym = steady_kappa(m, return_raw=True)
    transient = {float(dt): transient_kappa(m, dt) for dt in dt_list}
    return HomogenizedProps(
        rho_cp_eff=effective_heat_capacity(grid),
        kappa_ss=sym,
        kappa_transient=transient,
        kappa_ss_raw=raw,
        asymmetry=asym,
        rve_window=window,
        rve_size=rve_size,
        metal_fraction=grid.metal_fraction(background),
    )


# ---------------------------------------------------------------------------
# single-RVE ramp study


@dataclass
class RampSeries:
    t_ramp: float
    dt: float
    time: np.ndarray
    qbar_z: np.ndarray  # with the inertia moment
    qavg_z: np.ndarray  # plain average
    qss_z: np.ndarray  # steady-state prediction -kappa_ss . grad

    @property
    def plateau(self) -> float:
        return float(self.qss_z[-1])

    def overshoot(self) -> float:
        """Largest excess of |q_bar| over |q_ss|, relative to the plateau."""
        return float(np.max(np.abs(self.qbar_z) - np.abs(self.qss_z)) / abs(self.plateau))

    def max_disagreement(self, skip: int = 1) -> float:
        """Largest spread among the three curves after ``skip`` steps, relative to the plateau."""
        s = slice(skip, None)
        curves = np.vstack([self.qbar_z[s], self.qavg_z[s], self.qss_z[s]])
        return float(np.max(curves.max(axis=0) - curves.min(axis=0)) / abs(self.plateau))

    def write_csv(self, path, header_lines=()):
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["time_s", "qbar_z", "qavg_z", "qss_z"])
            for row in zip(self.time, self.qbar_z, self.qavg_z, self.qss_z):
                w.writerow([repr(float(v)) for v in row])


def rve_ramp_study(grid, t_ramp: float, dt: float, dT_max: float = 1.0, t_end: float = None, theta0: float = 300.0,
                   kappa_ss=None) -> RampSeries:
    """Ramp the through-thickness gradient from 0 to dT_max/Lz over t_ramp, then hold.

    Emits q_bar_z, <q_z> and the steady prediction at every step.
    """
    if min(t_ramp, dt) <= 0:
        raise ValueError("t_ramp and dt must be positive")
    if t_ramp / dt < 20 * (1 - 1e-9):
        raise ValueError("dt must resolve the ramp with at least 20 steps")
    t_end = 10 * t_ramp if t_end is None else t_end
    m = HexModel(grid)
    if kappa_ss is None:
        kappa_ss = steady_kappa(m)
    gz_max = dT_max / grid.size[2]

    def bc_at(t):
        return MicroBC(theta0, (0.0, 0.0, gz_max * min(t / t_ramp, 1.0)))

    n_steps = int(round(t_end / dt))
    state = ThermalField(np.full(m.n_nodes, theta0), 0.0)
    ts, qb, qa, qs = [], [], [], []
    for n in range(1, n_steps + 1):
        new = m.step(state, bc_at, dt)
        new = ThermalField(new.values, n * dt)
        up = upscale(m, new, state, dt)
        g = np.asarray(bc_at(new.time).grad)
        ts.append(new.time)
        qb.append(up.q_bar[2])
        qa.append(up.q_avg[2])
        qs.append(-(kappa_ss @ g)[2])
        state = new
    return RampSeries(t_ramp, dt, np.array(ts), np.array(qb), np.array(qa), np.array(qs))
