"""
Die-scale heat conduction on a structured hex mesh.

Properties come from a uniform material, an interpolated property map, an
explicit voxel grid (resolved reference) or per-quadrature-point RVE solves
(coupled FE2 mode). Backward Euler in time; each face carries exactly one of
adiabatic, Dirichlet, Neumann (heat inflow) or Robin (q.n = h (T - T_amb)).
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, FormatError, SingularError, SolverError
from .fem import HexModel, HexQuadrature, ThermalField, assemble, cg, connectivity
from .homogenize import effective_heat_capacity, steady_kappa, transient_kappa, upscale_batch
from .propmap import PropertyMap, interpolate_fields

log = logging.getLogger(__name__)

FACES = ("xmin", "xmax", "ymin", "ymax", "zmin", "zmax")
MAX_COUPLED_POINTS = 10_000


# ---------------------------------------------------------------------------
# boundary conditions


@dataclass(frozen=True)
class Adiabatic:
    pass


@dataclass(frozen=True)
class Dirichlet:
    T: float


@dataclass(frozen=True)
class Neumann:
    """Prescribed heat inflow in W/m^2: a constant or a FluxMap (z faces only)."""

    flux: object


@dataclass(frozen=True)
class Robin:
    h: float
    T_amb: float

    def __post_init__(self):
        if not self.h > 0:
            raise ConfigError("Robin coefficient h must be positive")


@dataclass(frozen=True, eq=False)
class FluxMap:
    """Piecewise-constant flux on an ``(ny, nx)`` cell grid over ``extent``.

    ``extent`` = (x_min, y_min, x_max, y_max) in m; None means the face it is
    applied to.
    """

    values: np.ndarray
    extent: tuple = None

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.values, dtype=float))
        if not np.all(np.isfinite(v)):
            raise ValueError("flux map values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape

    def scaled(self, factor: float) -> "FluxMap":
        return FluxMap(self.values * factor, self.extent)

    def nodal_loads(self, xs, ys, extent=None) -> np.ndarray:
        """Exact integrals of the flux against bilinear face hats at nodes ``xs`` x ``ys``."""
        x0, y0, x1, y1 = self.extent or extent
        ny, nx = self.values.shape
        Px = _hat_overlap(np.asarray(xs, float), np.linspace(x0, x1, nx + 1))
        Py = _hat_overlap(np.asarray(ys, float), np.linspace(y0, y1, ny + 1))
        return Px @ self.values.T @ Py.T


def _hat_overlap(nodes, cells) -> np.ndarray:
    """(n_nodes, n_cells) integrals of each 1D hat function over each cell."""
    a, b = nodes[:-1, None], nodes[1:, None]
    lo = np.maximum(a, cells[None, :-1])
    hi = np.minimum(b, cells[None, 1:])
    valid = hi > lo
    lo, hi = np.where(valid, lo, a), np.where(valid, hi, a)
    h = b - a
    # integral of (b - x)/h and (x - a)/h over [lo, hi]
    left = ((b - lo) ** 2 - (b - hi) ** 2) / (2 * h)
    right = ((hi - a) ** 2 - (lo - a) ** 2) / (2 * h)
    out = np.zeros((len(nodes), cells.size - 1))
    out[:-1] += left
    out[1:] += right
    return out


def read_flux_map(path, extent=None) -> FluxMap:
    """CSV: first row ``nx,ny``, then ``ny`` rows of ``nx`` values (row 0 at y_min).

    Lines starting with '#' are comments.
    """
    with open(path) as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.lstrip().startswith("#")) if r]
    try:
        nx, ny = (int(v) for v in rows[0][:2])
        values = np.array([[float(v) for v in r] for r in rows[1:]])
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: malformed flux map ({exc})") from None
    if values.shape != (ny, nx):
        raise FormatError(f"{path}: header says {nx}x{ny} but found {values.shape[1] if values.ndim == 2 else 0}x{len(values)}")
    return FluxMap(values, extent)


def write_flux_map(fm: FluxMap, path, header_lines=()):
    ny, nx = fm.shape
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write(f"{nx},{ny}\n")
        for row in fm.values:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


# ---------------------------------------------------------------------------
# mesh


@dataclass(frozen=True)
class MacroMesh:
    origin: tuple
    size: tuple
    shape: tuple

    def __post_init__(self):
        if min(self.shape) < 1 or min(self.size) <= 0:
            raise ConfigError("macro mesh needs positive size and at least one element per axis")
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "size", tuple(float(v) for v in self.size))

    @classmethod
    def from_grid(cls, grid) -> "MacroMesh":
        return cls(tuple(grid.origin), tuple(grid.size), tuple(grid.shape))

    @property
    def spacing(self) -> tuple:
        return tuple(s / n for s, n in zip(self.size, self.shape))

    @property
    def n_nodes(self) -> int:
        return int(np.prod(np.asarray(self.shape) + 1))

    @property
    def n_elements(self) -> int:
        return int(np.prod(self.shape))

    def axis_nodes(self, axis: int) -> np.ndarray:
        n = self.shape[axis]
        return self.origin[axis] + self.size[axis] * np.arange(n + 1) / n

    def node_coords(self) -> np.ndarray:
        X, Y, Z = np.meshgrid(*(self.axis_nodes(a) for a in range(3)), indexing="ij")
        return np.column_stack([X.ravel(order="F"), Y.ravel(order="F"), Z.ravel(order="F")])

    def face(self, name: str):
        """(global node ids, in-plane axes) of a face, ids ordered fastest-first in-plane."""
        axis = FACES.index(name) // 2
        idx = 0 if name.endswith("min") else self.shape[axis]
        planes = [a for a in range(3) if a != axis]
        ranges = [np.arange(n + 1) for n in self.shape]
        ranges[axis] = np.array([idx])
        I, J, K = np.meshgrid(*ranges, indexing="ij")
        nx, ny = self.shape[0] + 1, self.shape[1] + 1
        ids = (I + nx * J + nx * ny * K).ravel(order="F")
        return ids, planes


def _mass_1d(nodes) -> sp.csr_matrix:
    h = np.diff(nodes)
    main = np.zeros(len(nodes))
    main[:-1] += h / 3
    main[1:] += h / 3
    return sp.diags([h / 6, main, h / 6], [-1, 0, 1], format="csr")


# ---------------------------------------------------------------------------
# property sources


class UniformSource:
    def __init__(self, material):
        self.material = material

    def element_data(self, mesh, dt=None):
        ne = mesh.n_elements
        return np.full(ne, self.material.kappa), np.full(ne, self.material.rho_cp)


class ResolvedSource:
    """Per-voxel properties; the macro mesh must coincide with the grid."""

    def __init__(self, grid):
        self.grid = grid

    def element_data(self, mesh, dt=None):
        if tuple(mesh.shape) != tuple(self.grid.shape) or not np.allclose(mesh.size, self.grid.size, rtol=1e-12):
            raise ConfigError("resolved mode requires the macro mesh to match the voxel grid")
        return self.grid.kappa, self.grid.rho_cp


class MapSource:
    """Interpolated map properties at quadrature points.

    With ``transient=True`` stepping uses the tabulated kappa(dt) (dt must be
    in the map's dt_list); steady solves always use the steady tensor.
    """

    def __init__(self, pmap: PropertyMap, transient: bool = False):
        self.map = pmap
        self.transient = transient

    def element_data(self, mesh, dt=None):
        pos = _gp_positions(mesh)
        key = dt if (self.transient and dt is not None) else None
        if key is not None and float(key) not in self.map.dt_list:
            raise ConfigError(f"dt={key:g} s is not tabulated in the property map {self.map.dt_list}")
        rho, kap = interpolate_fields(self.map, pos[..., 0].ravel(), pos[..., 1].ravel(), key)
        ne = mesh.n_elements
        return kap.reshape(ne, 8, 3, 3), rho.reshape(ne, 8)


class CoupledSource:
    """FE2: an RVE per macro quadrature point.

    ``rve`` is a MaterialGrid shared by all points or a callable
    ``(x, y, z) -> MaterialGrid``; points returning the same grid object are
    solved together as one batch.
    """

    def __init__(self, rve, subcycles: int = 1, max_points: int = MAX_COUPLED_POINTS, tol: float = 1e-10,
                 max_iter: int = 50):
        self.rve = rve
        self.subcycles = int(subcycles)
        self.max_points = int(max_points)
        self.tol = tol
        self.max_iter = max_iter
        if self.subcycles < 1:
            raise ConfigError("subcycles must be >= 1")

    def grids(self, mesh):
        pos = _gp_positions(mesh).reshape(-1, 3)
        if len(pos) > self.max_points:
            raise ConfigError(f"coupled mode is capped at {self.max_points} quadrature points, mesh has {len(pos)}")
        if callable(self.rve):
            return [self.rve(*p) for p in pos]
        return [self.rve] * len(pos)

    def element_data(self, mesh, dt=None):
        """Effective tangent data: <rho cp> and the symmetric kappa(dt) (steady if dt is None)."""
        grids = self.grids(mesh)
        cache = {}
        rho = np.empty(len(grids))
        kap = np.empty((len(grids), 3, 3))
        for i, g in enumerate(grids):
            if id(g) not in cache:
                k = steady_kappa(g) if dt is None else transient_kappa(g, dt / self.subcycles)
                cache[id(g)] = (effective_heat_capacity(g), 0.5 * (k + k.T))
            rho[i], kap[i] = cache[id(g)]
        ne = mesh.n_elements
        return kap.reshape(ne, 8, 3, 3), rho.reshape(ne, 8)


def _gp_positions(mesh) -> np.ndarray:
    quad = HexQuadrature.for_spacing(mesh.spacing)
    conn = connectivity(mesh.shape)
    corner = mesh.node_coords()[conn[:, 0]]
    return corner[:, None, :] + quad.points[None, :, :]


# ---------------------------------------------------------------------------
# problem and model


@dataclass
class MacroProblem:
    mesh: MacroMesh
    source: object
    bcs: dict = field(default_factory=dict)  # face -> BC; missing faces are adiabatic
    dt: float = None
    t_end: float = None
    T0: float = 300.0
    tol: float = 1e-10

    def __post_init__(self):
        unknown = set(self.bcs) - set(FACES)
        if unknown:
            raise ConfigError(f"unknown faces {sorted(unknown)}; expected {FACES}")
        self.bcs = {f: self.bcs.get(f, Adiabatic()) for f in FACES}
        for f, bc in self.bcs.items():
            if not isinstance(bc, (Adiabatic, Dirichlet, Neumann, Robin)):
                raise ConfigError(f"face {f}: unsupported boundary condition {bc!r}")
            if isinstance(bc, Neumann) and isinstance(bc.flux, FluxMap) and f not in ("zmin", "zmax"):
                raise ConfigError("flux maps are only supported on the zmin/zmax faces")
        if self.dt is not None and not self.dt > 0:
            raise ConfigError("dt must be positive")
        if isinstance(self.source, MapSource) and self.source.transient and self.dt is not None:
            if float(self.dt) not in self.source.map.dt_list:
                raise ConfigError(f"dt={self.dt:g} s is not tabulated in the property map")


@dataclass(frozen=True)
class StepReport:
    stored: float  # W, int rho cp (T1 - T0)/dt
    inflow: float  # W, net boundary heat inflow at the new time
    gross: float  # W, sum of absolute nodal boundary heat flows
    iterations: int = 1

    @property
    def residual(self) -> float:
        """Imbalance relative to the gross boundary heat flow (stays meaningful near steady state)."""
        return abs(self.stored - self.inflow) / max(self.gross, 1e-300)


class MacroModel:
    """Assembled operators for a MacroProblem."""

    def __init__(self, problem: MacroProblem):
        self.p = problem
        self.mesh = problem.mesh
        self.quad = HexQuadrature.for_spacing(self.mesh.spacing)
        self.conn = connectivity(self.mesh.shape)
        self._K: dict = {}
        self._build_boundary()

    # assembly ---------------------------------------------------------------

    def _face_matrices(self, face):
        ids, planes = self.mesh.face(face)
        a, b = (self.mesh.axis_nodes(ax) for ax in planes)
        Ma, Mb = _mass_1d(a), _mass_1d(b)
        return ids, a, b, sp.kron(Mb, Ma, format="csr")

    def _build_boundary(self):
        n = self.mesh.n_nodes
        self.fixed = np.zeros(n, dtype=bool)
        self.fixed_values = np.zeros(n)
        self.F = np.zeros(n)  # Neumann + Robin ambient load
        self.F_neumann = np.zeros(n)
        rows, cols, vals = [], [], []
        for face, bc in self.p.bcs.items():
            if isinstance(bc, Adiabatic):
                continue
            ids, a, b, Mf = self._face_matrices(face)
            area_w = Mf @ np.ones(Mf.shape[0])
            if isinstance(bc, Dirichlet):
                self.fixed[ids] = True
                self.fixed_values[ids] = bc.T
            elif isinstance(bc, Neumann):
                if isinstance(bc.flux, FluxMap):
                    extent = (a[0], b[0], a[-1], b[-1])
                    load = bc.flux.nodal_loads(a, b, extent).ravel(order="F")
                else:
                    load = float(bc.flux) * area_w
                np.add.at(self.F_neumann, ids, load)
            else:
                coo = (bc.h * Mf).tocoo()
                rows.append(ids[coo.row])
                cols.append(ids[coo.col])
                vals.append(coo.data)
                np.add.at(self.F, ids, bc.h * bc.T_amb * area_w)
        self.F += self.F_neumann
        if rows:
            self.H = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
        else:
            self.H = sp.csr_matrix((n, n))
        self.has_robin = bool(rows)
        self.free = ~self.fixed

    def _element_data(self, dt):
        return self.p.source.element_data(self.mesh, dt)

    def matrices(self, dt=None):
        """(K, C) for steady (dt None) or the step size dt."""
        key = None if dt is None else float(dt)
        if key not in self._K:
            kappa, rho = self._element_data(key)
            if kappa.ndim == 1:
                K = assemble(self.mesh.shape, self.quad.stiffness, kappa)
            else:
                K = assemble(self.mesh.shape, self.quad.tensor_stiffness(kappa))
            if rho.ndim == 1:
                C = assemble(self.mesh.shape, self.quad.mass, rho)
            else:
                C = assemble(self.mesh.shape, self.quad.weighted_mass(rho))
            self._K[key] = (K, C)
        return self._K[key]

    @cached_property
    def lumped_volume(self) -> np.ndarray:
        return assemble(self.mesh.shape, self.quad.mass) @ np.ones(self.mesh.n_nodes)

    def face_average(self, values, face) -> float:
        ids, _, _, Mf = self._face_matrices(face)
        w = Mf @ np.ones(len(ids))
        return float(w @ np.asarray(values)[ids] / w.sum())

    # solves -----------------------------------------------------------------

    def _solve(self, A, b, fixed_delta, contrast=1.0):
        """Solve A x = b with x = fixed_delta on fixed nodes."""
        f, c = self.free, self.fixed
        A_f = A[f]
        rhs = b[f] - A_f[:, c] @ fixed_delta[c]
        x_f, hist = cg(A_f[:, f].tocsr(), rhs, tol=self.p.tol, contrast=contrast)
        x = np.array(fixed_delta, dtype=float)
        x[f] = x_f
        return x, hist

    def _contrast(self, K):
        d = K.diagonal()
        d = d[d > 0]
        return float(d.max() / d.min()) if d.size else 1.0

    def _reference(self) -> float:
        temps = [bc.T for bc in self.p.bcs.values() if isinstance(bc, Dirichlet)]
        temps += [bc.T_amb for bc in self.p.bcs.values() if isinstance(bc, Robin)]
        return float(np.mean(temps))

    def solve_steady(self) -> ThermalField:
        if not (self.fixed.any() or self.has_robin):
            raise SingularError("steady problem without Dirichlet or Robin faces has no unique solution")
        if isinstance(self.p.source, CoupledSource):
            raise ConfigError("steady solves in coupled mode are not supported; use time stepping")
        K, _ = self.matrices(None)
        A = (K + self.H).tocsr()
        T_ref = self._reference()
        base = np.full(self.mesh.n_nodes, T_ref)
        u, _ = self._solve(A, self.F - A @ base, np.where(self.fixed, self.fixed_values - T_ref, 0.0), self._contrast(K))
        return ThermalField(base + u, 0.0)

    def step(self, state: ThermalField, dt=None):
        """One backward-Euler step; returns (ThermalField, StepReport)."""
        dt = float(dt or self.p.dt)
        if isinstance(self.p.source, CoupledSource):
            return self._coupled_step(state, dt)
        K, C = self.matrices(dt)
        T0 = np.asarray(state.values)
        KH = (K + self.H).tocsr()
        A = (C * (1.0 / dt) + KH).tocsr()
        b = self.F - KH @ T0
        fixed_delta = np.where(self.fixed, self.fixed_values - T0, 0.0)
        delta, _ = self._solve(A, b, fixed_delta, self._contrast(K))
        T1 = T0 + delta
        return ThermalField(T1, state.time + dt), self._report(C, KH, T1, delta, dt)

    def _report(self, C, KH, T1, delta, dt, iterations=1):
        stored_vec = C @ delta / dt
        return self._balance(float(stored_vec.sum()), T1, stored_vec + KH @ T1 - self.F, iterations)

    def _balance(self, stored, T1, reaction, iterations):
        robin = self.F - self.F_neumann - self.H @ T1
        flows = [self.F_neumann, robin]
        if self.fixed.any():
            # heat entering through the Dirichlet nodes
            flows.append(reaction[self.fixed])
        inflow = float(sum(f.sum() for f in flows))
        gross = float(sum(np.abs(f).sum() for f in flows))
        return StepReport(stored, inflow, gross, iterations)

    # coupled FE2 ------------------------------------------------------------

    def _coupled_init(self, state):
        src = self.p.source
        grids = src.grids(self.mesh)
        groups = {}
        for i, g in enumerate(grids):
            groups.setdefault(id(g), (g, []))[1].append(i)
        self._groups = []
        T = np.asarray(state.values)
        tb, gb = self._macro_gp(T)
        for g, idx in groups.values():
            m = HexModel(g, tol=src.tol)
            idx = np.array(idx)
            theta = tb[idx][None, :] + m.X @ gb[idx].T
            self._groups.append([m, idx, theta])
        self._macro_prev = (tb, gb)
        self._coupled_state_time = state.time

    def _macro_gp(self, T):
        Te = np.asarray(T)[self.conn]
        tb = (Te @ self.quad.N.T).ravel()
        gb = np.einsum("gia,ea->egi", self.quad.dN, Te).reshape(-1, 3)
        return tb, gb

    def _micro_response(self, tb, gb, dt, commit=False):
        src = self.p.source
        n_gp = len(tb)
        q = np.empty((n_gp, 3))
        eps = np.empty(n_gp)
        tb0, gb0 = self._macro_prev
        for group in self._groups:
            m, idx, theta0 = group
            h = dt / src.subcycles
            theta = theta0
            for s in range(1, src.subcycles + 1):
                f = s / src.subcycles
                tbs = tb0[idx] + f * (tb[idx] - tb0[idx])
                gbs = gb0[idx] + f * (gb[idx] - gb0[idx])
                bv = tbs[None, :] + m.X @ gbs.T
                try:
                    theta, _ = m.solve_dirichlet(bv, rhs=m.M @ theta / h, dt=h, x0=np.where(m.boundary[:, None], bv, theta))
                except SolverError as exc:
                    bad = idx[exc.columns[0]] if exc.columns else idx[0]
                    e, g = divmod(int(bad), 8)
                    raise SolverError(f"RVE at macro element {e}, quadrature point {g} failed: {exc}", exc.residuals,
                                      [int(bad)]) from None
            qb, eb = upscale_batch(m, theta, theta0, dt)
            q[idx], eps[idx] = qb, eb
            if commit:
                group[2] = theta
        return q, eps

    def _internal_force(self, q, eps):
        ne = self.mesh.n_elements
        q = q.reshape(ne, 8, 3)
        eps = eps.reshape(ne, 8)
        w = self.quad.w
        fe = np.einsum("g,ga,eg->ea", w, self.quad.N, eps) - np.einsum("g,gia,egi->ea", w, self.quad.dN, q)
        f = np.zeros(self.mesh.n_nodes)
        np.add.at(f, self.conn, fe)
        return f

    def _coupled_step(self, state: ThermalField, dt: float):
        src = self.p.source
        if getattr(self, "_coupled_state_time", None) != state.time:
            self._coupled_init(state)
        K, C = self.matrices(dt)  # effective tangent
        A = (C * (1.0 / dt) + K + self.H).tocsr()
        T0 = np.asarray(state.values)
        T = np.where(self.fixed, self.fixed_values, T0)
        r0 = None
        for it in range(1, src.max_iter + 1):
            tb, gb = self._macro_gp(T)
            q, eps = self._micro_response(tb, gb, dt)
            f_int = self._internal_force(q, eps)
            R = f_int + self.H @ T - self.F
            rn = float(np.linalg.norm(R[self.free]))
            if r0 is None:
                r0 = max(rn, float(np.linalg.norm(self.F[self.free])), 1e-300)
            if rn <= src.tol * r0:
                break
            delta, _ = self._solve(A, -R, np.zeros_like(T), self._contrast(K))
            T = T + delta
        else:
            raise SolverError(f"coupled step did not converge in {src.max_iter} iterations (residual {rn / r0:.3e})")
        self._micro_response(tb, gb, dt, commit=True)
        self._macro_prev = (tb, gb)
        self._coupled_state_time = state.time + dt
        # hats sum to one and their gradients to zero, so sum(f_int) is the stored power
        report = self._balance(float(f_int.sum()), T, f_int + self.H @ T - self.F, it)
        return ThermalField(T, state.time + dt), report


# ---------------------------------------------------------------------------
# drivers


def solve_steady_macro(problem: MacroProblem) -> ThermalField:
    return MacroModel(problem).solve_steady()


def step_macro(problem: MacroProblem, state: ThermalField, model: MacroModel = None):
    """One backward-Euler step; returns (ThermalField, StepReport)."""
    return (model or MacroModel(problem)).step(state)


@dataclass
class TransientResult:
    field: ThermalField
    time: np.ndarray
    T_max: np.ndarray
    T_avg: np.ndarray
    energy_residual: np.ndarray  # per step

    def write_csv(self, path, header_lines=()):
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["t", "T_max", "T_avg"])
            for row in zip(self.time, self.T_max, self.T_avg):
                w.writerow([repr(float(v)) for v in row])


def run_transient(problem: MacroProblem, state: ThermalField = None) -> TransientResult:
    """Step from ``state`` (uniform T0 by default) to t_end with a fixed dt.

    T_avg weights nodes by their lumped volume; T_max is the nodal maximum.
    """
    if problem.dt is None or problem.t_end is None:
        raise ConfigError("transient runs need dt and t_end")
    model = MacroModel(problem)
    state = state or ThermalField(np.full(problem.mesh.n_nodes, problem.T0), 0.0)
    vol = model.lumped_volume
    n_steps = int(round(problem.t_end / problem.dt))
    ts, tmax, tavg, res = [state.time], [state.values.max()], [vol @ state.values / vol.sum()], []
    for _ in range(n_steps):
        state, report = model.step(state)
        ts.append(state.time)
        tmax.append(state.values.max())
        tavg.append(vol @ state.values / vol.sum())
        res.append(report.residual)
    return TransientResult(state, np.array(ts), np.array(tmax), np.array(tavg), np.array(res))


def validation_bcs(q_in=1e6, h=1e5, T_amb=300.0) -> dict:
    """Uniform heating from the bottom, convection on top, adiabatic sides."""
    return {"zmin": Neumann(q_in), "zmax": Robin(h, T_amb)}


@dataclass
class ResolvedResult:
    field: ThermalField
    T_top_avg: float
    T_bot_avg: float


def face_temperatures(model: MacroModel, values):
    return model.face_average(values, "zmax"), model.face_average(values, "zmin")


def run_resolved(grid, bcs=None, tol=1e-10) -> ResolvedResult:
    """Steady solve with explicit per-voxel materials on the grid's own mesh."""
    problem = MacroProblem(MacroMesh.from_grid(grid), ResolvedSource(grid), bcs or validation_bcs(), tol=tol)
    model = MacroModel(problem)
    f = model.solve_steady()
    top, bot = face_temperatures(model, f.values)
    return ResolvedResult(f, top, bot)


@dataclass
class ValidationRow:
    model: str
    T_top_avg: float
    T_bot_avg: float
    error_pct: float = None


@dataclass
class ValidationReport:
    rows: list

    def format(self) -> str:
        lines = [f"{'Model':<28}{'T_top,avg (K)':>15}{'T_bot,avg (K)':>15}{'Error (%)':>12}"]
        for r in self.rows:
            err = "-" if r.error_pct is None else f"{r.error_pct:.2f}"
            lines.append(f"{r.model:<28}{r.T_top_avg:>15.2f}{r.T_bot_avg:>15.2f}{err:>12}")
        return "\n".join(lines)

    def write_csv(self, path, header_lines=()):
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["model", "T_top_avg_K", "T_bot_avg_K", "error_pct"])
            for r in self.rows:
                w.writerow([r.model, repr(r.T_top_avg), repr(r.T_bot_avg), "" if r.error_pct is None else repr(r.error_pct)])


def compare_homogenized_vs_resolved(polygon_sets, stack, window, rve_sizes=(5e-6, 10e-6, 15e-6),
                                    resolution=(0.5e-6, 0.5e-6, 0.2e-6), rve_resolution=None, macro_shape=None,
                                    bcs=None, threads: int = 1) -> ValidationReport:
    """Resolved steady reference versus map-mode solves at several RVE sizes.

    Map grids hold floor(window / rve_size) cells per axis; the macro mesh
    defaults to one element per 1 um in-plane and four through the stack.
    Error is (T_bot - T_bot_resolved) / T_bot_resolved in percent.
    """
    from .propmap import build_map
    from .rve import build_rve

    bcs = bcs or validation_bcs()
    grid = build_rve(polygon_sets, stack, window, resolution)
    ref = run_resolved(grid, bcs)
    rows = [ValidationRow("Fully resolved", ref.T_top_avg, ref.T_bot_avg)]
    if macro_shape is None:
        macro_shape = (max(1, int(round(window.width / 1e-6))), max(1, int(round(window.height / 1e-6))), 4)
    mesh = MacroMesh((window.x_min, window.y_min, 0.0), (window.width, window.height, stack.total_thickness), macro_shape)
    die = (window.x_min, window.y_min, window.x_max, window.y_max)
    for size in rve_sizes:
        n = (int(np.floor(window.width / size * (1 + 1e-9))), int(np.floor(window.height / size * (1 + 1e-9))))
        pmap = build_map(polygon_sets, stack, None, n, size, (), rve_resolution or resolution, die=die, threads=threads)
        model = MacroModel(MacroProblem(mesh, MapSource(pmap), bcs))
        f = model.solve_steady()
        top, bot = face_temperatures(model, f.values)
        rows.append(ValidationRow(f"Homogenized ({size / 1e-6:g} um RVE)", top, bot,
                                  100.0 * (bot - ref.T_bot_avg) / ref.T_bot_avg))
    return ValidationReport(rows)


def energy_balance(model: MacroModel, prev: ThermalField, new: ThermalField, dt: float = None) -> StepReport:
    """Stored versus inflowing heat for a completed non-coupled step.

    ``dt`` defaults to the problem step when it matches the elapsed time.
    """
    if dt is None:
        dt = new.time - prev.time
        if model.p.dt is not None and abs(dt - model.p.dt) <= 1e-9 * model.p.dt:
            dt = model.p.dt
    K, C = model.matrices(dt)
    KH = (K + model.H).tocsr()
    return model._report(C, KH, new.values, new.values - prev.values, dt)
