"""
Trilinear hexahedral finite elements on structured voxel grids.

Local node ``a = ia + 2*ja + 4*ka`` sits at offset (ia, ja, ka) of its
element; global nodes and elements are numbered x-fastest. Heat flux
follows q = -kappa grad(theta).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import SolverError

LOCAL_OFFSETS = np.array([[a & 1, (a >> 1) & 1, (a >> 2) & 1] for a in range(8)])
_GAUSS = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])


@dataclass(frozen=True)
class HexQuadrature:
    """2x2x2 Gauss rule on a box element with edge lengths ``spacing``.

    points: (8, 3) gauss point offsets from the element corner
    N:      (8 gp, 8 nodes) shape functions
    dN:     (8 gp, 3, 8 nodes) physical gradients
    w:      (8,) weights including the Jacobian
    """

    spacing: tuple
    points: np.ndarray
    N: np.ndarray
    dN: np.ndarray
    w: np.ndarray

    @classmethod
    def for_spacing(cls, spacing) -> "HexQuadrature":
        h = np.asarray(spacing, dtype=float)
        ref = np.array([[_GAUSS[g & 1], _GAUSS[(g >> 1) & 1], _GAUSS[(g >> 2) & 1]] for g in range(8)])
        # 1D hats and slopes on [0, 1]: phi_0 = 1 - t, phi_1 = t
        phi = np.where(LOCAL_OFFSETS[None, :, :] == 1, ref[:, None, :], 1.0 - ref[:, None, :])  # (g, a, d)
        dphi = np.where(LOCAL_OFFSETS[None, :, :] == 1, 1.0, -1.0) / h  # (1, a, d) broadcast
        dphi = np.broadcast_to(dphi, phi.shape)
        N = phi.prod(axis=2)
        dN = np.empty((8, 3, 8))
        for d in range(3):
            others = [e for e in range(3) if e != d]
            dN[:, d, :] = dphi[:, :, d] * phi[:, :, others[0]] * phi[:, :, others[1]]
        w = np.full(8, np.prod(h) / 8.0)
        return cls(tuple(float(v) for v in h), ref * h, N, dN, w)

    @cached_property
    def stiffness(self) -> np.ndarray:
        """Unit-conductivity element matrix."""
        K = np.einsum("g,gia,gib->ab", self.w, self.dN, self.dN)
        return 0.5 * (K + K.T)

    @cached_property
    def mass(self) -> np.ndarray:
        """Unit-capacity consistent element mass matrix."""
        M = np.einsum("g,ga,gb->ab", self.w, self.N, self.N)
        return 0.5 * (M + M.T)

    @cached_property
    def grad_integral(self) -> np.ndarray:
        """(3, 8) matrix G with  int_e grad(theta) = G @ theta_e."""
        return np.einsum("g,gia->ia", self.w, self.dN)

    def tensor_stiffness(self, kappa_gp) -> np.ndarray:
        """Element matrices for per-gauss-point tensors ``kappa_gp`` (ne, 8, 3, 3)."""
        K = np.einsum("g,gia,egij,gjb->eab", self.w, self.dN, kappa_gp, self.dN)
        return 0.5 * (K + K.transpose(0, 2, 1))

    def weighted_mass(self, c_gp) -> np.ndarray:
        """Element mass matrices for per-gauss-point capacities ``c_gp`` (ne, 8)."""
        M = np.einsum("g,eg,ga,gb->eab", self.w, c_gp, self.N, self.N)
        return 0.5 * (M + M.transpose(0, 2, 1))


def connectivity(shape) -> np.ndarray:
    """(ne, 8) global node ids of every element, elements x-fastest."""
    nx, ny, nz = shape
    sx, sy = 1, nx + 1
    sz = (nx + 1) * (ny + 1)
    i, j, k = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    base = (i * sx + j * sy + k * sz).ravel(order="F")
    local = LOCAL_OFFSETS @ np.array([sx, sy, sz])
    return base[:, None] + local[None, :]


def assemble(shape, element_matrices, coefficients=None) -> sp.csr_matrix:
    """Assemble a symmetric global matrix on a structured hex grid.

    ``element_matrices`` is either one (8, 8) matrix scaled per element by
    ``coefficients`` (ne,), or a stack (ne, 8, 8). Contributions are summed
    into a 27-point stencil; the lower triangle is the exact transpose of
    the upper one.
    """
    nx, ny, nz = shape
    nodes = (nx + 1, ny + 1, nz + 1)
    n = int(np.prod(nodes))
    strides = np.array([1, nx + 1, (nx + 1) * (ny + 1)])
    Ke = np.asarray(element_matrices, dtype=float)
    shared = Ke.ndim == 2
    if shared:
        coef = np.ones(nx * ny * nz) if coefficients is None else np.asarray(coefficients, dtype=float)
        coef = coef.reshape((nx, ny, nz), order="F")
    bands: dict = {}
    for a in range(8):
        oa = LOCAL_OFFSETS[a]
        for b in range(8):
            lin = int((LOCAL_OFFSETS[b] - oa) @ strides)
            if lin < 0:
                continue
            if shared:
                vals = Ke[a, b] * coef
            else:
                vals = Ke[:, a, b].reshape((nx, ny, nz), order="F")
            band = bands.get(lin)
            if band is None:
                band = bands[lin] = np.zeros(nodes, order="F")
            band[oa[0] : oa[0] + nx, oa[1] : oa[1] + ny, oa[2] : oa[2] + nz] += vals
    diag = bands.pop(0).ravel(order="F")
    offsets = sorted(bands)
    if offsets:
        upper = sp.diags([bands[o].ravel(order="F")[: n - o] for o in offsets], offsets, shape=(n, n), format="csr")
        upper.eliminate_zeros()
    else:
        upper = sp.csr_matrix((n, n))
    return (sp.diags(diag, 0, format="csr") + upper + upper.T).tocsr()


# ---------------------------------------------------------------------------
# linear solver


def _colsum(a):
    return a.sum(axis=0)


def cg(A, b, x0=None, tol=1e-10, max_iter=None, diag=None, contrast=1.0):
    """Jacobi-preconditioned conjugate gradients.

    ``b`` may be (n,) or (n, m); columns are independent systems. Each
    column stops once ||r|| <= tol * ||b||. Returns ``(x, history)`` with
    the largest relative residual per iteration. Raises SolverError if
    ``max_iter`` (default ``20 * n**(1/3) * contrast``) is exhausted.
    """
    b = np.asarray(b, dtype=float)
    vector = b.ndim == 1
    B = b[:, None] if vector else b
    n = B.shape[0]
    if max_iter is None:
        max_iter = max(200, int(20 * n ** (1.0 / 3.0) * max(contrast, 1.0)))
    inv = 1.0 / (A.diagonal() if diag is None else diag)
    X = np.zeros_like(B) if x0 is None else np.array(x0, dtype=float).reshape(B.shape)
    bnorm = np.sqrt(_colsum(B * B))
    target = tol * bnorm
    R = B - A @ X if x0 is not None else B.copy()
    rnorm = np.sqrt(_colsum(R * R))
    scale = np.where(bnorm > 0, bnorm, 1.0)
    history = [float(np.max(rnorm / scale))] if n else [0.0]
    active = rnorm > target
    if n == 0 or not active.any():
        return (X[:, 0] if vector else X), history
    Z = inv[:, None] * R
    P = Z.copy()
    rz = _colsum(R * Z)
    for _ in range(max_iter):
        AP = A @ P
        pap = _colsum(P * AP)
        alpha = np.where(active & (pap > 0), rz / np.where(pap > 0, pap, 1.0), 0.0)
        X += alpha * P
        R -= alpha * AP
        rnorm = np.sqrt(_colsum(R * R))
        history.append(float(np.max(rnorm / scale)))
        active &= rnorm > target
        if not active.any():
            return (X[:, 0] if vector else X), history
        Z = inv[:, None] * R
        rz_new = _colsum(R * Z)
        beta = np.where(active, rz_new / np.where(rz != 0, rz, 1.0), 0.0)
        P = Z + beta * P
        rz = rz_new
    raise SolverError(
        f"CG did not converge in {max_iter} iterations (relative residual {history[-1]:.3e}, tol {tol:g})",
        history,
        np.flatnonzero(active),
    )


# ---------------------------------------------------------------------------
# problem containers


@dataclass(frozen=True)
class ThermalField:
    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(v)):
            raise ValueError("temperature field contains non-finite values")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class MicroBC:
    """Affine boundary temperature theta_bar + grad . (x - centroid)."""

    theta_bar: float
    grad: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        g = tuple(float(v) for v in self.grad)
        if len(g) != 3 or not np.all(np.isfinite(g)) or not np.isfinite(self.theta_bar):
            raise ValueError("MicroBC needs a finite temperature and 3-vector gradient")
        object.__setattr__(self, "grad", g)


@dataclass
class LinearSystem:
    operator: sp.csr_matrix
    rhs: np.ndarray
    constrained: np.ndarray  # bool mask
    values: np.ndarray  # prescribed values on constrained nodes (full length)


def solve_linear_system(sys: LinearSystem, x0=None, tol=1e-10, contrast=1.0):
    """Symmetric row/column elimination of the constraints, then PCG."""
    c = sys.constrained
    free = ~c
    A = sys.operator
    A_f = A[free]
    A_ff = A_f[:, free]
    rhs = sys.rhs[free] - A_f[:, c] @ sys.values[c]
    guess = None if x0 is None else np.asarray(x0)[free]
    x_f, history = cg(A_ff, rhs, guess, tol=tol, contrast=contrast)
    x = np.array(sys.values, dtype=float)
    x[free] = x_f
    return x, history


# ---------------------------------------------------------------------------
# grid-bound model


class HexModel:
    """Cached FE operators for one MaterialGrid."""

    def __init__(self, grid, tol: float = 1e-10):
        self.grid = grid
        self.tol = tol
        self.quad = HexQuadrature.for_spacing(grid.spacing)
        self.conn = connectivity(grid.shape)
        self.kappa_e = grid.kappa
        self.rho_cp_e = grid.rho_cp
        self.boundary = grid.boundary_nodes()
        self.free = ~self.boundary
        self.X = grid.centered_coords()
        self.contrast = float(self.kappa_e.max() / self.kappa_e.min())
        self._reduced: dict = {}

    @cached_property
    def K(self) -> sp.csr_matrix:
        return assemble(self.grid.shape, self.quad.stiffness, self.kappa_e)

    @cached_property
    def M(self) -> sp.csr_matrix:
        return assemble(self.grid.shape, self.quad.mass, self.rho_cp_e)

    @property
    def n_nodes(self) -> int:
        return self.X.shape[0]

    def operator(self, dt=None) -> sp.csr_matrix:
        return self.K if dt is None else (self.M * (1.0 / dt) + self.K).tocsr()

    def reduced(self, dt=None):
        """(A_ff, A_fb) blocks of K or M/dt + K, cached per dt."""
        key = None if dt is None else float(dt)
        if key not in self._reduced:
            A = self.operator(dt)[self.free]
            self._reduced[key] = (A[:, self.free].tocsr(), A[:, self.boundary].tocsr())
        return self._reduced[key]

    def affine(self, bc: MicroBC) -> np.ndarray:
        return bc.theta_bar + self.X @ np.asarray(bc.grad)

    def linear_system(self, dt=None, rhs=None) -> LinearSystem:
        n = self.n_nodes
        return LinearSystem(self.operator(dt), np.zeros(n) if rhs is None else rhs, self.boundary, np.zeros(n))

    def solve_dirichlet(self, boundary_values, rhs=None, dt=None, x0=None):
        """Solve A x = rhs on free nodes with x = boundary_values on the boundary.

        Arrays may carry a trailing column axis for batched solves.
        """
        A_ff, A_fb = self.reduced(dt)
        bv = np.asarray(boundary_values, dtype=float)
        b = -(A_fb @ bv[self.boundary])
        if rhs is not None:
            b = b + np.asarray(rhs)[self.free]
        guess = None if x0 is None else np.asarray(x0)[self.free]
        x_f, history = cg(A_ff, b, guess, tol=self.tol, contrast=self.contrast)
        x = bv.copy()
        x[self.free] = x_f
        return x, history

    def solve_steady(self, bc: MicroBC) -> ThermalField:
        aff = self.affine(bc)
        # the affine field is an exact solution for homogeneous material, so it
        # doubles as the initial guess
        x, _ = self.solve_dirichlet(aff, x0=aff)
        return ThermalField(x, 0.0)

    def step(self, state: ThermalField, bc_at, dt: float, subcycles: int = 1) -> ThermalField:
        if dt <= 0:
            raise ValueError("time step must be positive")
        if subcycles < 1:
            raise ValueError("subcycles must be >= 1")
        theta = np.asarray(state.values, dtype=float)
        if theta.shape[0] != self.n_nodes:
            raise ValueError("state does not match grid")
        h = dt / subcycles
        t = state.time
        for s in range(1, subcycles + 1):
            t_new = state.time + dt * s / subcycles
            bv = self.affine(bc_at(t_new))
            rhs = self.M @ theta / h
            guess = theta.copy()
            guess[self.boundary] = bv[self.boundary]
            theta, _ = self.solve_dirichlet(bv, rhs=rhs, dt=h, x0=guess)
            t = t_new
        return ThermalField(theta, t)

    # gauss point evaluation -------------------------------------------------

    def gp_values(self, theta) -> np.ndarray:
        """(ne, 8) field values at gauss points."""
        return np.asarray(theta)[self.conn] @ self.quad.N.T

    def gp_gradients(self, theta) -> np.ndarray:
        """(ne, 8, 3) field gradients at gauss points."""
        return np.einsum("gia,ea->egi", self.quad.dN, np.asarray(theta)[self.conn])

    @cached_property
    def gp_positions(self) -> np.ndarray:
        """(ne, 8, 3) gauss point coordinates relative to the grid centroid."""
        corner = self.X[self.conn[:, 0]]
        return corner[:, None, :] + self.quad.points[None, :, :]

    def average(self, gp_data) -> np.ndarray:
        """Volume average of gauss-point data shaped (ne, 8, ...)."""
        return np.einsum("g,eg...->...", self.quad.w, gp_data) / self.grid.volume


def assemble_conductivity(grid) -> sp.csr_matrix:
    return HexModel(grid).K


def assemble_capacity(grid) -> sp.csr_matrix:
    return HexModel(grid).M


def apply_linear_bc(sys: LinearSystem, grid, bc: MicroBC) -> LinearSystem:
    """Constrain every boundary node to theta_bar + grad . (x - centroid)."""
    X = grid.centered_coords()
    values = np.array(sys.values, dtype=float)
    mask = grid.boundary_nodes()
    values[mask] = bc.theta_bar + X[mask] @ np.asarray(bc.grad)
    return LinearSystem(sys.operator, sys.rhs, sys.constrained | mask, values)


def solve_steady(grid, bc: MicroBC, tol: float = 1e-10) -> ThermalField:
    return HexModel(grid, tol=tol).solve_steady(bc)


def step_transient(grid, state: ThermalField, bc_at, dt: float, subcycles: int = 1, model=None) -> ThermalField:
    """Backward-Euler substeps of size dt/subcycles with the BC at each substep end."""
    model = model or HexModel(grid)
    return model.step(state, bc_at, dt, subcycles)
