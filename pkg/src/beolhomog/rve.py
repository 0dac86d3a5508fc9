"""Window clipping and voxelization of an extruded layer stack."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ResolutionError
from .gdsii import PolygonSet, polygon_area
from .techstack import TechStack

log = logging.getLogger(__name__)

_REL = 1e-9


@dataclass(frozen=True)
class Window:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError(f"degenerate window {self}")

    @classmethod
    def centered(cls, x, y, size) -> "Window":
        h = size / 2
        return cls(x - h, y - h, x + h, y + h)

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def center(self):
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))


@dataclass(frozen=True, eq=False)
class MaterialGrid:
    """Uniform voxel grid; ``voxel_material`` has shape (nx, ny, nz).

    Voxel ids index into ``materials``. Elements and nodes are numbered
    x-fastest (Fortran order of the (x, y, z) shaped arrays).
    """

    shape: tuple
    spacing: tuple
    origin: tuple
    voxel_material: np.ndarray
    materials: tuple

    def __post_init__(self):
        vm = np.asarray(self.voxel_material)
        if vm.shape != tuple(self.shape):
            raise ValueError(f"voxel array shape {vm.shape} != {self.shape}")
        if min(self.spacing) <= 0:
            raise ValueError("voxel spacing must be positive")
        if vm.size and (vm.min() < 0 or vm.max() >= len(self.materials)):
            raise ValueError("voxel material id out of range")
        vm = vm.astype(np.int32, copy=True)
        vm.setflags(write=False)
        object.__setattr__(self, "voxel_material", vm)

    @property
    def nx(self):
        return self.shape[0]

    @property
    def ny(self):
        return self.shape[1]

    @property
    def nz(self):
        return self.shape[2]

    @property
    def size(self) -> np.ndarray:
        return np.asarray(self.shape, dtype=float) * np.asarray(self.spacing)

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    @property
    def centroid(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=float) + 0.5 * self.size

    @property
    def n_nodes(self) -> int:
        return int(np.prod(np.asarray(self.shape) + 1))

    def element_values(self, attr: str) -> np.ndarray:
        """Per-voxel material attribute, flattened x-fastest."""
        table = np.array([getattr(m, attr) for m in self.materials], dtype=float)
        return table[self.voxel_material.ravel(order="F")]

    @property
    def kappa(self) -> np.ndarray:
        return self.element_values("kappa")

    @property
    def rho_cp(self) -> np.ndarray:
        return self.element_values("rho_cp")

    def node_coords(self) -> np.ndarray:
        axes = [o + d * np.arange(n + 1) for o, d, n in zip(self.origin, self.spacing, self.shape)]
        X, Y, Z = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([X.ravel(order="F"), Y.ravel(order="F"), Z.ravel(order="F")])

    def centered_coords(self) -> np.ndarray:
        """Node coordinates relative to the centroid, independent of the origin."""
        axes = [d * (np.arange(n + 1) - 0.5 * n) for d, n in zip(self.spacing, self.shape)]
        X, Y, Z = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([X.ravel(order="F"), Y.ravel(order="F"), Z.ravel(order="F")])

    def boundary_nodes(self) -> np.ndarray:
        nx, ny, nz = self.shape
        i, j, k = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), np.arange(nz + 1), indexing="ij")
        mask = (i == 0) | (i == nx) | (j == 0) | (j == ny) | (k == 0) | (k == nz)
        return mask.ravel(order="F")

    def fraction(self, material_index: int) -> float:
        return float(np.mean(self.voxel_material == material_index))

    def metal_fraction(self, background: int = 0) -> float:
        """Fraction of voxels not holding the background material."""
        return float(np.mean(self.voxel_material != background))

    @classmethod
    def uniform(cls, material, shape, spacing, origin=(0.0, 0.0, 0.0)) -> "MaterialGrid":
        return cls(tuple(shape), tuple(spacing), tuple(origin), np.zeros(shape, dtype=np.int32), (material,))

    def with_materials(self, materials) -> "MaterialGrid":
        return MaterialGrid(self.shape, self.spacing, self.origin, self.voxel_material, tuple(materials))


# ---------------------------------------------------------------------------
# clipping


def _clip_edge(poly, axis, value, keep_greater):
    out = []
    n = len(poly)
    for idx in range(n):
        cur, nxt = poly[idx], poly[(idx + 1) % n]
        cin = cur[axis] >= value if keep_greater else cur[axis] <= value
        nin = nxt[axis] >= value if keep_greater else nxt[axis] <= value
        if cin:
            out.append(cur)
        if cin != nin:
            t = (value - cur[axis]) / (nxt[axis] - cur[axis])
            p = cur + t * (nxt - cur)
            p[axis] = value
            out.append(p)
    return out


def clip_polygon(poly, w: Window):
    """Sutherland-Hodgman clip of one polygon against the window rectangle."""
    pts = [np.asarray(p, dtype=float) for p in poly]
    for axis, value, greater in ((0, w.x_min, True), (0, w.x_max, False), (1, w.y_min, True), (1, w.y_max, False)):
        if not pts:
            return None
        pts = _clip_edge(pts, axis, value, greater)
    if len(pts) < 3:
        return None
    arr = np.array(pts)
    # drop consecutive duplicates produced at window corners
    keep = np.any(np.abs(arr - np.roll(arr, 1, axis=0)) > 0, axis=1)
    arr = arr[keep]
    if len(arr) < 3 or abs(polygon_area(arr)) <= 0:
        return None
    return arr


def clip(polys: PolygonSet, w: Window) -> PolygonSet:
    out = []
    for p in polys.polygons:
        lo, hi = p.min(axis=0), p.max(axis=0)
        if hi[0] <= w.x_min or lo[0] >= w.x_max or hi[1] <= w.y_min or lo[1] >= w.y_max:
            continue
        if lo[0] >= w.x_min and hi[0] <= w.x_max and lo[1] >= w.y_min and hi[1] <= w.y_max:
            out.append(p)
            continue
        c = clip_polygon(p, w)
        if c is not None:
            out.append(c)
    return PolygonSet(polys.layer_key, tuple(out))


# ---------------------------------------------------------------------------
# voxelization


def points_in_polygon(xs, ys, poly) -> np.ndarray:
    """Even-odd test of the grid ``xs`` x ``ys`` against one polygon."""
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    inside = np.zeros(X.shape, dtype=bool)
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for a, b, c, d in zip(x0, y0, x1, y1):
        if b == d:
            continue
        crosses = (b > Y) != (d > Y)
        xint = a + (Y - b) * (c - a) / (d - b)
        inside ^= crosses & (X < xint)
    return inside


def coverage_mask(polys: PolygonSet, xs, ys) -> np.ndarray:
    """Boolean (len(xs), len(ys)) mask of sample points covered by any polygon."""
    mask = np.zeros((len(xs), len(ys)), dtype=bool)
    for p in polys.polygons:
        lo, hi = p.min(axis=0), p.max(axis=0)
        i0, i1 = np.searchsorted(xs, lo[0]), np.searchsorted(xs, hi[0], side="right")
        j0, j1 = np.searchsorted(ys, lo[1]), np.searchsorted(ys, hi[1], side="right")
        if i1 <= i0 or j1 <= j0:
            continue
        mask[i0:i1, j0:j1] |= points_in_polygon(xs[i0:i1], ys[j0:j1], p)
    return mask


def _steps(length, d, what):
    n = int(round(length / d))
    if n < 1 or abs(n * d - length) > _REL * max(length, d):
        raise ResolutionError(f"{what} extent {length:g} m is not an integer multiple of {d:g} m")
    return n


def layer_dz(stack: TechStack, dz_max: float = 0.1e-6, max_planes: int = 4000) -> float:
    """Largest dz <= dz_max placing every layer boundary on a voxel plane.

    Falls back to ``total/ceil(total/dz_max)`` with snapping when no such
    spacing exists below ``max_planes`` planes.
    """
    total = stack.total_thickness
    planes = sorted({l.z_bottom for l in stack.layers} | {l.z_top for l in stack.layers})
    n0 = max(1, int(np.ceil(total / dz_max * (1 - 1e-12))))
    for n in range(n0, max(n0, max_planes) + 1):
        dz = total / n
        if all(abs(z / dz - round(z / dz)) < 1e-6 for z in planes):
            return dz
    return total / n0


def voxelize(layers, stack: TechStack, w: Window, resolution) -> MaterialGrid:
    """Voxelize ``layers`` = [(PolygonSet, z_bottom, thickness, material_name), ...].

    Every voxel starts as the background material; a voxel takes a layer's
    material if its center lies inside both the layer z-interval and the
    layer polygons. Later layers win.
    """
    dx, dy, dz = resolution
    nx = _steps(w.width, dx, "x")
    ny = _steps(w.height, dy, "y")
    nz = _steps(stack.total_thickness, dz, "z")
    names = [stack.background] + sorted({m for *_, m in layers} - {stack.background})
    index = {n: i for i, n in enumerate(names)}
    xs = w.x_min + dx * (np.arange(nx) + 0.5)
    ys = w.y_min + dy * (np.arange(ny) + 0.5)
    zs = dz * (np.arange(nz) + 0.5)
    vox = np.zeros((nx, ny, nz), dtype=np.int32)
    for polys, z_bottom, thickness, material in layers:
        zsel = (zs >= z_bottom) & (zs < z_bottom + thickness)
        for z in (z_bottom, z_bottom + thickness):
            snap = abs(z / dz - round(z / dz)) * dz
            if snap > 1e-6 * dz:
                log.warning("layer boundary z=%g m snapped by %g m to a voxel plane", z, snap)
        if not zsel.any():
            log.warning("layer at z=%g m (t=%g m) resolves to no voxel plane", z_bottom, thickness)
            continue
        if not polys.polygons:
            continue
        mask = coverage_mask(clip(polys, w), xs, ys)
        if mask.any():
            vox[mask[:, :, None] & zsel[None, None, :]] = index[material]
    return MaterialGrid((nx, ny, nz), (dx, dy, dz), (w.x_min, w.y_min, 0.0), vox, tuple(stack.materials[n] for n in names))


def stack_layers(polygon_sets: dict, stack: TechStack) -> list:
    """Pair flattened polygon sets with their tech layers, in stack order."""
    out = []
    for layer in stack.layers:
        ps = polygon_sets.get(layer.key, PolygonSet(layer.key))
        out.append((ps, layer.z_bottom, layer.thickness, layer.material))
    return out


def build_rve(polygon_sets: dict, stack: TechStack, w: Window, resolution) -> MaterialGrid:
    return voxelize(stack_layers(polygon_sets, stack), stack, w, resolution)
