"""Regular grids of homogenized RVE properties over a die, with CSV persistence.

Cells are numbered ``idx = iy * nx + ix``. Each RVE is centered on its cell
center and computed in isolation, so the map does not depend on the worker
schedule.
"""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import BeolHomogError, ConfigError, FormatError, MapError
from .gdsii import LayoutDatabase, flatten_layer
from .homogenize import HomogenizedProps, homogenize_rve
from .rve import Window, build_rve, layer_dz

log = logging.getLogger(__name__)

MAGIC = "#beol-homog-map v1"
COMPONENTS = ("xx", "xy", "xz", "yx", "yy", "yz", "zx", "zy", "zz")
MAX_FAILED_FRACTION = 0.01


@dataclass
class PropertyMap:
    grid_nx: int
    grid_ny: int
    die_origin: tuple  # (x, y) m
    die_size: tuple  # (w, h) m
    rve_size: float
    entries: list  # HomogenizedProps or None, indexed iy * nx + ix
    dt_list: tuple = ()
    failures: dict = field(default_factory=dict)  # idx -> reason
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.dt_list = tuple(float(d) for d in self.dt_list)
        if len(self.entries) != self.grid_nx * self.grid_ny:
            raise ValueError("entries do not tile the grid")
        for idx, e in enumerate(self.entries):
            if e is None and idx not in self.failures:
                raise ValueError(f"cell {idx} has neither properties nor a failure reason")

    @property
    def pitch(self) -> tuple:
        return (self.die_size[0] / self.grid_nx, self.die_size[1] / self.grid_ny)

    def center(self, ix: int, iy: int) -> tuple:
        px, py = self.pitch
        return (self.die_origin[0] + (ix + 0.5) * px, self.die_origin[1] + (iy + 0.5) * py)

    def entry(self, ix: int, iy: int):
        return self.entries[iy * self.grid_nx + ix]

    def _check_dt(self, dt):
        if dt is not None and float(dt) not in self.dt_list:
            raise KeyError(f"dt={dt!r} not in map dt_list {self.dt_list}")

    def arrays(self, dt=None):
        """(rho_cp (nx, ny), kappa (nx, ny, 3, 3), ok (nx, ny)) for steady or a tabulated dt."""
        self._check_dt(dt)
        nx, ny = self.grid_nx, self.grid_ny
        rho = np.zeros((nx, ny))
        kap = np.zeros((nx, ny, 3, 3))
        ok = np.zeros((nx, ny), dtype=bool)
        for idx, e in enumerate(self.entries):
            if e is None:
                continue
            iy, ix = divmod(idx, nx)
            rho[ix, iy] = e.rho_cp_eff
            kap[ix, iy] = e.kappa(None if dt is None else float(dt))
            ok[ix, iy] = True
        return rho, kap, ok


# ---------------------------------------------------------------------------
# construction


_WORKER = {}


def _init_worker(polys, stack, resolution, dt_list):
    _WORKER.update(polys=polys, stack=stack, resolution=resolution, dt_list=dt_list)


def _cell_job(args):
    idx, window, rve_size = args
    w = _WORKER
    try:
        grid = build_rve(w["polys"], w["stack"], window, w["resolution"])
        props = homogenize_rve(grid, w["dt_list"], window=window, rve_size=rve_size)
        return idx, props, None
    except BeolHomogError as exc:
        return idx, None, f"{type(exc).__name__}: {exc}"


def layout_polygons(db: LayoutDatabase, stack, top_cell: str) -> dict:
    return {layer.key: flatten_layer(db, top_cell, layer.key) for layer in stack.layers}


def layout_extent(polygon_sets: dict):
    """(x_min, y_min, x_max, y_max) of all polygons, or None for an empty layout."""
    boxes = [ps.bbox() for ps in polygon_sets.values() if ps.polygons]
    if not boxes:
        return None
    b = np.array(boxes)
    return (float(b[:, 0].min()), float(b[:, 1].min()), float(b[:, 2].max()), float(b[:, 3].max()))


def build_map(source, stack, top_cell=None, grid=(10, 10), rve_size=10e-6, dt_list=(), resolution=None,
              die=None, threads: int = 1, config=None) -> PropertyMap:
    """Homogenize one RVE per grid cell over ``die`` = (x_min, y_min, x_max, y_max).

    ``source`` is a LayoutDatabase (flattened from ``top_cell``) or a dict of
    per-layer PolygonSets. ``die`` defaults to the layout bounding box and
    ``resolution`` to 0.1 um in-plane with layer-aligned dz.
    """
    if resolution is None:
        resolution = (0.1e-6, 0.1e-6, layer_dz(stack))
    if isinstance(source, LayoutDatabase):
        if top_cell is None:
            tops = source.top_cells()
            if len(tops) != 1:
                raise ConfigError(f"top cell is ambiguous: {tops}")
            top_cell = tops[0]
        polys = layout_polygons(source, stack, top_cell)
    else:
        polys = dict(source)
    if die is None:
        die = layout_extent(polys)
        if die is None:
            raise ConfigError("empty layout: the die extent must be given explicitly")
    x0, y0, x1, y1 = (float(v) for v in die)
    nx, ny = (int(v) for v in grid)
    if nx < 1 or ny < 1:
        raise ConfigError("map grid must be at least 1x1")
    if not rve_size > 0:
        raise ConfigError("rve_size must be positive")
    tol = 1e-9 * max(x1 - x0, y1 - y0)
    if rve_size * nx > (x1 - x0) + tol or rve_size * ny > (y1 - y0) + tol:
        raise ConfigError(f"{nx}x{ny} RVEs of {rve_size:g} m do not fit in the die {x1 - x0:g} x {y1 - y0:g} m")
    dt_list = tuple(float(d) for d in dt_list)
    if any(not d > 0 for d in dt_list):
        raise ConfigError("time steps must be positive")

    proto = PropertyMap(nx, ny, (x0, y0), (x1 - x0, y1 - y0), float(rve_size), [None] * (nx * ny), dt_list,
                        {i: "pending" for i in range(nx * ny)}, dict(config or {}))
    jobs = []
    for iy in range(ny):
        for ix in range(nx):
            xc, yc = proto.center(ix, iy)
            jobs.append((iy * nx + ix, Window.centered(xc, yc, rve_size), float(rve_size)))

    results = {}
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads, initializer=_init_worker,
                                 initargs=(polys, stack, tuple(resolution), dt_list)) as ex:
            for idx, props, err in ex.map(_cell_job, jobs, chunksize=max(1, len(jobs) // (4 * threads))):
                results[idx] = (props, err)
    else:
        _init_worker(polys, stack, tuple(resolution), dt_list)
        for job in jobs:
            idx, props, err = _cell_job(job)
            results[idx] = (props, err)

    entries, failures = [], {}
    for idx in range(nx * ny):
        props, err = results[idx]
        entries.append(props)
        if err is not None:
            failures[idx] = err
            log.warning("map cell %d failed: %s", idx, err)
    if len(failures) > MAX_FAILED_FRACTION * nx * ny:
        sample = "; ".join(f"cell {i}: {r}" for i, r in list(failures.items())[:5])
        raise MapError(f"{len(failures)} of {nx * ny} map cells failed ({sample})")
    return PropertyMap(nx, ny, (x0, y0), (x1 - x0, y1 - y0), float(rve_size), entries, dt_list, failures,
                       dict(config or {}))


# ---------------------------------------------------------------------------
# interpolation


def _axis_weights(coord, origin, pitch, n):
    """Lower index and weight of the upper neighbour on the center lattice (clamped)."""
    f = (np.asarray(coord, dtype=float) - origin) / pitch - 0.5
    f = np.clip(f, 0.0, n - 1)
    i0 = np.minimum(np.floor(f).astype(int), max(n - 2, 0))
    t = f - i0
    if n == 1:
        t = np.zeros_like(f)
    return i0, t


def interpolate_fields(pmap: PropertyMap, xs, ys, dt=None):
    """Bilinear rho_cp (n,) and kappa (n, 3, 3) at points (xs, ys).

    Failed cells are skipped and the remaining corner weights renormalized.
    Points whose weight lies wholly on failed cells average the valid corners.
    """
    rho, kap, ok = pmap.arrays(dt)
    px, py = pmap.pitch
    i0, tx = _axis_weights(xs, pmap.die_origin[0], px, pmap.grid_nx)
    j0, ty = _axis_weights(ys, pmap.die_origin[1], py, pmap.grid_ny)
    i1 = np.minimum(i0 + 1, pmap.grid_nx - 1)
    j1 = np.minimum(j0 + 1, pmap.grid_ny - 1)
    corners = ((i0, j0, (1 - tx) * (1 - ty)), (i1, j0, tx * (1 - ty)), (i0, j1, (1 - tx) * ty), (i1, j1, tx * ty))
    wsum = np.zeros(np.shape(tx))
    r = np.zeros(np.shape(tx))
    k = np.zeros(np.shape(tx) + (3, 3))
    for i, j, w in corners:
        w = np.where(ok[i, j], w, 0.0)
        wsum += w
        r += w * rho[i, j]
        k += w[..., None, None] * kap[i, j]
    # a point whose weight sits entirely on failed cells takes the plain mean
    # of the valid stencil corners
    empty = wsum <= 0
    if np.any(empty):
        for i, j, _ in corners:
            w = np.where(empty & ok[i, j], 1.0, 0.0)
            wsum += w
            r += w * rho[i, j]
            k += w[..., None, None] * kap[i, j]
    if np.any(wsum <= 0):
        raise MapError("interpolation point surrounded only by failed map cells")
    return r / wsum, k / wsum[..., None, None]


def interpolate(pmap: PropertyMap, point, dt=None) -> HomogenizedProps:
    """Properties at ``point`` = (x, y) m; steady tensor for ``dt=None``."""
    rho, k_ss = interpolate_fields(pmap, [point[0]], [point[1]])
    transient = {}
    if dt is not None:
        transient[float(dt)] = interpolate_fields(pmap, [point[0]], [point[1]], dt)[1][0]
    return HomogenizedProps(rho_cp_eff=float(rho[0]), kappa_ss=k_ss[0], kappa_transient=transient, rve_size=pmap.rve_size)


# ---------------------------------------------------------------------------
# CSV persistence


def _columns(dt_list):
    cols = ["ix", "iy", "x_c", "y_c", "status", "rho_cp"] + [f"k_ss_{c}" for c in COMPONENTS]
    for i in range(len(dt_list)):
        cols += [f"k_dt{i}_{c}" for c in COMPONENTS]
    return cols + ["metal_fraction", "asymmetry", "reason"]


def _fmt(v) -> str:
    return repr(float(v))


def map_lines(pmap: PropertyMap) -> list:
    lines = [f"{MAGIC}; dt_list=" + ",".join(_fmt(d) for d in pmap.dt_list)]
    lines.append(f"#grid={pmap.grid_nx}x{pmap.grid_ny}; die_origin={_fmt(pmap.die_origin[0])},{_fmt(pmap.die_origin[1])}; "
                 f"die_size={_fmt(pmap.die_size[0])},{_fmt(pmap.die_size[1])}; rve_size={_fmt(pmap.rve_size)}")
    lines.append("#config=" + json.dumps(pmap.config, sort_keys=True))
    lines.append(",".join(_columns(pmap.dt_list)))
    nan9 = ["nan"] * 9
    for idx, e in enumerate(pmap.entries):
        iy, ix = divmod(idx, pmap.grid_nx)
        xc, yc = pmap.center(ix, iy)
        row = [str(ix), str(iy), _fmt(xc), _fmt(yc)]
        if e is None:
            row += ["failed", "nan"] + nan9 * (1 + len(pmap.dt_list)) + ["nan", "nan", pmap.failures[idx].replace(",", ";")]
        else:
            row += ["ok", _fmt(e.rho_cp_eff)] + [_fmt(v) for v in np.asarray(e.kappa_ss).ravel()]
            for d in pmap.dt_list:
                row += [_fmt(v) for v in np.asarray(e.kappa_transient[d]).ravel()]
            mf = e.metal_fraction if e.metal_fraction is not None else float("nan")
            row += [_fmt(mf), _fmt(e.asymmetry), ""]
        lines.append(",".join(row))
    return lines


def write_map(pmap: PropertyMap, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(map_lines(pmap)) + "\n")


def _kv(line):
    out = {}
    for part in line.lstrip("#").split(";"):
        if "=" in part:
            k, v = part.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def read_map(path) -> PropertyMap:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if len(lines) < 4 or not lines[0].startswith(MAGIC + ";"):
        raise FormatError(f"{path}: not a '{MAGIC}' property map")
    try:
        head = _kv(lines[0][len(MAGIC) + 1 :])
        dt_list = tuple(float(v) for v in head["dt_list"].split(",") if v)
        geo = _kv(lines[1])
        nx, ny = (int(v) for v in geo["grid"].split("x"))
        die_origin = tuple(float(v) for v in geo["die_origin"].split(","))
        die_size = tuple(float(v) for v in geo["die_size"].split(","))
        rve_size = float(geo["rve_size"])
        if not lines[2].startswith("#config="):
            raise KeyError("config")
        config = json.loads(lines[2][len("#config=") :])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from None
    cols = lines[3].split(",")
    if cols != _columns(dt_list):
        raise FormatError(f"{path}: column layout does not match schema v1 for {len(dt_list)} time steps")
    body = lines[4:]
    if len(body) != nx * ny:
        raise FormatError(f"{path}: expected {nx * ny} rows, found {len(body)}")
    entries, failures = [None] * (nx * ny), {}
    pos = {c: i for i, c in enumerate(cols)}
    for n, line in enumerate(body):
        row = line.split(",")
        if len(row) != len(cols):
            raise FormatError(f"{path}: row {n + 1} has {len(row)} fields, expected {len(cols)}")
        try:
            ix, iy = int(row[0]), int(row[1])
            idx = iy * nx + ix
            if row[pos["status"]] == "failed":
                failures[idx] = row[pos["reason"]]
                continue
            vals = [float(v) for v in row[pos["rho_cp"] : pos["metal_fraction"] + 2]]
        except ValueError as exc:
            raise FormatError(f"{path}: row {n + 1}: {exc}") from None
        k_ss = np.array(vals[1:10]).reshape(3, 3)
        transient = {d: np.array(vals[10 + 9 * i : 19 + 9 * i]).reshape(3, 3) for i, d in enumerate(dt_list)}
        mf, asym = vals[-2], vals[-1]
        entries[idx] = HomogenizedProps(vals[0], k_ss, transient, asymmetry=asym, rve_size=rve_size,
                                        metal_fraction=None if math.isnan(mf) else mf)
    return PropertyMap(nx, ny, die_origin, die_size, rve_size, entries, dt_list, failures, config)


def write_heatmaps(pmap: PropertyMap, outdir, header_lines=()) -> list:
    """(x, y, value) CSVs for rho_cp and the diagonal conductivities; returns the paths."""
    os.makedirs(outdir, exist_ok=True)
    fields = [("rho_cp", None, None)]
    fields += [(f"k_ss_{c}", None, i) for i, c in enumerate(("xx", "yy", "zz"))]
    for n, d in enumerate(pmap.dt_list):
        fields += [(f"k_dt{n}_{c}", d, i) for i, c in enumerate(("xx", "yy", "zz"))]
    paths = []
    for name, dt, comp in fields:
        rho, kap, ok = pmap.arrays(dt)
        path = os.path.join(outdir, f"heatmap_{name}.csv")
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            if dt is not None:
                fh.write(f"# dt={_fmt(dt)}\n")
            fh.write(f"x,y,{name}\n")
            for iy in range(pmap.grid_ny):
                for ix in range(pmap.grid_nx):
                    xc, yc = pmap.center(ix, iy)
                    v = (rho[ix, iy] if comp is None else kap[ix, iy, comp, comp]) if ok[ix, iy] else float("nan")
                    fh.write(f"{_fmt(xc)},{_fmt(yc)},{_fmt(v)}\n")
        paths.append(path)
    return paths
