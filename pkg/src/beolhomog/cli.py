"""Command line front end: ``beol-homog <subcommand> [options]``.

Lengths on the command line are in micrometers, times in seconds. Every
option may also come from ``--config file.json`` (keys are the option names
with dashes replaced by underscores); explicit flags win.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .errors import (
    ConfigError,
    CycleError,
    FormatError,
    GeometryError,
    MapError,
    ParseError,
    RangeError,
    ResolutionError,
    SchemaError,
    SolverError,
    UnsupportedError,
)
from .gdsii import flatten_layer, read_gdsii, write_gdsii_file
from .homogenize import homogenize_rve, rve_ramp_study, steady_kappa
from .macro import (
    MacroMesh,
    MacroModel,
    MacroProblem,
    MapSource,
    Neumann,
    Robin,
    UniformSource,
    compare_homogenized_vs_resolved,
    read_flux_map,
    run_transient,
)
from .propmap import build_map, layout_polygons, read_map, write_heatmaps, write_map
from .rve import Window, build_rve, layer_dz
from .synthetic import laminate_stack, slab_layout, synthetic_layout, synthetic_stack
from .techstack import UM, read_tech_stack
from .vtk import write_field

log = logging.getLogger("beolhomog")

EXIT_OK, EXIT_CONFIG, EXIT_PARSE, EXIT_SOLVER = 0, 2, 3, 4
THREADS_ENV = "BEOL_HOMOG_THREADS"
# options that do not change results and are left out of the provenance header
_NOT_ECHOED = {"config", "out", "heatmaps", "threads", "verbose", "func", "command"}

# per-subcommand defaults; applied after --config so that file values take effect
DEFAULTS = {
    "inspect": {"top": None},
    "homogenize": {"top": None, "dt": [], "resolution": [0.1, 0.1], "rve_size": 10.0, "out": None},
    "map": {"top": None, "dt": [], "resolution": [0.1, 0.1], "rve_size": 10.0, "grid": [10, 10], "die": None,
            "heatmaps": None},
    "ramp": {"top": None, "gds": None, "tech": None, "center": None, "fixture": None, "rve_size": 10.0,
             "resolution": [0.1, 0.1], "t_ramp": [5e-4, 5e-5, 5e-6], "dt": None, "dT_max": 1.0},
    "simulate": {"map": None, "tech": None, "material": None, "die": None, "thickness": 5.4, "mesh": [20, 20, 4],
                 "flux": None, "flux_map": None, "h": 1e5, "t_amb": 300.0, "T0": 300.0, "dt": None, "t_end": None,
                 "steady": False, "transient_kappa": False},
    "validate": {"top": None, "window": None, "rve_sizes": [5.0, 10.0, 15.0], "resolution": [0.1, 0.1],
                 "macro_mesh": None, "q": 1e6, "h": 1e5, "t_amb": 300.0, "out": None},
    "synth": {"size": [50.0, 50.0], "seed": 0},
}
REQUIRED = {
    "inspect": ["gds"],
    "homogenize": ["gds", "tech", "center"],
    "map": ["gds", "tech", "out"],
    "ramp": ["out"],
    "simulate": ["out"],
    "validate": ["gds", "tech"],
    "synth": ["out_gds", "out_tech"],
}


def _floats(n=None):
    def conv(text):
        vals = [float(v) for v in str(text).replace(";", ",").split(",") if v.strip()]
        if n is not None and len(vals) != n:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
        return vals

    return conv


def _ints(n):
    def conv(text):
        vals = [int(v) for v in str(text).split(",")]
        if len(vals) != n:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated integers, got {text!r}")
        return vals

    return conv


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="beol-homog", description="Layout-driven thermal homogenization of BEOL stacks.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file with option values")
        sp.add_argument("--threads", type=int, default=None, help=f"worker processes (default ${THREADS_ENV} or 1)")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    s = common(sub.add_parser("inspect", help="summarize cells and layers of a GDSII file"))
    s.add_argument("gds", nargs="?")
    s.add_argument("--top")

    s = common(sub.add_parser("homogenize", help="homogenize one RVE"))
    s.add_argument("--gds")
    s.add_argument("--tech")
    s.add_argument("--top")
    s.add_argument("--center", type=_floats(2), help="RVE center x,y in um")
    s.add_argument("--rve-size", type=float, help="RVE edge in um")
    s.add_argument("--resolution", type=_floats(), help="voxel size dx,dy[,dz] in um; dz defaults to the coarsest layer-aligned spacing <= 0.1 um")
    s.add_argument("--dt", type=_floats(), help="comma-separated time steps in s")
    s.add_argument("--out", help="JSON output path")

    s = common(sub.add_parser("map", help="build a property map over the die"))
    s.add_argument("--gds")
    s.add_argument("--tech")
    s.add_argument("--top")
    s.add_argument("--grid", type=_ints(2), help="nx,ny")
    s.add_argument("--rve-size", type=float, help="um")
    s.add_argument("--resolution", type=_floats(), help="voxel size dx,dy[,dz] in um")
    s.add_argument("--dt", type=_floats(), help="s")
    s.add_argument("--die", type=_floats(4), help="x0,y0,x1,y1 in um (default: layout bbox)")
    s.add_argument("--out", help="map CSV path")
    s.add_argument("--heatmaps", help="directory for per-component heatmap CSVs")

    s = common(sub.add_parser("ramp", help="single-RVE gradient ramp study"))
    s.add_argument("--gds")
    s.add_argument("--tech")
    s.add_argument("--top")
    s.add_argument("--fixture", choices=["laminate"], help="use a built-in Al/SiO2 laminate instead of a layout")
    s.add_argument("--center", type=_floats(2), help="um")
    s.add_argument("--rve-size", type=float, help="um")
    s.add_argument("--resolution", type=_floats(), help="voxel size dx,dy[,dz] in um")
    s.add_argument("--t-ramp", type=_floats(), help="ramp durations in s")
    s.add_argument("--dt", type=float, help="step in s (default t_ramp/20)")
    s.add_argument("--dT-max", dest="dT_max", type=float, help="K across the RVE thickness")
    s.add_argument("--out", help="output directory")

    s = common(sub.add_parser("simulate", help="die-scale steady or transient solve"))
    s.add_argument("--map", help="property map CSV")
    s.add_argument("--tech", help="tech stack JSON for uniform-material runs")
    s.add_argument("--material", help="material name from --tech")
    s.add_argument("--die", type=_floats(4), help="x0,y0,x1,y1 in um (default: map die)")
    s.add_argument("--thickness", type=float, help="um")
    s.add_argument("--mesh", type=_ints(3), help="elements nx,ny,nz")
    s.add_argument("--flux", type=float, help="uniform bottom heat flux W/m^2")
    s.add_argument("--flux-map", help="bottom flux map CSV")
    s.add_argument("--h", type=float, help="top Robin coefficient W/(m^2 K)")
    s.add_argument("--t-amb", type=float, help="K")
    s.add_argument("--T0", type=float, help="initial temperature K")
    s.add_argument("--dt", type=float, help="s")
    s.add_argument("--t-end", type=float, help="s")
    s.add_argument("--steady", action="store_true", default=None)
    s.add_argument("--transient-kappa", action="store_true", default=None, help="use the map's kappa(dt)")
    s.add_argument("--out", help="output directory")

    s = common(sub.add_parser("validate", help="resolved vs homogenized comparison"))
    s.add_argument("--gds")
    s.add_argument("--tech")
    s.add_argument("--top")
    s.add_argument("--window", type=_floats(4), help="x0,y0,x1,y1 in um (default: layout bbox)")
    s.add_argument("--rve-sizes", type=_floats(), help="um")
    s.add_argument("--resolution", type=_floats(), help="voxel size dx,dy[,dz] in um")
    s.add_argument("--macro-mesh", type=_ints(3), help="homogenized mesh nx,ny,nz")
    s.add_argument("--q", type=float, help="bottom heat flux W/m^2")
    s.add_argument("--h", type=float)
    s.add_argument("--t-amb", type=float)
    s.add_argument("--out", help="report CSV path")

    s = common(sub.add_parser("synth", help="write a seeded synthetic layout and its tech stack"))
    s.add_argument("--size", type=_floats(2), help="die w,h in um")
    s.add_argument("--seed", type=int)
    s.add_argument("--out-gds")
    s.add_argument("--out-tech")
    return p


# ---------------------------------------------------------------------------
# configuration


def resolve_config(args) -> argparse.Namespace:
    """Merge flags over --config values over defaults; validate required keys."""
    cmd = args.command
    values = {k: v for k, v in vars(args).items() if k not in ("command",)}
    file_cfg = {}
    if args.config:
        try:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(file_cfg) - set(values)
        if unknown:
            raise ConfigError(f"unknown config keys for '{cmd}': {sorted(unknown)}")
    for key, default in DEFAULTS.get(cmd, {}).items():
        values.setdefault(key, None)
    for key in values:
        if values[key] is None and key in file_cfg:
            values[key] = file_cfg[key]
        if values[key] is None and key in DEFAULTS.get(cmd, {}):
            values[key] = DEFAULTS[cmd][key]
    if values.get("threads") is None:
        env = os.environ.get(THREADS_ENV)
        try:
            values["threads"] = int(env) if env else 1
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if values["threads"] < 1:
        raise ConfigError("--threads must be >= 1")
    missing = [k for k in REQUIRED.get(cmd, []) if values.get(k) in (None, "")]
    if missing:
        raise ConfigError(f"'{cmd}' needs: " + ", ".join("--" + k.replace("_", "-") for k in missing))
    ns = argparse.Namespace(command=cmd, **values)
    return ns


def provenance(cfg) -> dict:
    return {k: v for k, v in sorted(vars(cfg).items()) if k not in _NOT_ECHOED}


def header_lines(cfg) -> list:
    return [f"beol-homog {__version__} {cfg.command}", "config=" + json.dumps(provenance(cfg), sort_keys=True)]


def _resolution(cfg, stack):
    res = [float(v) for v in cfg.resolution]
    if len(res) == 2:
        res.append(layer_dz(stack) / UM)
    if len(res) != 3 or min(res) <= 0:
        raise ConfigError("--resolution needs two or three positive values")
    return [v * UM for v in res]


def _um(v):
    return None if v is None else [float(x) * UM for x in v]


def _load_layout(cfg):
    db = read_gdsii(cfg.gds)
    tops = [cfg.top] if cfg.top else db.top_cells()
    if len(tops) != 1:
        raise ConfigError(f"top cell is ambiguous, pass --top (candidates: {tops})")
    if tops[0] not in db.cell_map:
        raise ConfigError(f"top cell {tops[0]!r} not found")
    return db, tops[0]


# ---------------------------------------------------------------------------
# subcommands


def cmd_inspect(cfg, out=None):
    out = out or sys.stdout
    db = read_gdsii(cfg.gds)
    print(f"library {db.library_name!r}: {len(db.cells)} cells, db unit {db.unit_db:g} m, user unit {db.unit_user:g} m", file=out)
    if not db.cells:
        return EXIT_OK
    tops = [cfg.top] if cfg.top else db.top_cells()
    for key, count in sorted(db.skipped.items()):
        print(f"skipped {count} {key} record(s)", file=out)
    for top in tops:
        print(f"top cell {top}", file=out)
        for key in db.layer_keys():
            ps = flatten_layer(db, top, key)
            if not ps.polygons:
                continue
            x0, y0, x1, y1 = (v / UM for v in ps.bbox())
            print(f"  layer {key[0]}/{key[1]}: {len(ps.polygons)} polygons, bbox ({x0:.6g}, {y0:.6g}) - ({x1:.6g}, {y1:.6g}) um",
                  file=out)
    return EXIT_OK


def _props_json(props, grid):
    return {
        "rho_cp": props.rho_cp_eff,
        "kappa_ss": np.asarray(props.kappa_ss).tolist(),
        "kappa_ss_asymmetry": props.asymmetry,
        "kappa_transient": {repr(dt): np.asarray(k).tolist() for dt, k in props.kappa_transient.items()},
        "metal_fraction": props.metal_fraction,
        "voxels": list(grid.shape),
    }


def _kappa_line(k):
    return f"κ̄_xx={k[0, 0]:.4g}, κ̄_yy={k[1, 1]:.4g}, κ̄_zz={k[2, 2]:.4g}"


def cmd_homogenize(cfg, out=None):
    out = out or sys.stdout
    db, top = _load_layout(cfg)
    stack = read_tech_stack(cfg.tech)
    polys = layout_polygons(db, stack, top)
    w = Window.centered(cfg.center[0] * UM, cfg.center[1] * UM, cfg.rve_size * UM)
    grid = build_rve(polys, stack, w, _resolution(cfg, stack))
    props = homogenize_rve(grid, cfg.dt, window=w, rve_size=cfg.rve_size * UM)
    print(f"RVE {cfg.rve_size:g} um at ({cfg.center[0]:g}, {cfg.center[1]:g}) um, {grid.shape[0]}x{grid.shape[1]}x{grid.shape[2]} voxels, "
          f"metal fraction {props.metal_fraction:.4f}", file=out)
    print(f"rho_cp={props.rho_cp_eff:.6g} J/(m^3 K)", file=out)
    print("steady: " + _kappa_line(props.kappa_ss), file=out)
    for dt in props.kappa_transient:
        print(f"dt={dt:g} s: " + _kappa_line(props.kappa(dt)), file=out)
    if cfg.out:
        doc = {"header": header_lines(cfg), **_props_json(props, grid)}
        with open(cfg.out, "w") as fh:
            json.dump(doc, fh, indent=2)
    return EXIT_OK


def cmd_map(cfg, out=None):
    out = out or sys.stdout
    db, top = _load_layout(cfg)
    stack = read_tech_stack(cfg.tech)
    pmap = build_map(db, stack, top, tuple(cfg.grid), cfg.rve_size * UM, cfg.dt, _resolution(cfg, stack),
                     die=_um(cfg.die), threads=cfg.threads, config=provenance(cfg))
    write_map(pmap, cfg.out)
    print(f"wrote {cfg.out}: {pmap.grid_nx}x{pmap.grid_ny} cells, {len(pmap.failures)} failed", file=out)
    if cfg.heatmaps:
        paths = write_heatmaps(pmap, cfg.heatmaps, header_lines(cfg))
        print(f"wrote {len(paths)} heatmap files to {cfg.heatmaps}", file=out)
    return EXIT_OK


def _ramp_grid(cfg):
    if cfg.fixture == "laminate":
        stack = laminate_stack()
        res = _resolution(cfg, stack)
        size = cfg.rve_size * UM
        polys = {(1, 0): flatten_layer(slab_layout((cfg.rve_size, cfg.rve_size), (1, 0)), "TOP", (1, 0))}
        return build_rve(polys, stack, Window(0.0, 0.0, size, size), res)
    if not (cfg.gds and cfg.tech and cfg.center):
        raise ConfigError("ramp needs --gds, --tech and --center, or --fixture")
    db, top = _load_layout(cfg)
    stack = read_tech_stack(cfg.tech)
    w = Window.centered(cfg.center[0] * UM, cfg.center[1] * UM, cfg.rve_size * UM)
    return build_rve(layout_polygons(db, stack, top), stack, w, _resolution(cfg, stack))


def cmd_ramp(cfg, out=None):
    out = out or sys.stdout
    grid = _ramp_grid(cfg)
    kss = steady_kappa(grid)
    os.makedirs(cfg.out, exist_ok=True)
    print(f"{'t_ramp (s)':>12}{'overshoot':>12}{'max spread':>12}{'plateau':>14}", file=out)
    for t_ramp in cfg.t_ramp:
        dt = cfg.dt or t_ramp / 20
        series = rve_ramp_study(grid, t_ramp, dt, cfg.dT_max, kappa_ss=kss)
        series.write_csv(os.path.join(cfg.out, f"ramp_{t_ramp:g}.csv"), header_lines(cfg) + [f"t_ramp={t_ramp!r}; dt={dt!r}"])
        print(f"{t_ramp:>12g}{series.overshoot():>12.4%}{series.max_disagreement():>12.4%}{series.plateau:>14.6g}", file=out)
    return EXIT_OK


def cmd_simulate(cfg, out=None):
    out = out or sys.stdout
    if cfg.map:
        pmap = read_map(cfg.map)
        source = MapSource(pmap, transient=bool(cfg.transient_kappa))
        die = _um(cfg.die) or [pmap.die_origin[0], pmap.die_origin[1], pmap.die_origin[0] + pmap.die_size[0],
                               pmap.die_origin[1] + pmap.die_size[1]]
    elif cfg.tech and cfg.material:
        stack = read_tech_stack(cfg.tech)
        if cfg.material not in stack.materials:
            raise ConfigError(f"material {cfg.material!r} not in tech stack")
        source = UniformSource(stack.materials[cfg.material])
        die = _um(cfg.die)
        if die is None:
            raise ConfigError("uniform-material runs need --die")
    else:
        raise ConfigError("simulate needs --map, or --tech with --material")
    mesh = MacroMesh((die[0], die[1], 0.0), (die[2] - die[0], die[3] - die[1], cfg.thickness * UM), tuple(cfg.mesh))
    if cfg.flux_map:
        bottom = Neumann(read_flux_map(cfg.flux_map))
    elif cfg.flux is not None:
        bottom = Neumann(float(cfg.flux))
    else:
        raise ConfigError("simulate needs --flux or --flux-map")
    bcs = {"zmin": bottom, "zmax": Robin(cfg.h, cfg.t_amb)}
    os.makedirs(cfg.out, exist_ok=True)
    head = header_lines(cfg)
    # VTK titles hold a single short line, so the full config goes to a sidecar
    with open(os.path.join(cfg.out, "config.json"), "w") as fh:
        json.dump({"header": head[0], "config": provenance(cfg)}, fh, indent=2, sort_keys=True)
    if cfg.steady:
        problem = MacroProblem(mesh, source, bcs, T0=cfg.T0)
        model = MacroModel(problem)
        field = model.solve_steady()
        write_field(os.path.join(cfg.out, "steady.vtk"), mesh, field.values, title=head[0])
        vol = model.lumped_volume
        print(f"steady: T_max={field.values.max():.2f} K, T_avg={vol @ field.values / vol.sum():.2f} K", file=out)
        return EXIT_OK
    if cfg.dt is None or cfg.t_end is None:
        raise ConfigError("transient runs need --dt and --t-end (or pass --steady)")
    problem = MacroProblem(mesh, source, bcs, dt=cfg.dt, t_end=cfg.t_end, T0=cfg.T0)
    res = run_transient(problem)
    res.write_csv(os.path.join(cfg.out, "series.csv"), head)
    write_field(os.path.join(cfg.out, "final.vtk"), mesh, res.field.values, title=head[0])
    print(f"t={res.time[-1]:g} s: T_max={res.T_max[-1]:.2f} K, T_avg={res.T_avg[-1]:.2f} K, "
          f"max energy residual {res.energy_residual.max():.2e}", file=out)
    return EXIT_OK


def cmd_validate(cfg, out=None):
    out = out or sys.stdout
    from .macro import validation_bcs
    from .propmap import layout_extent

    db, top = _load_layout(cfg)
    stack = read_tech_stack(cfg.tech)
    polys = layout_polygons(db, stack, top)
    win = _um(cfg.window) or layout_extent(polys)
    if win is None:
        raise ConfigError("empty layout: pass --window")
    w = Window(*win)
    report = compare_homogenized_vs_resolved(polys, stack, w, [s * UM for s in cfg.rve_sizes], _resolution(cfg, stack),
                                             macro_shape=tuple(cfg.macro_mesh) if cfg.macro_mesh else None,
                                             bcs=validation_bcs(cfg.q, cfg.h, cfg.t_amb), threads=cfg.threads)
    print(report.format(), file=out)
    if cfg.out:
        report.write_csv(cfg.out, header_lines(cfg))
    return EXIT_OK


def cmd_synth(cfg, out=None):
    out = out or sys.stdout
    db = synthetic_layout(tuple(cfg.size), seed=cfg.seed)
    write_gdsii_file(db, cfg.out_gds)
    with open(cfg.out_tech, "w") as fh:
        json.dump(synthetic_stack().to_dict(), fh, indent=2)
    print(f"wrote {cfg.out_gds} ({len(db.cells)} cells) and {cfg.out_tech}", file=out)
    return EXIT_OK


COMMANDS = {
    "inspect": cmd_inspect,
    "homogenize": cmd_homogenize,
    "map": cmd_map,
    "ramp": cmd_ramp,
    "simulate": cmd_simulate,
    "validate": cmd_validate,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[cfg.command](cfg)
    except (ConfigError, SchemaError, ResolutionError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, FormatError, CycleError, GeometryError, UnsupportedError, RangeError) as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (SolverError, MapError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
