"""Legacy-format VTK STRUCTURED_POINTS output for grids and nodal fields."""
from __future__ import annotations

import numpy as np


def _header(title, shape, spacing, origin):
    nx, ny, nz = shape
    return [
        "# vtk DataFile Version 3.0",
        title.replace("\n", " ")[:255],
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        f"DIMENSIONS {nx + 1} {ny + 1} {nz + 1}",
        "ORIGIN {:.17g} {:.17g} {:.17g}".format(*origin),
        "SPACING {:.17g} {:.17g} {:.17g}".format(*spacing),
    ]


def write_structured_points(path, shape, spacing, origin, cell_data=None, point_data=None, title="beolhomog"):
    """Write cell and/or point scalars; arrays are flattened x-fastest."""
    lines = _header(title, shape, spacing, origin)
    n_cells = int(np.prod(shape))
    n_points = int(np.prod(np.asarray(shape) + 1))
    if cell_data:
        lines.append(f"CELL_DATA {n_cells}")
        for name, values in cell_data.items():
            values = np.asarray(values).ravel(order="F")
            kind = "int" if np.issubdtype(values.dtype, np.integer) else "double"
            lines += [f"SCALARS {name} {kind} 1", "LOOKUP_TABLE default"]
            lines += [" ".join(f"{v:.17g}" if kind == "double" else str(v) for v in values)]
    if point_data:
        lines.append(f"POINT_DATA {n_points}")
        for name, values in point_data.items():
            values = np.asarray(values, dtype=float).ravel()
            if values.size != n_points:
                raise ValueError(f"point field {name!r} has {values.size} values, expected {n_points}")
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [" ".join(f"{v:.17g}" for v in values)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_material_grid(path, grid):
    write_structured_points(path, grid.shape, grid.spacing, grid.origin, cell_data={"material": grid.voxel_material})


def write_field(path, grid_or_mesh, values, name="temperature", title="beolhomog"):
    """Nodal field on a MaterialGrid or uniform MacroMesh (x-fastest node order)."""
    write_structured_points(path, grid_or_mesh.shape, grid_or_mesh.spacing, grid_or_mesh.origin, point_data={name: values},
                            title=title)


def read_structured_points(path) -> dict:
    """Minimal reader for files written by this module (used in tests)."""
    with open(path) as fh:
        tokens = fh.read().split("\n")
    out = {"cell": {}, "point": {}}
    section = None
    i = 0
    while i < len(tokens):
        line = tokens[i].strip()
        if line.startswith("DIMENSIONS"):
            out["dimensions"] = tuple(int(v) for v in line.split()[1:])
        elif line.startswith("SPACING"):
            out["spacing"] = tuple(float(v) for v in line.split()[1:])
        elif line.startswith("ORIGIN"):
            out["origin"] = tuple(float(v) for v in line.split()[1:])
        elif line.startswith("CELL_DATA"):
            section = "cell"
        elif line.startswith("POINT_DATA"):
            section = "point"
        elif line.startswith("SCALARS"):
            name = line.split()[1]
            out[section][name] = np.array([float(v) for v in tokens[i + 2].split()])
            i += 2
        i += 1
    return out
