"""Seeded synthetic Manhattan BEOL layouts and a matching tech stack.

Geometry snaps to a 0.5 um grid so voxelizations at 0.5/0.25/0.1 um are
exact. The stack is a five-metal Al/W/SiO2 stack of 5.4 um total height
with Sky130-style GDS layer numbers.
"""
from __future__ import annotations

import numpy as np

from .gdsii import Aref, Boundary, Cell, LayoutDatabase, Sref
from .materials import AL, SIO2, W
from .techstack import Layer, TechStack, UM

DB_PER_UM = 1000  # 1 nm database unit

# name, gds layer, datatype, z_bottom um, thickness um, material
STACK_LAYERS = [
    ("mcon", 67, 44, 0.0, 0.4, "W"),
    ("met1", 68, 20, 0.4, 0.4, "Al"),
    ("via", 68, 44, 0.8, 0.4, "W"),
    ("met2", 69, 20, 1.2, 0.4, "Al"),
    ("via2", 69, 44, 1.6, 0.4, "W"),
    ("met3", 70, 20, 2.0, 0.8, "Al"),
    ("via3", 70, 44, 2.8, 0.4, "W"),
    ("met4", 71, 20, 3.2, 0.8, "Al"),
    ("via4", 71, 44, 4.0, 0.4, "W"),
    ("met5", 72, 20, 4.4, 1.0, "Al"),
]
TOTAL_THICKNESS_UM = 5.4

METAL_KEYS = {name: (l, d) for name, l, d, *_ in STACK_LAYERS}


def synthetic_stack() -> TechStack:
    layers = tuple(Layer(n, l, d, z * UM, t * UM, m) for n, l, d, z, t, m in STACK_LAYERS)
    return TechStack(layers, {"Al": AL, "W": W, "SiO2": SIO2}, "SiO2", TOTAL_THICKNESS_UM * UM)


def _rect(key, x0, y0, x1, y1) -> Boundary:
    c = [int(round(v * DB_PER_UM)) for v in (x0, y0, x1, y1)]
    return Boundary(key[0], key[1], ((c[0], c[1]), (c[2], c[1]), (c[2], c[3]), (c[0], c[3])))


def _db(um) -> int:
    return int(round(um * DB_PER_UM))


def _tile_cell() -> Cell:
    """5 x 2.5 um standard-cell-like tile: M1 rails, one finger, one contact."""
    m1, mcon = METAL_KEYS["met1"], METAL_KEYS["mcon"]
    return Cell(
        "STD_TILE",
        (
            _rect(m1, 0.0, 0.0, 5.0, 0.5),
            _rect(m1, 0.0, 2.0, 5.0, 2.5),
            _rect(m1, 1.5, 0.5, 2.0, 2.0),
            _rect(mcon, 1.5, 1.0, 2.0, 1.5),
            _rect(mcon, 3.5, 0.0, 4.0, 0.5),
        ),
    )


def _via_cell(name, via_key) -> Cell:
    return Cell(name, (_rect(via_key, 0.0, 0.0, 0.5, 0.5),))


def _snap(v, step=0.5):
    return float(np.round(v / step) * step)


def synthetic_layout(size_um=(50.0, 50.0), seed: int = 0, top: str = "TOP") -> LayoutDatabase:
    """Random routed BEOL layout on a die of ``size_um`` (anchored at the origin)."""
    rng = np.random.default_rng(seed)
    W_, H_ = size_um
    elements = []

    # standard-cell blocks as arrays of tiles, some mirrored rows
    n_blocks = max(1, int(W_ * H_ / 250))
    for _ in range(n_blocks):
        cols = int(rng.integers(1, max(2, int(W_ // 5) // 2) + 1))
        rows = int(rng.integers(1, max(2, int(H_ // 2.5) // 2) + 1))
        x0 = _snap(rng.uniform(0, max(W_ - 5 * cols, 0)))
        y0 = _snap(rng.uniform(0, max(H_ - 2.5 * rows, 0)))
        if rng.random() < 0.3 and rows >= 1:
            # x-mirrored row: placed at the top edge so the flip lands inside the block
            elements.append(Aref("STD_TILE", (_db(x0), _db(y0 + 2.5 * rows)), cols, rows, (_db(5.0), 0), (0, _db(-2.5)), 0, True))
        else:
            elements.append(Aref("STD_TILE", (_db(x0), _db(y0)), cols, rows, (_db(5.0), 0), (0, _db(2.5))))

    def lines(key, horizontal, count, widths, min_len, full=False):
        out = []
        span, cross = (W_, H_) if horizontal else (H_, W_)
        for _ in range(count):
            w = float(rng.choice(widths))
            c = _snap(rng.uniform(0, cross - w))
            if full:
                a, b = 0.0, span
            else:
                length = _snap(rng.uniform(min_len, max(min_len, span)))
                a = _snap(rng.uniform(0, max(span - length, 0)))
                b = min(span, a + length)
            r = (a, c, b, c + w) if horizontal else (c, a, c + w, b)
            out.append(r)
            elements.append(_rect(key, *r))
        return out

    scale = max(W_, H_) / 50.0
    m2 = lines(METAL_KEYS["met2"], False, int(24 * scale), [0.5], 5.0)
    m3 = lines(METAL_KEYS["met3"], True, int(30 * scale), [0.5, 1.0], 10.0)
    m4 = lines(METAL_KEYS["met4"], False, int(10 * scale), [1.0], 10.0)
    # paired horizontal power straps on the top metal
    m5 = []
    y = 10.0
    while y + 3.5 <= H_:
        for yy in (y, y + 2.0):
            r = (0.0, yy, W_, yy + 1.5)
            m5.append(r)
            elements.append(_rect(METAL_KEYS["met5"], *r))
        y += 25.0

    cells = [_tile_cell()]
    for name, lower, upper, via in (("VIA2", m2, m3, "via2"), ("VIA3", m3, m4, "via3"), ("VIA4", m4, m5, "via4")):
        cells.append(_via_cell(name, METAL_KEYS[via]))
        for a in lower:
            for b in upper:
                x0, y0 = max(a[0], b[0]), max(a[1], b[1])
                x1, y1 = min(a[2], b[2]), min(a[3], b[3])
                if x1 - x0 >= 0.5 and y1 - y0 >= 0.5 and rng.random() < 0.6:
                    elements.append(Sref(name, (_db(x0), _db(y0))))
    # a rotated via-1 landing pattern exercising 90 degree placements
    cells.append(Cell("VIA1_PAIR", (_rect(METAL_KEYS["via"], 0.0, 0.0, 0.5, 0.5), _rect(METAL_KEYS["via"], 1.0, 0.0, 1.5, 0.5))))
    for a in m2:
        ymid = _snap(0.5 * (a[1] + a[3]))
        if rng.random() < 0.5 and ymid + 1.5 <= H_:
            elements.append(Sref("VIA1_PAIR", (_db(a[2]), _db(ymid)), 90))
    cells.append(Cell(top, tuple(elements)))
    return LayoutDatabase("SYNTH", 1e-6, 1e-9, tuple(cells))


def slab_layout(size_um, layer_key, region_um=None, top: str = "TOP") -> LayoutDatabase:
    """Single rectangle on one layer; ``region_um`` defaults to the whole die."""
    x0, y0, x1, y1 = region_um or (0.0, 0.0, *size_um)
    return LayoutDatabase("SLAB", 1e-6, 1e-9, (Cell(top, (_rect(layer_key, x0, y0, x1, y1),)),))


def laminate_stack(metal="Al", metal_fraction_um=2.7, total_um=5.4) -> TechStack:
    """Two-layer stack: metal from z=0 to ``metal_fraction_um`` over SiO2 background."""
    layers = (Layer("slab", 1, 0, 0.0, metal_fraction_um * UM, metal),)
    return TechStack(layers, {"Al": AL, "W": W, "SiO2": SIO2}, "SiO2", total_um * UM)
