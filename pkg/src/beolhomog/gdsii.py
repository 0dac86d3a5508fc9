"""
GDSII stream reader/writer for the subset needed to extract BEOL geometry.

Supported: BOUNDARY, BOX (read as a boundary), PATH with an explicit WIDTH
(converted to one rectangle per segment with square end caps), SREF, AREF.
TEXT, NODE, property records and PATHs without a width are skipped and
counted in ``LayoutDatabase.skipped``.

Coordinates are kept in database units inside the database; `flatten_layer`
scales to meters.
"""
from __future__ import annotations

import logging
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterator, Union

import numpy as np

from .errors import CycleError, GeometryError, ParseError, RangeError, UnsupportedError

log = logging.getLogger(__name__)

# record types
HEADER = 0x00
BGNLIB = 0x01
LIBNAME = 0x02
UNITS = 0x03
ENDLIB = 0x04
BGNSTR = 0x05
STRNAME = 0x06
ENDSTR = 0x07
BOUNDARY = 0x08
PATH = 0x09
SREF = 0x0A
AREF = 0x0B
TEXT = 0x0C
LAYER = 0x0D
DATATYPE = 0x0E
WIDTH = 0x0F
XY = 0x10
ENDEL = 0x11
SNAME = 0x12
COLROW = 0x13
NODE = 0x15
TEXTTYPE = 0x16
PRESENTATION = 0x17
STRING = 0x19
STRANS = 0x1A
MAG = 0x1B
ANGLE = 0x1C
REFLIBS = 0x1F
FONTS = 0x20
PATHTYPE = 0x21
GENERATIONS = 0x22
ATTRTABLE = 0x23
ELFLAGS = 0x26
NODETYPE = 0x2A
PROPATTR = 0x2B
PROPVALUE = 0x2C
BOX = 0x2D
BOXTYPE = 0x2E
PLEX = 0x2F
BGNEXTN = 0x30
ENDEXTN = 0x31
FORMAT = 0x36

# data types
NO_DATA = 0
BITARRAY = 1
INT2 = 2
INT4 = 3
REAL4 = 4
REAL8 = 5
ASCII = 6

_INT32_MIN = -(2**31)
_INT32_MAX = 2**31 - 1


# ---------------------------------------------------------------------------
# excess-64 reals


def encode_real8(value: float) -> bytes:
    """Encode a float as an 8-byte GDSII excess-64 real.

    Every finite double inside the excess-64 exponent range is represented
    exactly: the 56-bit base-16 mantissa always holds >= 53 significant bits.
    """
    value = float(value)
    if value == 0.0:
        return b"\x00" * 8
    if not math.isfinite(value):
        raise RangeError(f"cannot encode non-finite value {value!r}")
    sign = 0x80 if value < 0 else 0x00
    frac, exp2 = math.frexp(abs(value))  # abs(value) = frac * 2**exp2, frac in [0.5, 1)
    exp16 = -((-exp2) // 4)  # ceil(exp2 / 4)
    # frac * 2**53 is an exact integer; exp2 - 4*exp16 lies in [-3, 0]
    mantissa = int(frac * 2**53) << (exp2 - 4 * exp16 + 3)
    biased = exp16 + 64
    if not 0 <= biased <= 127:
        raise RangeError(f"value {value!r} outside excess-64 range")
    return bytes([sign | biased]) + mantissa.to_bytes(7, "big")


def decode_real8(data: bytes) -> float:
    if len(data) != 8:
        raise ValueError("real8 needs exactly 8 bytes")
    sign = -1.0 if data[0] & 0x80 else 1.0
    exp16 = (data[0] & 0x7F) - 64
    mantissa = int.from_bytes(data[1:], "big")
    if mantissa == 0:
        return 0.0
    # float(int) is correctly rounded; ldexp by a power of two is exact
    return sign * math.ldexp(float(mantissa), 4 * exp16 - 56)


# ---------------------------------------------------------------------------
# database types

Point = tuple  # (x, y) in database units


@dataclass(frozen=True)
class Boundary:
    layer: int
    datatype: int
    vertices: tuple  # ((x, y), ...) without the closing vertex


@dataclass(frozen=True)
class Sref:
    cell_name: str
    origin: Point
    rotation: int = 0
    mirror_x: bool = False
    magnification: float = 1.0


@dataclass(frozen=True)
class Aref:
    cell_name: str
    origin: Point
    cols: int
    rows: int
    col_pitch: Point
    row_pitch: Point
    rotation: int = 0
    mirror_x: bool = False
    magnification: float = 1.0


Element = Union[Boundary, Sref, Aref]


@dataclass(frozen=True)
class Cell:
    name: str
    elements: tuple = ()


@dataclass(frozen=True)
class LayoutDatabase:
    library_name: str
    unit_user: float  # meters per user unit
    unit_db: float  # meters per database unit
    cells: tuple = ()
    timestamps: tuple = (0,) * 12
    skipped: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.unit_db > 0:
            raise ValueError("unit_db must be positive")

    @property
    def cell_map(self) -> dict:
        return {c.name: c for c in self.cells}

    def cell(self, name: str) -> Cell:
        for c in self.cells:
            if c.name == name:
                return c
        raise KeyError(name)

    def top_cells(self) -> list:
        referenced = {e.cell_name for c in self.cells for e in c.elements if not isinstance(e, Boundary)}
        return [c.name for c in self.cells if c.name not in referenced]

    def layer_keys(self) -> list:
        return sorted({(e.layer, e.datatype) for c in self.cells for e in c.elements if isinstance(e, Boundary)})


@dataclass(frozen=True)
class PolygonSet:
    """Flattened polygons of one layer, vertices in meters, CCW."""

    layer_key: tuple
    polygons: tuple = ()

    def __len__(self):
        return len(self.polygons)

    def area(self) -> float:
        return float(sum(polygon_area(p) for p in self.polygons))

    def bbox(self):
        if not self.polygons:
            return None
        pts = np.vstack(self.polygons)
        return (*pts.min(axis=0), *pts.max(axis=0))

    def translated(self, dx: float, dy: float) -> "PolygonSet":
        shift = np.array([dx, dy])
        return PolygonSet(self.layer_key, tuple(p + shift for p in self.polygons))


# ---------------------------------------------------------------------------
# polygon helpers


def polygon_area(vertices) -> float:
    """Signed shoelace area, positive for CCW."""
    v = np.asarray(vertices, dtype=float)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _dedupe(vertices) -> list:
    out = []
    for p in vertices:
        if not out or p != out[-1]:
            out.append(p)
    while len(out) > 1 and out[0] == out[-1]:
        out.pop()
    return out


def _orient(a, b, c):
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _on_segment(a, b, p):
    return min(a[0], b[0]) <= p[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= p[1] <= max(a[1], b[1])


def _segments_intersect(a, b, c, d):
    o1, o2, o3, o4 = _orient(a, b, c), _orient(a, b, d), _orient(c, d, a), _orient(c, d, b)
    if ((o1 > 0) != (o2 > 0)) and o1 != 0 and o2 != 0 and ((o3 > 0) != (o4 > 0)) and o3 != 0 and o4 != 0:
        return True
    return (
        (o1 == 0 and _on_segment(a, b, c))
        or (o2 == 0 and _on_segment(a, b, d))
        or (o3 == 0 and _on_segment(c, d, a))
        or (o4 == 0 and _on_segment(c, d, b))
    )


def is_simple(vertices) -> bool:
    """True if the closed polygon has no self-intersections (O(n^2))."""
    n = len(vertices)
    if n < 3:
        return False
    edges = [(vertices[i], vertices[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        a, b = edges[i]
        c = edges[(i + 1) % n][1]
        # consecutive edges may only share their common vertex: reject fold-backs
        if _orient(a, b, c) == 0 and (a[0] - b[0]) * (c[0] - b[0]) + (a[1] - b[1]) * (c[1] - b[1]) > 0:
            return False
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue
            if _segments_intersect(a, b, *edges[j]):
                return False
    return True


def _check_boundary(vertices, offset=None) -> tuple:
    pts = _dedupe([tuple(p) for p in vertices])
    if len(set(pts)) < 3:
        raise GeometryError(f"polygon with fewer than 3 distinct vertices at offset {offset}")
    if not is_simple(pts):
        raise GeometryError(f"self-intersecting polygon at offset {offset}")
    return tuple(pts)


def path_to_boundaries(points, width) -> list:
    """Square-capped rectangle for every segment of a path centerline."""
    half = abs(width) / 2
    out = []
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        length = math.hypot(x1 - x0, y1 - y0)
        if length == 0:
            continue
        ux, uy = (x1 - x0) / length, (y1 - y0) / length
        nx, ny = -uy * half, ux * half
        sx, sy = x0 - ux * half, y0 - uy * half
        ex, ey = x1 + ux * half, y1 + uy * half
        verts = [(sx - nx, sy - ny), (ex - nx, ey - ny), (ex + nx, ey + ny), (sx + nx, sy + ny)]
        out.append(tuple(tuple(_tidy(c) for c in v) for v in verts))
    return out


def _tidy(c):
    return int(c) if float(c).is_integer() else c


# ---------------------------------------------------------------------------
# reading


def iter_records(data: bytes) -> Iterator[tuple]:
    """Yield ``(offset, record_type, data_type, payload)`` for every record."""
    pos, n = 0, len(data)
    while pos < n:
        if pos + 4 > n:
            raise ParseError("truncated record header", pos)
        length, rtype, dtype = struct.unpack_from(">HBB", data, pos)
        if length < 4 or length % 2:
            # zero padding after ENDLIB is tolerated by the caller
            raise ParseError(f"invalid record length {length}", pos)
        if pos + length > n:
            raise ParseError("truncated record", pos)
        if dtype > ASCII:
            raise ParseError(f"unknown data type code {dtype}", pos)
        yield pos, rtype, dtype, data[pos + 4 : pos + length]
        pos += length


def _decode_payload(dtype, payload, offset):
    if dtype == NO_DATA:
        return None
    if dtype in (BITARRAY, INT2):
        if len(payload) % 2:
            raise ParseError("odd int2 payload", offset)
        return list(struct.unpack(f">{len(payload) // 2}h", payload)) if dtype == INT2 else int.from_bytes(payload, "big")
    if dtype == INT4:
        if len(payload) % 4:
            raise ParseError("bad int4 payload", offset)
        return list(struct.unpack(f">{len(payload) // 4}i", payload))
    if dtype == REAL8:
        if len(payload) % 8:
            raise ParseError("bad real8 payload", offset)
        return [decode_real8(payload[i : i + 8]) for i in range(0, len(payload), 8)]
    if dtype == REAL4:
        raise ParseError("4-byte reals are not supported", offset)
    return payload.rstrip(b"\x00").decode("ascii", errors="replace")


_ELEMENT_STARTS = {BOUNDARY, PATH, SREF, AREF, TEXT, NODE, BOX}


def parse_gdsii(data: bytes) -> LayoutDatabase:
    """Parse a GDSII byte stream into a `LayoutDatabase`."""
    skipped: Counter = Counter()
    libname = None
    units = None
    timestamps = (0,) * 12
    cells: list = []
    cell_name = None
    cell_elements: list = []
    elem = None  # dict describing the element under construction
    seen_header = False
    ended = False

    for offset, rtype, dtype, payload in iter_records(data):
        if ended:
            break
        value = _decode_payload(dtype, payload, offset)
        if not seen_header:
            if rtype != HEADER:
                raise ParseError("stream does not begin with HEADER", offset)
            seen_header = True
            continue

        if elem is not None:
            if rtype == ENDEL:
                cell_elements.extend(_finish_element(elem, skipped))
                elem = None
            elif elem["kind"] in (TEXT, NODE):
                pass
            elif rtype == PROPATTR:
                skipped["PROPERTY"] += 1
            elif rtype == PROPVALUE:
                pass
            else:
                elem[rtype] = value
                elem.setdefault("_offsets", {})[rtype] = offset
            continue

        if rtype == BGNLIB:
            timestamps = tuple(value or ())
        elif rtype == LIBNAME:
            libname = value
        elif rtype == UNITS:
            if not value or len(value) != 2:
                raise ParseError("UNITS needs two reals", offset)
            units = value
        elif rtype == BGNSTR:
            if cell_name is not None:
                raise ParseError("nested BGNSTR", offset)
            cell_name = ""
            cell_elements = []
        elif rtype == STRNAME:
            cell_name = value
        elif rtype == ENDSTR:
            if cell_name is None:
                raise ParseError("ENDSTR without BGNSTR", offset)
            cells.append(Cell(cell_name, tuple(cell_elements)))
            cell_name = None
        elif rtype in _ELEMENT_STARTS:
            if cell_name is None:
                raise ParseError("element outside of a structure", offset)
            elem = {"kind": rtype, "_offset": offset}
        elif rtype == ENDLIB:
            ended = True
        elif rtype in (REFLIBS, FONTS, GENERATIONS, ATTRTABLE, FORMAT, PROPATTR, PROPVALUE):
            skipped["LIBRARY_RECORD"] += 1
        else:
            raise ParseError(f"unexpected record type 0x{rtype:02x}", offset)

    if not ended:
        raise ParseError("missing ENDLIB", len(data))
    if units is None:
        raise ParseError("missing UNITS record", len(data))
    if cell_name is not None or elem is not None:
        raise ParseError("unterminated structure", len(data))

    db_in_user, db_in_m = units
    if not db_in_m > 0 or not db_in_user > 0:
        raise ParseError("non-positive UNITS")
    if skipped:
        log.warning("skipped unsupported GDSII content: %s", dict(skipped))
    db = LayoutDatabase(
        library_name=libname or "",
        unit_user=db_in_m / db_in_user,
        unit_db=db_in_m,
        cells=tuple(cells),
        timestamps=timestamps,
        skipped=dict(skipped),
    )
    check_references(db)
    return db


def _strans(elem):
    flags = elem.get(STRANS, 0) or 0
    mirror = bool(flags & 0x8000)
    mag = (elem.get(MAG) or [1.0])[0]
    angle = (elem.get(ANGLE) or [0.0])[0]
    return mirror, mag, angle


def _finish_element(elem, skipped) -> list:
    kind = elem["kind"]
    offset = elem["_offset"]
    if kind in (TEXT, NODE):
        skipped["TEXT" if kind == TEXT else "NODE"] += 1
        return []
    xy = elem.get(XY)
    if xy is None:
        raise ParseError("element without XY", offset)
    pts = list(zip(xy[0::2], xy[1::2]))
    if kind in (BOUNDARY, BOX):
        layer = (elem.get(LAYER) or [None])[0]
        datatype = (elem.get(DATATYPE) or elem.get(BOXTYPE) or [0])[0]
        if layer is None:
            raise ParseError("boundary without LAYER", offset)
        if len(pts) < 4 or pts[0] != pts[-1]:
            raise ParseError("boundary polygon is not closed", offset)
        return [Boundary(layer, datatype, _check_boundary(pts[:-1], offset))]
    if kind == PATH:
        width = (elem.get(WIDTH) or [0])[0]
        if not width:
            skipped["PATH_NO_WIDTH"] += 1
            return []
        layer = (elem.get(LAYER) or [0])[0]
        datatype = (elem.get(DATATYPE) or [0])[0]
        return [Boundary(layer, datatype, _check_boundary(v, offset)) for v in path_to_boundaries(pts, width)]
    name = elem.get(SNAME)
    if not name:
        raise ParseError("reference without SNAME", offset)
    mirror, mag, angle = _strans(elem)
    rotation = angle % 360.0
    if kind == SREF:
        if len(pts) != 1:
            raise ParseError("SREF needs exactly one XY point", offset)
        return [Sref(name, pts[0], _rot_value(rotation), mirror, mag)]
    colrow = elem.get(COLROW)
    if not colrow or len(colrow) != 2 or len(pts) != 3:
        raise ParseError("AREF needs COLROW and three XY points", offset)
    cols, rows = colrow
    if cols <= 0 or rows <= 0:
        raise ParseError("AREF with non-positive COLROW", offset)
    (x0, y0), (xc, yc), (xr, yr) = pts
    col_pitch = (_tidy((xc - x0) / cols), _tidy((yc - y0) / cols))
    row_pitch = (_tidy((xr - x0) / rows), _tidy((yr - y0) / rows))
    return [Aref(name, pts[0], cols, rows, col_pitch, row_pitch, _rot_value(rotation), mirror, mag)]


def _rot_value(angle):
    return int(angle) if float(angle).is_integer() else angle


def check_references(db: LayoutDatabase) -> None:
    """Raise if a reference target is missing or the reference graph has a cycle."""
    names = db.cell_map
    graph = {
        c.name: [e.cell_name for e in c.elements if not isinstance(e, Boundary)] for c in db.cells
    }
    for src, targets in graph.items():
        for t in targets:
            if t not in names:
                raise ParseError(f"cell {src!r} references undefined cell {t!r}")
    state: dict = {}
    for root in graph:
        if state.get(root):
            continue
        stack = [(root, iter(graph[root]))]
        path = [root]
        state[root] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                state[node] = 2
                stack.pop()
                path.pop()
            elif state.get(nxt) == 1:
                raise CycleError(path[path.index(nxt) :] + [nxt])
            elif not state.get(nxt):
                state[nxt] = 1
                stack.append((nxt, iter(graph[nxt])))
                path.append(nxt)


def read_gdsii(path) -> LayoutDatabase:
    with open(path, "rb") as fh:
        return parse_gdsii(fh.read())


# ---------------------------------------------------------------------------
# writing


def _record(rtype, dtype, payload=b"") -> bytes:
    if len(payload) % 2:
        payload += b"\x00"
    length = 4 + len(payload)
    if length > 0xFFFF:
        raise RangeError("record payload too large")
    return struct.pack(">HBB", length, rtype, dtype) + payload


def _int2(rtype, *values):
    return _record(rtype, INT2, struct.pack(f">{len(values)}h", *values))


def _int4(rtype, values):
    ints = []
    for v in values:
        if float(v) != int(v):
            raise RangeError(f"non-integer coordinate {v!r}")
        v = int(v)
        if not _INT32_MIN <= v <= _INT32_MAX:
            raise RangeError(f"coordinate {v} exceeds signed 32-bit range")
        ints.append(v)
    return _record(rtype, INT4, struct.pack(f">{len(ints)}i", *ints))


def _ascii(rtype, text):
    return _record(rtype, ASCII, text.encode("ascii"))


def _ref_records(e) -> bytes:
    out = _ascii(SNAME, e.cell_name)
    if e.mirror_x or e.rotation or e.magnification != 1.0:
        out += _record(STRANS, BITARRAY, (0x8000 if e.mirror_x else 0).to_bytes(2, "big"))
        if e.magnification != 1.0:
            out += _record(MAG, REAL8, encode_real8(e.magnification))
        if e.rotation:
            out += _record(ANGLE, REAL8, encode_real8(e.rotation))
    return out


def _user_ratio(unit_db: float, unit_user: float) -> float:
    """Database units per user unit, nudged by a few ulps so the reader recovers
    ``unit_user`` exactly whenever some double ratio allows it."""
    r = unit_db / unit_user
    lo = hi = r
    for _ in range(8):
        for c in (lo, hi):
            if unit_db / c == unit_user:
                return c
        lo, hi = math.nextafter(lo, 0.0), math.nextafter(hi, math.inf)
    return r


def write_gdsii(db: LayoutDatabase) -> bytes:
    """Serialize a database; `parse_gdsii` inverts this exactly."""
    out = [_int2(HEADER, 600)]
    stamps = tuple(db.timestamps) if len(db.timestamps) == 12 else (0,) * 12
    out.append(_int2(BGNLIB, *stamps))
    out.append(_ascii(LIBNAME, db.library_name))
    out.append(_record(UNITS, REAL8, encode_real8(_user_ratio(db.unit_db, db.unit_user)) + encode_real8(db.unit_db)))
    for cell in db.cells:
        out.append(_int2(BGNSTR, *stamps))
        out.append(_ascii(STRNAME, cell.name))
        for e in cell.elements:
            if isinstance(e, Boundary):
                out.append(_record(BOUNDARY, NO_DATA))
                out.append(_int2(LAYER, e.layer))
                out.append(_int2(DATATYPE, e.datatype))
                closed = list(e.vertices) + [e.vertices[0]]
                out.append(_int4(XY, [c for p in closed for c in p]))
            elif isinstance(e, Sref):
                out.append(_record(SREF, NO_DATA))
                out.append(_ref_records(e))
                out.append(_int4(XY, e.origin))
            elif isinstance(e, Aref):
                out.append(_record(AREF, NO_DATA))
                out.append(_ref_records(e))
                out.append(_int2(COLROW, e.cols, e.rows))
                x0, y0 = e.origin
                pc = (round(x0 + e.cols * e.col_pitch[0]), round(y0 + e.cols * e.col_pitch[1]))
                pr = (round(x0 + e.rows * e.row_pitch[0]), round(y0 + e.rows * e.row_pitch[1]))
                out.append(_int4(XY, [x0, y0, *pc, *pr]))
            else:
                raise TypeError(f"cannot write element {e!r}")
            out.append(_record(ENDEL, NO_DATA))
        out.append(_record(ENDSTR, NO_DATA))
    out.append(_record(ENDLIB, NO_DATA))
    return b"".join(out)


def write_gdsii_file(db: LayoutDatabase, path) -> None:
    with open(path, "wb") as fh:
        fh.write(write_gdsii(db))


# ---------------------------------------------------------------------------
# flattening

_ROT = {0: ((1, 0), (0, 1)), 90: ((0, -1), (1, 0)), 180: ((-1, 0), (0, -1)), 270: ((0, 1), (-1, 0))}


def _placement_matrix(ref) -> np.ndarray:
    if ref.magnification != 1.0:
        raise UnsupportedError(f"magnification {ref.magnification} on reference to {ref.cell_name!r}")
    rot = ref.rotation % 360
    if rot not in _ROT:
        raise UnsupportedError(f"rotation {ref.rotation} is not a multiple of 90 degrees")
    m = np.array(_ROT[rot], dtype=float)
    if ref.mirror_x:
        m = m @ np.array([[1.0, 0.0], [0.0, -1.0]])
    return m


def _placements(ref) -> list:
    if isinstance(ref, Sref):
        return [np.asarray(ref.origin, dtype=float)]
    o = np.asarray(ref.origin, dtype=float)
    cp = np.asarray(ref.col_pitch, dtype=float)
    rp = np.asarray(ref.row_pitch, dtype=float)
    return [o + c * cp + r * rp for r in range(ref.rows) for c in range(ref.cols)]


def flatten_layer(db: LayoutDatabase, top_cell: str, layer_key) -> PolygonSet:
    """Flatten every polygon of ``layer_key`` below ``top_cell`` into meters."""
    layer_key = tuple(layer_key)
    cells = db.cell_map
    if top_cell not in cells:
        raise KeyError(f"unknown cell {top_cell!r}")
    check_references(db)
    cache: dict = {}

    def local(name) -> list:
        if name in cache:
            return cache[name]
        polys = []
        for e in cells[name].elements:
            if isinstance(e, Boundary):
                if (e.layer, e.datatype) == layer_key:
                    polys.append(np.asarray(e.vertices, dtype=float))
                continue
            child = local(e.cell_name)
            if not child:
                continue
            m = _placement_matrix(e)
            for origin in _placements(e):
                for p in child:
                    polys.append(p @ m.T + origin)
        cache[name] = polys
        return polys

    out = []
    for p in local(top_cell):
        p = p * db.unit_db
        if polygon_area(p) < 0:
            p = p[::-1].copy()
        out.append(p)
    return PolygonSet(layer_key, tuple(out))
