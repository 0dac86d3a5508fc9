"""JSON tech-stack description: layer elevations, thicknesses and materials."""
from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import SchemaError
from .materials import Material

UM = 1e-6


@dataclass(frozen=True)
class Layer:
    name: str
    gds_layer: int
    gds_datatype: int
    z_bottom: float  # m
    thickness: float  # m
    material: str

    @property
    def key(self) -> tuple:
        return (self.gds_layer, self.gds_datatype)

    @property
    def z_top(self) -> float:
        return self.z_bottom + self.thickness


@dataclass(frozen=True)
class TechStack:
    layers: tuple
    materials: dict  # name -> Material
    background: str
    total_thickness: float  # m

    def __post_init__(self):
        if self.background not in self.materials:
            raise SchemaError(f"background material {self.background!r} is not declared")
        for layer in self.layers:
            if not layer.thickness > 0:
                raise SchemaError(f"layer {layer.name!r}: thickness must be positive")
            if layer.material not in self.materials:
                raise SchemaError(f"layer {layer.name!r} references undeclared material {layer.material!r}")
        top = max((l.z_top for l in self.layers), default=0.0)
        if self.total_thickness < top * (1 - 1e-12):
            raise SchemaError(f"total_thickness {self.total_thickness} below top of stack {top}")
        for i, a in enumerate(self.layers):
            for b in self.layers[i + 1 :]:
                if a.key == b.key and a.z_bottom < b.z_top and b.z_bottom < a.z_top:
                    raise SchemaError(f"layers {a.name!r} and {b.name!r} share {a.key} and overlap in z")

    @property
    def background_material(self) -> Material:
        return self.materials[self.background]

    def to_dict(self) -> dict:
        return {
            "units": "um",
            "total_thickness": self.total_thickness / UM,
            "background": self.background,
            "materials": {
                name: {"kappa": m.kappa, "rho_g_cm3": m.rho / 1000.0, "cp": m.cp}
                for name, m in self.materials.items()
            },
            "layers": [
                {
                    "name": l.name,
                    "gds_layer": l.gds_layer,
                    "gds_datatype": l.gds_datatype,
                    "z_bottom": l.z_bottom / UM,
                    "thickness": l.thickness / UM,
                    "material": l.material,
                }
                for l in self.layers
            ],
        }


def _num(obj, key, where):
    try:
        v = obj[key]
    except KeyError:
        raise SchemaError(f"{where}: missing {key!r}") from None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SchemaError(f"{where}: {key!r} must be a number")
    return float(v)


def stack_from_dict(doc: dict) -> TechStack:
    if not isinstance(doc, dict):
        raise SchemaError("tech stack must be a JSON object")
    if doc.get("units", "um") != "um":
        raise SchemaError("only 'um' units are supported")
    mats_in = doc.get("materials")
    if not isinstance(mats_in, dict) or not mats_in:
        raise SchemaError("'materials' must be a non-empty object")
    materials = {}
    for name, m in mats_in.items():
        where = f"material {name!r}"
        kappa, rho, cp = _num(m, "kappa", where), _num(m, "rho_g_cm3", where), _num(m, "cp", where)
        if min(kappa, rho, cp) <= 0:
            raise SchemaError(f"{where}: properties must be positive")
        materials[name] = Material(name, kappa, rho * 1000.0, cp)
    layers = []
    for i, l in enumerate(doc.get("layers", [])):
        where = f"layer #{i}"
        try:
            name = str(l["name"])
            material = l["material"]
            gl, gd = int(l["gds_layer"]), int(l["gds_datatype"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{where}: {exc}") from None
        thickness = _num(l, "thickness", where)
        if thickness <= 0:
            raise SchemaError(f"layer {name!r}: thickness must be positive")
        if material not in materials:
            raise SchemaError(f"layer {name!r} references undeclared material {material!r}")
        layers.append(Layer(name, gl, gd, _num(l, "z_bottom", where) * UM, thickness * UM, material))
    if "background" not in doc:
        raise SchemaError("missing 'background'")
    top = max((l.z_top for l in layers), default=0.0)
    total = _num(doc, "total_thickness", "stack") * UM if "total_thickness" in doc else top
    if total <= 0:
        raise SchemaError("total_thickness must be positive")
    return TechStack(tuple(layers), materials, doc["background"], total)


def parse_tech_stack(text: str) -> TechStack:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}") from None
    return stack_from_dict(doc)


def read_tech_stack(path) -> TechStack:
    with open(path) as fh:
        return parse_tech_stack(fh.read())
