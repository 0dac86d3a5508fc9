"""Layout-driven computational homogenization of BEOL thermal properties."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    BeolHomogError,
    ConfigError,
    CycleError,
    FormatError,
    GeometryError,
    MapError,
    ParseError,
    RangeError,
    ResolutionError,
    SchemaError,
    SingularError,
    SolverError,
    UnsupportedError,
)
from .materials import AL, SIO2, TABLE, W, Material  # noqa: E402
from .gdsii import LayoutDatabase, PolygonSet, flatten_layer, parse_gdsii, read_gdsii, write_gdsii  # noqa: E402
from .techstack import TechStack, parse_tech_stack, read_tech_stack  # noqa: E402
from .rve import MaterialGrid, Window, build_rve, voxelize  # noqa: E402
from .fem import MicroBC, ThermalField, solve_steady, step_transient  # noqa: E402
from .homogenize import (  # noqa: E402
    HomogenizedProps,
    UpscaledState,
    effective_heat_capacity,
    homogenize_rve,
    rve_ramp_study,
    sensitivity_fields,
    steady_kappa,
    transient_kappa,
    upscale,
)
from .propmap import PropertyMap, build_map, interpolate, read_map, write_map  # noqa: E402
from .macro import (  # noqa: E402
    FluxMap,
    MacroMesh,
    MacroProblem,
    compare_homogenized_vs_resolved,
    run_resolved,
    run_transient,
    solve_steady_macro,
    step_macro,
)
