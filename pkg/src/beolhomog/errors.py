"""Exception hierarchy shared by the layout, solver and map modules."""


class BeolHomogError(Exception):
    """Base class for all package errors."""


class ParseError(BeolHomogError):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class CycleError(BeolHomogError):
    def __init__(self, cycle):
        self.cycle = list(cycle)
        super().__init__("cyclic cell reference: " + " -> ".join(self.cycle))


class RangeError(BeolHomogError):
    pass


class SchemaError(BeolHomogError):
    pass


class UnsupportedError(BeolHomogError):
    pass


class GeometryError(BeolHomogError):
    pass


class ResolutionError(BeolHomogError):
    pass


class SolverError(BeolHomogError):
    def __init__(self, message, residuals=None, columns=None):
        self.residuals = list(residuals) if residuals is not None else []
        self.columns = list(columns) if columns is not None else []  # unconverged batch columns
        super().__init__(message)


class SingularError(SolverError):
    pass


class MapError(BeolHomogError):
    pass


class FormatError(BeolHomogError):
    pass


class ConfigError(BeolHomogError):
    pass
