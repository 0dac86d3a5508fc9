"""Isotropic material records and the reference property table."""
from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Material:
    """Isotropic thermal material.

    kappa in W/(m K), rho in kg/m^3, cp in J/(kg K).
    """

    name: str
    kappa: float
    rho: float
    cp: float

    def __post_init__(self):
        for field in ("kappa", "rho", "cp"):
            if not getattr(self, field) > 0:
                raise ValueError(f"material {self.name!r}: {field} must be > 0")

    @property
    def rho_cp(self) -> float:
        return self.rho * self.cp

    def scaled(self, kappa=1.0, rho=1.0, cp=1.0) -> "Material":
        return Material(self.name, self.kappa * kappa, self.rho * rho, self.cp * cp)


# densities given in g/cm^3 in the source table; stored in kg/m^3
AL = Material("Al", 174.0, 2.70e3, 900.0)
W = Material("W", 62.0, 19.25e3, 134.0)
SIO2 = Material("SiO2", 1.07, 2.20e3, 1000.0)

TABLE = {m.name: m for m in (AL, W, SIO2)}
