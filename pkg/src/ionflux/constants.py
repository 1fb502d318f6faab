"""Physical constants (CODATA 2018) used across the transport and partitioning code."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class PhysicalConstants:
    """Fixed physical constants plus the (configurable) absolute temperature.

    All values are CODATA 2018; the electroneutrality and partitioning
    formulas consume these rather than hard-coded literals so a single
    temperature override propagates everywhere.
    """

    F: float = 96485.33212          # Faraday constant [C/mol]
    R_gas: float = 8.314462618      # universal gas constant [J/(mol K)]
    T: float = 298.15               # absolute temperature [K]
    e: float = 1.602176634e-19      # elementary charge [C]
    eps0: float = 8.8541878128e-12  # vacuum permittivity [F/m]
    k_B: float = 1.380649e-23       # Boltzmann constant [J/K]

    def at_temperature(self, T: float) -> "PhysicalConstants":
        return PhysicalConstants(T=float(T))

    @property
    def thermal_voltage(self) -> float:
        """RT/F [V]; ~25.69 mV at 298.15 K."""
        return self.R_gas * self.T / self.F


CONSTANTS = PhysicalConstants()
