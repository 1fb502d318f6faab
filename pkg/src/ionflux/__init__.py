"""Multi-ion nanofiltration transport: continuum solver, calibration, and a
physics-constrained neural surrogate."""

__version__ = "0.1.0"
