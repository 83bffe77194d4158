"""Thermal desorption spectra: FEM simulation, synthetic data and neural-network trap inference."""
__version__ = "0.1.0"

from .fem import ModelVariant, NonConvergence, NumericalParams, Spectrum, mass_audit, simulate_tds
from .transport import MaterialParams, TestParams, TrapSpec

__all__ = [
    "MaterialParams",
    "ModelVariant",
    "NonConvergence",
    "NumericalParams",
    "Spectrum",
    "TestParams",
    "TrapSpec",
    "mass_audit",
    "simulate_tds",
]
