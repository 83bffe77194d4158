"""Scalar physics kernels for hydrogen diffusion and trapping.

Energies are in J/mol, temperatures in K, concentrations in mol/m^3 and
site densities in sites/m^3. Every function here is pure.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

R = 8.314  # J/(mol K)
N_A = 6.022e23  # 1/mol
M_H = 1.008  # g/mol

DEBYE_FREQUENCY = 1.0e13


@dataclass(frozen=True)
class MaterialParams:
    D0: float = 7.23e-8
    E_L: float = 5690.0
    N_L: float = 5.1e29
    C_L0: float = 0.06
    M_M: float = 55.847
    rho_M: float = 7.847
    nu: float = DEBYE_FREQUENCY

    def __post_init__(self):
        for name in ("D0", "E_L", "N_L", "C_L0", "M_M", "rho_M", "nu"):
            if not getattr(self, name) > 0:
                raise ValueError(f"MaterialParams.{name} must be > 0, got {getattr(self, name)!r}")
        if self.theta_L0 >= 1.0:
            raise ValueError(f"initial lattice occupancy {self.theta_L0:.3g} must be < 1")

    @property
    def N_L_mol(self) -> float:
        """Lattice site density in mol/m^3."""
        return self.N_L / N_A

    @property
    def theta_L0(self) -> float:
        return self.C_L0 * N_A / self.N_L


@dataclass(frozen=True)
class TrapSpec:
    """One trap type.

    ``delta_H`` is the (negative) binding energy; the de-trapping barrier is
    ``E_d = E_t - delta_H``.
    """

    delta_H: float
    N_T: float
    E_t: float = 5690.0
    nu_t: float = DEBYE_FREQUENCY
    nu_d: float = DEBYE_FREQUENCY

    def __post_init__(self):
        if not self.delta_H < 0:
            raise ValueError(f"trap binding energy must be negative, got {self.delta_H!r} J/mol")
        if not self.N_T > 0:
            raise ValueError(f"trap density must be positive, got {self.N_T!r} sites/m^3")
        if not (self.nu_t > 0 and self.nu_d > 0):
            raise ValueError("trap attempt frequencies must be positive")

    @property
    def E_d(self) -> float:
        return self.E_t - self.delta_H

    @property
    def N_T_mol(self) -> float:
        return self.N_T / N_A

    @classmethod
    def from_mol(cls, delta_H: float, N_T_mol: float, mat: MaterialParams | None = None) -> "TrapSpec":
        """Build a trap from a density in mol/m^3, taking E_t and nu from ``mat``."""
        mat = mat or MaterialParams()
        return cls(delta_H=delta_H, N_T=N_T_mol * N_A, E_t=mat.E_L, nu_t=mat.nu, nu_d=mat.nu)


@dataclass(frozen=True)
class TestParams:
    L: float = 0.0063
    t_rest: float = 2700.0
    phi: float = 100.0 / 3600.0
    T_min: float = 293.15
    T_max: float = 873.15

    # keep pytest from collecting this class
    __test__ = False

    def __post_init__(self):
        if not self.L > 0:
            raise ValueError(f"L (sample thickness) must be > 0, got {self.L!r}")
        if not self.t_rest >= 0:
            raise ValueError(f"t_rest (rest time) must be >= 0, got {self.t_rest!r}")
        if not self.phi > 0:
            raise ValueError(f"phi (heating rate) must be > 0, got {self.phi!r}")
        if not self.T_max > self.T_min:
            raise ValueError(f"T_max ({self.T_max}) must exceed T_min ({self.T_min})")

    @property
    def t_test(self) -> float:
        """Duration of the heating ramp in s."""
        return (self.T_max - self.T_min) / self.phi


def temperature_at(t: float, test: TestParams) -> float:
    """Sample temperature at time ``t``: held at T_min during rest, then ramped, capped at T_max."""
    return min(test.T_min + test.phi * max(t - test.t_rest, 0.0), test.T_max)


def lattice_diffusivity(T: float, mat: MaterialParams) -> float:
    return mat.D0 * math.exp(-mat.E_L / (R * T))


def trap_rate_k(T: float, trap: TrapSpec) -> float:
    """Trapping rate (lattice -> trap), 1/s."""
    return trap.nu_t * math.exp(-trap.E_t / (R * T))


def trap_rate_p(T: float, trap: TrapSpec) -> float:
    """De-trapping rate (trap -> lattice), 1/s."""
    return trap.nu_d * math.exp(-trap.E_d / (R * T))


def equilibrium_constant(T: float, trap: TrapSpec) -> float:
    return trap.nu_t / trap.nu_d * math.exp(-trap.delta_H / (R * T))


def equilibrium_trap_occupancy(theta_L: float, K_T: float) -> float:
    """Trap occupancy in local equilibrium with lattice occupancy ``theta_L``."""
    return theta_L * K_T / (1.0 + (K_T - 1.0) * theta_L)


# g/cm^3 -> g/m^3
_G_PER_CM3 = 1.0e6


def concentration_to_wppm(C: float, mat: MaterialParams) -> float:
    """Hydrogen concentration (mol/m^3) to weight parts per million of metal."""
    if C < 0:
        raise ValueError(f"concentration must be non-negative, got {C!r}")
    return C * M_H / (mat.rho_M * _G_PER_CM3) * 1.0e6


def wppm_to_concentration(wppm: float, mat: MaterialParams) -> float:
    if wppm < 0:
        raise ValueError(f"wppm must be non-negative, got {wppm!r}")
    return wppm * 1.0e-6 * mat.rho_M * _G_PER_CM3 / M_H
