"""Input and target transforms shared by training and inference."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

FLUX_FLOOR = 1e-10  # mol/(m^2 s)
STD_GUARD = 1e-8


def log_floor(fluxes, floor: float = FLUX_FLOOR) -> np.ndarray:
    """log10 of the fluxes after raising them to ``floor``."""
    x = np.asarray(fluxes, dtype=float)
    if np.isnan(x).any():
        raise ValueError("flux contains NaN")
    if (x < 0).any():
        raise ValueError(f"flux contains negative values (min {x.min():.3g})")
    if np.isinf(x).any():
        raise ValueError("flux contains infinite values")
    return np.log10(np.maximum(x, floor))


@dataclass(frozen=True)
class InputTransform:
    mean: np.ndarray
    std: np.ndarray
    guarded: np.ndarray  # features whose std fell back to the guard
    floor: float = FLUX_FLOOR

    @classmethod
    def fit(cls, features) -> "InputTransform":
        """Fit per-feature population statistics on log-space training features."""
        x = np.asarray(features, dtype=float)
        if x.ndim != 2 or x.shape[0] < 2:
            raise ValueError(f"need a 2-D array with >= 2 rows, got shape {x.shape}")
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        guarded = std < STD_GUARD
        if guarded.any():
            log.warning("%d constant feature(s); std replaced by %g", int(guarded.sum()), STD_GUARD)
        std = np.where(guarded, STD_GUARD, std)
        return cls(mean, std, guarded)

    @property
    def n_features(self) -> int:
        return self.mean.size

    def apply(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=float)
        if x.shape[-1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {x.shape[-1]}")
        return (x - self.mean) / self.std

    def transform_fluxes(self, fluxes) -> np.ndarray:
        """Raw fluxes to network inputs: floor, log10, standardise."""
        return self.apply(log_floor(fluxes, self.floor))

    def to_dict(self) -> dict:
        return {
            "floor": self.floor,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "guarded": self.guarded.astype(bool).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InputTransform":
        return cls(np.array(d["mean"], dtype=float), np.array(d["std"], dtype=float),
                   np.array(d["guarded"], dtype=bool), float(d["floor"]))


def fit_standardizer(features) -> InputTransform:
    return InputTransform.fit(features)


@dataclass(frozen=True)
class NoiseConfig:
    sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"noise sigma must be >= 0, got {self.sigma}")


def add_noise(features, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean Gaussian perturbation in standardised units."""
    x = np.asarray(features, dtype=float)
    if sigma == 0:
        return x.copy()
    return x + rng.normal(0.0, sigma, size=x.shape)


@dataclass(frozen=True)
class MinMax:
    """Column-wise min-max map onto [0, 1]."""

    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, values) -> "MinMax":
        v = np.asarray(values, dtype=float)
        v = v.reshape(v.shape[0], -1)
        lo, hi = v.min(axis=0), v.max(axis=0)
        if np.any(hi <= lo):
            raise ValueError("min-max scaler needs max > min in every column")
        return cls(lo, hi)

    def scale(self, values) -> np.ndarray:
        return (np.asarray(values, dtype=float) - self.lo) / (self.hi - self.lo)

    def unscale(self, scaled) -> np.ndarray:
        return np.asarray(scaled, dtype=float) * (self.hi - self.lo) + self.lo

    def to_dict(self) -> dict:
        return {"min": self.lo.tolist(), "max": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MinMax":
        return cls(np.array(d["min"], dtype=float), np.array(d["max"], dtype=float))


@dataclass(frozen=True)
class OutputScalers:
    """Separate scalers for the energy block and the density block of a regression target.

    Targets are laid out as ``[|dH|_1..|dH|_k, N_T_1..N_T_k]`` (J/mol, sites/m^3).
    """

    energy: MinMax
    density: MinMax

    @property
    def n_traps(self) -> int:
        return self.energy.lo.size

    @classmethod
    def fit(cls, energies, densities) -> "OutputScalers":
        return cls(MinMax.fit(energies), MinMax.fit(densities))

    def scale(self, energies, densities) -> np.ndarray:
        return np.concatenate([self.energy.scale(energies), self.density.scale(densities)], axis=-1)

    def unscale(self, scaled) -> tuple[np.ndarray, np.ndarray]:
        s = np.asarray(scaled, dtype=float)
        k = self.n_traps
        if s.shape[-1] != 2 * k:
            raise ValueError(f"expected {2 * k} outputs, got {s.shape[-1]}")
        energies = self.energy.unscale(s[..., :k])
        densities = self.density.unscale(s[..., k:])
        if np.any((s < 0) | (s > 1)):
            log.debug("regressor output outside the training range; extrapolating")
        return energies, densities

    def to_dict(self) -> dict:
        return {"energy": self.energy.to_dict(), "density": self.density.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "OutputScalers":
        return cls(MinMax.from_dict(d["energy"]), MinMax.from_dict(d["density"]))
