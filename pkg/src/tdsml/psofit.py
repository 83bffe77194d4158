"""Particle-swarm fit of trap parameters to a spectrum, using the FEM solver as forward model.

Particles live in ``(|dH|_1..|dH|_k, log10 N_T_1..log10 N_T_k)`` with
energies in J/mol and densities in mol/m^3.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .fem import ModelVariant, NonConvergence, NumericalParams, Spectrum, simulate_tds
from .preprocess import log_floor
from .transport import MaterialParams, TestParams, TrapSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PsoConfig:
    energy_bounds: tuple[float, float] = (50e3, 150e3)  # |dH|, J/mol
    density_bounds: tuple[float, float] = (0.1, 10.0)  # mol/m^3
    swarm_size: int = 40
    iterations: int = 200
    inertia: float = 0.729
    cognitive: float = 1.49445
    social: float = 1.49445
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        for name in ("energy_bounds", "density_bounds"):
            lo, hi = getattr(self, name)
            if not 0 < lo < hi:
                raise ValueError(f"{name} must satisfy 0 < lo < hi, got {(lo, hi)}")
        if self.swarm_size < 1:
            raise ValueError(f"swarm_size must be >= 1, got {self.swarm_size}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")


@dataclass
class FitResult:
    traps: list[TrapSpec]
    objective: float
    trace: list[float]
    n_evaluations: int = 0
    n_failures: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n_traps": len(self.traps),
            "dH_J_mol": [t.delta_H for t in self.traps],
            "NT_sites_m3": [t.N_T for t in self.traps],
            "NT_mol_m3": [t.N_T_mol for t in self.traps],
            "objective": self.objective,
            "trace": self.trace,
            "n_evaluations": self.n_evaluations,
            "n_failures": self.n_failures,
            "config": self.config,
        }


def objective(traps: Sequence[TrapSpec], target: Spectrum, mat: MaterialParams, test: TestParams,
              num: NumericalParams | None = None,
              variant: ModelVariant = ModelVariant.MCNABB_FOSTER) -> float:
    """Mean squared difference of log10-floored fluxes; +inf when the solver fails."""
    try:
        sim = simulate_tds(mat, list(traps), test, num, variant)
    except NonConvergence as exc:
        log.warning("candidate %s failed: %s", [(t.delta_H, t.N_T_mol) for t in traps], exc)
        return math.inf
    if sim.fluxes.shape != target.fluxes.shape:
        raise ValueError(f"target has {target.fluxes.size} points, simulation {sim.fluxes.size}")
    return float(np.mean((log_floor(sim.fluxes) - log_floor(target.fluxes)) ** 2))


def decode(position: np.ndarray, mat: MaterialParams) -> list[TrapSpec]:
    k = position.size // 2
    energies, log_n = position[:k], position[k:]
    order = np.argsort(energies, kind="stable")
    return [TrapSpec.from_mol(-float(energies[i]), float(10.0 ** log_n[i]), mat) for i in order]


def encode(traps: Sequence[TrapSpec]) -> np.ndarray:
    return np.array([-t.delta_H for t in traps] + [math.log10(t.N_T_mol) for t in traps])


def fit(target: Spectrum, n_traps: int, cfg: PsoConfig, mat: MaterialParams, test: TestParams,
        num: NumericalParams | None = None,
        variant: ModelVariant = ModelVariant.MCNABB_FOSTER,
        initial_positions: np.ndarray | None = None) -> FitResult:
    """Global-best PSO over ``2 * n_traps`` coordinates.

    ``initial_positions`` (``swarm_size x 2k``, in search coordinates)
    replaces the random initial swarm.
    """
    if n_traps < 1:
        raise ValueError(f"n_traps must be >= 1, got {n_traps}")
    num = num or NumericalParams()
    k, n = n_traps, cfg.swarm_size
    lo = np.array([cfg.energy_bounds[0]] * k + [math.log10(cfg.density_bounds[0])] * k)
    hi = np.array([cfg.energy_bounds[1]] * k + [math.log10(cfg.density_bounds[1])] * k)
    vmax = 0.5 * (hi - lo)
    rng = np.random.default_rng(cfg.seed)

    if initial_positions is None:
        x = rng.uniform(lo, hi, size=(n, 2 * k))
    else:
        x = np.array(initial_positions, dtype=float).reshape(n, 2 * k)
    x = np.clip(x, lo, hi)
    v = rng.uniform(-vmax, vmax, size=(n, 2 * k))

    counts = {"evals": 0, "fails": 0}

    def evaluate(positions):
        def one(p):
            return objective(decode(p, mat), target, mat, test, num, variant)

        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                vals = np.array(list(pool.map(one, positions)))
        else:
            vals = np.array([one(p) for p in positions])
        counts["evals"] += len(vals)
        counts["fails"] += int(np.isinf(vals).sum())
        return vals

    fx = evaluate(x)
    pbest, pbest_f = x.copy(), fx.copy()
    g = int(np.argmin(pbest_f))
    gbest, gbest_f = pbest[g].copy(), float(pbest_f[g])
    trace = [gbest_f]

    for it in range(cfg.iterations):
        r1 = rng.random((n, 2 * k))
        r2 = rng.random((n, 2 * k))
        v = cfg.inertia * v + cfg.cognitive * r1 * (pbest - x) + cfg.social * r2 * (gbest - x)
        v = np.clip(v, -vmax, vmax)
        x = np.clip(x + v, lo, hi)
        fx = evaluate(x)
        better = fx < pbest_f
        pbest[better], pbest_f[better] = x[better], fx[better]
        g = int(np.argmin(pbest_f))
        if pbest_f[g] < gbest_f:
            gbest, gbest_f = pbest[g].copy(), float(pbest_f[g])
        trace.append(gbest_f)
        if it % 20 == 0:
            log.info("PSO iteration %d: best objective %.4g", it, gbest_f)

    return FitResult(decode(gbest, mat), gbest_f, trace, counts["evals"], counts["fails"],
                     {**asdict(cfg), "n_traps": k})
