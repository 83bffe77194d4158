"""Random labelled datasets: trap sets drawn from configured ranges plus their spectra.

Every point gets its own RNG substream keyed by ``(seed, stream, k, index)``,
so serial and threaded generation produce identical datasets.
"""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .fem import ModelVariant, NonConvergence, NumericalParams, Spectrum, simulate_tds
from .transport import N_A, MaterialParams, TestParams, TrapSpec

log = logging.getLogger(__name__)

DATASET_FORMAT = "tdsml-dataset/1"
MAX_ATTEMPTS = 1000

# substream tags
TRAIN_STREAM = 0
TEST_STREAM = 1


class ExhaustedRetries(RuntimeError):
    """Rejection sampling could not place a trap; the configuration is (nearly) infeasible."""


def _check_range(name, rng):
    lo, hi = rng
    if not (0 < lo <= hi):
        raise ValueError(f"{name} must satisfy 0 < min <= max, got {list(rng)}")
    return (float(lo), float(hi))


@dataclass(frozen=True)
class TrapRange:
    energy_range: tuple[float, float]  # |dH|, J/mol
    density_range: tuple[float, float]  # mol/m^3

    def __post_init__(self):
        object.__setattr__(self, "energy_range", _check_range("energy_range", self.energy_range))
        object.__setattr__(self, "density_range", _check_range("density_range", self.density_range))


@dataclass(frozen=True)
class GenerationConfig:
    max_traps: int
    energy_range: tuple[float, float]
    density_range: tuple[float, float]
    min_separation: float = 0.0
    first_trap_override: TrapRange | None = None
    seed: int = 0

    def __post_init__(self):
        if self.max_traps < 1:
            raise ValueError(f"max_traps must be >= 1, got {self.max_traps}")
        object.__setattr__(self, "energy_range", _check_range("energy_range", self.energy_range))
        object.__setattr__(self, "density_range", _check_range("density_range", self.density_range))
        if self.min_separation < 0:
            raise ValueError(f"min_separation must be >= 0, got {self.min_separation}")
        if isinstance(self.first_trap_override, dict):
            object.__setattr__(self, "first_trap_override", TrapRange(**self.first_trap_override))
        # traps drawn from the base range must fit side by side
        n_base = self.max_traps - (1 if self.first_trap_override else 0)
        width = self.energy_range[1] - self.energy_range[0]
        if n_base > 1 and width < (n_base - 1) * self.min_separation:
            raise ValueError(
                f"energy range width {width:g} J/mol cannot hold {n_base} traps "
                f"{self.min_separation:g} J/mol apart"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationConfig":
        d = dict(d)
        if d.get("first_trap_override"):
            d["first_trap_override"] = TrapRange(**d["first_trap_override"])
        d["energy_range"] = tuple(d["energy_range"])
        d["density_range"] = tuple(d["density_range"])
        return cls(**d)


def point_rng(seed: int, stream: int, k: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream, k, index)))


def generate_trap_set(k: int, cfg: GenerationConfig, rng, mat: MaterialParams | None = None) -> list[TrapSpec]:
    """Draw ``k`` traps, enforcing the minimum energy separation by rejection.

    Draw order per trap is energy (re-drawn until accepted) then density.
    """
    if not 1 <= k <= cfg.max_traps:
        raise ValueError(f"k must lie in 1..{cfg.max_traps}, got {k}")
    mat = mat or MaterialParams()
    energies: list[float] = []
    densities: list[float] = []
    for i in range(k):
        ranges = cfg.first_trap_override if (i == 0 and cfg.first_trap_override) else cfg
        for _ in range(MAX_ATTEMPTS):
            e = float(rng.uniform(*ranges.energy_range))
            if all(abs(e - other) >= cfg.min_separation for other in energies):
                break
        else:
            raise ExhaustedRetries(
                f"could not place trap {i + 1} of {k} after {MAX_ATTEMPTS} attempts "
                f"(min_separation={cfg.min_separation:g} J/mol)"
            )
        energies.append(e)
        densities.append(float(rng.uniform(*ranges.density_range)))
    order = np.argsort(energies, kind="stable")
    return [TrapSpec.from_mol(-energies[j], densities[j], mat) for j in order]


@dataclass
class DataPoint:
    n_traps: int
    traps: list[TrapSpec]
    spectrum: Spectrum

    @property
    def energies(self) -> np.ndarray:
        """Absolute binding energies, J/mol, ascending."""
        return np.array([-t.delta_H for t in self.traps])

    @property
    def densities(self) -> np.ndarray:
        """Trap densities, sites/m^3."""
        return np.array([t.N_T for t in self.traps])

    def to_record(self) -> dict:
        return {
            "n_traps": self.n_traps,
            "dH_J_mol": [t.delta_H for t in self.traps],
            "NT_sites_m3": [t.N_T for t in self.traps],
            "flux": self.spectrum.fluxes.tolist(),
            "temp_K": self.spectrum.temperatures.tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict, mat: MaterialParams) -> "DataPoint":
        traps = [TrapSpec(delta_H=dh, N_T=nt, E_t=mat.E_L, nu_t=mat.nu, nu_d=mat.nu)
                 for dh, nt in zip(rec["dH_J_mol"], rec["NT_sites_m3"])]
        return cls(rec["n_traps"], traps, Spectrum(rec["temp_K"], rec["flux"]))


@dataclass
class Dataset:
    points: list[DataPoint]
    generation: GenerationConfig
    material: MaterialParams
    test: TestParams
    numerical: NumericalParams
    variant: str = ModelVariant.MCNABB_FOSTER.value
    n_traps: int | None = None  # None for a mixed-count set
    stream: int = TRAIN_STREAM
    extra: dict = field(default_factory=dict)
    format_version: str = DATASET_FORMAT

    def __len__(self):
        return len(self.points)

    def features(self) -> np.ndarray:
        return np.array([p.spectrum.fluxes for p in self.points]).reshape(len(self.points), -1)

    def header(self) -> dict:
        return {
            "format_version": self.format_version,
            "n_traps": self.n_traps,
            "n_points": len(self.points),
            "stream": self.stream,
            "variant": self.variant,
            "generation": self.generation.to_dict(),
            "material": asdict(self.material),
            "test": asdict(self.test),
            "numerical": asdict(self.numerical),
            "extra": self.extra,
        }

    def protocol(self) -> tuple:
        return (self.material, self.test, self.numerical, self.variant)

    def to_jsonl(self, path: str | Path | None = None) -> str:
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines += [json.dumps(p.to_record()) for p in self.points]
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "Dataset":
        with open(path) as fh:
            lines = [ln for ln in fh if ln.strip()]
        if not lines:
            raise ValueError(f"{path}: empty dataset file")
        head = json.loads(lines[0])
        if head.get("format_version") != DATASET_FORMAT:
            raise ValueError(
                f"{path}: dataset format {head.get('format_version')!r} not supported (expected {DATASET_FORMAT!r})"
            )
        mat = MaterialParams(**head["material"])
        points = [DataPoint.from_record(json.loads(ln), mat) for ln in lines[1:]]
        return cls(
            points=points,
            generation=GenerationConfig.from_dict(head["generation"]),
            material=mat,
            test=TestParams(**head["test"]),
            numerical=NumericalParams(**head["numerical"]),
            variant=head["variant"],
            n_traps=head["n_traps"],
            stream=head["stream"],
            extra=head.get("extra", {}),
        )


def _default_workers(workers: int | None) -> int:
    return workers if workers and workers > 0 else (os.cpu_count() or 1)


def _simulate_point(k, idx, cfg, mat, test, num, variant, stream) -> DataPoint:
    rng = point_rng(cfg.seed, stream, k, idx)
    n = k if k > 0 else int(rng.integers(1, cfg.max_traps + 1))
    traps = generate_trap_set(n, cfg, rng, mat)
    try:
        spec = simulate_tds(mat, traps, test, num, variant)
    except NonConvergence as exc:
        exc.traps = traps
        raise NonConvergence(f"point {idx} (k={n}): {exc}", exc.time_index, exc.iterations, traps) from exc
    return DataPoint(n, traps, Spectrum(spec.temperatures, spec.fluxes))


def _generate(n_points, k, cfg, mat, test, num, variant, stream, workers) -> list[DataPoint]:
    args = (cfg, mat, test, num, ModelVariant(variant), stream)
    workers = _default_workers(workers)
    if workers == 1 or n_points < 2:
        return [_simulate_point(k, i, *args) for i in range(n_points)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        # map returns results in submission order, whatever the completion order
        return list(pool.map(lambda i: _simulate_point(k, i, *args), range(n_points)))


def generate_dataset(n_points: int, k: int, cfg: GenerationConfig, mat: MaterialParams, test: TestParams,
                     num: NumericalParams | None = None,
                     variant: ModelVariant = ModelVariant.MCNABB_FOSTER,
                     workers: int | None = None) -> Dataset:
    """``n_points`` spectra whose trap sets all have exactly ``k`` traps."""
    if n_points < 0:
        raise ValueError(f"n_points must be >= 0, got {n_points}")
    if not 1 <= k <= cfg.max_traps:
        raise ValueError(f"k must lie in 1..{cfg.max_traps}, got {k}")
    num = num or NumericalParams()
    log.info("generating %d points with %d trap(s)", n_points, k)
    points = _generate(n_points, k, cfg, mat, test, num, variant, TRAIN_STREAM, workers)
    return Dataset(points, cfg, mat, test, num, ModelVariant(variant).value, n_traps=k)


def generate_test_set(n_points: int, cfg: GenerationConfig, mat: MaterialParams, test: TestParams,
                      num: NumericalParams | None = None,
                      variant: ModelVariant = ModelVariant.MCNABB_FOSTER,
                      workers: int | None = None) -> Dataset:
    """Held-out points with the trap count drawn uniformly from 1..K, on a separate stream."""
    num = num or NumericalParams()
    points = _generate(n_points, 0, cfg, mat, test, num, variant, TEST_STREAM, workers)
    return Dataset(points, cfg, mat, test, num, ModelVariant(variant).value, n_traps=None, stream=TEST_STREAM)


def generate_suite(cfg: GenerationConfig, n_points: int, mat: MaterialParams, test: TestParams,
                   num: NumericalParams | None = None,
                   variant: ModelVariant = ModelVariant.MCNABB_FOSTER,
                   n_test: int = 500, workers: int | None = None) -> tuple[list[Dataset], Dataset]:
    """One training dataset per trap count 1..K plus a mixed held-out test set."""
    suite = [generate_dataset(n_points, k, cfg, mat, test, num, variant, workers)
             for k in range(1, cfg.max_traps + 1)]
    held_out = generate_test_set(n_test, cfg, mat, test, num, variant, workers)
    return suite, held_out


def check_point(point: DataPoint, cfg: GenerationConfig) -> list[str]:
    """Problems with a generated point relative to ``cfg`` (empty when valid)."""
    problems = []
    e = point.energies
    if len(e) != point.n_traps:
        problems.append("label count differs from n_traps")
    if np.any(np.diff(e) <= 0):
        problems.append("energies not strictly ascending")
    gaps = np.abs(e[:, None] - e[None, :])[np.triu_indices(len(e), 1)]
    if np.any(gaps < cfg.min_separation):
        problems.append("energy separation below minimum")
    dens = point.densities / N_A
    for i, (en, de) in enumerate(zip(e, dens)):
        r = cfg.first_trap_override if (i == 0 and cfg.first_trap_override) else cfg
        if not r.energy_range[0] <= en <= r.energy_range[1]:
            problems.append(f"trap {i + 1} energy {en:g} outside {r.energy_range}")
        if not r.density_range[0] * (1 - 1e-12) <= de <= r.density_range[1] * (1 + 1e-12):
            problems.append(f"trap {i + 1} density {de:g} outside {r.density_range}")
    return problems


def load_suite(paths: Sequence[str | Path]) -> list[Dataset]:
    return [Dataset.from_jsonl(p) for p in paths]
