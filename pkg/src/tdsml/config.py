"""JSON run configuration with unit-suffixed keys.

Every physical quantity carries its unit in the key name, e.g.
``"phi_C_per_h": 100`` or ``"dH_kJ_mol": -50``. Values are converted to SI
on load; unknown keys and conflicting spellings of one quantity are errors.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from .datagen import GenerationConfig, TrapRange
from .fem import ModelVariant, NumericalParams
from .pipeline import PipelineConfig
from .psofit import PsoConfig
from .transport import N_A, MaterialParams, TestParams, TrapSpec


class ConfigError(ValueError):
    pass


# quantity -> {suffix: factor to the internal unit}
_ENERGY = {"J_mol": 1.0, "kJ_mol": 1e3}
_RATE = {"K_per_s": 1.0, "C_per_s": 1.0, "K_per_min": 1 / 60, "C_per_min": 1 / 60, "K_per_h": 1 / 3600,
         "C_per_h": 1 / 3600}
_DENSITY = {"mol_m3": 1.0, "sites_m3": 1 / N_A}

_MATERIAL = {
    "D0": {"m2_s": 1.0},
    "E_L": _ENERGY,
    "N_L": {"sites_m3": 1.0},
    "C_L0": {"mol_m3": 1.0},
    "M_M": {"g_mol": 1.0},
    "rho_M": {"g_cm3": 1.0},
    "nu": {"Hz": 1.0, "per_s": 1.0},
}
_TEST = {
    "L": {"m": 1.0, "mm": 1e-3},
    "t_rest": {"s": 1.0, "min": 60.0, "h": 3600.0},
    "phi": _RATE,
    "T_min": {"K": 1.0},
    "T_max": {"K": 1.0},
}
_NUMERICAL = {
    "n_elements": {"": 1},
    "ntp": {"": 1},
    "f": {"": 1},
    "penalty_k": {"mol_m2_s": 1.0},
    "E_bc": _ENERGY,
    "newton_rtol": {"": 1},
    "newton_atol": {"": 1},
    "newton_max_iter": {"": 1},
    "max_halvings": {"": 1},
}
_TRAP = {"dH": _ENERGY, "NT": _DENSITY, "E_t": _ENERGY, "nu": {"Hz": 1.0, "per_s": 1.0}}
_RANGE = {"dH": _ENERGY, "NT": _DENSITY}
_GENERATION = {
    "max_traps": {"": 1},
    "dH": _ENERGY,
    "NT": _DENSITY,
    "min_separation": _ENERGY,
    "points_per_count": {"": 1},
    "test_points": {"": 1},
}
_TRAINING = {
    "noise_sigma": {"": 1},
    "batch_size": {"": 1},
    "validation_fraction": {"": 1},
    "classifier_epochs": {"": 1},
    "regressor_epochs": {"": 1},
}
_PSO = {
    "dH": _ENERGY,
    "NT": _DENSITY,
    "swarm_size": {"": 1},
    "iterations": {"": 1},
    "inertia": {"": 1},
    "cognitive": {"": 1},
    "social": {"": 1},
    "n_traps": {"": 1},
}
_TOP = {"seed", "variant", "material", "test", "numerical", "generation", "training", "noise", "pso", "traps",
        "paths", "name", "description"}


def _parse_section(section: str, raw: dict, schema: dict) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"[{section}] must be an object")
    out: dict[str, Any] = {}
    for key, value in raw.items():
        for name, units in schema.items():
            unit = None
            if key == name and "" in units:
                unit = ""
            elif key.startswith(name + "_") and key[len(name) + 1:] in units:
                unit = key[len(name) + 1:]
            if unit is None:
                continue
            if name in out:
                raise ConfigError(f"[{section}] quantity {name!r} given twice (key {key!r})")
            factor = units[unit]
            try:
                if isinstance(value, list):
                    out[name] = [float(v) * factor for v in value]
                elif unit == "" and isinstance(value, (int, float)) and not isinstance(value, bool):
                    out[name] = value
                elif value is None:
                    out[name] = None
                else:
                    out[name] = float(value) * factor
            except (TypeError, ValueError):
                raise ConfigError(f"[{section}] key {key!r}: expected a number, got {value!r}") from None
            break
        else:
            known = ", ".join(f"{n}_{u}" if u else n for n, us in schema.items() for u in us)
            raise ConfigError(f"[{section}] unknown key {key!r}; expected one of: {known}")
    return out


def _build(section: str, cls, kwargs: dict):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def _as_range(section: str, key: str, value) -> tuple[float, float]:
    if not (isinstance(value, list) and len(value) == 2):
        raise ConfigError(f"[{section}] {key} must be a [min, max] pair")
    lo, hi = (abs(v) for v in value)
    return (min(lo, hi), max(lo, hi))


@dataclass
class RunConfig:
    material: MaterialParams = field(default_factory=MaterialParams)
    test: TestParams = field(default_factory=TestParams)
    numerical: NumericalParams = field(default_factory=NumericalParams)
    variant: ModelVariant = ModelVariant.MCNABB_FOSTER
    seed: int = 0
    traps: list[TrapSpec] = field(default_factory=list)
    generation: GenerationConfig | None = None
    points_per_count: int = 2000
    test_points: int = 500
    training: PipelineConfig = field(default_factory=PipelineConfig)
    pso: PsoConfig | None = None
    pso_n_traps: int | None = None
    paths: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)
    source: str = ""

    @property
    def sha256(self) -> str:
        """Hash of the canonical JSON form of the raw configuration."""
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()

    def describe(self) -> dict:
        return {"config_sha256": self.sha256, "seed": self.seed, "config_source": self.source,
                "phi_K_per_s": self.test.phi}


def parse_config(raw: dict, source: str = "") -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = set(raw) - _TOP
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    try:
        variant = ModelVariant(raw.get("variant", ModelVariant.MCNABB_FOSTER.value))
    except ValueError:
        raise ConfigError(f"variant must be one of {[v.value for v in ModelVariant]}") from None

    mat = _build("material", MaterialParams, _parse_section("material", raw.get("material", {}), _MATERIAL))
    test = _build("test", TestParams, _parse_section("test", raw.get("test", {}), _TEST))
    num = _build("numerical", NumericalParams, _parse_section("numerical", raw.get("numerical", {}), _NUMERICAL))

    traps = []
    for i, t in enumerate(raw.get("traps", [])):
        sec = f"traps[{i}]"
        d = _parse_section(sec, t, _TRAP)
        if "dH" not in d or "NT" not in d:
            raise ConfigError(f"[{sec}] needs a binding energy (dH_kJ_mol or dH_J_mol) and a density "
                              f"(NT_mol_m3 or NT_sites_m3)")
        nu = d.get("nu", mat.nu)
        kw = dict(delta_H=-abs(d["dH"]), N_T=d["NT"] * N_A, E_t=d.get("E_t", mat.E_L), nu_t=nu, nu_d=nu)
        traps.append(_build(sec, TrapSpec, kw))

    gen, ppc, n_test = None, 2000, 500
    if "generation" in raw:
        g = raw["generation"]
        first = g.get("first_trap") if isinstance(g, dict) else None
        body = {k: v for k, v in g.items() if k != "first_trap"} if isinstance(g, dict) else g
        d = _parse_section("generation", body, _GENERATION)
        for req in ("max_traps", "dH", "NT"):
            if req not in d:
                raise ConfigError(f"[generation] missing {req!r}")
        override = None
        if first:
            fd = _parse_section("generation.first_trap", first, _RANGE)
            if "dH" not in fd or "NT" not in fd:
                raise ConfigError("[generation.first_trap] needs dH and NT ranges")
            override = _build("generation.first_trap", TrapRange, dict(
                energy_range=_as_range("generation.first_trap", "dH", fd["dH"]),
                density_range=_as_range("generation.first_trap", "NT", fd["NT"])))
        gen = _build("generation", GenerationConfig, dict(
            max_traps=int(d["max_traps"]),
            energy_range=_as_range("generation", "dH", d["dH"]),
            density_range=_as_range("generation", "NT", d["NT"]),
            min_separation=d.get("min_separation", 0.0),
            first_trap_override=override,
            seed=seed,
        ))
        ppc = int(d.get("points_per_count", ppc))
        n_test = int(d.get("test_points", n_test))

    tr = _parse_section("training", raw.get("training", {}), _TRAINING)
    noise = raw.get("noise", {})
    if noise:
        nd = _parse_section("noise", noise, {"sigma": {"": 1}})
        if "noise_sigma" in tr:
            raise ConfigError("noise sigma given in both [noise] and [training]")
        tr["noise_sigma"] = nd.get("sigma", 0.05)
    if tr.get("noise_sigma", 0.05) < 0:
        raise ConfigError("[noise] sigma must be >= 0")
    training = _build("training", PipelineConfig, {**tr, "seed": seed})

    pso, pso_k = None, None
    if "pso" in raw:
        d = _parse_section("pso", raw["pso"], _PSO)
        pso_k = d.pop("n_traps", None)
        kw = {k: v for k, v in d.items() if k not in ("dH", "NT")}
        if "dH" in d:
            kw["energy_bounds"] = _as_range("pso", "dH", d["dH"])
        if "NT" in d:
            kw["density_bounds"] = _as_range("pso", "NT", d["NT"])
        pso = _build("pso", PsoConfig, {**kw, "seed": seed})

    paths = raw.get("paths", {})
    if not isinstance(paths, dict):
        raise ConfigError("[paths] must be an object")
    return RunConfig(mat, test, num, variant, seed, traps, gen, ppc, n_test, training, pso, pso_k,
                     dict(paths), raw, source)


def bundled_configs() -> list[str]:
    return sorted(p.name for p in resources.files("tdsml.configs").iterdir() if p.name.endswith(".json"))


def read_config_text(path: str | Path) -> tuple[str, str]:
    """Text of a config file; bare names of bundled configs are accepted too."""
    p = Path(path)
    if p.exists():
        return p.read_text(), str(p)
    name = p.name if p.suffix else p.name + ".json"
    res = resources.files("tdsml.configs") / name
    if res.is_file():
        return res.read_text(), f"bundled:{name}"
    raise FileNotFoundError(f"config {str(path)!r} not found (bundled configs: {', '.join(bundled_configs())})")


def load_config(path: str | Path) -> RunConfig:
    text, source = read_config_text(path)
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return parse_config(raw, source)
