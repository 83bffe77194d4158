"""Command-line entry point: ``tdsml {simulate,generate,train,infer,fit,configs}``.

Exit codes: 0 success, 2 configuration error, 3 solver failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, bundled_configs, load_config
from .datagen import Dataset, ExhaustedRetries, generate_dataset, generate_test_set
from .fem import ModelVariant, NonConvergence, Spectrum, simulate_tds
from .pipeline import BundleFormatError, infer, load_bundle, resample_spectrum, save_bundle, train_bundle
from .psofit import fit as pso_fit

log = logging.getLogger("tdsml")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_IO = 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _write_json(path: str | Path | None, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def _write_sidecar(path: Path, cfg: RunConfig, extra: dict) -> None:
    meta = {**cfg.describe(), **extra}
    path.with_name(path.name + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.raw = {**cfg.raw, "seed": args.seed}
        if cfg.generation is not None:
            cfg.generation = replace(cfg.generation, seed=args.seed)
        cfg.training = replace(cfg.training, seed=args.seed)
        if cfg.pso is not None:
            cfg.pso = replace(cfg.pso, seed=args.seed)
    if getattr(args, "model_variant", None):
        cfg.variant = ModelVariant(args.model_variant)
        cfg.raw = {**cfg.raw, "variant": cfg.variant.value}
    threads = getattr(args, "threads", None)
    if threads:
        cfg.training = replace(cfg.training, workers=threads)
        if cfg.pso is not None:
            cfg.pso = replace(cfg.pso, workers=threads)
    return cfg


def _read_spectrum(path: str, double_sided: bool) -> Spectrum:
    try:
        spec = Spectrum.from_csv(path)
    except OSError as exc:
        raise CliError(f"cannot read spectrum {path}: {exc}", EXIT_IO) from None
    except ValueError as exc:
        raise CliError(f"malformed spectrum {path}: {exc}", EXIT_IO) from None
    # a whole-sample (two-face) spectrum carries twice the one-face flux
    return spec.scaled(0.5) if double_sided else spec


def _path(cfg: RunConfig, explicit: str | None, key: str, what: str) -> Path:
    value = explicit or cfg.paths.get(key)
    if not value:
        raise CliError(f"no {what} path: pass it on the command line or set paths.{key} in the config", EXIT_CONFIG)
    return Path(value)


def cmd_simulate(cfg: RunConfig, args) -> int:
    spec = simulate_tds(cfg.material, cfg.traps, cfg.test, cfg.numerical, cfg.variant)
    if args.double_sided:
        spec = spec.scaled(2.0)
    out = args.output or cfg.paths.get("spectrum")
    if out:
        path = Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        spec.to_csv(path)
        _write_sidecar(path, cfg, {"variant": cfg.variant.value, "double_sided": bool(args.double_sided),
                                   "n_traps": len(cfg.traps)})
        log.info("wrote %s (%d points)", path, len(spec))
    else:
        sys.stdout.write(spec.to_csv())
    return EXIT_OK


def cmd_generate(cfg: RunConfig, args) -> int:
    if cfg.generation is None:
        raise CliError("config has no [generation] section", EXIT_CONFIG)
    out = _path(cfg, args.output, "dataset_dir", "dataset directory")
    out.mkdir(parents=True, exist_ok=True)
    n = args.points if args.points is not None else cfg.points_per_count
    n_test = args.test_points if args.test_points is not None else cfg.test_points
    extra = cfg.describe()
    for k in range(1, cfg.generation.max_traps + 1):
        ds = generate_dataset(n, k, cfg.generation, cfg.material, cfg.test, cfg.numerical, cfg.variant,
                              workers=args.threads or 1)
        ds.extra = extra
        ds.to_jsonl(out / f"dataset_k{k}.jsonl")
        log.info("wrote %s", out / f"dataset_k{k}.jsonl")
    held = generate_test_set(n_test, cfg.generation, cfg.material, cfg.test, cfg.numerical, cfg.variant,
                             workers=args.threads or 1)
    held.extra = extra
    held.to_jsonl(out / "test.jsonl")
    log.info("wrote %s", out / "test.jsonl")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    data = _path(cfg, args.data, "dataset_dir", "dataset directory")
    files = sorted(data.glob("dataset_k*.jsonl"), key=lambda p: int(p.stem.split("_k")[1]))
    if not files:
        raise CliError(f"no dataset_k*.jsonl files in {data}", EXIT_IO)
    suite = [Dataset.from_jsonl(p) for p in files]
    out = _path(cfg, args.output, "bundle", "bundle")
    training = cfg.training
    if args.epochs is not None:
        training = replace(training, classifier_epochs=args.epochs, regressor_epochs=args.epochs)
    bundle = train_bundle(suite, training, metadata=cfg.describe(), timestamp=args.timestamp)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_bundle(bundle, out)
    log.info("wrote %s", out)
    return EXIT_OK


def _prepare_input(spec: Spectrum, grid: np.ndarray) -> tuple[Spectrum, list[str]]:
    T = spec.temperatures
    if T.max() < grid[0] or T.min() > grid[-1]:
        raise CliError(
            f"spectrum temperatures {T.min():.2f}-{T.max():.2f} K lie outside the model grid "
            f"{grid[0]:.2f}-{grid[-1]:.2f} K", EXIT_CONFIG)
    if T.shape == grid.shape and np.allclose(T, grid, rtol=0, atol=1e-6):
        return Spectrum(grid.copy(), spec.fluxes), []
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return resample_spectrum(T, spec.fluxes, grid)


def _digest(path) -> str:
    # content hashes rather than paths, so predictions do not depend on file locations
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_infer(cfg: RunConfig, args) -> int:
    bundle_path = _path(cfg, args.bundle, "bundle", "bundle")
    try:
        bundle = load_bundle(bundle_path)
    except OSError as exc:
        raise CliError(f"cannot read bundle {bundle_path}: {exc}", EXIT_IO) from None
    except BundleFormatError as exc:
        raise CliError(str(exc), EXIT_IO) from None
    spec, notes = _prepare_input(_read_spectrum(args.spectrum, args.double_sided), bundle.temperature_grid)
    pred = infer(spec, bundle)
    pred.warnings = notes + pred.warnings
    _write_json(args.output, {"prediction": pred.to_dict(), "metadata": {
        **cfg.describe(), "bundle_sha256": _digest(bundle_path), "spectrum_sha256": _digest(args.spectrum)}})
    return EXIT_OK


def cmd_fit(cfg: RunConfig, args) -> int:
    if cfg.pso is None:
        raise CliError("config has no [pso] section", EXIT_CONFIG)
    n_traps = args.n_traps or cfg.pso_n_traps
    if not n_traps:
        raise CliError("number of traps not set: pass --n-traps or set pso.n_traps", EXIT_CONFIG)
    pso = cfg.pso
    if args.iterations is not None:
        pso = replace(pso, iterations=args.iterations)
    if args.swarm_size is not None:
        pso = replace(pso, swarm_size=args.swarm_size)
    target = _read_spectrum(args.spectrum, args.double_sided)
    grid = cfg.test.T_min + np.arange(cfg.numerical.ntp) * (cfg.test.T_max - cfg.test.T_min) / cfg.numerical.ntp
    target, notes = _prepare_input(target, grid)
    result = pso_fit(target, n_traps, pso, cfg.material, cfg.test, cfg.numerical, cfg.variant)
    _write_json(args.output, {"fit": result.to_dict(), "warnings": notes, "metadata": cfg.describe()})
    return EXIT_OK


def cmd_configs(cfg, args) -> int:
    for name in bundled_configs():
        print(name)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, help="worker threads for simulation and training")
    common.add_argument("--double-sided", action="store_true",
                        help="report (simulate) or interpret (infer, fit) fluxes for both sample faces")
    common.add_argument("--model-variant", choices=[v.value for v in ModelVariant])
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="tdsml", description="TDS simulation and trap-parameter inference")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate one spectrum from the config's trap list")
    s.add_argument("config")
    s.add_argument("-o", "--output", help="CSV path (default: standard output)")
    s.set_defaults(func=cmd_simulate)

    g = sub.add_parser("generate", parents=[common], help="generate one training dataset per trap count")
    g.add_argument("config")
    g.add_argument("-o", "--output", help="dataset directory")
    g.add_argument("--points", type=int, help="points per trap count")
    g.add_argument("--test-points", type=int, help="held-out test points")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train the classifier and regressors")
    t.add_argument("config")
    t.add_argument("--data", help="dataset directory")
    t.add_argument("-o", "--output", help="bundle path")
    t.add_argument("--epochs", type=int, help="override every epoch count")
    t.add_argument("--timestamp", help="creation time stored in the bundle (default: SOURCE_DATE_EPOCH or none)")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", parents=[common], help="predict trap count and parameters of a spectrum CSV")
    i.add_argument("config")
    i.add_argument("spectrum")
    i.add_argument("--bundle")
    i.add_argument("-o", "--output", help="prediction JSON path (default: standard output)")
    i.set_defaults(func=cmd_infer)

    f = sub.add_parser("fit", parents=[common], help="fit trap parameters with particle swarm optimisation")
    f.add_argument("config")
    f.add_argument("spectrum")
    f.add_argument("--n-traps", type=int)
    f.add_argument("--iterations", type=int)
    f.add_argument("--swarm-size", type=int)
    f.add_argument("-o", "--output", help="result JSON path (default: standard output)")
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("configs", help="list bundled configs")
    c.set_defaults(func=cmd_configs, config=None)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(getattr(args, "verbose", 0) + 1, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", None):
        os.environ.setdefault("NUMBA_NUM_THREADS", str(args.threads))
    try:
        cfg = None
        if args.config is not None:
            cfg = _apply_overrides(load_config(args.config), args)
        return args.func(cfg, args)
    except CliError as exc:
        log.error("%s", exc)
        return exc.code
    except (ConfigError, ExhaustedRetries) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except NonConvergence as exc:
        log.error("solver failure: %s", exc)
        return EXIT_SOLVER
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except ValueError as exc:
        log.error("invalid input: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
