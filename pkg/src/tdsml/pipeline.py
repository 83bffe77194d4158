"""Two-stage model: a trap-count classifier followed by one regressor per count."""
from __future__ import annotations

import json
import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import Dataset
from .fem import Spectrum
from .nn import (
    Mlp,
    TrainConfig,
    classifier_widths,
    default_epochs,
    regressor_widths,
    split_indices,
    train,
)
from .preprocess import FLUX_FLOOR, InputTransform, OutputScalers, log_floor
from .transport import N_A

log = logging.getLogger(__name__)

BUNDLE_FORMAT = "tdsml-bundle/1"
LOW_CONFIDENCE = 0.5
GRID_ATOL = 1e-6  # K


class BundleFormatError(ValueError):
    pass


class CoverageWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    noise_sigma: float = 0.05
    seed: int = 0
    batch_size: int = 32
    validation_fraction: float = 0.2
    classifier_epochs: int | None = None  # None: 100 x n_out
    regressor_epochs: int | None = None  # None: 200 x n_out
    workers: int = 1


@dataclass
class ModelBundle:
    classifier: Mlp
    regressors: dict[int, Mlp]
    input_transform: InputTransform
    output_scalers: dict[int, OutputScalers]
    metadata: dict = field(default_factory=dict)
    format_version: str = BUNDLE_FORMAT

    def __post_init__(self):
        K = self.max_traps
        if sorted(self.regressors) != list(range(1, K + 1)):
            raise BundleFormatError(f"regressors must cover 1..{K}, got {sorted(self.regressors)}")
        for k, reg in self.regressors.items():
            if reg.widths[-1] != 2 * k:
                raise BundleFormatError(f"regressor {k} has {reg.widths[-1]} outputs, expected {2 * k}")
            if k not in self.output_scalers:
                raise BundleFormatError(f"missing output scalers for regressor {k}")

    @property
    def max_traps(self) -> int:
        return self.classifier.widths[-1]

    @property
    def temperature_grid(self) -> np.ndarray:
        return np.asarray(self.metadata["temperature_grid_K"], dtype=float)

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "metadata": self.metadata,
            "input_transform": self.input_transform.to_dict(),
            "classifier": self.classifier.to_dict(),
            "regressors": {str(k): m.to_dict() for k, m in sorted(self.regressors.items())},
            "output_scalers": {str(k): s.to_dict() for k, s in sorted(self.output_scalers.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelBundle":
        version = d.get("format_version")
        if version != BUNDLE_FORMAT:
            raise BundleFormatError(f"bundle format {version!r} is not supported by this reader ({BUNDLE_FORMAT!r})")
        try:
            return cls(
                classifier=Mlp.from_dict(d["classifier"]),
                regressors={int(k): Mlp.from_dict(v) for k, v in d["regressors"].items()},
                input_transform=InputTransform.from_dict(d["input_transform"]),
                output_scalers={int(k): OutputScalers.from_dict(v) for k, v in d["output_scalers"].items()},
                metadata=d["metadata"],
            )
        except KeyError as exc:
            raise BundleFormatError(f"bundle is missing key {exc}") from exc


def save_bundle(bundle: ModelBundle, path: str | Path) -> None:
    Path(path).write_text(json.dumps(bundle.to_dict(), sort_keys=True) + "\n")


def load_bundle(path: str | Path) -> ModelBundle:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise BundleFormatError(f"{path}: corrupt bundle, parse error at byte offset {exc.pos}: {exc.msg}") from exc
    return ModelBundle.from_dict(data)


@dataclass
class TrapPrediction:
    n_traps: int
    delta_H: list[float]  # J/mol, negative
    N_T: list[float]  # sites/m^3
    probabilities: list[float]
    low_confidence: bool = False
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["N_T_mol_m3"] = [n / N_A for n in self.N_T]
        return d


def _created_utc(timestamp: str | None = None) -> str | None:
    if timestamp is not None:
        return timestamp
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch:
        return datetime.fromtimestamp(int(epoch), tz=timezone.utc).isoformat()
    return None


def _check_protocols(suite: Sequence[Dataset]) -> None:
    ref = suite[0]
    for ds in suite[1:]:
        if ds.protocol() != ref.protocol():
            raise ValueError("datasets were generated with different material/test/numerical settings")
        if ds.features().shape[1:] != ref.features().shape[1:]:
            raise ValueError("datasets have different spectrum lengths")


def _train_job(job):
    name, mlp, x, y, cfg, xv, yv = job
    log.info("training %s (%d samples, %d epochs)", name, len(x), cfg.epochs)
    return train(mlp, x, y, cfg, xv, yv)


def train_bundle(suite: Sequence[Dataset], cfg: PipelineConfig | None = None,
                 metadata: dict | None = None, timestamp: str | None = None) -> ModelBundle:
    """Fit the input transform, the classifier and one regressor per trap count."""
    cfg = cfg or PipelineConfig()
    suite = sorted(suite, key=lambda d: d.n_traps)
    K = len(suite)
    if [d.n_traps for d in suite] != list(range(1, K + 1)):
        raise ValueError(f"suite must hold one dataset per trap count 1..{K}, got {[d.n_traps for d in suite]}")
    _check_protocols(suite)

    feats, splits = [], []
    for k, ds in enumerate(suite, start=1):
        f = log_floor(ds.features())
        feats.append(f)
        splits.append(split_indices(len(f), cfg.validation_fraction, cfg.seed + k))
    transform = InputTransform.fit(np.concatenate([f[tr] for f, (tr, _) in zip(feats, splits)]))
    z = [transform.apply(f) for f in feats]
    n_in = transform.n_features
    rng = np.random.default_rng(cfg.seed)

    def tcfg(epochs, n_out, head, seed):
        e = epochs if epochs is not None else default_epochs(n_out, head)
        return TrainConfig(epochs=e, batch_size=cfg.batch_size, validation_fraction=cfg.validation_fraction,
                           seed=seed, noise_sigma=cfg.noise_sigma)

    jobs = []
    # classifier on all counts, one-hot labels
    eye = np.eye(K)
    xc = np.concatenate([zk[tr] for zk, (tr, _) in zip(z, splits)])
    yc = np.concatenate([np.repeat(eye[k][None], len(tr), 0) for k, (tr, _) in enumerate(splits)])
    xcv = np.concatenate([zk[va] for zk, (_, va) in zip(z, splits)])
    ycv = np.concatenate([np.repeat(eye[k][None], len(va), 0) for k, (_, va) in enumerate(splits)])
    clf = Mlp.build(classifier_widths(n_in, K), "softmax", rng)
    # a single class needs no training: the softmax is saturated at 1
    jobs.append(("classifier", clf, xc, yc, tcfg(cfg.classifier_epochs if K > 1 else 0, K, "softmax", cfg.seed),
                 xcv, ycv))

    scalers = {}
    for k, (ds, zk, (tr, va)) in enumerate(zip(suite, z, splits), start=1):
        energies = np.array([p.energies for p in ds.points]).reshape(len(ds), k)
        densities = np.array([p.densities for p in ds.points]).reshape(len(ds), k)
        sc = OutputScalers.fit(energies[tr], densities[tr])
        scalers[k] = sc
        y = sc.scale(energies, densities)
        reg = Mlp.build(regressor_widths(n_in, 2 * k), "identity", rng)
        jobs.append((f"regressor k={k}", reg, zk[tr], y[tr], tcfg(cfg.regressor_epochs, 2 * k, "identity", cfg.seed + k),
                     zk[va], y[va]))

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_train_job, jobs))
    else:
        results = [_train_job(j) for j in jobs]

    (clf, clf_hist), *reg_results = results
    ref = suite[0]
    meta = {
        "created_utc": _created_utc(timestamp),
        "max_traps": K,
        "pipeline": asdict(cfg),
        "generation": ref.generation.to_dict(),
        "material": asdict(ref.material),
        "test": asdict(ref.test),
        "numerical": asdict(ref.numerical),
        "variant": ref.variant,
        "points_per_count": [len(d) for d in suite],
        "temperature_grid_K": ref.points[0].spectrum.temperatures.tolist() if len(ref) else [],
        "validation_loss": {
            "classifier": clf_hist.val_loss[-1] if clf_hist.val_loss else None,
            **{str(k): h.val_loss[-1] if h.val_loss else None for k, (_, h) in enumerate(reg_results, start=1)},
        },
    }
    meta.update(metadata or {})
    return ModelBundle(clf, {k: m for k, (m, _) in enumerate(reg_results, start=1)}, transform, scalers, meta)


def _check_grid(spectrum: Spectrum, bundle: ModelBundle) -> None:
    grid = bundle.temperature_grid
    T = spectrum.temperatures
    if T.shape != grid.shape or not np.allclose(T, grid, rtol=0, atol=GRID_ATOL):
        raise ValueError(
            f"spectrum temperatures ({T.min():.2f}-{T.max():.2f} K, {T.size} points) do not match the bundle grid "
            f"({grid.min():.2f}-{grid.max():.2f} K, {grid.size} points); resample the spectrum first"
        )


def infer(spectrum: Spectrum, bundle: ModelBundle) -> TrapPrediction:
    _check_grid(spectrum, bundle)
    x = bundle.input_transform.transform_fluxes(spectrum.fluxes)[None, :]
    probs = bundle.classifier.forward(x)[0]
    k = int(np.argmax(probs)) + 1  # argmax picks the first maximum: ties go to fewer traps
    out = bundle.regressors[k].forward(x)[0]
    energies, densities = bundle.output_scalers[k].unscale(out)
    order = np.argsort(energies, kind="stable")
    notes = []
    if np.any((out < 0) | (out > 1)):
        notes.append("regressor output outside the training range (extrapolated)")
    pmax = float(probs.max())
    low = pmax < LOW_CONFIDENCE
    if low:
        notes.append(f"low confidence: max class probability {pmax:.3f} < {LOW_CONFIDENCE}")
    return TrapPrediction(
        n_traps=k,
        delta_H=[-float(energies[i]) for i in order],
        N_T=[float(densities[i]) for i in order],
        probabilities=[float(p) for p in probs],
        low_confidence=low,
        warnings=notes,
    )


def resample_spectrum(temperatures, fluxes, grid, floor: float = FLUX_FLOOR) -> tuple[Spectrum, list[str]]:
    """Linearly interpolate raw ``(T, flux)`` pairs onto ``grid``.

    Duplicate temperatures are averaged. Grid points outside the raw range
    get ``floor`` and produce a coverage warning.
    """
    T = np.asarray(temperatures, dtype=float)
    J = np.asarray(fluxes, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if T.shape != J.shape:
        raise ValueError("temperature and flux arrays differ in length")
    uniq, inv = np.unique(T, return_inverse=True)
    if uniq.size < 2:
        raise ValueError("need at least two distinct temperatures to resample")
    Ju = np.bincount(inv, weights=J) / np.bincount(inv)
    out = np.interp(grid, uniq, Ju, left=floor, right=floor)
    notes = []
    outside = (grid < uniq[0]) | (grid > uniq[-1])
    if outside.any():
        msg = (f"raw spectrum covers {uniq[0]:.2f}-{uniq[-1]:.2f} K; {int(outside.sum())} of {grid.size} grid "
               f"points ({grid[0]:.2f}-{grid[-1]:.2f} K) set to the floor {floor:g}")
        notes.append(msg)
        warnings.warn(msg, CoverageWarning, stacklevel=2)
    return Spectrum(grid.copy(), out), notes
