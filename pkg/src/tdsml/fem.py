"""One-dimensional finite-element TDS solver.

Half of the sample (0 <= x <= L/2) is discretised with linear elements:
symmetry at x = 0, penalty outflux at x = L/2. Time integration is
backward Euler with a Newton solve per step. The lattice capacity and
diffusion terms use consistent (two-point Gauss) integration; all trapping
terms are lumped onto the nodes, which lets the trapped unknowns be
condensed out node by node so every Newton iteration is one tridiagonal
solve.

The Oriani variant differences the equilibrium trapped concentration
directly, ``(C_T(c_L, T) - C_T_old) / dt``, so the discrete hydrogen
balance closes exactly for both variants.
"""
from __future__ import annotations

import csv
import enum
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit

from .transport import (
    R,
    MaterialParams,
    TestParams,
    TrapSpec,
    equilibrium_constant,
    equilibrium_trap_occupancy,
    temperature_at,
)

log = logging.getLogger(__name__)


class ModelVariant(str, enum.Enum):
    MCNABB_FOSTER = "mcnabb-foster"
    ORIANI = "oriani"


class NonConvergence(RuntimeError):
    """Newton failed even after the maximum number of time-step halvings."""

    def __init__(self, message: str, time_index: int = -1, iterations: int = -1, traps=None):
        super().__init__(message)
        self.time_index = time_index
        self.iterations = iterations
        self.traps = traps


@dataclass(frozen=True)
class NumericalParams:
    n_elements: int = 25
    ntp: int = 64
    f: int = 10
    penalty_k: float = 8.0e5
    E_bc: float = 1.71e4
    newton_rtol: float = 1e-10
    newton_atol: float = 1e-14
    newton_max_iter: int = 25
    max_halvings: int = 5

    def __post_init__(self):
        if self.n_elements < 2:
            raise ValueError(f"n_elements must be >= 2, got {self.n_elements}")
        if self.ntp < 2:
            raise ValueError(f"ntp must be >= 2, got {self.ntp}")
        if self.f < 1:
            raise ValueError(f"f must be >= 1, got {self.f}")
        if not self.penalty_k > 0:
            raise ValueError(f"penalty_k must be > 0, got {self.penalty_k}")

    def time_step(self, test: TestParams) -> float:
        return test.t_test / (self.ntp * self.f)


@dataclass
class SolverState:
    c_L: np.ndarray
    c_T: np.ndarray | None  # (n_traps, n_nodes); None for Oriani
    t: float = 0.0


@dataclass
class MassBook:
    """Hydrogen inventories per unit surface area of the half domain (mol/m^2)."""

    initial: float
    desorbed: float
    residual: float


@dataclass
class Spectrum:
    temperatures: np.ndarray
    fluxes: np.ndarray
    trap_fluxes: np.ndarray | None = None  # (ntp, n_traps)
    times: np.ndarray | None = None
    lattice_release: np.ndarray | None = None  # -d(lattice inventory)/dt
    mass: MassBook | None = None
    newton_iterations: int = 0
    clip_count: int = 0

    def __post_init__(self):
        self.temperatures = np.asarray(self.temperatures, dtype=float)
        self.fluxes = np.asarray(self.fluxes, dtype=float)
        if self.temperatures.shape != self.fluxes.shape or self.temperatures.ndim != 1:
            raise ValueError("temperatures and fluxes must be 1-D arrays of equal length")

    def __len__(self):
        return self.temperatures.size

    @property
    def n_traps(self) -> int:
        return 0 if self.trap_fluxes is None else self.trap_fluxes.shape[1]

    def scaled(self, factor: float) -> "Spectrum":
        tf = None if self.trap_fluxes is None else self.trap_fluxes * factor
        lr = None if self.lattice_release is None else self.lattice_release * factor
        return Spectrum(self.temperatures.copy(), self.fluxes * factor, tf, self.times, lr,
                        self.mass, self.newton_iterations, self.clip_count)

    def to_csv(self, path: str | Path | None = None, include_traps: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        ntr = self.n_traps if include_traps else 0
        writer.writerow(["temperature_K", "flux_mol_m2_s"] + [f"J_T_{i + 1}" for i in range(ntr)])
        for n in range(len(self)):
            row = [repr(float(self.temperatures[n])), repr(float(self.fluxes[n]))]
            row += [repr(float(v)) for v in self.trap_fluxes[n, :ntr]] if ntr else []
            writer.writerow(row)
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path: str | Path) -> "Spectrum":
        """Read a spectrum CSV. Lines starting with ``#`` are skipped."""
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(line for line in fh if not line.lstrip().startswith("#")) if r]
        if not rows:
            raise ValueError(f"{path}: empty spectrum file")
        header, body = rows[0], rows[1:]
        try:
            float(header[0])
        except ValueError:
            pass
        else:  # headerless file
            header, body = ["temperature_K", "flux_mol_m2_s"], rows
        data = np.array([[float(v) for v in r] for r in body], dtype=float)
        if data.ndim != 2 or data.shape[1] < 2:
            raise ValueError(f"{path}: expected at least two numeric columns")
        traps = data[:, 2:] if data.shape[1] > 2 else None
        return cls(data[:, 0], data[:, 1], traps)


# ---------------------------------------------------------------------------
# compiled kernel


@njit(cache=True, nogil=True)
def _temperature(t, T_min, phi, t_rest, T_max):
    T = T_min + phi * max(t - t_rest, 0.0)
    return min(T, T_max)


@njit(cache=True, nogil=True)
def _thomas(lo, diag, up, rhs, out):
    n = diag.size
    cp = np.empty(n)
    dp = np.empty(n)
    cp[0] = up[0] / diag[0]
    dp[0] = rhs[0] / diag[0]
    for i in range(1, n):
        m = diag[i] - lo[i] * cp[i - 1]
        cp[i] = up[i] / m
        dp[i] = (rhs[i] - lo[i] * dp[i - 1]) / m
    out[n - 1] = dp[n - 1]
    for i in range(n - 2, -1, -1):
        out[i] = dp[i] - cp[i] * out[i + 1]


@njit(cache=True, nogil=True)
def _equilibrium_fill(cL, cT, NLm, NTm, K):
    for i in range(NTm.size):
        for a in range(cL.size):
            thL = max(cL[a] / NLm, 0.0)
            cT[i, a] = NTm[i] * K[i] * thL / (1.0 + (K[i] - 1.0) * thL)


@njit(cache=True, nogil=True)
def _newton(cL, cT, cL_old, cT_old, T, dt, oriani, h, w, D0, E_L, NLm, pen_k, E_bc,
            NTm, nu_t, E_t, nu_d, E_d, ratio, dH, rtol, atol, max_iter):
    """Solve one backward-Euler step in place. Returns iterations used, or -1."""
    nn = cL.size
    nt = NTm.size
    D = D0 * math.exp(-E_L / (R * T))
    bc = pen_k * math.exp(-E_bc / (R * T)) / NLm
    k = np.empty(nt)
    p = np.empty(nt)
    K = np.empty(nt)
    for i in range(nt):
        k[i] = nu_t[i] * math.exp(-E_t[i] / (R * T))
        p[i] = nu_d[i] * math.exp(-E_d[i] / (R * T))
        K[i] = ratio[i] * math.exp(-dH[i] / (R * T))

    lo = np.zeros(nn)
    diag = np.zeros(nn)
    up = np.zeros(nn)
    res = np.zeros(nn)
    rhs = np.zeros(nn)
    dL = np.zeros(nn)
    RT = np.zeros((nt, nn))
    AT = np.ones((nt, nn))
    rLs = np.zeros((nt, nn))

    m1 = h / 3.0 / dt
    m2 = h / 6.0 / dt
    s = D / h
    norm0 = 0.0
    for it in range(max_iter + 1):
        for a in range(nn):
            lo[a] = 0.0
            diag[a] = 0.0
            up[a] = 0.0
            res[a] = 0.0
        for e in range(nn - 1):
            d0 = cL[e] - cL_old[e]
            d1 = cL[e + 1] - cL_old[e + 1]
            res[e] += m1 * d0 + m2 * d1 + s * (cL[e] - cL[e + 1])
            res[e + 1] += m2 * d0 + m1 * d1 + s * (cL[e + 1] - cL[e])
            diag[e] += m1 + s
            diag[e + 1] += m1 + s
            up[e] += m2 - s
            lo[e + 1] += m2 - s
        res[nn - 1] += bc * cL[nn - 1]
        diag[nn - 1] += bc
        for a in range(nn):
            rhs[a] = res[a]

        normT = 0.0
        for i in range(nt):
            for a in range(nn):
                thL = max(cL[a] / NLm, 0.0)
                if oriani:
                    den = 1.0 + (K[i] - 1.0) * thL
                    CT = NTm[i] * K[i] * thL / den
                    dCT = NTm[i] * K[i] / (NLm * den * den)
                    cT[i, a] = CT
                    res[a] += w[a] * (CT - cT_old[i, a]) / dt
                    rhs[a] += w[a] * (CT - cT_old[i, a]) / dt
                    diag[a] += w[a] * dCT / dt
                else:
                    thT = cT[i, a] / NTm[i]
                    r = NTm[i] * (k[i] * thL * (1.0 - thT) - p[i] * thT * (1.0 - thL))
                    rL = NTm[i] / NLm * (k[i] * (1.0 - thT) + p[i] * thT)
                    rT = -(k[i] * thL + p[i] * (1.0 - thL))
                    Rt = (cT[i, a] - cT_old[i, a]) / dt - r
                    A = 1.0 / dt - rT
                    RT[i, a] = Rt
                    AT[i, a] = A
                    rLs[i, a] = rL
                    res[a] += w[a] * r
                    rhs[a] += w[a] * r - w[a] * rT * Rt / A
                    diag[a] += w[a] * rL / (dt * A)
                    normT += (w[a] * Rt) ** 2

        norm = 0.0
        for a in range(nn):
            norm += res[a] * res[a]
        norm = math.sqrt(norm + normT)
        if it == 0:
            norm0 = norm
        # at least one correction is always applied: a small initial residual
        # only means the state itself is small
        if norm == 0.0 or (it > 0 and norm <= max(rtol * norm0, atol)):
            return it
        if it == max_iter:
            break

        for a in range(nn):
            rhs[a] = -rhs[a]
        _thomas(lo, diag, up, rhs, dL)

        # correction size relative to the state, for the round-off stagnation test
        dmax = 0.0
        cmax = 1e-300
        for a in range(nn):
            dmax = max(dmax, abs(dL[a]))
            cmax = max(cmax, abs(cL[a]))
            new = cL[a] + dL[a]
            cL[a] = new if new >= 0.0 else 0.5 * cL[a]
        if not oriani:
            for i in range(nt):
                for a in range(nn):
                    dT = (rLs[i, a] * dL[a] - RT[i, a]) / AT[i, a]
                    dmax = max(dmax, abs(dT))
                    cmax = max(cmax, abs(cT[i, a]))
                    new = cT[i, a] + dT
                    if new < 0.0:
                        new = 0.5 * cT[i, a]
                    elif new > NTm[i]:
                        new = 0.5 * (cT[i, a] + NTm[i])
                    cT[i, a] = new
        if dmax <= 1e-14 * cmax:
            if oriani:
                _equilibrium_fill(cL, cT, NLm, NTm, K)
            return it + 1
    return -1


@njit(cache=True, nogil=True)
def _inventory(cL, w):
    total = 0.0
    for a in range(cL.size):
        total += w[a] * cL[a]
    return total


@njit(cache=True, nogil=True)
def _march(cL, cT, oriani, t0, dt, n_steps, record_every,
           T_min, phi, t_rest, T_max,
           h, w, D0, E_L, NLm, pen_k, E_bc,
           NTm, nu_t, E_t, nu_d, E_d, ratio, dH,
           rtol, atol, max_iter, max_halvings,
           rec_t, rec_T, rec_j, rec_lat, rec_JT, stats):
    """Advance ``n_steps`` backward-Euler steps of size ``dt`` from time ``t0``.

    stats = [desorbed, newton iterations, clip count, failed step (-1 = none)]
    Returns 0 on success, 1 on non-convergence.
    """
    nn = cL.size
    nt = NTm.size
    cL_old = cL.copy()
    cT_old = cT.copy()
    cL_try = cL.copy()
    cT_try = cT.copy()
    IT_old = np.empty(nt)
    t = t0
    for step in range(n_steps):
        cL_old[:] = cL
        cT_old[:, :] = cT
        IL_old = _inventory(cL, w)
        for i in range(nt):
            IT_old[i] = 0.0
            for a in range(nn):
                IT_old[i] += w[a] * cT[i, a]

        ok = False
        for halving in range(max_halvings + 1):
            nsub = 2 ** halving
            sub = dt / nsub
            cL_try[:] = cL_old
            cT_try[:, :] = cT_old
            ok = True
            desorbed = 0.0
            newton_its = 0
            for q in range(nsub):
                ts = t + (q + 1) * sub
                Ts = _temperature(ts, T_min, phi, t_rest, T_max)
                cLs = cL_try.copy()
                cTs = cT_try.copy()
                iters = _newton(cL_try, cT_try, cLs, cTs, Ts, sub, oriani, h, w, D0, E_L, NLm,
                                pen_k, E_bc, NTm, nu_t, E_t, nu_d, E_d, ratio, dH,
                                rtol, atol, max_iter)
                if iters < 0:
                    ok = False
                    break
                newton_its += iters
                desorbed += sub * pen_k * math.exp(-E_bc / (R * Ts)) * cL_try[nn - 1] / NLm
            if ok:
                stats[0] += desorbed
                stats[1] += newton_its
                break
        if not ok:
            stats[3] = step
            return 1

        cL[:] = cL_try
        cT[:, :] = cT_try
        clipped = False
        for a in range(nn):
            if cL[a] < 0.0:
                cL[a] = 0.0
                clipped = True
            elif cL[a] > NLm:
                cL[a] = NLm
                clipped = True
        for i in range(nt):
            for a in range(nn):
                if cT[i, a] < 0.0:
                    cT[i, a] = 0.0
                    clipped = True
                elif cT[i, a] > NTm[i]:
                    cT[i, a] = NTm[i]
                    clipped = True
        if clipped:
            stats[2] += 1
        t = t0 + (step + 1) * dt

        if (step + 1) % record_every == 0:
            r = (step + 1) // record_every - 1
            T = _temperature(t, T_min, phi, t_rest, T_max)
            rec_t[r] = t
            rec_T[r] = T
            rec_j[r] = pen_k * math.exp(-E_bc / (R * T)) * cL[nn - 1] / NLm
            rec_lat[r] = -(_inventory(cL, w) - IL_old) / dt
            for i in range(nt):
                IT = 0.0
                for a in range(nn):
                    IT += w[a] * cT[i, a]
                rec_JT[r, i] = -(IT - IT_old[i]) / dt
    return 0


# ---------------------------------------------------------------------------
# python surface


@dataclass
class _Setup:
    """Flattened arguments for the compiled kernel."""

    h: float
    w: np.ndarray
    NTm: np.ndarray
    nu_t: np.ndarray
    E_t: np.ndarray
    nu_d: np.ndarray
    E_d: np.ndarray
    ratio: np.ndarray
    dH: np.ndarray

    @classmethod
    def build(cls, traps: Sequence[TrapSpec], test: TestParams, num: NumericalParams) -> "_Setup":
        n = num.n_elements
        h = test.L / 2.0 / n
        w = np.full(n + 1, h)
        w[0] = w[-1] = h / 2.0

        def arr(attr):
            return np.array([getattr(tr, attr) for tr in traps], dtype=float)

        return cls(
            h=h, w=w, NTm=arr("N_T_mol"), nu_t=arr("nu_t"), E_t=arr("E_t"), nu_d=arr("nu_d"),
            E_d=arr("E_d"), ratio=arr("nu_t") / arr("nu_d") if traps else np.zeros(0), dH=arr("delta_H"),
        )


def boundary_flux(theta_L_boundary: float, T: float, num: NumericalParams, mat: MaterialParams | None = None) -> float:
    """Penalty outflux per unit area at the sample face, mol/(m^2 s)."""
    return num.penalty_k * theta_L_boundary * math.exp(-num.E_bc / (R * T))


def initialize_state(mat: MaterialParams, traps: Sequence[TrapSpec], test: TestParams,
                     variant: ModelVariant = ModelVariant.MCNABB_FOSTER,
                     num: NumericalParams | None = None) -> SolverState:
    """Uniform lattice concentration with traps in equilibrium at T_min."""
    num = num or NumericalParams()
    theta_L0 = mat.C_L0 / mat.N_L_mol
    if theta_L0 >= 1.0:
        raise ValueError(f"initial lattice occupancy {theta_L0:.4g} must be < 1")
    nn = num.n_elements + 1
    c_L = np.full(nn, mat.C_L0)
    if ModelVariant(variant) is ModelVariant.ORIANI:
        return SolverState(c_L, None, 0.0)
    c_T = np.empty((len(traps), nn))
    for i, trap in enumerate(traps):
        theta_T = equilibrium_trap_occupancy(theta_L0, equilibrium_constant(test.T_min, trap))
        c_T[i, :] = theta_T * trap.N_T_mol
    return SolverState(c_L, c_T, 0.0)


def _oriani_traps(c_L, traps, T, mat):
    c_T = np.empty((len(traps), c_L.size))
    for i, trap in enumerate(traps):
        K = equilibrium_constant(T, trap)
        thL = np.clip(c_L / mat.N_L_mol, 0.0, None)
        c_T[i] = trap.N_T_mol * K * thL / (1.0 + (K - 1.0) * thL)
    return c_T


def trapped_concentrations(state: SolverState, traps: Sequence[TrapSpec], mat: MaterialParams,
                           test: TestParams) -> np.ndarray:
    """Nodal trapped concentrations; equilibrium values for an Oriani state."""
    if state.c_T is not None:
        return state.c_T
    return _oriani_traps(state.c_L, traps, temperature_at(state.t, test), mat)


class _Runner:
    def __init__(self, mat, traps, test, num, variant):
        self.mat, self.traps, self.test, self.num = mat, list(traps), test, num
        self.variant = ModelVariant(variant)
        self.oriani = self.variant is ModelVariant.ORIANI
        self.s = _Setup.build(self.traps, test, num)
        self.stats = np.array([0.0, 0.0, 0.0, -1.0])

    def march(self, c_L, c_T, t0, dt, n_steps, record_every):
        n_rec = n_steps // record_every
        nt = len(self.traps)
        rec = (np.zeros(n_rec), np.zeros(n_rec), np.zeros(n_rec), np.zeros(n_rec), np.zeros((n_rec, nt)))
        s, m, t, num = self.s, self.mat, self.test, self.num
        self.stats[3] = -1.0
        status = _march(
            c_L, c_T, self.oriani, t0, dt, n_steps, record_every,
            t.T_min, t.phi, t.t_rest, t.T_max,
            s.h, s.w, m.D0, m.E_L, m.N_L_mol, num.penalty_k, num.E_bc,
            s.NTm, s.nu_t, s.E_t, s.nu_d, s.E_d, s.ratio, s.dH,
            num.newton_rtol, num.newton_atol, num.newton_max_iter, num.max_halvings,
            *rec, self.stats,
        )
        if status != 0:
            idx = int(self.stats[3])
            raise NonConvergence(
                f"Newton did not converge at step {idx} (t={t0 + idx * dt:.6g} s) after "
                f"{num.max_halvings} time-step halvings", time_index=idx,
                iterations=num.newton_max_iter, traps=self.traps,
            )
        return rec


def step(state: SolverState, dt: float, variant: ModelVariant, mat: MaterialParams,
         traps: Sequence[TrapSpec], test: TestParams, num: NumericalParams | None = None) -> SolverState:
    """Advance ``state`` by one backward-Euler step of size ``dt``."""
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    num = num or NumericalParams()
    runner = _Runner(mat, traps, test, num, variant)
    c_L = np.array(state.c_L, dtype=float)
    if runner.oriani:
        c_T = _oriani_traps(c_L, runner.traps, temperature_at(state.t, test), mat)
    else:
        c_T = np.array(state.c_T, dtype=float).reshape(len(runner.traps), c_L.size)
    runner.march(c_L, c_T, state.t, dt, 1, 1)
    return SolverState(c_L, None if runner.oriani else c_T, state.t + dt)


def simulate_tds(mat: MaterialParams, traps: Sequence[TrapSpec], test: TestParams,
                 num: NumericalParams | None = None,
                 variant: ModelVariant = ModelVariant.MCNABB_FOSTER) -> Spectrum:
    """Simulate rest + ramp and record ``ntp`` boundary fluxes.

    Recorded points sit at ``T_min + m (T_max - T_min) / ntp`` for
    ``m = 0 .. ntp-1``; point 0 is the state at the end of the rest period.
    """
    num = num or NumericalParams()
    runner = _Runner(mat, traps, test, num, variant)
    nt = len(runner.traps)
    state = initialize_state(mat, runner.traps, test, variant, num)
    c_L = state.c_L
    c_T = _oriani_traps(c_L, runner.traps, test.T_min, mat) if runner.oriani else state.c_T
    w = runner.s.w
    initial = float(w @ c_L + (w @ c_T.T).sum())

    dt = num.time_step(test)
    ntp, f = num.ntp, num.f
    times = np.empty(ntp)
    temps = np.empty(ntp)
    flux = np.empty(ntp)
    lat = np.zeros(ntp)
    JT = np.zeros((ntp, nt))

    if test.t_rest > 0:
        n_rest = max(1, math.ceil(test.t_rest / dt - 1e-9))
        rec = runner.march(c_L, c_T, 0.0, test.t_rest / n_rest, n_rest, n_rest)
        times[0], temps[0], flux[0], lat[0], JT[0] = (r[0] for r in rec)
    else:
        times[0], temps[0] = 0.0, test.T_min
        flux[0] = boundary_flux(c_L[-1] / mat.N_L_mol, test.T_min, num)
    rec = runner.march(c_L, c_T, test.t_rest, dt, (ntp - 1) * f, f)
    times[1:], temps[1:], flux[1:], lat[1:], JT[1:] = rec

    residual = float(w @ c_L + (w @ c_T.T).sum())
    book = MassBook(initial=initial, desorbed=float(runner.stats[0]), residual=residual)
    clips = int(runner.stats[2])
    if clips:
        log.warning("occupancies clipped to [0, 1] after %d steps", clips)
    return Spectrum(temps, flux, JT, times, lat, book, int(runner.stats[1]), clips)


def mass_audit(spectrum: Spectrum) -> float:
    """Relative hydrogen imbalance |initial - (desorbed + residual)| / initial."""
    book = spectrum.mass
    if book is None:
        raise ValueError("spectrum carries no mass bookkeeping; produce it with simulate_tds")
    if book.initial == 0.0:
        return 0.0
    return abs(book.initial - (book.desorbed + book.residual)) / book.initial
