import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from conftest import series_flux
from tdsml.fem import (
    MassBook,
    ModelVariant,
    NonConvergence,
    NumericalParams,
    SolverState,
    Spectrum,
    boundary_flux,
    initialize_state,
    mass_audit,
    simulate_tds,
    step,
)
from tdsml.transport import R, MaterialParams, TestParams, TrapSpec, lattice_diffusivity


def semi_discrete_matrices(mat, test, num, T):
    """Independent dense assembly of the trap-free system M c' = -A c."""
    n = num.n_elements
    h = test.L / 2 / n
    M = np.zeros((n + 1, n + 1))
    A = np.zeros((n + 1, n + 1))
    D = lattice_diffusivity(T, mat)
    for e in range(n):
        idx = np.ix_([e, e + 1], [e, e + 1])
        M[idx] += h / 6 * np.array([[2, 1], [1, 2]])
        A[idx] += D / h * np.array([[1, -1], [-1, 1]])
    A[n, n] += num.penalty_k * np.exp(-num.E_bc / (R * T)) / mat.N_L_mol
    return M, A


# ---------------------------------------------------------------- initial state

def test_initial_state_without_traps(mat, test_params):
    s = initialize_state(mat, [], test_params)
    assert s.c_T.shape == (0, 26)
    assert np.all(s.c_L == mat.C_L0)
    assert initialize_state(mat, [], test_params, ModelVariant.ORIANI).c_T is None


def test_initial_lattice_occupancy(mat):
    assert mat.C_L0 / mat.N_L_mol == pytest.approx(7.08e-8, rel=1e-3)


def test_deep_trap_starts_saturated(mat, test_params):
    trap = TrapSpec.from_mol(-150e3, 3.0)
    s = initialize_state(mat, [trap], test_params)
    assert np.allclose(s.c_T[0], trap.N_T_mol, rtol=1e-9)


def test_initial_occupancy_must_be_below_one():
    with pytest.raises(ValueError):
        MaterialParams(C_L0=1e7)


# ---------------------------------------------------------------- boundary

def test_boundary_flux():
    num = NumericalParams()
    assert boundary_flux(0.0, 400.0, num) == 0.0
    j = boundary_flux(1e-7, 400.0, num)
    assert boundary_flux(1e-7, 400.0, NumericalParams(penalty_k=2 * num.penalty_k)) == pytest.approx(2 * j)
    assert j == pytest.approx(8e5 * 1e-7 * np.exp(-1.71e4 / (R * 400.0)))


# ---------------------------------------------------------------- single step

def test_empty_state_is_fixed_point(mat, test_params):
    s = SolverState(np.zeros(26), np.zeros((0, 26)), 0.0)
    out = step(s, 10.0, ModelVariant.MCNABB_FOSTER, mat, [], test_params)
    assert np.all(out.c_L == 0.0)
    assert out.t == 10.0


def test_step_matches_independent_linear_solve(mat, test_params):
    num = NumericalParams()
    s0 = initialize_state(mat, [], test_params)
    rng = np.random.default_rng(3)
    s0.c_L = s0.c_L * (1 + 0.2 * rng.random(26))
    dt = 7.0
    M, A = semi_discrete_matrices(mat, test_params, num, test_params.T_min)
    expect = np.linalg.solve(M / dt + A, M @ s0.c_L / dt)
    got = step(s0, dt, ModelVariant.MCNABB_FOSTER, mat, [], test_params, num).c_L
    assert np.max(np.abs(got - expect)) <= 1e-8 * np.max(np.abs(expect))


def test_many_small_steps_follow_the_semi_discrete_ode(mat, test_params):
    num = NumericalParams()
    s = initialize_state(mat, [], test_params)
    M, A = semi_discrete_matrices(mat, test_params, num, test_params.T_min)
    t_end = 200.0
    ref = solve_ivp(lambda t, c: -np.linalg.solve(M, A @ c), (0, t_end), s.c_L, method="Radau",
                    rtol=1e-11, atol=1e-16).y[:, -1]
    n = 2000
    for _ in range(n):
        s = step(s, t_end / n, ModelVariant.MCNABB_FOSTER, mat, [], test_params, num)
    # backward Euler is first order: the gap shrinks with the step size
    assert np.max(np.abs(s.c_L - ref)) / np.max(ref) < 2e-3


def test_kinetic_and_equilibrium_steps_agree(mat, test_params, ref_traps):
    num = NumericalParams()
    dt = num.time_step(test_params)
    mf = initialize_state(mat, ref_traps, test_params)
    ori = SolverState(mf.c_L.copy(), None, 0.0)
    for _ in range(num.f):
        mf = step(mf, dt, ModelVariant.MCNABB_FOSTER, mat, ref_traps, test_params, num)
        ori = step(ori, dt, ModelVariant.ORIANI, mat, ref_traps, test_params, num)
    assert np.max(np.abs(mf.c_L - ori.c_L) / ori.c_L) < 1e-3


def test_step_rejects_bad_dt(mat, test_params):
    with pytest.raises(ValueError):
        step(initialize_state(mat, [], test_params), 0.0, ModelVariant.MCNABB_FOSTER, mat, [], test_params)


def test_non_convergence_is_reported(mat, test_params, ref_traps):
    num = NumericalParams(newton_max_iter=0, max_halvings=1)
    with pytest.raises(NonConvergence) as info:
        simulate_tds(mat, ref_traps, test_params, num)
    assert info.value.time_index >= 0
    assert len(info.value.traps) == 3


# ---------------------------------------------------------------- full runs

def test_recording_grid(mat, test_params, ref_traps):
    num = NumericalParams()
    s = simulate_tds(mat, ref_traps, test_params, num)
    assert len(s) == num.ntp
    expect = test_params.T_min + np.arange(num.ntp) * (test_params.T_max - test_params.T_min) / num.ntp
    assert np.allclose(s.temperatures, expect, atol=1e-9)
    assert np.all(np.diff(s.temperatures) > 0)
    assert num.time_step(test_params) == pytest.approx(test_params.t_test / (64 * 10))


@settings(max_examples=20, deadline=None)
@given(L=st.floats(5e-4, 1e-2), T=st.floats(250.0, 600.0))
def test_isothermal_desorption_matches_series(L, T):
    mat = MaterialParams()
    half = L / 2
    D = lattice_diffusivity(T, mat)
    span = half * half / D
    # 1 mK ramp over one diffusion time: isothermal for all practical purposes
    test = TestParams(L=L, t_rest=0.0, phi=1e-3 / span, T_min=T, T_max=T + 1e-3)
    num = NumericalParams(penalty_k=8e8)  # stiff penalty ~ zero-concentration face
    s = simulate_tds(mat, [], test, num)
    ref = series_flux(s.times[2:], D, mat.C_L0, half)
    assert np.max(np.abs(s.fluxes[2:] / ref - 1)) < 0.02


def test_deep_trap_peaks_later(mat, test_params):
    shallow = simulate_tds(mat, [TrapSpec.from_mol(-50e3, 1.0)], test_params)
    deep = simulate_tds(mat, [TrapSpec.from_mol(-100e3, 1.0)], test_params)
    interior = deep.fluxes[1:-1]
    n_max = np.sum((interior > deep.fluxes[:-2]) & (interior > deep.fluxes[2:]))
    assert n_max == 1
    assert deep.temperatures[np.argmax(deep.fluxes)] > shallow.temperatures[np.argmax(shallow.fluxes)]


def test_flux_nonnegative_and_decaying(mat, ref_traps):
    test = TestParams(T_max=1100.0)
    s = simulate_tds(mat, ref_traps, test)
    assert np.all(s.fluxes >= -1e-12 * s.fluxes.max())
    assert s.fluxes[-1] < 1e-3 * s.fluxes.max()


def test_trap_contributions_balance_flux(mat, test_params, ref_traps):
    s = simulate_tds(mat, ref_traps, test_params)
    total = s.lattice_release[1:] + s.trap_fluxes[1:].sum(axis=1)
    assert np.max(np.abs(total - s.fluxes[1:])) < 1e-9 * s.fluxes.max()


def test_oriani_and_kinetic_spectra_agree(mat, test_params, ref_traps):
    mf = simulate_tds(mat, ref_traps, test_params)
    ori = simulate_tds(mat, ref_traps, test_params, variant=ModelVariant.ORIANI)
    assert np.max(np.abs(mf.fluxes - ori.fluxes)) < 0.02 * mf.fluxes.max()


def test_no_trap_spectrum_single_peak(mat, test_params):
    s = simulate_tds(mat, [], test_params)
    assert s.trap_fluxes.shape == (64, 0)
    assert np.all(s.fluxes >= 0)


def test_zero_rest_records_initial_flux(mat):
    test = TestParams(t_rest=0.0)
    num = NumericalParams()
    s = simulate_tds(mat, [], test, num)
    assert s.fluxes[0] == pytest.approx(boundary_flux(mat.theta_L0, test.T_min, num))


# ---------------------------------------------------------------- mass audit

def test_mass_audit_zero_inventory():
    s = Spectrum([300.0, 301.0], [0.0, 0.0], mass=MassBook(0.0, 0.0, 0.0))
    assert mass_audit(s) == 0.0


@pytest.mark.parametrize("f", [1, 2, 5, 10, 20, 50])
def test_mass_audit_small_for_every_f(mat, test_params, ref_traps, f):
    s = simulate_tds(mat, ref_traps, test_params, NumericalParams(f=f))
    # the step bookkeeping is exact, so only round-off remains at any f
    assert mass_audit(s) < 1e-10


def test_mass_audit_requires_bookkeeping():
    with pytest.raises(ValueError):
        mass_audit(Spectrum([1.0, 2.0], [0.0, 0.0]))


# ---------------------------------------------------------------- csv

def test_csv_round_trip(tmp_path, mat, test_params, ref_traps):
    s = simulate_tds(mat, ref_traps, test_params)
    path = tmp_path / "s.csv"
    s.to_csv(path)
    assert path.read_text().splitlines()[0] == "temperature_K,flux_mol_m2_s,J_T_1,J_T_2,J_T_3"
    back = Spectrum.from_csv(path)
    assert np.array_equal(back.temperatures, s.temperatures)
    assert np.array_equal(back.fluxes, s.fluxes)
    assert np.array_equal(back.trap_fluxes, s.trap_fluxes)


def test_csv_headerless_and_comments(tmp_path):
    path = tmp_path / "raw.csv"
    path.write_text("# measured\n300,1e-8\n400,3e-8\n")
    s = Spectrum.from_csv(path)
    assert s.temperatures.tolist() == [300.0, 400.0]


def test_numerical_validation():
    for bad in (dict(n_elements=1), dict(ntp=1), dict(f=0), dict(penalty_k=0.0)):
        with pytest.raises(ValueError):
            NumericalParams(**bad)
