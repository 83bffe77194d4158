import json
import math

import numpy as np
import pytest

from tdsml.fem import NumericalParams, simulate_tds
from tdsml.psofit import PsoConfig, decode, encode, fit, objective
from tdsml.transport import MaterialParams, TestParams, TrapSpec

MAT, TEST = MaterialParams(), TestParams()


@pytest.fixture(scope="module")
def single_target():
    truth = [TrapSpec.from_mol(-80e3, 2.0)]
    return truth, simulate_tds(MAT, truth, TEST)


def test_objective_zero_at_truth(single_target):
    truth, target = single_target
    assert objective(truth, target, MAT, TEST) < 1e-20


def test_objective_permutation_invariant(ref_traps):
    target = simulate_tds(MAT, ref_traps, TEST)
    shuffled = [ref_traps[2], ref_traps[0], ref_traps[1]]
    assert objective(shuffled, target, MAT, TEST) == pytest.approx(objective(ref_traps, target, MAT, TEST),
                                                                    abs=1e-20)


def test_objective_sensitive_to_energy(ref_traps):
    target = simulate_tds(MAT, ref_traps, TEST)
    moved = list(ref_traps)
    moved[1] = TrapSpec.from_mol(ref_traps[1].delta_H - 10e3, ref_traps[1].N_T_mol)
    assert objective(moved, target, MAT, TEST) > objective(ref_traps, target, MAT, TEST) + 1e-3


def test_solver_failure_scores_infinity(single_target):
    truth, target = single_target
    bad = NumericalParams(newton_max_iter=0, max_halvings=0)
    assert objective(truth, target, MAT, TEST, bad) == math.inf


def test_pinned_particle_starts_at_zero(single_target):
    truth, target = single_target
    cfg = PsoConfig(swarm_size=1, iterations=0)
    res = fit(target, 1, cfg, MAT, TEST, initial_positions=encode(truth)[None, :])
    assert res.trace[0] < 1e-20
    assert res.traps[0].delta_H == pytest.approx(truth[0].delta_H)


def test_encode_decode_round_trip():
    traps = [TrapSpec.from_mol(-90e3, 1.0), TrapSpec.from_mol(-60e3, 3.0)]
    back = decode(encode(traps), MAT)
    assert [t.delta_H for t in back] == [-60e3, -90e3]
    assert back[1].N_T_mol == pytest.approx(1.0)


def test_single_trap_recovery(single_target):
    truth, target = single_target
    cfg = PsoConfig(energy_bounds=(50e3, 150e3), density_bounds=(0.1, 10.0), swarm_size=20, iterations=40, seed=1)
    res = fit(target, 1, cfg, MAT, TEST)
    assert abs(res.traps[0].delta_H - truth[0].delta_H) < 2e3
    assert 1 / 1.5 < res.traps[0].N_T_mol / truth[0].N_T_mol < 1.5
    assert res.objective == min(res.trace)
    assert all(b <= a for a, b in zip(res.trace, res.trace[1:]))


def test_fit_deterministic_and_in_bounds(single_target):
    _, target = single_target
    cfg = PsoConfig(swarm_size=4, iterations=3, seed=9)
    a = fit(target, 2, cfg, MAT, TEST)
    b = fit(target, 2, cfg, MAT, TEST)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
    for t in a.traps:
        assert 50e3 <= -t.delta_H <= 150e3
        assert 0.1 * (1 - 1e-12) <= t.N_T_mol <= 10.0 * (1 + 1e-12)
    assert a.n_evaluations == 4 * 4


def test_config_validation():
    with pytest.raises(ValueError):
        PsoConfig(energy_bounds=(100e3, 50e3))
    with pytest.raises(ValueError):
        PsoConfig(swarm_size=0)
    with pytest.raises(ValueError):
        fit(simulate_tds(MAT, [], TEST), 0, PsoConfig(), MAT, TEST)


def test_fit_result_json(single_target):
    _, target = single_target
    res = fit(target, 1, PsoConfig(swarm_size=2, iterations=1), MAT, TEST)
    d = json.loads(json.dumps(res.to_dict()))
    assert d["n_traps"] == 1 and len(d["trace"]) == 2
    assert np.isfinite(d["objective"])
