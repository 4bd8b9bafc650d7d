import json
import math

import numpy as np
import pytest

from faultfilter.cascade import PlantModel
from faultfilter.faultproc import kolmogorov_solve, validate_qmatrix
from faultfilter.filtering import FilterConfig, filter_record
from faultfilter.linop import sigma_minus, sigma_x, sigma_z
from faultfilter.truthsim import (
    RecordFormatError,
    master_solve,
    propagate_truth,
    read_record,
    simulate_batch,
    simulate_record,
)
from faultfilter.wavepacket import Wavepacket

from oracles import joint_master_blocks

GROUND = np.diag([0.0, 1.0]).astype(complex)


def rng(seed, i=0):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))


def test_master_solve_matches_joint_space_oracle(desk_plant, desk_faults, photon):
    times, blocks = master_solve(desk_plant, desk_faults, photon, 3.0, 1e-3, record_every=500)
    ref = joint_master_blocks(desk_plant.H_modes, desk_plant.L, desk_plant.pi0,
                              desk_faults.Pi, desk_faults.p0, photon, times)
    assert np.abs(blocks - ref).max() <= 1e-8


def test_master_solve_gaussian_drive():
    w = Wavepacket.gaussian(1.5, 0.6)
    plant = PlantModel(np.stack([sigma_x(), sigma_z()]), 0.8 * sigma_minus(), GROUND)
    fm = validate_qmatrix([[-0.5, 0.3], [0.5, -0.3]], [0.5, 0.5])
    times, blocks = master_solve(plant, fm, w, 3.0, 1e-3, record_every=250)
    ref = joint_master_blocks(plant.H_modes, plant.L, plant.pi0, fm.Pi, fm.p0, w, times)
    assert np.abs(blocks - ref).max() <= 1e-8


def test_master_solve_bare_ancilla(photon):
    plant = PlantModel(np.zeros((1, 2, 2)), np.zeros((2, 2)), GROUND)
    _, blocks = master_solve(plant, validate_qmatrix([[0.0]]), photon, 5.0, 1e-3, 100)
    tr00 = np.einsum("kii->k", blocks[:, 0, 0]).real
    assert np.allclose(tr00, 1.0, atol=1e-10)


def test_master_solve_mass_and_marginals():
    w = Wavepacket.exponential(1.0)
    H = np.stack([sigma_z()] * 3)
    plant = PlantModel(H, np.zeros((2, 2)), GROUND)
    fm = validate_qmatrix([[-1.0, 0.5, 0.0], [0.7, -0.5, 0.8], [0.3, 0.0, -0.8]],
                          [0.5, 0.5, 0.0])
    times, blocks = master_solve(plant, fm, w, 4.0, 1e-3, record_every=100)
    masses = np.einsum("kjii->kj", blocks[:, :, 3]).real
    assert np.allclose(masses.sum(axis=1), 1.0, atol=1e-12)
    p = kolmogorov_solve(fm, 4.0, 1e-3)[::100]
    assert np.abs(masses - p).max() <= 1e-10


def test_master_solve_mass_conserved(desk_plant, desk_faults, photon):
    _, blocks = master_solve(desk_plant, desk_faults, photon, 5.0, 1e-3, 250)
    assert np.allclose(np.einsum("kjii->k", blocks[:, :, 3]).real, 1.0, atol=1e-12)


def test_record_replay_is_bit_identical(desk_plant, desk_faults, photon):
    rec = simulate_record(desk_plant, desk_faults, photon, 2.0, 1e-3, rng(3))
    dY, K, states = propagate_truth(desk_plant, photon, rec.fault_path.modes, 1e-3,
                                    dY=rec.dY, keep_states=True)
    assert np.array_equal(dY, rec.dY)
    assert np.array_equal(K, rec.K_true)
    assert np.array_equal(states, rec.hidden_states)


def test_batch_independent_of_grouping(desk_plant, desk_faults, photon):
    together = simulate_batch(desk_plant, desk_faults, photon, 1.0, 1e-3,
                              [rng(4, i) for i in range(3)])
    alone = simulate_batch(desk_plant, desk_faults, photon, 1.0, 1e-3, [rng(4, 2)])
    assert np.array_equal(together[2].dY, alone[0].dY)
    assert together[2].fault_path.jumps == alone[0].fault_path.jumps


def test_constant_path_without_faults(desk_plant, photon):
    fm = validate_qmatrix(np.zeros((2, 2)), [0.0, 1.0])
    rec = simulate_record(desk_plant, fm, photon, 1.0, 1e-3, rng(5), keep_states=False)
    assert np.all(rec.fault_path.modes == 1)
    assert rec.hidden_states is None


def test_uncoupled_system_drift_comes_from_photon(photon):
    plant = PlantModel(np.stack([sigma_z()]), np.zeros((2, 2)), GROUND)
    fm = validate_qmatrix([[0.0]])
    rec = simulate_record(plant, fm, photon, 1.0, 1e-3, rng(6))
    blocks = rec.hidden_states
    xi = photon.source(rec.times[:-1])
    expected = 2 * (xi * np.einsum("kii->k", blocks[:-1, 2])).real
    assert np.allclose(rec.K_true, expected, atol=1e-14)
    assert np.all(blocks[0, 2] == 0)


def test_increment_moments(desk_plant, desk_faults, photon):
    dt = 1e-3
    recs = simulate_batch(desk_plant, desk_faults, photon, 10.0, dt,
                          [rng(7, i) for i in range(12)], keep_states=False)
    dW = np.concatenate([r.dY - r.K_true * dt for r in recs])
    m = dW.size
    assert m >= 10**5
    assert abs(dW.mean()) <= 3 * dW.std() / math.sqrt(m)
    var_se = math.sqrt(2.0 / m) * dt
    assert abs(dW.var() - dt) <= 3 * var_se


def test_true_path_filter_is_a_valid_state(desk_plant, desk_faults, photon):
    rec = simulate_record(desk_plant, desk_faults, photon, 3.0, 1e-3, rng(8))
    tr = np.einsum("kii->k", rec.hidden_states[:, 3]).real
    assert np.allclose(tr, 1.0, atol=1e-12)
    assert np.allclose(rec.hidden_states[:, 1],
                       np.conj(np.swapaxes(rec.hidden_states[:, 2], -1, -2)))


def test_filter_on_simulated_record(desk_plant, desk_faults, photon):
    rec = simulate_record(desk_plant, desk_faults, photon, 1.0, 1e-3, rng(9))
    traj = filter_record(desk_plant, desk_faults, photon, rec.dY, FilterConfig(1e-3))
    assert np.allclose(traj.p_hat.sum(axis=-1), 1.0, atol=1e-12)


def test_record_file_round_trip(tmp_path, desk_plant, desk_faults, photon):
    rec = simulate_record(desk_plant, desk_faults, photon, 0.5, 1e-3, rng(10))
    rec.meta = {"seed": 10}
    rec.write(tmp_path / "r.csv", tmp_path / "r.json")
    back = read_record(tmp_path / "r.csv", tmp_path / "r.json")
    assert np.array_equal(back.dY, rec.dY)
    assert back.dt == rec.dt and back.n_steps == 500
    side = json.loads((tmp_path / "r.json").read_text())
    assert side["seed"] == 10 and "hidden_path" in side


def test_truncated_record(tmp_path, desk_plant, desk_faults, photon):
    rec = simulate_record(desk_plant, desk_faults, photon, 0.1, 1e-3, rng(11))
    rec.write(tmp_path / "r.csv", tmp_path / "r.json")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    (tmp_path / "r.csv").write_text("\n".join(lines[:50]) + "\n")
    with pytest.raises(RecordFormatError, match="truncated"):
        read_record(tmp_path / "r.csv", tmp_path / "r.json")
    (tmp_path / "r.csv").write_text("\n".join(lines[:50]) + "\n0.049,1.0,\n")
    with pytest.raises(RecordFormatError):
        read_record(tmp_path / "r.csv")


@pytest.mark.parametrize("text", [
    "",
    "time,value\n0,1\n",
    "t,dY\n0,abc\n",
    "t,dY\n0,nan\n0.001,0\n",
    "t,dY\n0,0\n0.001,0\n0.003,0\n",
    "t,dY\n0.5,0\n0.501,0\n",
])
def test_malformed_records(tmp_path, text):
    (tmp_path / "r.csv").write_text(text)
    with pytest.raises(RecordFormatError):
        read_record(tmp_path / "r.csv")


def test_propagate_truth_needs_one_drive(desk_plant, photon):
    with pytest.raises(ValueError):
        propagate_truth(desk_plant, photon, np.zeros(3, int), 1e-3)
    with pytest.raises(ValueError):
        simulate_record(desk_plant, validate_qmatrix(np.zeros((3, 3))), photon, 1.0, 1e-3,
                        rng(0))
