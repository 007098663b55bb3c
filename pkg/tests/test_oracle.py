import numpy as np
import pytest

from rydberg_rnn import oracle
from rydberg_rnn.lattice import build_spec, diagonal_energies, without_drive
from rydberg_rnn.oracle import (CapacityError, Dataset, ExactGroundState, all_configurations,
                                apply_hamiltonian, enumerated_energy, exact_logprob, ground_state,
                                read_dataset, sample_dataset, write_dataset)
from rydberg_rnn.wavefunction import RnnParams, init_params, log_prob


def dense_hamiltonian(spec):
    """Independent construction of H from Kronecker products."""
    n = spec.n_atoms
    x = np.array([[0.0, 1.0], [1.0, 0.0]])
    num = np.diag([0.0, 1.0])

    def site_op(op, i):
        # basis index bit i = site i, so site i is the i-th least significant factor
        out = np.eye(1)
        for k in reversed(range(n)):
            out = np.kron(out, op if k == i else np.eye(2))
        return out

    h = np.zeros((2**n, 2**n))
    for i in range(n):
        h -= 0.5 * spec.omega * site_op(x, i)
        h -= spec.delta * site_op(num, i)
        for j in range(i + 1, n):
            h += spec.couplings[i, j] * site_op(num, i) @ site_op(num, j)
    return h


def test_matrix_free_matches_dense():
    spec = build_spec(2, omega=0.8, delta=1.3)
    h = dense_hamiltonian(spec)
    rng = np.random.default_rng(0)
    for _ in range(3):
        v = rng.normal(size=16)
        np.testing.assert_allclose(apply_hamiltonian(spec, v), h @ v, atol=1e-12)


def test_single_atom_closed_form():
    gs = ground_state(build_spec(1))
    assert gs.energy == pytest.approx((-1 - np.sqrt(2)) / 2, abs=1e-12)


def test_l2_no_drive_is_classical_minimum():
    spec = without_drive(build_spec(2))
    brute = diagonal_energies(spec, all_configurations(4)).min()
    assert brute == pytest.approx(-1.125, abs=1e-14)
    gs = ground_state(spec)
    assert gs.energy == pytest.approx(-1.125, abs=1e-12)


def test_ground_state_invariants_l3():
    spec = build_spec(3)
    gs = ground_state(spec)
    assert abs(np.sum(gs.amplitudes**2) - 1) < 1e-10
    assert np.all(gs.amplitudes >= 0)
    assert gs.residual <= 1e-8
    dense = dense_hamiltonian(spec)
    assert gs.energy == pytest.approx(np.linalg.eigvalsh(dense)[0], abs=1e-10)


def test_iterative_solver_l4_reference():
    gs = ground_state(build_spec(4))
    assert gs.energy / 16 == pytest.approx(-0.4534, abs=5e-4)
    assert np.linalg.norm(gs.amplitudes) == pytest.approx(1.0, abs=1e-10)
    assert gs.amplitudes.min() >= 0


def test_capacity_error():
    with pytest.raises(CapacityError):
        ground_state(build_spec(5))


def test_convergence_error_reports_residual():
    err = oracle.ConvergenceError(1e-3)
    assert err.residual == 1e-3
    assert "1.000e-03" in str(err)


def test_sample_delta_distribution():
    amps = np.zeros(16)
    amps[9] = 1.0
    data = sample_dataset(ExactGroundState(energy=0.0, amplitudes=amps), 200, seed=3)
    assert np.all(data.samples == np.array([1, 0, 0, 1]))


def test_sample_deterministic():
    gs = ground_state(build_spec(2))
    a = sample_dataset(gs, 500, seed=11)
    b = sample_dataset(gs, 500, seed=11)
    np.testing.assert_array_equal(a.samples, b.samples)
    c = sample_dataset(gs, 500, seed=12)
    assert not np.array_equal(a.samples, c.samples)


def test_sample_requires_positive_count():
    gs = ground_state(build_spec(1))
    with pytest.raises(ValueError):
        sample_dataset(gs, 0, seed=0)


def test_sample_marginals_l4():
    gs = ground_state(build_spec(4))
    count = 100_000
    data = sample_dataset(gs, count, seed=5)
    marg = all_configurations(16).T.astype(float) @ gs.probabilities
    freq = data.samples.mean(axis=0)
    se = np.sqrt(marg * (1 - marg) / count)
    assert np.all(np.abs(freq - marg) <= 4 * se)


def test_sampler_total_variation_n4():
    gs = ground_state(build_spec(2))
    count = 1_000_000
    data = sample_dataset(gs, count, seed=2)
    counts = np.bincount(oracle.configuration_index(data.samples), minlength=16)
    tv = 0.5 * np.abs(counts / count - gs.probabilities).sum()
    assert tv <= 0.01


def test_enumerated_energy_of_exact_state():
    spec = build_spec(3)
    gs = ground_state(spec)
    assert enumerated_energy(spec, exact_logprob(gs)) == pytest.approx(gs.energy, abs=1e-9)


def test_enumerated_energy_uniform_single_atom():
    spec = build_spec(1)
    uniform = lambda c: np.full(len(c), np.log(0.5))
    assert enumerated_energy(spec, uniform) == pytest.approx(-1.0, abs=1e-14)


def test_enumerated_energy_capacity():
    with pytest.raises(CapacityError):
        enumerated_energy(build_spec(5), lambda c: np.zeros(len(c)))


@pytest.mark.parametrize("L", [2, 3])
def test_variational_bound(L):
    spec = build_spec(L)
    e0 = ground_state(spec).energy
    for seed in range(50):
        params = init_params(3, seed)
        # push away from the Glorot scale so biases matter too
        rng = np.random.default_rng(seed)
        params = params.map(lambda t: t + rng.normal(scale=0.5, size=t.shape))
        assert enumerated_energy(spec, lambda c: log_prob(params, c)) >= e0 - 1e-9


def test_eigenstate_local_energy_is_flat():
    from rydberg_rnn.energy import local_energies_from_logprob

    spec = build_spec(3)
    gs = ground_state(spec)
    configs = all_configurations(9)
    keep = gs.probabilities > 1e-12
    e_loc = local_energies_from_logprob(spec, exact_logprob(gs), configs[keep])
    assert np.max(np.abs(e_loc - gs.energy)) <= 1e-6


def test_dataset_file_round_trip(tmp_path):
    spec = build_spec(2)
    data = sample_dataset(ground_state(spec), 37, seed=4)
    path = tmp_path / "d.txt"
    write_dataset(path, data, spec)
    lines = path.read_text().splitlines()
    assert lines[0] == f"# L=2 delta=1.0 omega=1.0 rb={spec.rb!r} seed=4 source=oracle"
    assert len(lines) == 38
    assert all(len(line) == 4 and set(line) <= {"0", "1"} for line in lines[1:])
    back, spec2 = read_dataset(path)
    np.testing.assert_array_equal(back.samples, data.samples)
    assert back.seed == 4 and back.source == "oracle"
    np.testing.assert_array_equal(spec2.couplings, spec.couplings)


def test_dataset_file_rejects_bad_lines(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("# L=2 delta=1 omega=1 rb=1 seed=0 source=file\n0101\n012\n")
    with pytest.raises(ValueError):
        read_dataset(path)
    path.write_text("0101\n")
    with pytest.raises(ValueError):
        read_dataset(path)


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(samples=np.array([[0, 2]]))
    assert Dataset(samples=np.zeros((3, 5))).n_atoms == 5


def test_enumerated_energy_of_uniform_rnn():
    spec = build_spec(2)
    uniform = enumerated_energy(spec, lambda c: log_prob(RnnParams.zeros(2), c))
    expected = diagonal_energies(spec, all_configurations(4)).mean() - 0.5 * spec.omega * 4
    assert uniform == pytest.approx(expected, abs=1e-12)
