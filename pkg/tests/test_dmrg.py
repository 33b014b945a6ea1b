"""TFIM ground-state search against dense diagonalization."""

import numpy as np
import pytest

from spatea import dmrg
from spatea.autodiff import CapabilityError

X = np.array([[0.0, 1.0], [1.0, 0.0]])
Z = np.array([[1.0, 0.0], [0.0, -1.0]])


def dense_tfim(n, j, h):
    """Independent Kronecker-sum construction."""
    dim = 2 ** n
    ham = np.zeros((dim, dim))

    def op_at(op, k):
        mats = [np.eye(2)] * n
        mats[k] = op
        out = mats[0]
        for m in mats[1:]:
            out = np.kron(out, m)
        return out

    for k in range(n - 1):
        ham -= j * op_at(Z, k) @ op_at(Z, k + 1)
    for k in range(n):
        ham -= h * op_at(X, k)
    return ham


class TestMpo:
    def test_two_site_ising(self):
        mpo = dmrg.build_tfim_mpo(2, 1.0, 0.0)
        assert np.max(np.abs(mpo.to_dense() + np.kron(Z, Z))) <= 1e-14

    @pytest.mark.parametrize("j,h", [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0),
                                     (1.0, 0.5), (-0.7, 0.3)])
    def test_matches_kronecker_sum(self, j, h):
        mpo = dmrg.build_tfim_mpo(8, j, h)
        assert np.max(np.abs(mpo.to_dense() - dense_tfim(8, j, h))) <= 1e-12

    def test_bond_dimension_three(self):
        mpo = dmrg.build_tfim_mpo(6, 1.0, 1.0)
        assert [s.shape[3] for s in mpo.sites[:-1]] == [3] * 5

    def test_hermitian(self):
        for n in (4, 8, 10):
            dense = dmrg.build_tfim_mpo(n, 1.0, 0.7).to_dense()
            assert np.max(np.abs(dense - dense.conj().T)) <= 1e-12

    def test_too_small(self):
        with pytest.raises(ValueError):
            dmrg.build_tfim_mpo(1, 1.0, 1.0)

    def test_validation(self):
        with pytest.raises(ValueError):
            dmrg.MPO([np.zeros((1, 2, 2))])
        with pytest.raises(ValueError):
            dmrg.MPO([np.zeros((2, 2, 2, 1))])


class TestExactDiag:
    def test_classical_ising(self):
        e0, _ = dmrg.exact_diag(dmrg.build_tfim_mpo(8, 1.0, 0.0))
        assert abs(e0 - (-7.0)) <= 1e-10

    def test_pure_field(self):
        e0, _ = dmrg.exact_diag(dmrg.build_tfim_mpo(8, 0.0, 1.0))
        assert abs(e0 - (-8.0)) <= 1e-10

    def test_residual(self):
        mpo = dmrg.build_tfim_mpo(6, 1.0, 1.0)
        e0, v0 = dmrg.exact_diag(mpo)
        assert np.linalg.norm(mpo.to_dense() @ v0 - e0 * v0) <= 1e-8

    def test_capability_limit(self):
        mpo = dmrg.build_tfim_mpo(13, 1.0, 1.0)
        with pytest.raises(CapabilityError):
            dmrg.exact_diag(mpo)


class TestLanczos:
    def test_matches_dense_eig(self, rng):
        for _ in range(10):
            a = rng.standard_normal((80, 80))
            a = a + a.T
            want = np.linalg.eigvalsh(a)[0]
            got, vec = dmrg._lanczos_lowest(lambda x: a @ x,
                                            rng.standard_normal(80))
            assert abs(got - want) <= 1e-8
            assert np.linalg.norm(a @ vec - got * vec) <= 1e-6


class TestDmrg:
    def test_classical_ground_state_fast(self):
        mpo = dmrg.build_tfim_mpo(8, 1.0, 0.0)
        state = dmrg.dmrg_ground_state(mpo, chi=2, sweeps=2, seed=1)
        assert abs(state.energy - (-7.0)) <= 1e-8

    @pytest.mark.parametrize("h", [0.0, 0.5, 1.0])
    def test_matches_exact_n8(self, h):
        mpo = dmrg.build_tfim_mpo(8, 1.0, h)
        e_exact, _ = dmrg.exact_diag(mpo)
        state = dmrg.dmrg_ground_state(mpo, chi=16, sweeps=6, seed=0)
        assert abs(state.energy - e_exact) <= 1e-6

    def test_energy_monotone_and_variational(self):
        mpo = dmrg.build_tfim_mpo(10, 1.0, 1.0)
        e_exact, _ = dmrg.exact_diag(mpo)
        state = dmrg.dmrg_ground_state(mpo, chi=8, sweeps=5, seed=3)
        for a, b in zip(state.energies, state.energies[1:]):
            assert b <= a + 1e-10
        assert state.energy >= e_exact - 1e-9

    def test_normalized(self):
        mpo = dmrg.build_tfim_mpo(8, 1.0, 0.5)
        state = dmrg.dmrg_ground_state(mpo, chi=8, sweeps=3, seed=2)
        assert abs(dmrg.mps_norm(state.mps.sites) - 1.0) <= 1e-10

    def test_energy_functional_agrees(self):
        mpo = dmrg.build_tfim_mpo(8, 1.0, 1.0)
        state = dmrg.dmrg_ground_state(mpo, chi=16, sweeps=4, seed=0)
        assert abs(dmrg.mps_energy(state.mps.sites, mpo) - state.energy) <= 1e-8

    def test_convergence_reported(self):
        mpo = dmrg.build_tfim_mpo(8, 1.0, 1.0)
        state = dmrg.dmrg_ground_state(mpo, chi=16, sweeps=6, seed=0)
        assert state.converged
        assert state.residual <= 1e-6

    def test_bad_arguments(self):
        mpo = dmrg.build_tfim_mpo(4, 1.0, 1.0)
        with pytest.raises(ValueError):
            dmrg.dmrg_ground_state(mpo, chi=1, sweeps=2)
        with pytest.raises(ValueError):
            dmrg.dmrg_ground_state(mpo, chi=4, sweeps=0)

    def test_effective_hamiltonian_matches_dense(self, rng):
        # the matvec path and the materialized effective operator must agree
        mpo = dmrg.build_tfim_mpo(6, 1.0, 0.8)
        sites = dmrg._init_mps(6, 4, 7)
        for k in range(5, 0, -1):
            dmrg._shift_left(sites, k)
        sites[0] = sites[0] / np.linalg.norm(sites[0])
        lefts = [dmrg._env_zero()]
        rights = [None] * 5 + [dmrg._env_zero()]
        for k in range(4, -1, -1):
            rights[k] = dmrg._extend_right(rights[k + 1], sites[k + 1],
                                           mpo.sites[k + 1])
        h_eff = dmrg._dense_effective(lefts[0], mpo.sites[0], rights[0])
        v = rng.standard_normal(sites[0].shape)
        via_matvec = dmrg._apply_effective(lefts[0], mpo.sites[0], rights[0], v)
        assert np.max(np.abs(h_eff @ v.reshape(-1)
                             - via_matvec.reshape(-1))) <= 1e-10
