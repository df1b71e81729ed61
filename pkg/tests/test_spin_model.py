"""Exact-diagonalization layer: constructors, symmetries, sectors, spectra."""

import numpy as np
import pytest
import mpmath

from qndsim import spin_model as sm


def brute_force_hamiltonian(model):
    """Independent dense construction from explicit Pauli kroneckers, in the
    sigma^z product basis (so the spectrum check crosses bases)."""
    sx = np.array([[0.0, 1.0], [1.0, 0.0]])
    sz = np.diag([1.0, -1.0])
    eye = np.eye(2)

    def site(op, j):
        out = np.array([[1.0]])
        for p in range(model.N):
            out = np.kron(out, op if p == j else eye)
        return out

    H = np.zeros((2 ** model.N, 2 ** model.N))
    for i in range(model.N):
        for j in range(i + 1, model.N):
            H -= model.coupling_matrix[i, j] * site(sx, i) @ site(sx, j)
        H -= model.h * site(sz, i)
    return H


class TestConstructors:
    def test_power_law_values(self):
        m = sm.build_power_law_model(4, 2.0, 1.0)
        assert m.coupling_matrix[0, 2] == 0.25
        assert m.coupling_matrix[0, 3] == pytest.approx(1.0 / 9.0)

    def test_two_site_coupling_is_one(self):
        m = sm.build_power_law_model(2, 3.7, 0.2)
        assert m.coupling_matrix[0, 1] == 1.0

    def test_explicit_matches_power_law_bitwise(self):
        mp = sm.build_power_law_model(6, 1.5, 0.9, 1.1)
        me = sm.build_explicit_model(mp.coupling_matrix, 0.9, 1.1)
        assert np.array_equal(mp.coupling_matrix, me.coupling_matrix)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            sm.build_power_law_model(1, 1.5, 0.0)
        with pytest.raises(ValueError):
            sm.build_power_law_model(4, -1.0, 0.0)
        with pytest.raises(ValueError):
            sm.build_power_law_model(3, 1.5, np.inf)
        J = np.ones((3, 3))
        with pytest.raises(ValueError):
            sm.build_explicit_model(J, 0.0)  # nonzero diagonal
        J = np.zeros((3, 3))
        J[0, 1] = 1.0
        with pytest.raises(ValueError):
            sm.build_explicit_model(J, 0.0)  # asymmetric

    def test_roundtrip_dict(self):
        m = sm.build_power_law_model(5, 1.5, 1.5, 1.3)
        m2 = sm.SpinModel.from_dict(m.to_dict())
        assert np.array_equal(m.coupling_matrix, m2.coupling_matrix)
        assert m2.h_prime == 1.3


class TestRenormalization:
    def test_two_spin_alpha_two_closed_form(self):
        # S_2 = 1, S_inf = pi^2/3
        assert sm.renormalize_coupling(2, 2.0) == pytest.approx(3.0 / np.pi ** 2, rel=1e-12)

    def test_large_N_limit(self):
        # approaches 1 from below, like N^(1-alpha) for the slow alpha = 1.5
        s1 = sm.renormalize_coupling(2000, 1.5)
        s2 = sm.renormalize_coupling(20000, 1.5)
        assert s1 < s2 < 1.0
        assert s2 == pytest.approx(1.0, abs=1.2e-2)
        assert sm.renormalize_coupling(4000, 3.0) == pytest.approx(1.0, abs=1e-3)

    def test_against_series_oracle(self):
        # independent summation oracle: S_N directly, S_inf via mpmath zeta
        for N, alpha in [(14, 1.5), (8, 2.5)]:
            S_N = sum(1.0 / abs(i - j) ** alpha
                      for i in range(N) for j in range(N) if i != j) / N
            S_inf = 2.0 * float(mpmath.zeta(alpha))
            assert sm.renormalize_coupling(N, alpha) == pytest.approx(S_N / S_inf, rel=1e-12)

    def test_alpha_at_most_one_rejected(self):
        with pytest.raises(ValueError):
            sm.renormalize_coupling(10, 1.0)


class TestHamiltonians:
    def test_ising_only_spectrum(self):
        m = sm.build_power_law_model(2, 1.5, 0.0)
        H, _ = sm.build_hamiltonians(m)
        assert np.allclose(np.linalg.eigvalsh(H), [-1, -1, 1, 1])

    def test_free_spins_spectrum(self):
        m = sm.build_explicit_model(np.zeros((2, 2)), 1.0)
        H, _ = sm.build_hamiltonians(m)
        assert np.allclose(np.linalg.eigvalsh(H), [-2, 0, 0, 2], atol=1e-12)

    def test_hermiticity_exact(self):
        m = sm.build_power_law_model(5, 1.5, 1.5, 0.7)
        H, Hp = sm.build_hamiltonians(m)
        assert np.array_equal(H, H.T)
        assert np.array_equal(Hp, Hp.T)

    def test_against_brute_force(self):
        m = sm.build_power_law_model(5, 1.5, 1.5)
        H, _ = sm.build_hamiltonians(m)
        E = np.linalg.eigvalsh(H)
        E_oracle = np.linalg.eigvalsh(brute_force_hamiltonian(m))
        assert np.allclose(E, E_oracle, atol=1e-10)

    def test_dimension_guard(self):
        m = sm.build_power_law_model(13, 1.5, 1.0)
        with pytest.raises(ValueError):
            sm.build_hamiltonians(m)


class TestSymmetries:
    def test_commutators_vanish(self):
        m = sm.build_power_law_model(5, 1.5, 1.5)
        H, _ = sm.build_hamiltonians(m)
        R = sm.reflection_matrix(5)
        P = sm.spin_inversion_matrix(5)
        assert np.array_equal(R @ P, P @ R)
        assert np.array_equal(R @ H @ R, H)
        assert np.array_equal(P @ H @ P, H)

    def test_sector_dimensions_complete(self):
        for N in (4, 5, 8):
            dims = [sm.symmetry_sector_basis(N, *lab).dim for lab in sm.SECTOR_LABELS]
            assert sum(dims) == 2 ** N

    def test_sector_bases_orthonormal_and_invariant(self):
        m = sm.build_power_law_model(5, 1.5, 1.5)
        H, _ = sm.build_hamiltonians(m)
        R = sm.reflection_matrix(5)
        P = sm.spin_inversion_matrix(5)
        for (r, p) in sm.SECTOR_LABELS:
            B = sm.symmetry_sector_basis(5, r, p).to_dense()
            assert np.allclose(B.T @ B, np.eye(B.shape[1]), atol=1e-12)
            assert np.allclose(R @ B, r * B, atol=1e-12)
            assert np.allclose(P @ B, p * B, atol=1e-12)
            # H block-diagonal: projecting out of the sector annihilates
            HB = H @ B
            assert np.allclose(HB - B @ (B.T @ HB), 0.0, atol=1e-10)

    def test_ground_state_sector(self):
        # J, h > 0 puts the ground state in {+1, +1}
        m = sm.build_power_law_model(5, 1.5, 1.5)
        e_full = sm.diagonalize(m)
        e_pp = sm.diagonalize(m, (1, 1))
        assert e_pp.energies[0] == pytest.approx(e_full.energies[0], abs=1e-10)


class TestDiagonalize:
    def test_eigen_residuals(self):
        m = sm.build_power_law_model(5, 1.5, 1.5)
        H, _ = sm.build_hamiltonians(m)
        eig = sm.diagonalize(m)
        R = H @ eig.eigenvectors - eig.eigenvectors * eig.energies
        assert np.abs(R).max() <= 1e-10 * eig.norm_H
        G = eig.eigenvectors.T @ eig.eigenvectors
        assert np.abs(G - np.eye(eig.dim)).max() < 1e-12
        assert np.all(np.diff(eig.energies) >= 0)

    def test_sector_spectra_concatenate_to_full(self):
        m = sm.build_power_law_model(5, 1.5, 1.5)
        full = sm.diagonalize(m).energies
        parts = np.sort(np.concatenate(
            [sm.diagonalize(m, lab).energies for lab in sm.SECTOR_LABELS]))
        assert np.abs(parts - full).max() <= 1e-9 * np.abs(full).max()

    def test_sector_hamiltonian_vs_dense_projection(self):
        m = sm.build_power_law_model(6, 1.8, 0.9)
        H, _ = sm.build_hamiltonians(m)
        for lab in sm.SECTOR_LABELS:
            basis = sm.symmetry_sector_basis(6, *lab)
            B = basis.to_dense()
            assert np.allclose(sm.sector_hamiltonian(m, basis), B.T @ H @ B, atol=1e-11)

    def test_thermal_trace_identity(self):
        m = sm.build_power_law_model(5, 1.5, 1.5)
        H, _ = sm.build_hamiltonians(m)
        beta = 0.37
        Z_full = np.sum(np.exp(-beta * np.linalg.eigvalsh(H)))
        Z_sectors = sum(np.sum(np.exp(-beta * sm.diagonalize(m, lab).energies))
                        for lab in sm.SECTOR_LABELS)
        assert Z_sectors == pytest.approx(Z_full, rel=1e-12)

    def test_degeneracy_groups(self):
        m = sm.build_power_law_model(2, 1.5, 0.0)
        eig = sm.diagonalize(m)
        sizes = sorted(len(g) for g in eig.degeneracy_groups)
        assert sizes == [2, 2]


class TestObservables:
    def test_polarized_state(self):
        N = 4
        psi = np.zeros(2 ** N)
        psi[0] = 1.0  # all sigma^x = +1
        m_axis, P, mx2, S = sm.magnetization_distribution(psi, N)
        assert P[-1] == pytest.approx(1.0)
        assert mx2 == pytest.approx(1.0)
        assert S == pytest.approx(N)

    def test_fully_mixed_two_spins(self):
        rho = np.eye(4) / 4.0
        m_axis, P, mx2, _ = sm.magnetization_distribution(rho, 2)
        assert np.allclose(P, [0.25, 0.5, 0.25])
        assert mx2 == pytest.approx(0.5)

    def test_unnormalized_rejected(self):
        with pytest.raises(ValueError):
            sm.magnetization_distribution(np.ones(4), 2)

    def test_sector_mx_weights_match_expansion(self):
        m = sm.build_power_law_model(5, 1.5, 0.8)
        eig = sm.diagonalize(m, (1, -1))
        m_axis, W = sm.sector_mx_weights(eig.basis)
        rng = np.random.default_rng(5)
        v = rng.normal(size=eig.dim)
        v /= np.linalg.norm(v)
        full = eig.basis.expand(v)
        m_axis2, P2, mx2_2, _ = sm.magnetization_distribution(full, 5)
        assert np.allclose((v ** 2) @ W, P2, atol=1e-12)

    def test_low_energy_states_bimodal(self):
        # ordered phase: low-energy eigenstates of the long-range chain carry
        # a two-peak magnetization distribution
        m = sm.build_power_law_model(8, 1.5, 0.5)
        eig = sm.diagonalize(m, (1, 1))
        m_axis, W = sm.sector_mx_weights(eig.basis)
        P0 = (eig.eigenvectors[:, 0] ** 2) @ W
        pos = m_axis >= 0
        sym = P0[pos] + P0[::-1][pos]
        assert m_axis[pos][np.argmax(sym)] >= 0.5


class TestMicrocanonical:
    def setup_method(self):
        self.model = sm.build_power_law_model(5, 1.5, 1.0)
        self.eig = sm.diagonalize(self.model)
        self.mx2_diag = sm.magnetization_values(5) ** 2

    def test_single_level_window(self):
        E3 = self.eig.energies[3]
        avg, ens = sm.microcanonical_average(self.eig, self.mx2_diag,
                                             E3 / 5.0, 1e-6)
        v = self.eig.eigenvectors[:, 3]
        assert avg == pytest.approx(float(v @ (self.mx2_diag * v)), abs=1e-12)
        assert list(ens.member_levels) == [3]

    def test_full_spectrum_window_is_trace(self):
        avg, ens = sm.microcanonical_average(self.eig, self.mx2_diag, 0.0, 100.0)
        assert len(ens.member_levels) == 32
        assert avg == pytest.approx(self.mx2_diag.mean(), abs=1e-10)

    def test_empty_window_flagged(self):
        avg, ens = sm.microcanonical_average(self.eig, self.mx2_diag, 100.0, 0.01)
        assert ens.empty and np.isnan(avg)

    def test_weights_uniform(self):
        _, ens = sm.microcanonical_average(self.eig, self.mx2_diag, 0.0, 0.5)
        assert ens.weights.sum() == pytest.approx(1.0)
        assert np.allclose(ens.weights, ens.weights[0])


def test_export_spectrum_csv(tmp_path):
    m = sm.build_power_law_model(4, 1.5, 1.0)
    spectra = sm.diagonalize_all_sectors(m)
    path = tmp_path / "spec.csv"
    sm.export_spectrum_csv(path, spectra)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "sector_r,sector_p,level,energy"
    assert len(lines) == 1 + 2 ** 4
