"""Long-range transverse-field Ising chains in the sigma^x product basis.

H  = -sum_{i<j} J_ij sx_i sx_j - h  sum_j sz_j
H' = -sum_{i<j} J_ij sx_i sx_j - h' sum_j sz_j

All energies are measured in units of the reference coupling J (J_unit
keeps track of the physical scale when a model comes out of the ion-chain
derivation), hbar = 1, time in 1/J.

Basis convention: basis state b in [0, 2^N) encodes the sigma^x eigenvalues
s_i = +1 - 2*bit_i(b), bit 0 = site 0.  In this basis the Ising part is
diagonal and sz_i is the bit-flip matrix of site i with unit entries, so H
is real symmetric.  Reflection R reverses the site order and spin inversion
P flips every sigma^x; both are permutations of basis states.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.special import zeta

__all__ = [
    "SpinModel",
    "EigenDecomposition",
    "MicrocanonicalEnsemble",
    "SectorBasis",
    "build_power_law_model",
    "build_explicit_model",
    "renormalize_coupling",
    "build_hamiltonians",
    "reflection_matrix",
    "spin_inversion_matrix",
    "symmetry_sector_basis",
    "sector_hamiltonian",
    "diagonalize",
    "diagonalize_all_sectors",
    "sigma_x_values",
    "magnetization_values",
    "ising_diagonal",
    "sigma_z_flip_matrix",
    "magnetization_distribution",
    "microcanonical_average",
    "export_spectrum_csv",
]

MAX_SPINS = 14
MAX_DENSE_SPINS = 12  # full 2^N x 2^N dense work above this is refused

SECTOR_LABELS = ((1, 1), (1, -1), (-1, 1), (-1, -1))


# ---------------------------------------------------------------------------
# model containers and constructors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpinModel:
    """Transverse-field Ising model with generic symmetric couplings."""

    N: int
    coupling_matrix: np.ndarray  # (N, N) symmetric, zero diagonal, units of J
    h: float                     # transverse field of H, units of J
    h_prime: float               # transverse field of H', equals B - h
    alpha: float | None = None   # power-law exponent when applicable
    J_unit: float = 1.0          # physical energy scale of one unit of J

    def __post_init__(self):
        J = np.asarray(self.coupling_matrix, dtype=float)
        if self.N < 2:
            raise ValueError("need at least two spins")
        if self.N > MAX_SPINS:
            raise ValueError(f"N={self.N} exceeds supported maximum {MAX_SPINS}")
        if J.shape != (self.N, self.N):
            raise ValueError("coupling matrix shape does not match N")
        if not np.all(np.isfinite(J)):
            raise ValueError("coupling matrix entries must be finite")
        if not np.allclose(J, J.T, atol=0.0):
            raise ValueError("coupling matrix must be symmetric")
        if np.any(np.diag(J) != 0.0):
            raise ValueError("coupling matrix must have zero diagonal")
        if not (np.isfinite(self.h) and np.isfinite(self.h_prime)):
            raise ValueError("fields must be finite")
        object.__setattr__(self, "coupling_matrix", J)

    @property
    def dim(self) -> int:
        return 2 ** self.N

    def with_fields(self, h: float, h_prime: float | None = None) -> "SpinModel":
        return SpinModel(self.N, self.coupling_matrix, h,
                         h if h_prime is None else h_prime,
                         self.alpha, self.J_unit)

    def rescaled(self, scale: float) -> "SpinModel":
        """Rescale J_ij -> scale*J_ij (fields untouched, they carry their own units)."""
        return SpinModel(self.N, scale * self.coupling_matrix, self.h,
                         self.h_prime, self.alpha, self.J_unit)

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "coupling_matrix": self.coupling_matrix.tolist(),
            "h": self.h,
            "h_prime": self.h_prime,
            "alpha": self.alpha,
            "J_unit": self.J_unit,
        }

    @staticmethod
    def from_dict(d: dict) -> "SpinModel":
        if "coupling_matrix" in d and d["coupling_matrix"] is not None:
            return SpinModel(int(d["N"]), np.asarray(d["coupling_matrix"], float),
                             float(d["h"]), float(d.get("h_prime", d["h"])),
                             d.get("alpha"), float(d.get("J_unit", 1.0)))
        return build_power_law_model(int(d["N"]), float(d["alpha"]), float(d["h"]),
                                     float(d.get("h_prime", d["h"])))


def build_power_law_model(N: int, alpha: float, h: float,
                          h_prime: float | None = None) -> SpinModel:
    """J_ij = 1/|i-j|^alpha in units of J.  h_prime defaults to h (QND point)."""
    if N < 2:
        raise ValueError("need at least two spins")
    if not (np.isfinite(alpha) and alpha > 0):
        raise ValueError("alpha must be positive and finite")
    i = np.arange(N)
    dist = np.abs(i[:, None] - i[None, :]).astype(float)
    with np.errstate(divide="ignore"):
        J = np.where(dist > 0, dist ** -alpha, 0.0)
    return SpinModel(N, J, float(h), float(h if h_prime is None else h_prime), float(alpha))


def build_explicit_model(coupling_matrix: np.ndarray, h: float,
                         h_prime: float | None = None,
                         J_unit: float = 1.0) -> SpinModel:
    J = np.asarray(coupling_matrix, dtype=float)
    return SpinModel(J.shape[0], J, float(h), float(h if h_prime is None else h_prime),
                     None, float(J_unit))


def renormalize_coupling(N: int, alpha: float) -> float:
    """Finite-size rescaling factor S_N/S_inf for power-law couplings.

    S_N = (1/N) sum_{i != j} 1/|i-j|^alpha and S_inf = 2 zeta(alpha); callers
    rescale J -> J*S_N/S_inf so the mean interaction matches the
    thermodynamic limit.  Requires alpha > 1 (S_inf finite).
    """
    if N < 2:
        raise ValueError("need at least two spins")
    if not (np.isfinite(alpha) and alpha > 1.0):
        raise ValueError("alpha must exceed 1 for a finite infinite-size sum")
    d = np.arange(1, N)
    S_N = 2.0 / N * np.sum((N - d) / d.astype(float) ** alpha)
    S_inf = 2.0 * zeta(alpha, 1)
    return S_N / S_inf


# ---------------------------------------------------------------------------
# operators in the sigma^x product basis
# ---------------------------------------------------------------------------

def sigma_x_values(N: int) -> np.ndarray:
    """(2^N, N) array of sigma^x eigenvalues s_i per basis state."""
    b = np.arange(2 ** N, dtype=np.int64)
    return 1.0 - 2.0 * ((b[:, None] >> np.arange(N)[None, :]) & 1)


def magnetization_values(N: int) -> np.ndarray:
    """m_x = (1/N) sum_i s_i per basis state."""
    return sigma_x_values(N).sum(axis=1) / N


def ising_diagonal(model: SpinModel) -> np.ndarray:
    """Diagonal of -sum_{i<j} J_ij sx_i sx_j over the product basis."""
    s = sigma_x_values(model.N)
    # s J s^T summed over ordered pairs counts each unordered pair twice
    diag = -0.5 * np.einsum("bi,ij,bj->b", s, model.coupling_matrix, s)
    # spin inversion leaves every term unchanged, so P-symmetry is exact; for
    # reflection-symmetric couplings, average out the summation-order round-off
    # so R H R == H holds bitwise as well
    if np.array_equal(model.coupling_matrix, model.coupling_matrix[::-1, ::-1]):
        diag = 0.5 * (diag + diag[_bit_reverse_table(model.N)])
    return diag


def sigma_z_flip_matrix(N: int, site: int) -> np.ndarray:
    """sz_site as a dense bit-flip matrix (unit entries, real symmetric)."""
    dim = 2 ** N
    m = np.zeros((dim, dim))
    b = np.arange(dim)
    m[b ^ (1 << site), b] = 1.0
    return m


def transverse_sum_matrix(N: int) -> np.ndarray:
    """sum_j sz_j in the sigma^x product basis."""
    dim = 2 ** N
    m = np.zeros((dim, dim))
    b = np.arange(dim)
    for site in range(N):
        m[b ^ (1 << site), b] += 1.0
    return m


def build_hamiltonians(model: SpinModel) -> tuple[np.ndarray, np.ndarray]:
    """Dense (H, H') in the sigma^x product basis.  Real symmetric."""
    if model.N > MAX_DENSE_SPINS:
        raise ValueError(
            f"dense 2^{model.N} x 2^{model.N} matrices refused; "
            f"use the sector path for N > {MAX_DENSE_SPINS}")
    diag = ising_diagonal(model)
    F = transverse_sum_matrix(model.N)
    H = np.diag(diag) - model.h * F
    Hp = np.diag(diag) - model.h_prime * F
    return H, Hp


def _bit_reverse_table(N: int) -> np.ndarray:
    b = np.arange(2 ** N, dtype=np.int64)
    out = np.zeros_like(b)
    for i in range(N):
        out |= ((b >> i) & 1) << (N - 1 - i)
    return out


def reflection_matrix(N: int) -> np.ndarray:
    """Site-order reflection R as a permutation matrix."""
    dim = 2 ** N
    perm = _bit_reverse_table(N)
    m = np.zeros((dim, dim))
    m[perm, np.arange(dim)] = 1.0
    return m


def spin_inversion_matrix(N: int) -> np.ndarray:
    """Global sigma^x flip P as a permutation matrix."""
    dim = 2 ** N
    perm = np.arange(dim) ^ (dim - 1)
    m = np.zeros((dim, dim))
    m[perm, np.arange(dim)] = 1.0
    return m


# ---------------------------------------------------------------------------
# symmetry sectors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SectorBasis:
    """Orthonormal basis of the simultaneous (R, P) eigenspace.

    Each basis vector is a symmetrized combination of at most four product
    states; `strings` holds their basis indices (-1 padding) and `coeffs`
    the matching amplitudes.  `element_of`/`coeff_of` map any product state
    to its sector element, or -1 if the state projects to a different
    sector vector.
    """

    N: int
    r: int
    p: int
    strings: np.ndarray    # (d, 4) int64, padded with -1
    coeffs: np.ndarray     # (d, 4) float64, padded with 0
    element_of: np.ndarray  # (2^N,) int64
    coeff_of: np.ndarray    # (2^N,) float64

    @property
    def dim(self) -> int:
        return self.strings.shape[0]

    def to_dense(self) -> np.ndarray:
        """(2^N, d) dense column matrix of the basis vectors."""
        out = np.zeros((2 ** self.N, self.dim))
        for a in range(self.dim):
            for k in range(4):
                s = self.strings[a, k]
                if s >= 0:
                    out[s, a] = self.coeffs[a, k]
        return out

    def expand(self, vec_sector: np.ndarray) -> np.ndarray:
        """Lift a sector-coordinate vector to the full product basis."""
        out = np.zeros(2 ** self.N, dtype=vec_sector.dtype)
        for k in range(4):
            live = self.strings[:, k] >= 0
            np.add.at(out, self.strings[live, k], self.coeffs[live, k] * vec_sector[live])
        return out


def symmetry_sector_basis(N: int, r: int, p: int) -> SectorBasis:
    """Build the orthonormal (R, P) sector basis from group-orbit symmetrization."""
    if r not in (1, -1) or p not in (1, -1):
        raise ValueError("sector labels must be +1 or -1")
    dim = 2 ** N
    b = np.arange(dim, dtype=np.int64)
    rb = _bit_reverse_table(N)
    fb = b ^ (dim - 1)
    rfb = rb ^ (dim - 1)
    orbit = np.stack([b, rb, fb, rfb], axis=1)           # images under {1, R, P, RP}
    chars = np.array([1.0, float(r), float(p), float(r * p)])

    reps = orbit.min(axis=1)
    is_rep = b == reps

    strings_list, coeffs_list = [], []
    element_of = np.full(dim, -1, dtype=np.int64)
    coeff_of = np.zeros(dim)
    for s in b[is_rep]:
        images = orbit[s]
        # accumulate character weights on the distinct images
        uniq, inv = np.unique(images, return_inverse=True)
        w = np.zeros(len(uniq))
        np.add.at(w, inv, chars)
        norm = np.sqrt(np.sum(w ** 2))
        if norm < 1e-12:
            continue  # orbit has no component in this sector
        w /= norm
        keep = np.abs(w) > 0
        uniq, w = uniq[keep], w[keep]
        idx = len(strings_list)
        row_s = np.full(4, -1, dtype=np.int64)
        row_c = np.zeros(4)
        row_s[:len(uniq)] = uniq
        row_c[:len(w)] = w
        strings_list.append(row_s)
        coeffs_list.append(row_c)
        element_of[uniq] = idx
        coeff_of[uniq] = w
    if strings_list:
        strings = np.array(strings_list)
        coeffs = np.array(coeffs_list)
    else:
        strings = np.zeros((0, 4), dtype=np.int64)
        coeffs = np.zeros((0, 4))
    return SectorBasis(N, r, p, strings, coeffs, element_of, coeff_of)


def sector_hamiltonian(model: SpinModel, basis: SectorBasis,
                       h: float | None = None) -> np.ndarray:
    """Project H (or H with an overridden field) onto a sector basis.

    Works at N = 14 without forming the full Hamiltonian: the Ising part is
    diagonal and the field part only needs single bit flips.
    """
    hval = model.h if h is None else h
    d = basis.dim
    H = np.zeros((d, d))
    diag_full = ising_diagonal(model)
    # Ising diagonal: distinct sector elements contain disjoint strings
    for k in range(4):
        live = basis.strings[:, k] >= 0
        np.add.at(np.reshape(H, -1),
                  np.arange(d)[live] * (d + 1),
                  basis.coeffs[live, k] ** 2 * diag_full[basis.strings[live, k]])
    # transverse field: scatter -h * c_a,k * c(target) into H[target_element, a]
    for site in range(model.N):
        for k in range(4):
            live = basis.strings[:, k] >= 0
            src = np.arange(d)[live]
            flipped = basis.strings[live, k] ^ (1 << site)
            tgt = basis.element_of[flipped]
            ok = tgt >= 0
            np.add.at(H, (tgt[ok], src[ok]),
                      -hval * basis.coeffs[live, k][ok] * basis.coeff_of[flipped][ok])
    return H


# ---------------------------------------------------------------------------
# exact diagonalization
# ---------------------------------------------------------------------------

@dataclass
class EigenDecomposition:
    """Sorted spectrum with eigenvectors in the chosen basis."""

    energies: np.ndarray
    eigenvectors: np.ndarray              # columns, in the basis below
    sector: tuple[int, int] | None = None
    basis: SectorBasis | None = None      # None = full product basis
    degeneracy_groups: list = field(default_factory=list)
    norm_H: float = 0.0

    @property
    def dim(self) -> int:
        return len(self.energies)

    @property
    def n_groups(self) -> int:
        return len(self.degeneracy_groups)

    def group_of_level(self) -> np.ndarray:
        out = np.empty(self.dim, dtype=np.int64)
        for g, members in enumerate(self.degeneracy_groups):
            out[members] = g
        return out

    def group_energies(self) -> np.ndarray:
        return np.array([self.energies[m].mean() for m in self.degeneracy_groups])


def _degeneracy_groups(energies: np.ndarray, norm_H: float) -> list:
    tol = 1e-9 * max(norm_H, 1.0)
    groups = []
    start = 0
    for i in range(1, len(energies) + 1):
        if i == len(energies) or energies[i] - energies[i - 1] > tol:
            groups.append(np.arange(start, i))
            start = i
    return groups


def diagonalize(model: SpinModel, sector: tuple[int, int] | SectorBasis | None = None
                ) -> EigenDecomposition:
    """Exact spectrum, full space or restricted to one (R, P) sector."""
    if sector is None:
        H, _ = build_hamiltonians(model)
        E, V = sla.eigh(H)
        basis = None
        label = None
    else:
        basis = sector if isinstance(sector, SectorBasis) else \
            symmetry_sector_basis(model.N, *sector)
        label = (basis.r, basis.p)
        if basis.dim == 0:
            return EigenDecomposition(np.zeros(0), np.zeros((0, 0)), label, basis, [], 0.0)
        Hs = sector_hamiltonian(model, basis)
        E, V = sla.eigh(Hs)
    norm_H = float(np.max(np.abs(E))) if len(E) else 0.0
    return EigenDecomposition(E, V, label, basis, _degeneracy_groups(E, norm_H), norm_H)


def diagonalize_all_sectors(model: SpinModel) -> dict:
    """Spectra of every (R, P) sector, keyed by the sector label."""
    return {lab: diagonalize(model, lab) for lab in SECTOR_LABELS}


# ---------------------------------------------------------------------------
# observables
# ---------------------------------------------------------------------------

def magnetization_distribution(state, N: int | None = None):
    """Distribution of m_x for a state vector or density operator.

    Returns (m_values, probabilities, mx2, structure_factor) with
    probabilities the weights of the Sum sx = N*m_x subspaces,
    mx2 = <m_x^2> and structure_factor = N*mx2.
    """
    state = np.asarray(state)
    if state.ndim == 1:
        weights = np.abs(state) ** 2
    elif state.ndim == 2:
        weights = np.real(np.diag(state))
    else:
        raise ValueError("state must be a vector or a density matrix")
    if N is None:
        N = int(round(np.log2(len(weights))))
    if len(weights) != 2 ** N:
        raise ValueError("state dimension is not 2^N")
    total = weights.sum()
    if abs(total - 1.0) > 1e-8:
        raise ValueError(f"state is not normalized: weight sum {total}")
    mvals = magnetization_values(N)
    m_axis = (-N + 2 * np.arange(N + 1)) / N
    bins = np.rint((mvals + 1.0) * N / 2).astype(np.int64)
    probs = np.zeros(N + 1)
    np.add.at(probs, bins, weights)
    mx2 = float(np.sum(probs * m_axis ** 2))
    return m_axis, probs, mx2, N * mx2


def sector_mx_weights(basis: SectorBasis) -> tuple[np.ndarray, np.ndarray]:
    """Per-sector-element weights over the m_x axis.

    For an eigenvector v in sector coordinates, P(m) = (v**2) @ W.
    """
    N = basis.N
    m_axis = (-N + 2 * np.arange(N + 1)) / N
    mvals = magnetization_values(N)
    bins = np.rint((mvals + 1.0) * N / 2).astype(np.int64)
    W = np.zeros((basis.dim, N + 1))
    for k in range(4):
        live = basis.strings[:, k] >= 0
        np.add.at(W, (np.arange(basis.dim)[live], bins[basis.strings[live, k]]),
                  basis.coeffs[live, k] ** 2)
    return m_axis, W


@dataclass
class MicrocanonicalEnsemble:
    center_energy_density: float
    width: float                 # Delta E / (J N)
    member_levels: np.ndarray
    weights: np.ndarray
    empty: bool = False


def microcanonical_average(eig: EigenDecomposition, observable, eps: float,
                           dE: float, observable_kind: str = "auto"):
    """Uniform average of eigenstate expectations in |E - eps*J*N| <= dE*N/2.

    `observable` is one of
      - "diagonal": a (2^N,) array over the product basis (needs a full-basis
        eig); this is the default reading of a 1-D array there,
      - "per_level": expectation values already ordered like eig.energies,
      - "matrix": a dense operator in the basis of eig.
    """
    if eig.basis is not None:
        N = eig.basis.N
    else:
        N = int(round(np.log2(eig.eigenvectors.shape[0])))
    center = eps * N
    members = np.where(np.abs(eig.energies - center) <= dE * N / 2.0)[0]
    if len(members) == 0:
        return np.nan, MicrocanonicalEnsemble(eps, dE, members, np.zeros(0), empty=True)
    obs = np.asarray(observable)
    if observable_kind == "auto":
        if obs.ndim == 2:
            observable_kind = "matrix"
        elif eig.basis is None:
            observable_kind = "diagonal"
        else:
            observable_kind = "per_level"
    if observable_kind == "per_level":
        if len(obs) != eig.dim:
            raise ValueError("per-level observable length mismatch")
        per_level = obs[members]
    elif observable_kind == "diagonal":
        if eig.basis is not None or len(obs) != eig.eigenvectors.shape[0]:
            raise ValueError("diagonal observables need a full-basis eig")
        V = eig.eigenvectors[:, members]
        per_level = np.einsum("b,bl->l", obs, np.abs(V) ** 2)
    elif observable_kind == "matrix":
        V = eig.eigenvectors[:, members]
        per_level = np.real(np.einsum("bl,bc,cl->l", V.conj(), obs, V))
    else:
        raise ValueError(f"unknown observable_kind '{observable_kind}'")
    w = np.full(len(members), 1.0 / len(members))
    return float(np.dot(w, per_level)), MicrocanonicalEnsemble(eps, dE, members, w)


def export_spectrum_csv(path, spectra: dict) -> None:
    """CSV columns: sector_r, sector_p, level, energy."""
    with open(path, "w") as f:
        f.write("sector_r,sector_p,level,energy\n")
        for (r, p), eig in spectra.items():
            for lvl, E in enumerate(eig.energies):
                f.write(f"{r},{p},{lvl},{E:.17g}\n")
