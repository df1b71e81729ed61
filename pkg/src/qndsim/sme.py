"""Stochastic and deterministic master equations for continuous energy readout.

Conditional dynamics (Ito):

    drho_c = -i[H', rho_c] dt + gamma D[H/J] rho_c dt
             + sqrt(gamma*eps) Hsup[H/J] rho_c dW
    dX     = I dt = 2 sqrt(gamma*eps) <H/J>_c dt + dW

with D[s]r = s r s+ - (s+ s r + r s+ s)/2 and Hsup[s]r = (s - <s>) r + h.c.
Integration happens in the eigenbasis of H where H/J is diagonal, so the
measurement superoperators reduce to elementwise array operations; the H'
commutator needs matrix products only away from the QND point.  The scheme
is explicit Euler-Maruyama on the normalized equation with per-step trace
renormalization and Hermitian symmetrization.

The spin+meter variant integrates

    drho = -i[H_SM, rho] dt + gamma_s D[a0] rho dt + sqrt(eps*gamma_s) Hsup[a0] rho dW
    I dt = sqrt(2*eps*gamma_s) <X> dt + dW

with H_SM = H' x 1 + theta H x P on a truncated Fock space.

Every trajectory consumes its own counter-based Philox stream keyed by
(master_seed, trajectory_index), so ensembles are reproducible and
independent of batching or thread count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .spin_model import SpinModel, EigenDecomposition, diagonalize, build_hamiltonians

__all__ = [
    "MeterSpec",
    "TrajectoryRecord",
    "LindbladRecord",
    "trajectory_rng",
    "default_dt",
    "evolve_sme_spin",
    "evolve_sme_ensemble",
    "evolve_lindblad",
    "evolve_sme_full",
    "evolve_sme_full_ensemble",
    "populations",
]

_NOISE_CHUNK = 4096


def trajectory_rng(master_seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for one trajectory: Philox keyed by (seed, index)."""
    key = ((int(master_seed) & 0xFFFFFFFFFFFFFFFF) << 64) | (int(index) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(key=key))


def default_dt(gamma: float, d_max: float) -> float:
    """1e-3 * min(1/gamma, 1/(gamma*max|H/J|^2)); the stiff scale is the
    measurement dephasing of the widest level pair."""
    return 1e-3 * min(1.0 / gamma, 1.0 / (gamma * max(d_max, 1.0) ** 2))


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------

@dataclass
class TrajectoryRecord:
    """One homodyne trajectory: integrated record increments plus conditional
    populations per degeneracy group."""

    N: int
    dt: float
    record_dt: float
    record_times: np.ndarray      # right edges of the record bins
    dX: np.ndarray                # integral of I dt over each bin
    pop_times: np.ndarray
    populations: np.ndarray       # (n_pop, n_groups)
    group_energies: np.ndarray
    gamma: float
    eps: float
    seed: int
    trajectory_index: int
    meta: dict = field(default_factory=dict)
    snapshot_times: np.ndarray | None = None
    snapshots: np.ndarray | None = None   # (n_snap, D, D) in the energy basis

    def validate(self, guard: float = 1e-8) -> None:
        p = self.populations
        if p.min() < -guard:
            raise ValueError(f"negative population {p.min():.3e} beyond guard {guard:.0e}")
        sums = p.sum(axis=1)
        if np.max(np.abs(sums - 1.0)) > 1e-6:
            raise ValueError(f"population sums deviate from 1 by {np.max(np.abs(sums - 1)):.3e}")

    def current(self) -> np.ndarray:
        """Raw current samples I_k = dX_k / record_dt."""
        return self.dX / self.record_dt

    def final_populations(self) -> np.ndarray:
        return self.populations[-1]


@dataclass
class LindbladRecord:
    times: np.ndarray
    rhos: np.ndarray              # (n_t, D, D) in the energy basis (support)
    populations: np.ndarray       # (n_t, n_groups)
    group_energies: np.ndarray
    support: np.ndarray
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# basis plumbing
# ---------------------------------------------------------------------------

def _as_density_matrix(state, dim: int) -> np.ndarray:
    state = np.asarray(state)
    if state.ndim == 1:
        if len(state) != dim:
            raise ValueError("state vector has wrong dimension")
        return np.outer(state, state.conj())
    if state.shape != (dim, dim):
        raise ValueError("density matrix has wrong shape")
    return np.array(state, dtype=complex)


def _check_density_matrix(rho: np.ndarray) -> None:
    if np.linalg.norm(rho - rho.conj().T) > 1e-10 * max(1.0, np.linalg.norm(rho)):
        raise ValueError("initial state is not Hermitian")
    tr = np.real(np.trace(rho))
    if abs(tr - 1.0) > 1e-8:
        raise ValueError(f"initial state trace {tr} != 1")
    evals = np.linalg.eigvalsh(rho)
    if evals.min() < -1e-10:
        raise ValueError(f"initial state not PSD: min eigenvalue {evals.min():.3e}")


def _support_closure(rho_E: np.ndarray, Hp_E: np.ndarray) -> np.ndarray:
    """Indices of energy levels reachable from the initial support under H'."""
    D = rho_E.shape[0]
    tol_r = 1e-12 * max(np.abs(rho_E).max(), 1e-300)
    reach = (np.abs(rho_E).max(axis=1) > tol_r) | (np.abs(np.diag(rho_E)) > tol_r)
    scale = max(np.abs(Hp_E).max(), 1e-300)
    adj = np.abs(Hp_E) > 1e-12 * scale
    np.fill_diagonal(adj, True)
    while True:
        new = reach | (adj @ reach)
        if np.array_equal(new, reach):
            break
        reach = new
    return np.where(reach)[0]


def _prepare_spin_problem(model: SpinModel, rho0, eig: EigenDecomposition | None,
                          rho0_basis: str, hp_matrix: np.ndarray | None,
                          restrict_support: bool):
    """Returns (eig, d, Hp, rho_states, support, group_matrix); rho_states is
    a (n_states, D, D) stack (one slice when a single initial state is given)."""
    if eig is None:
        eig = diagonalize(model)
    if eig.basis is not None:
        raise ValueError("SME integration needs a full-basis eigendecomposition")
    V = eig.eigenvectors
    dim = V.shape[0]
    if isinstance(rho0, (list, tuple)) or (
            isinstance(rho0, np.ndarray) and rho0.ndim == 3) or (
            isinstance(rho0, np.ndarray) and rho0.ndim == 2
            and rho0.shape != (dim, dim)):
        states = [_as_density_matrix(r, dim) for r in rho0]
    else:
        states = [_as_density_matrix(rho0, dim)]
    for r in states:
        _check_density_matrix(r)
    if rho0_basis == "product":
        states = [V.T @ r @ V for r in states]
    elif rho0_basis != "energy":
        raise ValueError("rho0_basis must be 'product' or 'energy'")
    rho_E = np.stack(states)
    if hp_matrix is None:
        _, Hp = build_hamiltonians(model)
        Hp_E = V.T @ Hp @ V
    else:
        Hp_E = V.T @ np.asarray(hp_matrix) @ V
    d = eig.energies.copy()
    if restrict_support:
        sup = _support_closure(np.abs(rho_E).max(axis=0), Hp_E)
    else:
        sup = np.arange(dim)
    rho_S = rho_E[np.ix_(np.arange(len(states)), sup, sup)]
    Hp_S = Hp_E[np.ix_(sup, sup)]
    rho_S = rho_S / np.real(np.einsum("sii->s", rho_S))[:, None, None]
    d_S = d[sup]
    # group membership matrix for reporting populations per degeneracy group
    gidx = eig.group_of_level()
    G = np.zeros((len(sup), eig.n_groups))
    G[np.arange(len(sup)), gidx[sup]] = 1.0
    return eig, d_S, Hp_S, rho_S, sup, G


# ---------------------------------------------------------------------------
# batched integration cores
# ---------------------------------------------------------------------------

def _make_grids(t_max: float, dt: float, record_dt: float | None, pop_dt: float | None):
    n_steps = max(1, int(np.ceil(t_max / dt - 1e-12)))
    rec_stride = max(1, int(round((record_dt or t_max / 4096) / dt)))
    pop_every = max(1, int(round((pop_dt or t_max / 512) / dt / rec_stride)))
    # trim so both grids share the final step
    n_steps = int(np.ceil(n_steps / (rec_stride * pop_every))) * rec_stride * pop_every
    return n_steps, rec_stride, pop_every


def _loop_populations(p0, d, gamma, eps, dt, n_steps, rec_stride, pop_every,
                      rngs, noise, trace_tol=1e-4):
    """Diagonal (QND) fast path: populations and record only.

    Valid whenever H' is diagonal in the H eigenbasis: coherences never feed
    back into the diagonal, so the record and the populations close among
    themselves.
    """
    M, D = p0.shape
    p = p0.copy()
    sge = np.sqrt(gamma * eps)
    n_rec = n_steps // rec_stride
    recX = np.zeros((M, n_rec))
    pops = np.zeros((M, n_rec // pop_every + 1, D))
    pops[:, 0] = p
    accX = np.zeros(M)
    min_p = 0.0
    k = 0
    for start in range(0, n_steps, _NOISE_CHUNK):
        span = min(_NOISE_CHUNK, n_steps - start)
        if noise is not None:
            dWs = noise[:, start:start + span]
        else:
            dWs = np.stack([r.standard_normal(span) for r in rngs]) * np.sqrt(dt)
        for j in range(span):
            dW = dWs[:, j]
            mean = p @ d
            p = p * (1.0 + (2.0 * sge) * dW[:, None] * (d[None, :] - mean[:, None]))
            s = p.sum(axis=1)
            if np.max(np.abs(s - 1.0)) > trace_tol:
                raise RuntimeError(
                    f"trace drift {np.max(np.abs(s - 1.0)):.2e} in one step; reduce dt={dt:.3e}")
            p /= s[:, None]
            accX += 2.0 * sge * mean * dt + dW
            k += 1
            if k % rec_stride == 0:
                ridx = k // rec_stride - 1
                recX[:, ridx] = accX
                accX[:] = 0.0
                if (ridx + 1) % pop_every == 0:
                    pops[:, (ridx + 1) // pop_every] = p
        m = p.min()
        if m < min_p:
            min_p = m
    return recX, pops, {"min_population": float(min_p), "path": "populations"}


def _loop_full(rho0, d, hd, Voff, gamma, eps, dt, n_steps, rec_stride, pop_every,
               rngs, noise, snapshot_steps=None, trace_tol=1e-4):
    """Dense conditional-density-matrix path (needed off the QND point or for
    coherence/purity output).  Elementwise superoperators plus one commutator
    matmul pair when H' has off-diagonal elements."""
    M, D, _ = rho0.shape
    rho = rho0.astype(complex).copy()
    sge = np.sqrt(gamma * eps)
    C0 = (-1j * (hd[:, None] - hd[None, :])
          - 0.5 * gamma * (d[:, None] - d[None, :]) ** 2)
    Hsum = d[:, None] + d[None, :]
    have_V = Voff is not None and np.abs(Voff).max() > 0
    n_rec = n_steps // rec_stride
    recX = np.zeros((M, n_rec))
    diag_idx = np.arange(D)
    pops = np.zeros((M, n_rec // pop_every + 1, D))
    pops[:, 0] = np.real(rho[:, diag_idx, diag_idx])
    snaps = {}
    accX = np.zeros(M)
    k = 0
    for start in range(0, n_steps, _NOISE_CHUNK):
        span = min(_NOISE_CHUNK, n_steps - start)
        if noise is not None:
            dWs = noise[:, start:start + span]
        else:
            dWs = np.stack([r.standard_normal(span) for r in rngs]) * np.sqrt(dt)
        for j in range(span):
            dW = dWs[:, j]
            pdiag = np.real(rho[:, diag_idx, diag_idx])
            mean = pdiag @ d
            coef = dt * C0[None, :, :] + (sge * dW)[:, None, None] * (
                Hsum[None, :, :] - 2.0 * mean[:, None, None])
            new = rho + coef * rho
            if have_V:
                com = Voff @ rho - rho @ Voff
                new += (-1j * dt) * com
            new = 0.5 * (new + np.conj(np.swapaxes(new, 1, 2)))
            tr = np.real(new[:, diag_idx, diag_idx].sum(axis=1))
            if np.max(np.abs(tr - 1.0)) > trace_tol:
                raise RuntimeError(
                    f"trace drift {np.max(np.abs(tr - 1.0)):.2e} in one step; reduce dt={dt:.3e}")
            rho = new / tr[:, None, None]
            accX += 2.0 * sge * mean * dt + dW
            k += 1
            if snapshot_steps is not None and k in snapshot_steps:
                snaps[k] = rho.copy()
            if k % rec_stride == 0:
                ridx = k // rec_stride - 1
                recX[:, ridx] = accX
                accX[:] = 0.0
                if (ridx + 1) % pop_every == 0:
                    pops[:, (ridx + 1) // pop_every] = np.real(rho[:, diag_idx, diag_idx])
    meta = {"min_population": float(pops.min()), "path": "full"}
    return recX, pops, rho, snaps, meta


# ---------------------------------------------------------------------------
# public spin-only SME
# ---------------------------------------------------------------------------

def evolve_sme_ensemble(model: SpinModel, rho0, gamma: float, eps: float,
                        t_max: float, n_traj: int, master_seed: int = 0, *,
                        dt: float | None = None, eig: EigenDecomposition | None = None,
                        rho0_basis: str = "product", hp_matrix: np.ndarray | None = None,
                        record_dt: float | None = None, pop_dt: float | None = None,
                        keep_rho: bool = False, snapshot_times=None,
                        restrict_support: bool = True, negativity_guard: float = 1e-8,
                        noise: np.ndarray | None = None,
                        batch_size: int = 1024,
                        index_offset: int = 0) -> list[TrajectoryRecord]:
    """Integrate an ensemble of conditional trajectories.

    Trajectories are batched into vectorized array operations; trajectory i
    always draws from the Philox stream keyed by (master_seed, index_offset+i),
    so the result is independent of batch size and of how an ensemble is
    split across workers.
    """
    if gamma <= 0 or eps <= 0 or eps > 1:
        raise ValueError("need gamma > 0 and 0 < eps <= 1")
    eig, d, Hp, rho_states, sup, G = _prepare_spin_problem(
        model, rho0, eig, rho0_basis, hp_matrix, restrict_support)
    if rho_states.shape[0] == 1:
        state_of = lambda i: rho_states[0]
    elif rho_states.shape[0] == n_traj:
        state_of = lambda i: rho_states[i]
    else:
        raise ValueError("per-trajectory initial states must match n_traj")
    if dt is None:
        dt = default_dt(gamma, np.abs(d).max())
    n_steps, rec_stride, pop_every = _make_grids(t_max, dt, record_dt, pop_dt)

    hd = np.real(np.diag(Hp))
    Voff = Hp - np.diag(np.diag(Hp))
    qnd = np.abs(Voff).max() <= 1e-12 * max(np.abs(hd).max(), 1.0)
    want_rho = keep_rho or snapshot_times is not None
    use_pop_path = qnd and not want_rho

    snapshot_steps = None
    if snapshot_times is not None:
        snapshot_steps = {max(1, int(round(ts / dt))) for ts in np.atleast_1d(snapshot_times)}

    rec_times = dt * rec_stride * np.arange(1, n_steps // rec_stride + 1)
    pop_times = np.concatenate([[0.0], rec_times[pop_every - 1::pop_every]])
    group_E = eig.group_energies()

    records: list[TrajectoryRecord] = []
    for lo in range(0, n_traj, batch_size):
        hi = min(lo + batch_size, n_traj)
        M = hi - lo
        rngs = [trajectory_rng(master_seed, index_offset + i) for i in range(lo, hi)]
        chunk_noise = None if noise is None else np.atleast_2d(noise)[lo:hi]
        r0 = np.stack([state_of(lo + m) for m in range(M)])
        if use_pop_path:
            p0 = np.real(r0[:, np.arange(len(d)), np.arange(len(d))]).copy()
            recX, pops, meta = _loop_populations(
                p0, d, gamma, eps, dt, n_steps, rec_stride, pop_every, rngs, chunk_noise)
            final_rho = snaps = None
        else:
            recX, pops, final_rho, snaps, meta = _loop_full(
                r0.astype(complex), d, hd, Voff if not qnd else None, gamma, eps,
                dt, n_steps, rec_stride, pop_every, rngs, chunk_noise, snapshot_steps)
        meta = dict(meta, scheme="euler-maruyama-ito", support=sup.tolist(), dt=dt)
        pop_groups = pops @ G
        raw_min = float(pop_groups.min())
        if raw_min < -negativity_guard:
            raise RuntimeError(
                f"negative population {raw_min:.3e} beyond guard "
                f"{negativity_guard:.0e}; reduce dt={dt:.3e}")
        # report clipped-and-renormalized populations; the state itself is
        # never projected
        pop_groups = np.clip(pop_groups, 0.0, None)
        pop_groups /= pop_groups.sum(axis=2, keepdims=True)
        for m in range(M):
            rec = TrajectoryRecord(
                N=model.N, dt=dt, record_dt=dt * rec_stride, record_times=rec_times,
                dX=recX[m], pop_times=pop_times,
                populations=pop_groups[m],
                group_energies=group_E, gamma=gamma, eps=eps,
                seed=master_seed, trajectory_index=index_offset + lo + m,
                meta=dict(meta, min_population_raw=raw_min))
            if snaps:
                ks = sorted(snaps)
                rec.snapshot_times = np.array([k * dt for k in ks])
                rec.snapshots = np.stack([snaps[k][m] for k in ks])
            if keep_rho and final_rho is not None:
                rec.meta["final_rho"] = final_rho[m]
            rec.validate(guard=negativity_guard)
            records.append(rec)
    return records


def evolve_sme_spin(model: SpinModel, rho0, gamma: float, eps: float,
                    t_max: float, dt: float | None = None, seed: int = 0,
                    **kwargs) -> TrajectoryRecord:
    """Single conditional trajectory; see evolve_sme_ensemble for options."""
    return evolve_sme_ensemble(model, rho0, gamma, eps, t_max, 1, seed,
                               dt=dt, **kwargs)[0]


def evolve_lindblad(model: SpinModel, rho0, gamma: float, t_max: float, *,
                    times=None, eig: EigenDecomposition | None = None,
                    rho0_basis: str = "product", hp_matrix: np.ndarray | None = None,
                    restrict_support: bool = True,
                    rtol: float = 1e-8, atol: float = 1e-10) -> LindbladRecord:
    """Unconditional master equation drho = -i[H',rho]dt + gamma D[H/J]rho dt."""
    if gamma <= 0:
        raise ValueError("need gamma > 0")
    eig, d, Hp, rho_states, sup, G = _prepare_spin_problem(
        model, rho0, eig, rho0_basis, hp_matrix, restrict_support)
    rho_E = rho_states[0]
    D = len(d)
    hd = np.real(np.diag(Hp))
    Voff = Hp - np.diag(np.diag(Hp))
    have_V = np.abs(Voff).max() > 1e-14 * max(np.abs(hd).max(), 1.0)
    C0 = (-1j * (hd[:, None] - hd[None, :])
          - 0.5 * gamma * (d[:, None] - d[None, :]) ** 2)

    def rhs(_t, y):
        rho = y.reshape(D, D)
        out = C0 * rho
        if have_V:
            out = out - 1j * (Voff @ rho - rho @ Voff)
        return out.ravel()

    t_eval = np.atleast_1d(times) if times is not None else np.linspace(0.0, t_max, 65)
    sol = solve_ivp(rhs, (0.0, t_max), rho_E.astype(complex).ravel(),
                    t_eval=t_eval, rtol=rtol, atol=atol, method="RK45")
    if not sol.success:
        raise RuntimeError(f"Lindblad integration did not converge: {sol.message}")
    rhos = sol.y.T.reshape(-1, D, D)
    pops = np.real(rhos[:, np.arange(D), np.arange(D)]) @ G
    return LindbladRecord(sol.t, rhos, pops, eig.group_energies(), sup,
                          meta={"rtol": rtol, "atol": atol})


# ---------------------------------------------------------------------------
# spin + meter SME
# ---------------------------------------------------------------------------

@dataclass
class MeterSpec:
    """Truncated COM-mode meter.  The local-oscillator phase is fixed to the
    X-maximizing choice, so the homodyne operator is a0 itself."""

    n_max: int
    gamma_s: float

    def __post_init__(self):
        if self.n_max < 4:
            raise ValueError("meter truncation n_max must be at least 4")
        if self.gamma_s <= 0:
            raise ValueError("gamma_s must be positive")

    @property
    def a(self) -> np.ndarray:
        return np.diag(np.sqrt(np.arange(1, self.n_max)), 1).astype(complex)

    @property
    def X(self) -> np.ndarray:
        a = self.a
        return (a + a.conj().T) / np.sqrt(2.0)

    @property
    def P(self) -> np.ndarray:
        a = self.a
        return 1j * (a.conj().T - a) / np.sqrt(2.0)


def evolve_sme_full_ensemble(model: SpinModel, meter: MeterSpec, theta: float,
                             eps: float, t_max: float, n_traj: int,
                             master_seed: int = 0, *, dt: float | None = None,
                             rho0_spin=None, eig: EigenDecomposition | None = None,
                             rho0_basis: str = "product",
                             record_dt: float | None = None, pop_dt: float | None = None,
                             truncation_tol: float = 1e-3,
                             batch_size: int = 256) -> list[TrajectoryRecord]:
    """Joint spin+meter trajectories from (spin state) x (meter vacuum)."""
    if eps <= 0 or eps > 1:
        raise ValueError("need 0 < eps <= 1")
    if eig is None:
        eig = diagonalize(model)
    V = eig.eigenvectors
    Ds = V.shape[0]
    if rho0_spin is None:
        raise ValueError("rho0_spin is required")
    rho_s = _as_density_matrix(rho0_spin, Ds)
    _check_density_matrix(rho_s)
    if rho0_basis == "product":
        rho_s = V.T @ rho_s @ V
    nm = meter.n_max
    gamma_s = meter.gamma_s
    d = eig.energies
    _, Hp = build_hamiltonians(model)
    Hp_E = V.T @ Hp @ V

    I_s = np.eye(Ds)
    I_m = np.eye(nm)
    a = meter.a
    H = np.kron(Hp_E, I_m) + theta * np.kron(np.diag(d), meter.P)
    A = np.kron(I_s, a)
    Adag = A.conj().T
    AdagA = Adag @ A
    Dj = Ds * nm

    vac = np.zeros((nm, nm), dtype=complex)
    vac[0, 0] = 1.0
    rho0 = np.kron(rho_s, vac)

    if dt is None:
        scale = max(gamma_s, abs(theta) * max(np.abs(d).max(), 1.0) * np.sqrt(nm), 1e-30)
        dt = 1e-3 / scale
    n_steps, rec_stride, pop_every = _make_grids(t_max, dt, record_dt, pop_dt)
    rec_times = dt * rec_stride * np.arange(1, n_steps // rec_stride + 1)
    pop_times = np.concatenate([[0.0], rec_times[pop_every - 1::pop_every]])
    sge = np.sqrt(eps * gamma_s)
    drift_I = np.sqrt(2.0 * eps * gamma_s)

    gidx = eig.group_of_level()
    G = np.zeros((Ds, eig.n_groups))
    G[np.arange(Ds), gidx] = 1.0
    group_E = eig.group_energies()
    diag_idx = np.arange(Dj)

    records = []
    for lo in range(0, n_traj, batch_size):
        hi = min(lo + batch_size, n_traj)
        M = hi - lo
        rngs = [trajectory_rng(master_seed, i) for i in range(lo, hi)]
        rho = np.tile(rho0, (M, 1, 1))
        n_rec = n_steps // rec_stride
        recX = np.zeros((M, n_rec))
        pops = np.zeros((M, n_rec // pop_every + 1, Ds))
        occ_top = np.zeros((M, n_rec // pop_every + 1))
        meter_occ = np.zeros((M, n_rec // pop_every + 1))

        def spin_meter_diag(r):
            pd = np.real(r[:, diag_idx, diag_idx]).reshape(M, Ds, nm)
            return pd.sum(axis=2), pd[:, :, -1].sum(axis=1), \
                (pd * np.arange(nm)[None, None, :]).sum(axis=(1, 2))

        pops[:, 0], occ_top[:, 0], meter_occ[:, 0] = spin_meter_diag(rho)
        accX = np.zeros(M)
        k = 0
        for start in range(0, n_steps, _NOISE_CHUNK):
            span = min(_NOISE_CHUNK, n_steps - start)
            dWs = np.stack([r.standard_normal(span) for r in rngs]) * np.sqrt(dt)
            for j in range(span):
                dW = dWs[:, j]
                com = H @ rho - rho @ H
                Ar = A @ rho
                m_op = Ar + np.conj(np.swapaxes(Ar, 1, 2))
                tr_m = np.real(m_op[:, diag_idx, diag_idx].sum(axis=1))
                diss = Ar @ Adag - 0.5 * (AdagA @ rho + rho @ AdagA)
                new = rho + dt * (-1j * com + gamma_s * diss) \
                    + (sge * dW)[:, None, None] * (m_op - tr_m[:, None, None] * rho)
                new = 0.5 * (new + np.conj(np.swapaxes(new, 1, 2)))
                tr = np.real(new[:, diag_idx, diag_idx].sum(axis=1))
                if np.max(np.abs(tr - 1.0)) > 1e-4:
                    raise RuntimeError(
                        f"trace drift {np.max(np.abs(tr - 1.0)):.2e}; reduce dt={dt:.3e}")
                rho = new / tr[:, None, None]
                meanX = tr_m / np.sqrt(2.0)
                accX += drift_I * meanX * dt + dW
                k += 1
                if k % rec_stride == 0:
                    ridx = k // rec_stride - 1
                    recX[:, ridx] = accX
                    accX[:] = 0.0
                    if (ridx + 1) % pop_every == 0:
                        i_p = (ridx + 1) // pop_every
                        pops[:, i_p], occ_top[:, i_p], meter_occ[:, i_p] = spin_meter_diag(rho)
                        if occ_top[:, i_p].max() > truncation_tol:
                            raise RuntimeError(
                                f"meter truncation leak {occ_top[:, i_p].max():.2e} at "
                                f"n_max={nm}; suggest n_max >= {int(np.ceil(nm * 1.5)) + 2}")
        pop_groups = pops @ G
        for m in range(M):
            rec = TrajectoryRecord(
                N=model.N, dt=dt, record_dt=dt * rec_stride, record_times=rec_times,
                dX=recX[m], pop_times=pop_times, populations=np.clip(pop_groups[m], 0.0, None),
                group_energies=group_E, gamma=2.0 * theta ** 2 / gamma_s,
                eps=eps, seed=master_seed, trajectory_index=lo + m,
                meta={"path": "spin+meter", "theta": theta, "gamma_s": gamma_s,
                      "scheme": "euler-maruyama-ito", "dt": dt,
                      "meter_occupation": meter_occ[m],
                      "top_level_occupation": occ_top[m],
                      "final_rho": rho[m]})
            rec.validate(guard=1e-6)
            records.append(rec)
    return records


def evolve_sme_full(model: SpinModel, meter: MeterSpec, theta: float, eps: float,
                    t_max: float, dt: float | None = None, seed: int = 0,
                    **kwargs) -> TrajectoryRecord:
    return evolve_sme_full_ensemble(model, meter, theta, eps, t_max, 1, seed,
                                    dt=dt, **kwargs)[0]


# ---------------------------------------------------------------------------
# population extraction
# ---------------------------------------------------------------------------

def populations(state, eig: EigenDecomposition) -> np.ndarray:
    """P_g = Tr(Pi_g rho) with degeneracy-group projectors, for a state given
    in the same full product basis as eig."""
    if eig.basis is not None:
        raise ValueError("populations() needs a full-basis eigendecomposition")
    V = eig.eigenvectors
    rho = _as_density_matrix(state, V.shape[0])
    diag = np.real(np.einsum("bi,bc,ci->i", V.conj(), rho, V))
    out = np.zeros(eig.n_groups)
    for g, members in enumerate(eig.degeneracy_groups):
        out[g] = diag[members].sum()
    return out
