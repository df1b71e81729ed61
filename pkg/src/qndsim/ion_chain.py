"""Trapped-ion derivation of the effective spin model and measurement rates.

From a physical chain + double bichromatic (Molmer-Sorensen style) laser
specification this module computes the phonon modes, the spin-spin couplings

    J_ij = -Omega^2 sum_q eta_q^2 w_q M_iq M_jq [1/(D^2-w_q^2) + 1/(D'^2-w_q^2)]

the transverse field h = Omega*dOmega*(1/D + 1/D')/2, the system-meter
strength theta = -eta*sqrt(2)*M_00, the fourth-order corrections, the
single-sideband validity bounds, and the measurement rates

    gamma_s = (Omega_0 eta_0 M_00)^2 / Gamma_e,    gamma = 2 (theta J)^2 / gamma_s

with the single-run energy resolution Delta E / J = 1/sqrt(2 gamma eps tau).

Everything here is in SI units (rad/s, kg, m); the conversion to the
dimensionless core units (energies in J) happens only at this module's
boundary via `to_spin_model`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .spin_model import SpinModel, build_explicit_model

__all__ = [
    "HBAR", "AMU", "ECHARGE", "EPS0",
    "IonChainSpec", "LaserSpec", "CoolingSpec", "ModeData",
    "IonChainDerivation", "ValidityReport", "MeasurementParams",
    "equilibrium_positions", "normal_modes", "effective_couplings",
    "coupling_scale_estimate", "fit_power_law", "fourth_order_corrections",
    "check_validity", "measurement_parameters", "species_resolution_estimate",
    "to_spin_model",
]

HBAR = 1.054571817e-34     # J s
AMU = 1.66053906660e-27    # kg
ECHARGE = 1.602176634e-19  # C
EPS0 = 8.8541878128e-12    # F/m

# "much smaller than" margins: ratio <= PASS is clean, <= WARN is marginal
VALIDITY_PASS = 0.05
VALIDITY_WARN = 0.2


@dataclass(frozen=True)
class IonChainSpec:
    """Linear Paul trap chain driven on either axial or transverse modes."""

    n_ions: int
    mode_axis: str                # "axial" | "transverse"
    omega_z: float                # axial trap frequency, rad/s
    omega_x: float | None = None  # transverse trap frequency, rad/s
    mass: float = 9.012182 * AMU  # 9Be+ by default
    ancilla_mass: float | None = None
    eta: float = 0.1              # Lamb-Dicke parameter of the MS beams at the COM

    def __post_init__(self):
        if self.n_ions < 2:
            raise ValueError("need at least two ions")
        if self.mode_axis not in ("axial", "transverse"):
            raise ValueError("mode_axis must be 'axial' or 'transverse'")
        if self.mode_axis == "transverse":
            if self.omega_x is None:
                raise ValueError("transverse modes need omega_x")
            if self.omega_x / self.omega_z < 0.73 * self.n_ions ** 0.86:
                raise ValueError(
                    "linear chain unstable: omega_x/omega_z < 0.73 N^0.86 (zig-zag)")
        if self.ancilla_mass is None:
            object.__setattr__(self, "ancilla_mass", self.mass)


@dataclass(frozen=True)
class LaserSpec:
    """Double-MS drive: detunings (Delta, Delta') with Delta' - Delta = omega_0
    and a small Rabi imbalance delta_Omega generating the transverse field.

    B is the common detuning offset that rectifies the transverse-field
    mismatch; None means the QND sweetspot B = 2h."""

    Omega: float
    delta_Omega: float = 0.0
    Delta: float = 0.0
    Delta_prime: float | None = None
    B: float | None = None

    def resolved_Delta_prime(self, omega0: float) -> float:
        if self.Delta_prime is None:
            return self.Delta + omega0
        return self.Delta_prime


@dataclass(frozen=True)
class CoolingSpec:
    """Red-sideband cooling drive on the ancilla ion plus photon collection."""

    Gamma_e: float       # ancilla linewidth, rad/s
    Omega_0: float       # cooling Rabi frequency, rad/s
    k_0: float           # cooling laser wavevector, 1/m
    epsilon: float       # photon collection efficiency
    Delta_e: float | None = None   # red sideband: omega_0 by magnitude

    def __post_init__(self):
        if not 0 < self.epsilon <= 1:
            raise ValueError("collection efficiency must be in (0, 1]")


@dataclass
class ModeData:
    axis: str
    positions: np.ndarray       # dimensionless equilibrium coordinates
    length_scale: float         # meters per dimensionless unit
    omega: np.ndarray           # rad/s, q=0 is the COM
    M: np.ndarray               # M[j, q], orthonormal columns, COM uniform
    omega0: float               # COM frequency

    def eta_q(self, eta: float) -> np.ndarray:
        return eta * np.sqrt(self.omega0 / self.omega)


def equilibrium_positions(N: int, tol: float = 1e-12, max_iter: int = 200) -> np.ndarray:
    """Dimensionless equilibrium positions from damped Newton iteration.

    Units: length scale l with l^3 = e^2/(4 pi eps0 m omega_z^2).
    """
    u = 2.0 * (np.arange(N) - (N - 1) / 2.0) * 0.9

    def force(u):
        diff = u[:, None] - u[None, :]
        np.fill_diagonal(diff, np.inf)
        return u - np.sum(np.sign(diff) / diff ** 2, axis=1)

    for _ in range(max_iter):
        F = force(u)
        if np.max(np.abs(F)) <= tol:
            return u
        diff = u[:, None] - u[None, :]
        np.fill_diagonal(diff, np.inf)
        inv3 = 1.0 / np.abs(diff) ** 3
        Jac = -2.0 * inv3
        np.fill_diagonal(Jac, 1.0 + 2.0 * inv3.sum(axis=1))
        step = np.linalg.solve(Jac, F)
        lam = 1.0
        base = np.max(np.abs(F))
        while lam > 1e-6:
            trial = u - lam * step
            if np.max(np.abs(force(trial))) < base:
                u = trial
                break
            lam *= 0.5
        else:
            raise RuntimeError("Newton iteration for equilibrium positions stalled")
    raise RuntimeError("equilibrium positions did not converge")


def normal_modes(spec: IonChainSpec) -> ModeData:
    """Equilibrium positions and phonon modes.

    Mode ordering follows the COM-first convention: q=0 is the COM, then
    ascending (axial) or descending (transverse) in frequency, matching the
    chain's physical spectrum orientation.
    """
    N = spec.n_ions
    u = equilibrium_positions(N)
    diff = u[:, None] - u[None, :]
    np.fill_diagonal(diff, np.inf)
    inv3 = 1.0 / np.abs(diff) ** 3
    if spec.mode_axis == "axial":
        A = -2.0 * inv3
        np.fill_diagonal(A, 1.0 + 2.0 * inv3.sum(axis=1))
    else:
        ratio2 = (spec.omega_x / spec.omega_z) ** 2
        A = inv3.copy()
        np.fill_diagonal(A, ratio2 - inv3.sum(axis=1))
    lam, vec = np.linalg.eigh(A)
    if lam.min() <= 0:
        raise RuntimeError("zig-zag instability: non-positive transverse mode frequency")
    omega = spec.omega_z * np.sqrt(lam)
    if spec.mode_axis == "transverse":
        omega = omega[::-1]
        vec = vec[:, ::-1]
    # fix sign: COM column uniform and positive
    for q in range(N):
        k = np.argmax(np.abs(vec[:, q]))
        if vec[k, q] < 0:
            vec[:, q] = -vec[:, q]
    ell = (ECHARGE ** 2 / (4.0 * np.pi * EPS0 * spec.mass * spec.omega_z ** 2)) ** (1.0 / 3.0)
    return ModeData(spec.mode_axis, u, ell, omega, vec, float(omega[0]))


@dataclass
class ValidityReport:
    sideband_ratios: np.ndarray      # per mode p != 0
    sideband_ok: bool
    sideband_marginal: bool
    off_resonance_ratio: float       # max Omega/|Delta|
    near_resonance_ratio: float      # max eta_q Omega / |Delta - w_q|
    near_resonant_modes: list
    scalability_limit: float         # N <= (omega_z/(eta^2 Omega))^0.54
    scalability_ok: bool
    zigzag_margin: float | None      # omega_x/omega_z - 0.73 N^0.86
    ok: bool

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sideband_ratios"] = self.sideband_ratios.tolist()
        return d


@dataclass
class IonChainDerivation:
    spec: IonChainSpec
    laser: LaserSpec
    modes: ModeData
    J: np.ndarray                 # rad/s, symmetric, zero diagonal
    h: float                      # rad/s
    theta: float
    B: float
    h_prime: float                # B - h
    J_nn: float                   # mean nearest-neighbour |J_{i,i+1}|
    J_fit: float | None = None
    alpha_fit: float | None = None
    fit_residual: float | None = None
    validity: ValidityReport | None = None
    corrections: dict | None = None
    measurement: "MeasurementParams | None" = None

    @property
    def energy_scale(self) -> float:
        """Reference J used for dimensionless core units."""
        return self.J_fit if self.J_fit is not None else self.J_nn

    def to_json_dict(self) -> dict:
        out = {
            "n_ions": self.spec.n_ions,
            "mode_axis": self.spec.mode_axis,
            "omega_z": self.spec.omega_z,
            "omega_x": self.spec.omega_x,
            "eta": self.spec.eta,
            "Omega": self.laser.Omega,
            "delta_Omega": self.laser.delta_Omega,
            "Delta": self.laser.Delta,
            "Delta_prime": self.laser.resolved_Delta_prime(self.modes.omega0),
            "mode_frequencies": self.modes.omega.tolist(),
            "mode_matrix": self.modes.M.tolist(),
            "J_matrix": self.J.tolist(),
            "h": self.h,
            "theta": self.theta,
            "B": self.B,
            "h_prime": self.h_prime,
            "J_nn": self.J_nn,
            "J_fit": self.J_fit,
            "alpha_fit": self.alpha_fit,
        }
        if self.validity is not None:
            out["validity"] = self.validity.to_dict()
        if self.corrections is not None:
            out["corrections"] = {
                k: (v.tolist() if isinstance(v, np.ndarray) else v)
                for k, v in self.corrections.items()}
        if self.measurement is not None:
            out["measurement"] = self.measurement.to_dict()
        return out

    def save_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f, indent=1, sort_keys=True)


def effective_couplings(spec: IonChainSpec, laser: LaserSpec,
                        modes: ModeData | None = None) -> IonChainDerivation:
    """Second/third-order effective parameters of the double-MS drive."""
    if modes is None:
        modes = normal_modes(spec)
    w = modes.omega
    M = modes.M
    w0 = modes.omega0
    Dp = laser.resolved_Delta_prime(w0)
    D = laser.Delta
    if abs(Dp - D - w0) > 1e-6 * w0:
        raise ValueError("Delta' - Delta must equal the COM frequency")
    eta_q = modes.eta_q(spec.eta)
    denom = 1.0 / (D ** 2 - w ** 2) + 1.0 / (Dp ** 2 - w ** 2)
    weight = eta_q ** 2 * w * denom                      # per-mode bracket
    J = -laser.Omega ** 2 * np.einsum("q,iq,jq->ij", weight, M, M)
    np.fill_diagonal(J, 0.0)
    h = 0.5 * laser.Omega * laser.delta_Omega * (1.0 / D + 1.0 / Dp)
    theta = -spec.eta * np.sqrt(2.0) * M[0, 0]
    B = 2.0 * h if laser.B is None else laser.B
    nn = np.abs(np.diagonal(J, offset=1))
    der = IonChainDerivation(spec, laser, modes, J, h, theta, B, B - h,
                             float(nn.mean()))
    if spec.n_ions >= 3:
        try:
            der.J_fit, der.alpha_fit, der.fit_residual = fit_power_law(J)
        except ValueError:
            pass
    return der


def coupling_scale_estimate(spec: IonChainSpec, laser: LaserSpec,
                            modes: ModeData | None = None) -> float:
    """Single-mode coupling-scale estimate J ~ eta^2 omega_0 (Omega/Delta)^2.

    This is the per-mode magnitude of the spin-spin coupling before the
    far-detuned multimode cancellation; it is the J that sets theta*J and the
    measurement rate for an axial proof-of-principle chain, where the exact
    J_ij of `effective_couplings` is strongly suppressed at large detuning.
    """
    w0 = (modes or normal_modes(spec)).omega0
    return spec.eta ** 2 * w0 * (laser.Omega / laser.Delta) ** 2


def fit_power_law(J: np.ndarray) -> tuple[float, float, float]:
    """Least squares of log|J_ij| against log|i-j|; returns (J, alpha, residual)."""
    N = J.shape[0]
    if N < 3:
        raise ValueError("power-law fit needs at least three ions")
    idx = np.triu_indices(N, k=1)
    dist = np.abs(idx[0] - idx[1]).astype(float)
    vals = np.abs(J[idx])
    if np.all(dist == dist[0]):
        raise ValueError("degenerate fit: all pair distances equal")
    if np.any(vals <= 0):
        raise ValueError("power-law fit needs nonzero couplings")
    X = np.stack([np.ones_like(dist), -np.log(dist)], axis=1)
    y = np.log(vals)
    coef, res, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = float(np.sqrt(res[0] / len(y))) if len(res) else 0.0
    return float(np.exp(coef[0])), float(coef[1]), resid


def fourth_order_corrections(spec: IonChainSpec, laser: LaserSpec,
                             der: IonChainDerivation | None = None) -> dict:
    """Fourth-order Lamb-Dicke corrections: the two-phonon Ising correction
    J4_ij, the field-imbalance Ising term t_ij and the site-dependent field
    lambda_j.  Returns the matrices plus worst-case ratios against (J, h)."""
    if der is None:
        der = effective_couplings(spec, laser)
    modes, w0 = der.modes, der.modes.omega0
    w, M = modes.omega, modes.M
    D = laser.Delta
    Dp = laser.resolved_Delta_prime(w0)
    eta_q = modes.eta_q(spec.eta)
    Om = laser.Omega

    wsum = w[:, None] + w[None, :]
    brack2 = 1.0 / (D ** 2 - wsum ** 2) + 1.0 / (Dp ** 2 - wsum ** 2)
    e2M = eta_q[None, :] ** 2 * M ** 2                      # (j, q) -> eta_q^2 M_jq^2
    term1 = -0.5 * Om ** 2 * np.einsum(
        "q,p,iq,jq,ip,jp,qp,qp->ij", eta_q ** 2, eta_q ** 2, M, M, M, M, wsum, brack2)
    brack1 = 1.0 / (D ** 2 - w ** 2) + 1.0 / (Dp ** 2 - w ** 2)
    base = np.einsum("q,iq,jq->ij", eta_q ** 2 * w * brack1, M, M)
    occ = e2M.sum(axis=1)                                   # sum_p eta_p^2 M_jp^2
    term2 = 0.5 * Om ** 2 * spec.eta ** 2 * w0 * (occ[:, None] + occ[None, :]) * base
    J4 = term1 + term2
    np.fill_diagonal(J4, 0.0)

    t_ij = (laser.delta_Omega / Om) * der.J                 # same bracket, one Omega -> dOmega
    lam_j = -2.0 * Om * laser.delta_Omega * occ * (1.0 / D + 1.0 / Dp)

    iu = np.triu_indices(spec.n_ions, k=1)
    Jmax = np.abs(der.J[iu]).max()
    ratios = {
        "J4_over_J": float(np.abs(J4[iu]).max() / Jmax) if Jmax > 0 else 0.0,
        "t_over_J": float(np.abs(t_ij[iu]).max() / Jmax) if Jmax > 0 else 0.0,
        "lambda_over_h": float(np.abs(lam_j).max() / abs(der.h)) if der.h != 0 else 0.0,
    }
    return {"J4": J4, "t": t_ij, "lambda": lam_j, **ratios}


def check_validity(spec: IonChainSpec, laser: LaserSpec,
                   modes: ModeData | None = None) -> ValidityReport:
    """Single-sideband addressability, off-resonance margins, and scalability."""
    if modes is None:
        modes = normal_modes(spec)
    w, w0 = modes.omega, modes.omega0
    D = laser.Delta
    Dp = laser.resolved_Delta_prime(w0)
    eta_q = modes.eta_q(spec.eta)
    Om = laser.Omega

    ratios = []
    if Om == 0:
        ratios = [0.0] * (len(w) - 1)
    else:
        for p in range(1, len(w)):
            lhs = max(
                np.sum(eta_q ** 2 * Om ** 2 * w * eta_q[p] / np.abs(D ** 2 - w ** 2)),
                np.sum(eta_q ** 2 * Om ** 2 * w * eta_q[p] / np.abs(Dp ** 2 - w ** 2)))
            ratios.append(lhs / abs(w[p] - w0))
    ratios = np.asarray(ratios)
    worst = ratios.max() if len(ratios) else 0.0

    off_res = abs(Om) / min(abs(D), abs(Dp)) if Om else 0.0
    near = 0.0
    near_modes = []
    for q in range(len(w)):
        for Dx in (D, Dp):
            gap = abs(abs(Dx) - w[q])
            r = eta_q[q] * abs(Om) / gap if gap > 0 else np.inf
            if r > near:
                near = r
            if r > VALIDITY_WARN:
                near_modes.append(q)
    scal_limit = (spec.omega_z / (spec.eta ** 2 * abs(Om))) ** 0.54 if Om else np.inf
    zig = None
    if spec.mode_axis == "transverse":
        zig = spec.omega_x / spec.omega_z - 0.73 * spec.n_ions ** 0.86
    ok = (worst <= VALIDITY_WARN and off_res <= VALIDITY_WARN
          and near <= VALIDITY_WARN and spec.n_ions <= scal_limit
          and (zig is None or zig >= 0))
    return ValidityReport(ratios, bool(worst <= VALIDITY_PASS), bool(worst <= VALIDITY_WARN),
                          float(off_res), float(near), sorted(set(near_modes)),
                          float(scal_limit), bool(spec.n_ions <= scal_limit), zig, bool(ok))


@dataclass
class MeasurementParams:
    gamma_s: float            # meter damping / readout rate, rad/s
    gamma: float              # effective energy measurement rate, rad/s
    epsilon: float
    tau: float                # averaging time, s
    resolution: float         # Delta E / J
    theta_J: float            # |theta * J|, rad/s
    reduced_sme_ok: bool      # gamma_s >> |theta J|
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def measurement_parameters(der: IonChainDerivation, cooling: CoolingSpec,
                           tau: float, gamma_s: float | None = None,
                           J_scale: float | None = None) -> MeasurementParams:
    """Readout rate, effective measurement rate, and energy resolution.

    gamma_s follows (Omega_0 eta_0 M_00)^2/Gamma_e with M_00 = 1/sqrt(N)
    (equal-mass COM); an explicitly chosen gamma_s overrides the cooling
    formula.  Resolution: Delta E / J = 1/sqrt(2 gamma eps tau).
    """
    if tau <= 0:
        raise ValueError("averaging time must be positive")
    spec = der.spec
    w0 = der.modes.omega0
    warn = []
    if gamma_s is None:
        m0 = spec.ancilla_mass
        eta0 = cooling.k_0 * np.sqrt(HBAR / (2.0 * m0 * w0))
        gamma_s = (cooling.Omega_0 * eta0) ** 2 / (spec.n_ions * cooling.Gamma_e)
    if not w0 > 5.0 * cooling.Gamma_e:
        warn.append("resolved-sideband margin omega0 >> Gamma_e not met")
    if not w0 > 5.0 * cooling.Omega_0:
        warn.append("resolved-sideband margin omega0 >> Omega_0 not met")
    J = der.energy_scale if J_scale is None else J_scale
    theta_J = abs(der.theta * J)
    gamma = 2.0 * theta_J ** 2 / gamma_s
    if gamma_s < 5.0 * theta_J:
        warn.append("gamma_s >> |theta J| violated: reduced SME regime questionable")
    resolution = 1.0 / np.sqrt(2.0 * gamma * cooling.epsilon * tau)
    return MeasurementParams(float(gamma_s), float(gamma), cooling.epsilon, tau,
                             float(resolution), float(theta_J),
                             bool(gamma_s >= 5.0 * theta_J), warn)


def species_resolution_estimate(Delta_over_Omega: float, N: int, eta: float,
                                eps: float, E_r: float, t_coh: float) -> float:
    """Species-level scaling Delta E / J ~ (Delta/Omega) N^(3/4) /
    sqrt(2 eta eps E_r t_coh) with E_r the recoil energy (rad/s) and t_coh
    the single-spin coherence time."""
    return Delta_over_Omega * N ** 0.75 / np.sqrt(2.0 * eta * eps * E_r * t_coh)


def to_spin_model(der: IonChainDerivation, J_scale: float | None = None) -> SpinModel:
    """Dimensionless spin model in units of the chain's energy scale."""
    J = der.energy_scale if J_scale is None else J_scale
    sign = np.sign(der.J[0, 1]) if der.J[0, 1] != 0 else 1.0
    coupling = sign * der.J / J   # nearest-neighbour coupling positive in core units
    np.fill_diagonal(coupling, 0.0)
    return build_explicit_model(coupling, der.h / J, der.h_prime / J, J_unit=J)
