"""Filtering and analysis of homodyne records: energy estimates, shot-noise
resolution, and quantum-jump detection.

The window filter is

    F_tau(t) = (2 N sqrt(gamma*eps) tau)^-1  int_0^inf dt' exp(-t'/tau) I(t-t')

evaluated with the exact one-pole recursion for piecewise-constant I, and the
cumulative average is

    Ibar(tau) = (2 N sqrt(gamma*eps) tau)^-1  int_0^tau I dt

both normalized so an eigenstate record converges to the energy density
E/(J N).  The shot-noise bands are 1/(2N sqrt(2 gamma eps tau)) for the
window filter and 1/(2N sqrt(gamma eps tau)) for the cumulative average.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .sme import TrajectoryRecord

__all__ = [
    "FilteredCurrent",
    "window_filter",
    "cumulative_average",
    "min_resolvable_gap",
    "snr",
    "JumpEvent",
    "detect_jumps",
    "population_jumps",
    "match_jump_events",
]


@dataclass
class FilteredCurrent:
    times: np.ndarray
    values: np.ndarray        # energy-density units E/(J N)
    tau: float
    normalization: float      # (2 N sqrt(gamma eps) tau)^-1
    kind: str                 # "window" or "cumulative"
    N: int
    gamma: float
    eps: float
    band: np.ndarray | None = None   # one shot-noise sigma per sample
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("filtered current contains non-finite values")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


def _record_arrays(record) -> tuple[np.ndarray, np.ndarray, float]:
    if isinstance(record, TrajectoryRecord):
        return record.record_times, record.dX, record.record_dt
    times, dX = record
    times = np.asarray(times, float)
    dX = np.asarray(dX, float)
    dt = times[1] - times[0] if len(times) > 1 else times[0]
    return times, dX, float(dt)


def window_filter(record, tau: float, N: int, gamma: float, eps: float) -> FilteredCurrent:
    """Exponential-window filtered current on the record grid.

    The one-pole recursion S_k = exp(-dt/tau) S_{k-1} + tau (1 - exp(-dt/tau))
    I_k is the exact continuum integral for piecewise-constant I, so the gain
    on a constant record is exactly tau.
    """
    times, dX, dt = _record_arrays(record)
    if tau < 10.0 * dt:
        raise ValueError(f"tau={tau} undersamples the record (need tau >= 10*dt={10 * dt})")
    decay = np.exp(-dt / tau)
    gain = tau * (1.0 - decay) / dt  # applied to dX = I*dt
    norm = 1.0 / (2.0 * N * np.sqrt(gamma * eps) * tau)
    # one-pole recursion S_k = decay*S_{k-1} + gain*dX_k
    values = norm * lfilter([gain], [1.0, -decay], dX)
    sigma = 1.0 / (2.0 * N * np.sqrt(2.0 * gamma * eps * tau))
    band = np.full_like(values, sigma)
    return FilteredCurrent(times, values, tau, norm, "window", N, gamma, eps, band)


def cumulative_average(record, tau_end: float, N: int, gamma: float, eps: float
                       ) -> FilteredCurrent:
    """Running Ibar(tau) for tau up to tau_end, with the shot-noise band
    sigma(tau) = (2 N sqrt(gamma eps) tau)^-1 sqrt(tau)."""
    times, dX, dt = _record_arrays(record)
    n = int(np.searchsorted(times, tau_end * (1 + 1e-12), side="right"))
    if n < 1:
        raise ValueError("tau_end shorter than one record sample")
    t = times[:n]
    csum = np.cumsum(dX[:n])
    norm = 1.0 / (2.0 * N * np.sqrt(gamma * eps))
    values = norm * csum / t
    band = norm / np.sqrt(t)
    return FilteredCurrent(t, values, float(t[-1]), norm / t[-1], "cumulative",
                           N, gamma, eps, band)


def min_resolvable_gap(gamma: float, eps: float, tau: float) -> float:
    """Smallest Delta E / J distinguishable after averaging time tau (SNR = 1)."""
    if gamma <= 0 or eps <= 0 or tau <= 0:
        raise ValueError("gamma, eps, tau must be positive")
    return 1.0 / np.sqrt(2.0 * gamma * eps * tau)


def snr(delta_E: float, gamma: float, eps: float, tau: float) -> float:
    """Signal-to-noise ratio 2 gamma eps (Delta E / J)^2 tau of a two-level
    discrimination after averaging time tau."""
    return 2.0 * gamma * eps * delta_E ** 2 * tau


# ---------------------------------------------------------------------------
# jump detection
# ---------------------------------------------------------------------------

@dataclass
class JumpEvent:
    time: float
    level_from: int
    level_to: int
    ambiguous: bool = False


def _classify(values: np.ndarray, group_energies: np.ndarray, N: int) -> np.ndarray:
    densities = group_energies / N
    return np.argmin(np.abs(values[:, None] - densities[None, :]), axis=1)


def detect_jumps(filtered: FilteredCurrent, group_energies: np.ndarray, *,
                 level_indices=None, tau_hold: float | None = None,
                 settle: float | None = None,
                 ambiguity_sigma: float = 2.0) -> list[JumpEvent]:
    """Nearest-eigenvalue classification of the filtered current with
    hysteresis: a level change counts once the new classification persists
    for tau_hold (default 2*tau).

    `level_indices` restricts the classification grid to the levels the
    trajectory can actually occupy (e.g. the symmetry sector of the initial
    state); events carry those original indices.  The event time is the
    moment the classifier leaves the previous level, not when it settles, so
    it tracks the underlying transition despite the filter lag.  Events
    between levels closer than ambiguity_sigma * filter noise are flagged
    ambiguous rather than dropped.
    """
    group_energies = np.asarray(group_energies, float)
    if level_indices is None:
        level_indices = np.arange(len(group_energies))
    level_indices = np.asarray(level_indices, int)
    energies = group_energies[level_indices]
    tau_hold = 2.0 * filtered.tau if tau_hold is None else tau_hold
    settle = 3.0 * filtered.tau if settle is None else settle
    t = filtered.times
    labels = _classify(filtered.values, energies, filtered.N)
    sigma = filtered.band[0] if filtered.band is not None else 0.0
    start = int(np.searchsorted(t, settle))
    if start >= len(t):
        return []
    events: list[JumpEvent] = []
    current = labels[start]
    left_at = start      # last index still classified as `current`
    k = start + 1
    dt = t[1] - t[0]
    hold = max(1, int(round(tau_hold / dt)))
    while k < len(t):
        if labels[k] == current:
            left_at = k
            k += 1
            continue
        cand = labels[k]
        end = min(len(t), k + hold)
        if np.all(labels[k:end] == cand) and end - k >= hold:
            gap = abs(energies[cand] - energies[current]) / filtered.N
            events.append(JumpEvent(t[min(left_at + 1, len(t) - 1)],
                                    int(level_indices[current]),
                                    int(level_indices[cand]),
                                    ambiguous=gap < ambiguity_sigma * sigma))
            current = cand
            left_at = end - 1
            k = end
            continue
        k += 1
    return events


def population_jumps(record: TrajectoryRecord, *, tau_hold: float,
                     settle: float = 0.0) -> list[JumpEvent]:
    """Reference jump times from the conditional populations: the dominant
    degeneracy group changes and the new one persists for tau_hold."""
    t = record.pop_times
    labels = np.argmax(record.populations, axis=1)
    start = int(np.searchsorted(t, settle))
    dt = t[1] - t[0] if len(t) > 1 else 1.0
    hold = max(1, int(round(tau_hold / dt)))
    events: list[JumpEvent] = []
    if start >= len(t):
        return events
    current = labels[start]
    k = start + 1
    while k < len(t):
        if labels[k] != current:
            cand = labels[k]
            end = min(len(t), k + hold)
            if np.all(labels[k:end] == cand) and end - k >= hold:
                events.append(JumpEvent(t[k], int(current), int(cand)))
                current = cand
                k = end
                continue
        k += 1
    return events


def match_jump_events(detected: list[JumpEvent], reference: list[JumpEvent],
                      window: float) -> tuple[int, int, int]:
    """Greedy one-to-one matching of event times within +-window.

    Returns (n_matched, n_detected, n_reference).
    """
    used = np.zeros(len(reference), dtype=bool)
    matched = 0
    for ev in detected:
        best, best_dt = -1, window
        for i, ref in enumerate(reference):
            if used[i]:
                continue
            delta = abs(ev.time - ref.time)
            if delta <= best_dt:
                best, best_dt = i, delta
        if best >= 0:
            used[best] = True
            matched += 1
    return matched, len(detected), len(reference)
