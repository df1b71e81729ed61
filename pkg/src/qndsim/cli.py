"""Scenario runner.

    qndsim <subcommand> --config scenario.json [--seed S] [--threads T]
                        [--out DIR] [--format csv|json]

Subcommands: simulate | jumps | jarzynski | eth | ionchain | floquet | binder.
Configs are JSON; all physical quantities carry explicit unit suffixes in
their key names (_radps for angular frequencies, _s for times, _amu, _per_m).
Outputs land in --out (default $QNDSIM_OUT or ./qndsim_out) together with a
manifest.json listing every produced file with its SHA-256.  Outputs are
deterministic given (config, seed); the thread count never changes numbers,
only wall time.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import artifacts, driven_chain, ion_chain, protocols, readout, thermo
from .sme import evolve_sme_ensemble
from .spin_model import (SpinModel, build_power_law_model, diagonalize,
                         diagonalize_all_sectors, export_spectrum_csv,
                         renormalize_coupling)

__all__ = ["main", "run", "Scenario", "ConfigError"]

SUBCOMMANDS = ("simulate", "jumps", "jarzynski", "eth", "ionchain",
               "floquet", "binder")


class ConfigError(Exception):
    pass


@dataclass
class Scenario:
    subcommand: str
    config: dict
    seed: int
    threads: int
    out: Path
    format: str


def _need(cfg: dict, key: str, kind=None):
    if key not in cfg:
        raise ConfigError(f"missing config key '{key}'")
    val = cfg[key]
    if kind is not None and not isinstance(val, kind):
        raise ConfigError(f"config key '{key}' has wrong type")
    return val


def _model_from(cfg: dict) -> SpinModel:
    m = _need(cfg, "model", dict)
    if "coupling_matrix" in m:
        model = SpinModel.from_dict(m)
    else:
        model = build_power_law_model(int(_need(m, "N")), float(_need(m, "alpha")),
                                      float(_need(m, "h")),
                                      m.get("h_prime"))
    if m.get("renormalize"):
        model = model.rescaled(renormalize_coupling(model.N, model.alpha))
    return model


def _initial_state(cfg: dict, model: SpinModel):
    init = cfg.get("initial", {"kind": "against_field"})
    kind = init.get("kind", "against_field")
    if kind == "against_field":
        return protocols.all_against_field_state(model)
    if kind == "sector_mixed":
        return protocols.sector_mixed_state(model, tuple(_need(init, "sector")))
    if kind == "sector_thermal":
        return protocols.sector_thermal_state(model, tuple(_need(init, "sector")),
                                              float(init.get("beta", 0.0)))
    raise ConfigError(f"unknown initial state kind '{kind}'")


def _chunks(n: int, parts: int):
    base, extra = divmod(n, max(1, parts))
    start = 0
    for i in range(max(1, parts)):
        size = base + (1 if i < extra else 0)
        if size:
            yield start, size
        start += size


def _ensemble_threaded(scn: Scenario, model, rho0, gamma, eps, t_max, n_traj,
                       **kwargs):
    """Deterministic thread fan-out: per-trajectory streams are keyed by the
    global index, chunks merge back in index order."""
    if scn.threads <= 1 or n_traj <= 1:
        return evolve_sme_ensemble(model, rho0, gamma, eps, t_max, n_traj,
                                   scn.seed, **kwargs)
    jobs = list(_chunks(n_traj, scn.threads))
    with ThreadPoolExecutor(max_workers=scn.threads) as pool:
        futs = [pool.submit(evolve_sme_ensemble, model, rho0, gamma, eps,
                            t_max, size, scn.seed, index_offset=off, **kwargs)
                for off, size in jobs]
        out = []
        for f in futs:
            out.extend(f.result())
    return out


# ---------------------------------------------------------------------------
# subcommand runners (each returns the list of files written)
# ---------------------------------------------------------------------------

def _run_simulate(scn: Scenario) -> list:
    cfg = scn.config
    model = _model_from(cfg)
    gamma = float(cfg.get("gamma", 1.0))
    eps = float(cfg.get("eps", 1.0))
    t_max = float(cfg.get("t_max", 20.0 / gamma))
    tau = float(cfg.get("tau", 2.0 / gamma))
    n_traj = int(cfg.get("n_traj", 1))
    rho0 = _initial_state(cfg, model)
    recs = _ensemble_threaded(scn, model, rho0, gamma, eps, t_max, n_traj,
                              dt=cfg.get("dt"))
    files = []
    summary = []
    for rec in recs:
        filt = readout.window_filter(rec, tau, model.N, gamma, eps)
        stem = scn.out / f"trajectory_{rec.trajectory_index:04d}"
        files.append(artifacts.write_trajectory_csv(
            f"{stem}.csv", rec, filters={"I_filtered": filt}))
        if cfg.get("binary", True):
            files.append(artifacts.write_trajectory_binary(f"{stem}.bin", rec))
        final = rec.final_populations()
        g = int(np.argmax(final))
        summary.append({
            "trajectory": rec.trajectory_index,
            "collapsed": bool(final.max() >= cfg.get("collapse_threshold", 0.99)),
            "group": g,
            "energy": float(rec.group_energies[g]),
            "energy_estimate": float(filt.values[-1] * model.N),
            "estimate_sigma": float(filt.band[-1] * model.N),
            "max_population": float(final.max()),
        })
    path = scn.out / "collapse_summary.json"
    with open(path, "w") as f:
        json.dump({"runs": summary}, f, indent=1, sort_keys=True)
    files.append(path)
    return files


def _run_jumps(scn: Scenario) -> list:
    cfg = scn.config
    base = _model_from(cfg)
    model = protocols.mismatched_model(base, float(_need(cfg, "delta_h_tilde")))
    gamma = float(cfg.get("gamma", 1.0))
    eps = float(cfg.get("eps", 1.0))
    tau = float(cfg.get("tau", 5.0 / gamma))
    t_max = float(cfg.get("t_max", 200.0 / gamma))
    n_traj = int(cfg.get("n_traj", 1))
    files = []
    all_events = []
    for i in range(n_traj):
        stats = protocols.quantum_jump_run(
            model, gamma, eps, tau, seed=(scn.seed << 20) + i,
            t_max=t_max, dt=cfg.get("dt", 2.5e-4 / gamma), keep_record=True)
        stem = scn.out / f"jump_run_{i:04d}"
        files.append(artifacts.write_trajectory_csv(
            f"{stem}.csv", stats.record, filters={"I_filtered": stats.filtered}))
        all_events.append({
            "run": i,
            "n_events": len(stats.events),
            "n_oracle": len(stats.oracle_events),
            "n_matched": stats.n_matched,
            "dwell_times": [float(d) for d in stats.dwell_times],
            "events": [{"t": e.time, "from": e.level_from, "to": e.level_to,
                        "ambiguous": e.ambiguous} for e in stats.events],
            "commutator_ratio": stats.commutator_ratio,
        })
    path = scn.out / "jumps.json"
    with open(path, "w") as f:
        json.dump({"runs": all_events}, f, indent=1, sort_keys=True)
    files.append(path)
    return files


def _run_jarzynski(scn: Scenario) -> list:
    cfg = scn.config
    m = dict(_need(cfg, "model", dict))
    h0, h1 = float(_need(cfg, "h0")), float(_need(cfg, "h1"))
    model0 = _model_from({"model": dict(m, h=h0)})
    model1 = _model_from({"model": dict(m, h=h1)})
    beta = float(_need(cfg, "beta"))
    sector = tuple(cfg["sector"]) if cfg.get("sector") else None
    t_Qs = cfg.get("t_Q", [1.0])
    t_Qs = [float(t) for t in (t_Qs if isinstance(t_Qs, list) else [t_Qs])]
    files = []
    summary = {"beta": beta, "sector": sector, "t_Q": {}}
    for t_Q in t_Qs:
        exact = protocols.jarzynski_exact(model0, model1, beta, t_Q, sector=sector)
        entry = {"dF_exact": exact.dF_exact,
                 "jarzynski_residual": exact.jarzynski_residual}
        if int(cfg.get("n_runs", 0)) > 0:
            dist = protocols.jarzynski_sampled(
                model0, model1, beta, t_Q, int(cfg["n_runs"]),
                cfg.get("mode", "born"), scn.seed, sector=sector,
                gamma=float(cfg.get("gamma", 1.0)), eps=float(cfg.get("eps", 1.0)),
                dt=cfg.get("dt"))
            files.append(artifacts.write_work_samples_csv(
                scn.out / f"work_samples_tQ{t_Q:g}.csv", dist))
            files.append(artifacts.write_work_histogram_json(
                scn.out / f"work_hist_tQ{t_Q:g}.json", dist))
            entry.update({"dF_est": dist.dF_est, "dF_sigma": dist.dF_sigma,
                          "collapse_fraction": dist.collapse_fraction})
        else:
            files.append(artifacts.write_work_histogram_json(
                scn.out / f"work_exact_tQ{t_Q:g}.json", exact))
        summary["t_Q"][f"{t_Q:g}"] = entry
    path = scn.out / "jarzynski_summary.json"
    with open(path, "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
    files.append(path)
    return files


def _run_eth(scn: Scenario) -> list:
    cfg = scn.config
    mode = cfg.get("mode", "diagonal")
    files = []
    if mode == "diagonal":
        res = protocols.eth_diagonal_diagnostics(
            [int(n) for n in _need(cfg, "N_list", list)],
            float(_need(cfg, "alpha")), float(_need(cfg, "h")),
            tuple(cfg.get("sector", (1, -1))),
            window_fraction=float(cfg.get("window_fraction", 0.5)),
            renormalize=bool(cfg.get("renormalize", True)))
        files.append(artifacts.write_eth_csv(scn.out / "eth_eigenstates.csv", res))
        stats = {str(r.N): {"window_std": r.window_std,
                            "window": list(r.window)} for r in res}
        path = scn.out / "eth_summary.json"
        with open(path, "w") as f:
            json.dump(stats, f, indent=1, sort_keys=True)
        files.append(path)
    elif mode == "offdiagonal":
        model = _model_from(cfg)
        res = protocols.eth_offdiagonal_protocol(
            model, int(_need(cfg, "site")), float(_need(cfg, "h_tilde")),
            float(_need(cfg, "delta_t")), int(_need(cfg, "level")))
        payload = {
            "level": res.level, "delta_t": res.delta_t,
            "perturbative_ok": res.perturbative_ok,
            "comparison": [{"level": l, "W": W, "exact": e, "first_order": p}
                           for l, W, e, p in res.comparison],
        }
        path = scn.out / "eth_offdiagonal.json"
        with open(path, "w") as f:
            json.dump(payload, f, indent=1, sort_keys=True)
        files.append(path)
    elif mode == "phase_map":
        files.append(_phase_map(scn, cfg))
    else:
        raise ConfigError(f"unknown eth mode '{mode}'")
    return files


def _phase_map(scn: Scenario, cfg: dict) -> Path:
    """Microcanonical <m_x^2> over an (energy density, field) grid."""
    N = int(_need(cfg, "N"))
    alpha = float(_need(cfg, "alpha"))
    h_list = [float(h) for h in _need(cfg, "h_list", list)]
    width = float(cfg.get("width", 0.1))
    n_eps = int(cfg.get("n_eps", 24))
    scale = renormalize_coupling(N, alpha) if cfg.get("renormalize", True) else 1.0
    rows = []
    for h in h_list:
        spec = thermo.SpectrumObservables.compute(
            build_power_law_model(N, alpha, h).rescaled(scale))
        eps_grid = np.linspace(spec.energies.min() / N,
                               spec.energies.max() / N, n_eps)
        for eps in eps_grid:
            sel = np.abs(spec.energies - eps * N) <= width * N / 2.0
            mx2 = float(spec.mx2[sel].mean()) if sel.any() else np.nan
            rows.append((h, float(eps), mx2, int(sel.sum())))
    return artifacts.write_csv(scn.out / "phase_map.csv",
                               ["h", "energy_density", "mx2_mc", "n_levels"], rows)


def _laser_from(cfg: dict, modes) -> ion_chain.LaserSpec:
    lz = _need(cfg, "laser", dict)
    if isinstance(lz.get("Delta_radps"), dict):
        spec = lz["Delta_radps"]
        Delta = float(spec["factor"]) * modes.omega[int(spec["mode"])]
    else:
        Delta = float(_need(lz, "Delta_radps"))
    Om = lz.get("Omega_radps")
    if Om is None:
        Om = float(_need(lz, "Omega_fraction_of_Delta")) * abs(Delta)
    return ion_chain.LaserSpec(Omega=float(Om),
                               delta_Omega=float(lz.get("delta_Omega_radps", 0.0)),
                               Delta=Delta, B=lz.get("B_radps"))


def _run_ionchain(scn: Scenario) -> list:
    cfg = scn.config
    ch = _need(cfg, "chain", dict)
    spec = ion_chain.IonChainSpec(
        int(_need(ch, "n_ions")), _need(ch, "mode_axis", str),
        float(_need(ch, "omega_z_radps")),
        float(ch["omega_x_radps"]) if ch.get("omega_x_radps") else None,
        float(ch.get("mass_amu", 9.012182)) * ion_chain.AMU,
        float(ch["ancilla_mass_amu"]) * ion_chain.AMU if ch.get("ancilla_mass_amu") else None,
        float(_need(ch, "eta")))
    modes = ion_chain.normal_modes(spec)
    laser = _laser_from(cfg, modes)
    der = ion_chain.effective_couplings(spec, laser, modes)
    der.validity = ion_chain.check_validity(spec, laser, modes)
    der.corrections = ion_chain.fourth_order_corrections(spec, laser, der)
    files = []
    if "cooling" in cfg or "gamma_s_radps" in cfg:
        co = cfg.get("cooling", {})
        cooling = ion_chain.CoolingSpec(
            float(co.get("Gamma_e_radps", 2 * np.pi * 10e6)),
            float(co.get("Omega_0_radps", 2 * np.pi * 1e6)),
            float(co.get("k_0_per_m", 2 * np.pi / 313e-9)),
            float(co.get("epsilon", 0.15)))
        Jdef = cfg.get("J_scale", "auto")
        if Jdef == "estimate":
            J_scale = ion_chain.coupling_scale_estimate(spec, laser, modes)
        elif Jdef == "nn":
            J_scale = der.J_nn
        elif Jdef == "fit":
            J_scale = der.J_fit
        else:
            J_scale = None
        der.measurement = ion_chain.measurement_parameters(
            der, cooling, float(_need(cfg, "tau_s")),
            gamma_s=cfg.get("gamma_s_radps"), J_scale=J_scale)
    path = scn.out / "derivation.json"
    der.save_json(path)
    files.append(path)
    files.append(artifacts.write_csv(
        scn.out / "modes.csv", ["mode", "omega_radps"] +
        [f"M_{j}" for j in range(spec.n_ions)],
        ((q, modes.omega[q], *modes.M[:, q]) for q in range(spec.n_ions))))
    return files


def _driven_spec(cfg: dict) -> driven_chain.DrivenChainSpec:
    N = int(_need(cfg, "n_spins"))
    axis = cfg.get("mode_axis", "axial")
    ratio = cfg.get("omega0_over_omega_z")
    omega, M = driven_chain.chain_modes(
        N, axis, float(ratio) if axis == "transverse" else None)
    eta = float(_need(cfg, "eta"))
    eta_q = eta * np.sqrt(omega[0] / omega)
    return driven_chain.DrivenChainSpec(
        N, omega, M, eta_q,
        Omega=float(_need(cfg, "Omega_over_omega0")) * omega[0],
        Delta=float(_need(cfg, "Delta_over_omega0")) * omega[0],
        delta_Omega=float(cfg.get("delta_Omega_over_omega0", 0.0)) * omega[0],
        n_fock=tuple(cfg.get("n_fock", (6,) + (3,) * (N - 1))),
        t_final=2 * np.pi * float(cfg.get("t_periods", 0.0)) / omega[0])


def _run_floquet(scn: Scenario) -> list:
    cfg = scn.config
    analysis = cfg.get("analysis", "quasi")
    files = []
    if analysis == "quasi":
        results = {}
        for r in _need(cfg, "delta_Omega_scan", list):
            sub = dict(cfg, delta_Omega_over_omega0=float(r) * cfg["Omega_over_omega0"])
            spec = _driven_spec(sub)
            gamma_s = driven_chain.caption_gamma_s(spec) if cfg.get("with_decay") else None
            results[float(r)] = driven_chain.floquet_spectrum(
                spec, gamma_s=gamma_s, n_steps=int(cfg.get("n_steps", 256)),
                check_convergence=bool(cfg.get("check_convergence", False)))
        files.append(artifacts.write_floquet_csv(scn.out / "floquet.csv", results))
        worst = max(float(np.max(np.abs(res.quasi_energies - res.ising_energies)))
                    for res in results.values())
        path = scn.out / "floquet_summary.json"
        with open(path, "w") as f:
            json.dump({"max_quasi_vs_ising": worst,
                       "doubling_errors": {str(k): r.doubling_error
                                           for k, r in results.items()}},
                      f, indent=1, sort_keys=True)
        files.append(path)
    elif analysis == "scan":
        spec = _driven_spec(dict(cfg, Delta_over_omega0=float(
            _need(cfg, "Delta_grid", list)[0])))
        Deltas = np.asarray(cfg["Delta_grid"], float) * spec.omega0
        configs = [tuple(c) for c in cfg["configs"]] if cfg.get("configs") else None
        scan = driven_chain.phonon_occupation_scan(
            spec, Deltas, configs,
            steps_per_period=int(cfg.get("steps_per_period", 96)))
        files.append(artifacts.write_scan_csv(scn.out / "phonon_scan.csv", scan))
    else:
        raise ConfigError(f"unknown floquet analysis '{analysis}'")
    return files


def _run_binder(scn: Scenario) -> list:
    cfg = scn.config
    T = np.linspace(float(_need(cfg, "T_min")), float(_need(cfg, "T_max")),
                    int(cfg.get("n_T", 25)))
    scan = thermo.binder_scan(float(_need(cfg, "alpha")), float(_need(cfg, "h")),
                              T, [int(n) for n in _need(cfg, "N_list", list)],
                              renormalize=bool(cfg.get("renormalize", True)))
    files = [artifacts.write_binder_csv(scn.out / "binder.csv", scan)]
    path = scn.out / "binder_crossings.json"
    with open(path, "w") as f:
        json.dump({f"{a}-{b}": x for (a, b), x in scan.crossings.items()},
                  f, indent=1, sort_keys=True)
    files.append(path)
    return files


_RUNNERS = {
    "simulate": _run_simulate,
    "jumps": _run_jumps,
    "jarzynski": _run_jarzynski,
    "eth": _run_eth,
    "ionchain": _run_ionchain,
    "floquet": _run_floquet,
    "binder": _run_binder,
}


def run(scn: Scenario) -> int:
    scn.out.mkdir(parents=True, exist_ok=True)
    files = _RUNNERS[scn.subcommand](scn)
    artifacts.write_manifest(scn.out, files, scn.config, scn.seed,
                             extra={"subcommand": scn.subcommand,
                                    "threads": scn.threads,
                                    "format": scn.format})
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="qndsim",
        description="Continuous QND energy measurement of long-range Ising chains")
    parser.add_argument("subcommand", choices=SUBCOMMANDS, nargs="?")
    parser.add_argument("--config", help="scenario JSON file")
    parser.add_argument("--seed", type=int, default=None,
                        help="master seed (overrides the config)")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--format", choices=("csv", "json"), default="csv")
    args = parser.parse_args(argv)

    if args.subcommand is None or args.config is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        with open(args.config) as f:
            config = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"qndsim: cannot read config: {exc}", file=sys.stderr)
        return 2
    if not isinstance(config, dict):
        print("qndsim: config must be a JSON object", file=sys.stderr)
        return 2
    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    out = Path(args.out or os.environ.get("QNDSIM_OUT", "qndsim_out"))
    scn = Scenario(args.subcommand, config, seed, max(1, args.threads),
                   out, args.format)
    try:
        return run(scn)
    except ConfigError as exc:
        print(f"qndsim: config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError) as exc:
        print(f"qndsim: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
