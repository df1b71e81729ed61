"""File outputs: CSV tables, JSON reports, the compact binary trajectory
dump, and run manifests with content hashes.

Binary trajectory layout (little endian), one file per trajectory:

    offset  type     field
    0       4s       magic b"QTRJ"
    4       u16      version (1)
    6       u16      N (spin count)
    8       u32      L (number of degeneracy groups)
    12      f64      integrator dt
    20      f64      frame dt (population grid spacing)
    28      u64      master seed
    36      u64      trajectory index
    44      u64      n_frames
    52      f64*L    group energies
    then n_frames frames of (2+L) f64: t, dX over the frame, P_0..P_{L-1}

dX of frame k is the integral of I dt over (t_{k-1}, t_k]; the first frame
(t = 0) carries dX = 0.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .sme import TrajectoryRecord

__all__ = [
    "record_frames", "write_trajectory_csv", "write_trajectory_binary",
    "read_trajectory_binary", "write_jump_events_json", "write_work_samples_csv",
    "write_work_histogram_json", "write_eth_csv", "write_binder_csv",
    "write_scan_csv", "write_floquet_csv", "write_manifest",
]

_MAGIC = b"QTRJ"
_VERSION = 1


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return f"{x:.17g}"


def write_csv(path, header: list, rows) -> Path:
    path = Path(path)
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) if not isinstance(v, str) else v
                             for v in row) + "\n")
    return path


def record_frames(rec: TrajectoryRecord) -> tuple[np.ndarray, np.ndarray]:
    """(pop_times, dX aggregated onto the population grid); exact integrals."""
    stride = int(round((rec.pop_times[1] - rec.pop_times[0]) / rec.record_dt)) \
        if len(rec.pop_times) > 1 else len(rec.dX)
    agg = rec.dX.reshape(-1, stride).sum(axis=1)
    return rec.pop_times, np.concatenate([[0.0], agg])


def write_trajectory_csv(path, rec: TrajectoryRecord, filters: dict | None = None
                         ) -> Path:
    """Columns t, dX, P_0..P_L, plus one column per supplied filtered current
    (subsampled onto the population grid)."""
    times, dX = record_frames(rec)
    L = rec.populations.shape[1]
    header = ["t", "dX"] + [f"P_{g}" for g in range(L)]
    cols = [times, dX] + [rec.populations[:, g] for g in range(L)]
    for name, filt in (filters or {}).items():
        vals = np.interp(times, filt.times, filt.values, left=np.nan)
        header.append(name)
        cols.append(vals)
    return write_csv(path, header, zip(*cols))


def write_trajectory_binary(path, rec: TrajectoryRecord) -> Path:
    times, dX = record_frames(rec)
    L = rec.populations.shape[1]
    frame_dt = times[1] - times[0] if len(times) > 1 else rec.record_dt
    path = Path(path)
    with open(path, "wb") as f:
        f.write(struct.pack("<4sHHIddQQQ", _MAGIC, _VERSION, rec.N, L,
                            rec.dt, frame_dt, rec.seed & (2 ** 64 - 1),
                            rec.trajectory_index, len(times)))
        f.write(np.asarray(rec.group_energies, "<f8").tobytes())
        frames = np.column_stack([times, dX, rec.populations]).astype("<f8")
        f.write(frames.tobytes())
    return path


def read_trajectory_binary(path) -> dict:
    with open(path, "rb") as f:
        head = f.read(struct.calcsize("<4sHHIddQQQ"))
        magic, ver, N, L, dt, frame_dt, seed, index, n = struct.unpack(
            "<4sHHIddQQQ", head)
        if magic != _MAGIC or ver != _VERSION:
            raise ValueError("not a QTRJ v1 file")
        group_E = np.frombuffer(f.read(8 * L), "<f8")
        frames = np.frombuffer(f.read(8 * n * (2 + L)), "<f8").reshape(n, 2 + L)
    return {"N": N, "L": L, "dt": dt, "frame_dt": frame_dt, "seed": seed,
            "trajectory_index": index, "group_energies": group_E,
            "t": frames[:, 0], "dX": frames[:, 1], "populations": frames[:, 2:]}


def write_jump_events_json(path, events, *, extra: dict | None = None) -> Path:
    payload = {"events": [
        {"t": float(e.time), "from": int(e.level_from), "to": int(e.level_to),
         "ambiguous": bool(e.ambiguous)} for e in events]}
    payload.update(extra or {})
    path = Path(path)
    with open(path, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
    return path


def write_work_samples_csv(path, dist) -> Path:
    rows = ((int(l), "" if np.isnan(lp) else int(lp), W)
            for l, lp, W in dist.samples) if dist.samples is not None else ()
    return write_csv(path, ["level_initial", "level_final", "work"], rows)


def write_work_histogram_json(path, dist) -> Path:
    payload = {
        "support": [float(w) for w in dist.support],
        "probabilities": [float(p) for p in dist.probabilities],
        "beta": dist.beta,
        "dF_exact": dist.dF_exact,
        "dF_est": dist.dF_est,
        "dF_sigma": dist.dF_sigma,
        "n_runs": dist.n_runs,
        "collapse_fraction": dist.collapse_fraction,
        "meta": {k: (float(v) if isinstance(v, (int, float, np.floating)) else str(v))
                 for k, v in dist.meta.items()},
    }
    path = Path(path)
    with open(path, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
    return path


def write_eth_csv(path, results) -> Path:
    def rows():
        for r in results:
            for l in range(len(r.energies)):
                yield (r.N, r.sector[0], r.sector[1], l, r.energies[l],
                       r.energy_density[l], r.mx2[l], r.structure_factor[l],
                       int(l in set(r.window_levels)))
    return write_csv(path, ["N", "sector_r", "sector_p", "level", "energy",
                            "energy_density", "mx2", "S", "in_window"], rows())


def write_binder_csv(path, scan) -> Path:
    return write_csv(path, ["N", "T", "U4", "energy_density", "F"], scan.rows())


def write_scan_csv(path, scan) -> Path:
    return write_csv(path, ["Delta", "config", "mode", "occupation",
                            "predicted_com", "resonance_free"], scan.rows())


def write_floquet_csv(path, results: dict) -> Path:
    """results: mapping from scan value (e.g. delta_Omega) to FloquetResult."""
    def rows():
        for key, res in results.items():
            for l in range(len(res.ising_energies)):
                yield (key, l, res.quasi_energies[l], res.ising_energies[l],
                       res.overlaps[l], int(res.boundary_flags[l]))
    return write_csv(path, ["scan_value", "level", "quasi_energy",
                            "ising_energy", "overlap", "zone_edge_flag"], rows())


def sha256_of(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(outdir, files, config: dict, seed: int, *,
                   extra: dict | None = None) -> Path:
    outdir = Path(outdir)
    entries = []
    for p in sorted(Path(f) for f in files):
        entries.append({"path": p.name, "bytes": p.stat().st_size,
                        "sha256": sha256_of(p)})
    payload = {"seed": seed, "config": config, "files": entries}
    payload.update(extra or {})
    path = outdir / "manifest.json"
    with open(path, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
    return path
