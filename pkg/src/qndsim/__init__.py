"""Continuous QND energy measurement of long-range Ising chains.

Submodules by concern:

- spin_model    exact models, symmetry sectors, spectra, microcanonical tools
- ion_chain     trapped-ion derivation of couplings, rates and resolution
- sme           stochastic / Lindblad master equation integrators
- readout       homodyne-record filtering, resolution, jump detection
- protocols     eigenstate preparation, jumps, Jarzynski, ETH diagnostics
- driven_chain  full laser-driven validation (phonon scans, Floquet)
- thermo        canonical ensembles, Binder cumulant scans
- artifacts     CSV/JSON/binary exports and run manifests
- cli           scenario runner
"""

from importlib import import_module

__version__ = "0.1.0"

_SUBMODULES = ("spin_model", "ion_chain", "sme", "readout", "protocols",
               "driven_chain", "thermo", "artifacts", "cli")

__all__ = list(_SUBMODULES)


def __getattr__(name):
    if name in _SUBMODULES:
        return import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
