"""Simulation toolkit for driven-dissipative Bose-Hubbard chains.

Stochastic phase-space trajectories for nonequilibrium steady states, phase
correlator chaos diagnostics, quasiprobability reconstruction, exact
small-system Lindblad references, and local-equilibrium ansatz fitting.
"""

from .model import ChainParams, ConfigError, NoisePolicy, SimGrid, default_dt

__version__ = "0.1.0"

__all__ = [
    "ChainParams",
    "ConfigError",
    "NoisePolicy",
    "SimGrid",
    "default_dt",
    "__version__",
]
