"""Model definition for a boundary-driven dissipative Bose-Hubbard chain.

A chain of L bosonic sites with tunneling J, on-site Kerr interaction U,
coherent drive F (detuning Delta in the rotating frame of the drive), and
single-particle loss gamma at the driven boundary and its mirror.  The
semiclassical phase-space equations of motion, written for the stored
time derivative d(alpha)/dt = -i * RHS of the frequency-domain form, are

    d(alpha_1)/dt = (i Delta - gamma/2) alpha_1 - i U (|alpha_1|^2 - s) alpha_1
                    + i J alpha_2 - i F + noise,
    d(alpha_l)/dt = i Delta alpha_l - i U (|alpha_l|^2 - s) alpha_l
                    + i J (alpha_{l-1} + alpha_{l+1}),        1 < l < L,
    d(alpha_L)/dt = (i Delta - gamma/2) alpha_L - i U (|alpha_L|^2 - s) alpha_L
                    + i J alpha_{L-1} + noise,

with Wigner shift s = 1 for the truncated-Wigner drift and s = 0 (and no
noise) for the classical Gross-Pitaevskii limit.  Each lossy site receives
complex white noise of strength sqrt(rate/2).  All rates are quoted in
units of the boundary loss rate, so gamma = 1 sets the unit of time.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import numpy as np

DRIVE_MODES = ("boundary", "uniform")
DISSIPATION_MODES = ("boundary", "uniform")
DYNAMICS_MODES = ("twa", "gp")


class ConfigError(ValueError):
    """Raised when a configuration fails validation; carries all violations."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class ChainParams:
    """Physical parameters of the driven-dissipative chain.

    Parameters
    ----------
    L : int
        Number of sites, at least 2.
    detuning : float
        Drive-cavity detuning Delta (energy unit: boundary loss rate).
    hopping : float
        Nearest-neighbor tunneling J.
    kerr : float
        On-site Kerr interaction U.
    drive : float
        Coherent drive amplitude F applied at site 1 (or everywhere when
        drive_mode is "uniform").
    gamma : float
        Boundary loss rate; fixed to 1 to set units, kept explicit so the
        equations stay readable.
    gamma_int : float
        Intrinsic loss rate applied at every site (0 disables it).
    drive_mode : str
        "boundary" drives site 1 only, "uniform" drives every site.
    dissipation_mode : str
        "boundary" applies gamma at sites 1 and L, "uniform" at every site.
    dynamics_mode : str
        "twa" evolves the Wigner-shifted stochastic equations, "gp" the
        noiseless classical limit.
    """

    L: int
    detuning: float = 2.5
    hopping: float = 2.0
    kerr: float = 0.1
    drive: float = 0.0
    gamma: float = 1.0
    gamma_int: float = 0.0
    drive_mode: str = "boundary"
    dissipation_mode: str = "boundary"
    dynamics_mode: str = "twa"


@dataclass(frozen=True)
class SimGrid:
    """Time discretization of a run.

    dt is the integrator step, t_max the final time, t_transient the time
    before which no observable samples are accumulated, sample_stride the
    number of steps between observable samples, and window the length of
    the trailing averaging window used for saturation and steady-state
    values.
    """

    dt: float
    t_max: float
    t_transient: float = 0.0
    sample_stride: int = 1
    window: float = 25.0

    @property
    def n_steps(self) -> int:
        return int(round(self.t_max / self.dt))

    @property
    def sample_dt(self) -> float:
        return self.dt * self.sample_stride


def default_dt(params: ChainParams) -> float:
    """Conservative default step: 1e-3 of the fastest linear timescale."""
    scales = [1.0]
    if params.hopping != 0.0:
        scales.append(1.0 / abs(params.hopping))
    if params.detuning != 0.0:
        scales.append(1.0 / abs(params.detuning))
    return 1e-3 * min(scales) / params.gamma


def check(params: ChainParams, grid: SimGrid | None = None) -> list:
    """Collect validation violations without raising.  Empty list means valid."""
    v = []
    if not isinstance(params.L, (int, np.integer)) or params.L < 2:
        v.append(f"L must be an integer >= 2, got {params.L!r}")
    for name in ("detuning", "hopping", "kerr", "drive", "gamma", "gamma_int"):
        x = getattr(params, name)
        if not np.isfinite(x):
            v.append(f"{name} must be finite, got {x!r}")
    if np.isfinite(params.gamma) and params.gamma <= 0:
        v.append(f"gamma must be > 0, got {params.gamma!r}")
    if np.isfinite(params.gamma_int) and params.gamma_int < 0:
        v.append(f"gamma_int must be >= 0, got {params.gamma_int!r}")
    if params.drive_mode not in DRIVE_MODES:
        v.append(f"drive_mode must be one of {DRIVE_MODES}, got {params.drive_mode!r}")
    if params.dissipation_mode not in DISSIPATION_MODES:
        v.append(
            f"dissipation_mode must be one of {DISSIPATION_MODES}, "
            f"got {params.dissipation_mode!r}"
        )
    if params.dynamics_mode not in DYNAMICS_MODES:
        v.append(f"dynamics_mode must be one of {DYNAMICS_MODES}, got {params.dynamics_mode!r}")
    if grid is not None:
        if not (np.isfinite(grid.dt) and grid.dt > 0):
            v.append(f"dt must be > 0, got {grid.dt!r}")
        if not (np.isfinite(grid.t_max) and grid.t_max > 0):
            v.append(f"t_max must be > 0, got {grid.t_max!r}")
        if np.isfinite(grid.dt) and grid.dt > 0 and grid.t_max < grid.dt:
            v.append("t_max must cover at least one step")
        if not (0 <= grid.t_transient < max(grid.t_max, 1e-300)):
            v.append(f"t_transient must lie in [0, t_max), got {grid.t_transient!r}")
        if not isinstance(grid.sample_stride, (int, np.integer)) or grid.sample_stride < 1:
            v.append(f"sample_stride must be an integer >= 1, got {grid.sample_stride!r}")
        if not (np.isfinite(grid.window) and grid.window > 0):
            v.append(f"window must be > 0, got {grid.window!r}")
    return v


def validate(params: ChainParams, grid: SimGrid | None = None):
    """Return (params, grid) unchanged if valid, else raise ConfigError.

    Nothing is clamped or repaired; every violation is reported at once.
    """
    violations = check(params, grid)
    if violations:
        raise ConfigError(violations)
    return params if grid is None else (params, grid)


def site_profiles(params: ChainParams):
    """Per-site coefficient arrays (damping, drive amplitude, noise rate).

    damping is the amplitude decay rate rate/2 entering the drift; the
    noise rate is the full loss rate feeding the stochastic term.  In the
    classical limit the noise rate is identically zero.
    """
    L = params.L
    damp = np.full(L, 0.5 * params.gamma_int)
    rate = np.full(L, params.gamma_int)
    if params.dissipation_mode == "uniform":
        damp += 0.5 * params.gamma
        rate += params.gamma
    else:
        damp[0] += 0.5 * params.gamma
        damp[L - 1] += 0.5 * params.gamma
        rate[0] += params.gamma
        rate[L - 1] += params.gamma
    drive = np.zeros(L)
    if params.drive_mode == "uniform":
        drive[:] = params.drive
    else:
        drive[0] = params.drive
    if params.dynamics_mode == "gp":
        rate = np.zeros(L)
    return damp, drive, rate


def _drift(alpha, params: ChainParams, shift: float):
    alpha = np.asarray(alpha)
    damp, drive, _ = site_profiles(params)
    nb = np.zeros_like(alpha)
    nb[1:] += alpha[:-1]
    nb[:-1] += alpha[1:]
    return (
        (1j * params.detuning - damp) * alpha
        - 1j * params.kerr * (np.abs(alpha) ** 2 - shift) * alpha
        + 1j * params.hopping * nb
        - 1j * drive
    )


def drift_twa(alpha, params: ChainParams):
    """Deterministic part of the truncated-Wigner equations of motion.

    The Kerr term carries the Wigner shift U(|alpha|^2 - 1) produced by
    symmetric operator ordering.
    """
    return _drift(alpha, params, 1.0)


def drift_gp(alpha, params: ChainParams):
    """Classical Gross-Pitaevskii drift: bare Kerr term U|alpha|^2, no shift.

    drift_gp - drift_twa = -i U alpha per site; the classical limit is
    always integrated without noise.
    """
    return _drift(alpha, params, 0.0)


@dataclass
class TrajectoryState:
    """A single phase-space trajectory: field configuration and clock."""

    alpha: np.ndarray
    t: float = 0.0
    step: int = 0

    def copy(self) -> "TrajectoryState":
        return TrajectoryState(self.alpha.copy(), self.t, self.step)


class NoisePolicy:
    """Reproducible per-trajectory noise streams.

    Each trajectory draws from a counter-based Philox generator keyed by
    (master_seed, trajectory_index), so any trajectory can be regenerated
    in isolation and ensembles are independent of scheduling order.  The
    draw order contract per trajectory is: first 2L standard normals for
    the initial condition (when vacuum sampling is used), then, per step,
    two standard normals per noisy site in ascending site order, consumed
    in chunks; chunk boundaries do not alter the stream.
    """

    def __init__(self, master_seed: int):
        if not (0 <= int(master_seed) < 2**64):
            raise ConfigError([f"master_seed must fit in 64 bits, got {master_seed!r}"])
        self.master_seed = int(master_seed)

    def generator(self, trajectory_index: int) -> np.random.Generator:
        if trajectory_index < 0:
            raise ConfigError([f"trajectory_index must be >= 0, got {trajectory_index!r}"])
        key = np.array([self.master_seed, trajectory_index], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    @staticmethod
    def capture_state(gen: np.random.Generator) -> dict:
        """JSON-serializable snapshot of a generator's position."""
        st = gen.bit_generator.state
        return {
            "bit_generator": st["bit_generator"],
            "counter": [int(x) for x in st["state"]["counter"]],
            "key": [int(x) for x in st["state"]["key"]],
            "buffer": [int(x) for x in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @staticmethod
    def restore_state(snapshot: dict) -> np.random.Generator:
        if snapshot["bit_generator"] != "Philox":
            raise ConfigError([f"unsupported bit generator {snapshot['bit_generator']!r}"])
        bg = np.random.Philox()
        bg.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(snapshot["counter"], dtype=np.uint64),
                "key": np.array(snapshot["key"], dtype=np.uint64),
            },
            "buffer": np.array(snapshot["buffer"], dtype=np.uint64),
            "buffer_pos": int(snapshot["buffer_pos"]),
            "has_uint32": int(snapshot["has_uint32"]),
            "uinteger": int(snapshot["uinteger"]),
        }
        return np.random.Generator(bg)


_PARAM_KEYS = [f.name for f in dataclasses.fields(ChainParams)]
_GRID_KEYS = [f.name for f in dataclasses.fields(SimGrid)]


def config_to_dict(params: ChainParams, grid: SimGrid | None = None) -> dict:
    doc = {k: getattr(params, k) for k in _PARAM_KEYS}
    if grid is not None:
        doc["grid"] = {k: getattr(grid, k) for k in _GRID_KEYS}
    return doc


def config_from_dict(doc: dict):
    """Parse a configuration document.  Unknown keys are an error.

    Returns (ChainParams, SimGrid or None), validated.
    """
    doc = dict(doc)
    grid_doc = doc.pop("grid", None)
    unknown = sorted(set(doc) - set(_PARAM_KEYS))
    if unknown:
        raise ConfigError([f"unknown configuration key {k!r}" for k in unknown])
    if "L" not in doc:
        raise ConfigError(["missing required key 'L'"])
    if "L" in doc:
        doc["L"] = int(doc["L"])
    params = ChainParams(**doc)
    grid = None
    if grid_doc is not None:
        unknown = sorted(set(grid_doc) - set(_GRID_KEYS))
        if unknown:
            raise ConfigError([f"unknown grid key {k!r}" for k in unknown])
        missing = sorted({"dt", "t_max"} - set(grid_doc))
        if missing:
            raise ConfigError([f"missing required grid key {k!r}" for k in missing])
        grid_doc = dict(grid_doc)
        if "sample_stride" in grid_doc:
            grid_doc["sample_stride"] = int(grid_doc["sample_stride"])
        grid = SimGrid(**grid_doc)
    validate(params, grid)
    return params, grid


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))


def save_config(path, params: ChainParams, grid: SimGrid | None = None):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(params, grid), fh, indent=2, sort_keys=True)
        fh.write("\n")


def config_digest(params: ChainParams, grid: SimGrid | None = None, extra: dict | None = None) -> str:
    """Stable hash of a configuration, used to guard checkpoint compatibility."""
    doc = config_to_dict(params, grid)
    if extra:
        doc["extra"] = extra
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
