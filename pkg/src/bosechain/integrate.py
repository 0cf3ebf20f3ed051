"""Single-trajectory stochastic integration.

Advances phase-space trajectories of the chain with the stochastic Heun
scheme (strong order 1.0 for additive noise), the deterministic classical
limit, and shared-noise replica pairs for phase-correlator diagnostics.

Noise contract, fixed so runs are bit-reproducible across chunkings and
backends: a trajectory generator first yields 2L standard normals for the
initial condition (site-major, re before im), then per step two normals per
noisy site in ascending site order.  The classical (gp) mode never touches
the generator.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .model import ChainParams, SimGrid, TrajectoryState, site_profiles

_DUMP_MAGIC = b"BTRJ"
_DUMP_VERSION = 1


class TrajectoryError(RuntimeError):
    """A trajectory left the bounded region (NaN/Inf or runaway amplitude).

    Blow-up means dt is too large for the drive strength; the policy is to
    abort and report, never to clamp.
    """

    def __init__(self, t, site, max_abs):
        self.t = t
        self.site = site
        self.max_abs = max_abs
        super().__init__(
            f"trajectory diverged at t={t:.6g} (site {site}, "
            f"max|alpha|={max_abs:.3g}); reduce dt or the drive")


def sample_vacuum_initial(params: ChainParams, gen) -> TrajectoryState:
    """Draw the t=0 state: vacuum-distributed for twa, zeros for gp.

    Each amplitude is complex Gaussian with mean 0 and variance 1/2
    (quadrature variance 1/4).  The classical mode starts from the zero
    field and performs no draws.
    """
    if params.dynamics_mode == "gp":
        alpha = np.zeros(params.L, dtype=np.complex128)
    else:
        eta = gen.standard_normal((params.L, 2))
        alpha = (eta[:, 0] + 1j * eta[:, 1]) / 2.0
    return TrajectoryState(alpha=alpha, t=0.0, step=0)


def perturb_phase(state: TrajectoryState, site: int, epsilon: float) -> TrajectoryState:
    """Rotate the phase of one amplitude: alpha_k -> alpha_k e^{i eps}.

    site is 1-based following the chain-site convention.
    """
    if not 1 <= site <= state.alpha.shape[0]:
        raise ValueError(f"site {site} outside 1..{state.alpha.shape[0]}")
    alpha = state.alpha.copy()
    alpha[site - 1] = alpha[site - 1] * np.exp(1j * epsilon)
    return TrajectoryState(alpha=alpha, t=state.t, step=state.step)


@dataclass
class ReplicaPair:
    """Two trajectories advanced under the identical noise sequence."""

    state_a: TrajectoryState
    state_b: TrajectoryState

    def __post_init__(self):
        if self.state_a.t != self.state_b.t:
            raise ValueError("replica times differ")


class _Stepper:
    """Precomputed kernel arguments for one (params, dt) combination."""

    def __init__(self, params: ChainParams, dt: float):
        damp, drive, rates = site_profiles(params)
        self.dt = dt
        self.detuning = params.detuning
        self.hopping = params.hopping
        self.kerr = params.kerr
        self.shift = 1.0 if params.dynamics_mode == "twa" else 0.0
        self.damp = np.ascontiguousarray(damp, dtype=np.float64)
        self.drive = np.ascontiguousarray(drive, dtype=np.float64)
        sites = np.flatnonzero(rates > 0.0)
        self.noise_sites = sites.astype(np.int64)
        self.noise_amp = np.sqrt(rates[sites] * dt) / 2.0
        self.n_noisy = int(sites.size)

    def draw(self, gen, n_steps):
        if self.n_noisy == 0:
            return np.zeros((n_steps, 0, 2))
        return gen.standard_normal((n_steps, self.n_noisy, 2))

    def advance(self, state_a, state_b, normals):
        """Run len(normals) steps in place; raises on divergence."""
        alpha_b = None if state_b is None else state_b.alpha
        with np.errstate(over="ignore", invalid="ignore"):
            bad = _kernels.heun_steps(
                state_a.alpha, alpha_b, self.dt, self.detuning, self.hopping,
                self.kerr, self.shift, self.damp, self.drive,
                self.noise_sites, self.noise_amp, normals)
        n_done = normals.shape[0] if bad < 0 else bad
        for st in (state_a,) if state_b is None else (state_a, state_b):
            st.t += n_done * self.dt
            st.step += n_done
        if bad >= 0:
            finite = np.abs(state_a.alpha)
            if state_b is not None:
                finite = np.maximum(finite, np.abs(state_b.alpha))
            site = int(np.argmax(np.where(np.isfinite(finite), finite, np.inf)))
            raise TrajectoryError(state_a.t, site + 1, float(np.nanmax(finite)))


def step(state: TrajectoryState, params: ChainParams, grid: SimGrid, gen) -> TrajectoryState:
    """Advance one time step dt (convenience wrapper around evolve)."""
    stp = _Stepper(params, grid.dt)
    out = state.copy()
    stp.advance(out, None, stp.draw(gen, 1))
    return out


def evolve(state: TrajectoryState, params: ChainParams, grid: SimGrid, gen,
           t_target: float, on_sample=None) -> TrajectoryState:
    """Advance to t_target, invoking on_sample(state) every sample_stride steps.

    Mutates and returns state.  The step count is round((t_target - t)/dt);
    a trailing remainder shorter than one stride advances time but emits no
    sample.  Chunk boundaries do not affect the noise stream.
    """
    return _evolve_common(state, None, params, grid, gen, t_target, on_sample)


def evolve_replicas(pair: ReplicaPair, params: ChainParams, grid: SimGrid, gen,
                    t_target: float, on_sample=None) -> ReplicaPair:
    """Advance both replicas under shared noise; on_sample(a, b) per stride."""
    _evolve_common(pair.state_a, pair.state_b, params, grid, gen, t_target,
                   on_sample)
    return pair


def _evolve_common(state_a, state_b, params, grid, gen, t_target, on_sample):
    if t_target < state_a.t - 1e-12:
        raise ValueError(f"t_target {t_target} precedes state time {state_a.t}")
    stp = _Stepper(params, grid.dt)
    n_total = int(round((t_target - state_a.t) / grid.dt))
    stride = max(1, int(grid.sample_stride))
    done = 0
    while done < n_total:
        n = min(stride, n_total - done)
        stp.advance(state_a, state_b, stp.draw(gen, n))
        done += n
        if n == stride and on_sample is not None:
            if state_b is None:
                on_sample(state_a)
            else:
                on_sample(state_a, state_b)
    return state_a


# ---------------------------------------------------------------------------
# Raw trajectory dumps: 32-byte header (magic, version, L, sample count,
# zero padding), then little-endian float64 (re, im) pairs, site-major
# within each sample.
# ---------------------------------------------------------------------------


def dump_trajectory(path, samples: np.ndarray) -> None:
    """Write sampled fields, shape (n_samples, L) complex, to a binary file."""
    samples = np.asarray(samples, dtype=np.complex128)
    if samples.ndim != 2:
        raise ValueError("samples must be 2-D (n_samples, L)")
    n_samples, L = samples.shape
    header = struct.pack("<4sIII16x", _DUMP_MAGIC, _DUMP_VERSION, L, n_samples)
    flat = np.empty((n_samples, L, 2))
    flat[:, :, 0] = samples.real
    flat[:, :, 1] = samples.imag
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(flat.astype("<f8").tobytes())


def load_trajectory(path) -> np.ndarray:
    """Read a trajectory dump back into a complex (n_samples, L) array."""
    with open(path, "rb") as fh:
        header = fh.read(32)
        if len(header) < 32:
            raise ValueError("truncated trajectory header")
        magic, version, L, n_samples = struct.unpack("<4sIII16x", header)
        if magic != _DUMP_MAGIC:
            raise ValueError(f"bad trajectory magic {magic!r}")
        if version != _DUMP_VERSION:
            raise ValueError(f"unsupported trajectory version {version}")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != n_samples * L * 2:
        raise ValueError("trajectory payload size mismatch")
    grid = data.reshape(n_samples, L, 2)
    return grid[:, :, 0] + 1j * grid[:, :, 1]


# ---------------------------------------------------------------------------
# Self-convergence harness.  One Brownian path is drawn at the finest
# resolution; coarser runs see the block-summed increments of the same path,
# so the strong error of the scheme is measured directly.
# ---------------------------------------------------------------------------


def coarsen_normals(normals: np.ndarray, factor: int) -> np.ndarray:
    """Block-sum fine-step normals into coarse-step normals.

    Sums of `factor` unit normals, rescaled by 1/sqrt(factor), are again unit
    normals, and the rescaling matches the sqrt(dt) amplitude change, so the
    coarse run follows the same Brownian path.
    """
    n_fine = normals.shape[0]
    if n_fine % factor:
        raise ValueError("step count not divisible by coarsening factor")
    blocks = normals.reshape(n_fine // factor, factor, *normals.shape[1:])
    return blocks.sum(axis=1) / np.sqrt(factor)


def self_convergence(params: ChainParams, t_target: float, dt: float,
                     seed: int = 0, factors=(8, 4, 2, 1)) -> dict:
    """Strong self-convergence of the stepper on one shared noise path.

    Runs the same trajectory at dt*f/max(factors) ... i.e. step sizes
    dt/f for f in factors (f=1 is the coarsest, f=max the reference), and
    reports endpoint errors against the finest run.  For a strong order 1.0
    scheme the error ratio between consecutive halvings approaches 2.
    """
    factors = sorted(set(int(f) for f in factors), reverse=True)
    f_ref = factors[0]
    n_coarse = int(round(t_target / dt))
    if n_coarse < 1:
        raise ValueError("t_target shorter than one step")
    gen = np.random.default_rng(seed)
    state0 = sample_vacuum_initial(params, gen)
    fine = _Stepper(params, dt / f_ref)
    normals_ref = fine.draw(gen, n_coarse * f_ref)

    finals = {}
    for f in factors:
        stp = _Stepper(params, dt / f)
        normals = coarsen_normals(normals_ref, f_ref // f) if f != f_ref \
            else normals_ref
        st = state0.copy()
        stp.advance(st, None, normals)
        finals[f] = st.alpha.copy()
    ref = finals[f_ref]
    errors = {f: float(np.max(np.abs(finals[f] - ref)))
              for f in factors if f != f_ref}
    fs = sorted(errors, key=lambda f: -f)
    orders = []
    for fa, fb in zip(fs[1:], fs[:-1]):
        ratio = fb / fa  # fa has the smaller f (coarser)
        if errors[fa] > 0 and errors[fb] > 0:
            orders.append(np.log(errors[fa] / errors[fb]) / np.log(ratio))
    return {
        "dt": dt,
        "errors": {dt / f: errors[f] for f in errors},
        "order_estimate": float(np.mean(orders)) if orders else float("nan"),
    }
