"""Trajectory-ensemble orchestration.

Runs N independent trajectories, accumulates streaming moment sums in the
steady-state window, tracks the boundary-occupation time trace for
steady-state detection, and checkpoints long runs so interrupted scans
resume bit-for-bit.

Trajectories are indexed 0..N-1 and each owns a counter-based noise stream,
so execution order (and the worker count) never changes the result; the
final merge is performed in fixed index order.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import __version__, _kernels, observables
from .integrate import TrajectoryError, evolve, sample_vacuum_initial
from .model import ChainParams, NoisePolicy, SimGrid, config_digest, config_to_dict

_CKPT_MAGIC = b"BCHK"
_CKPT_VERSION = 1

#: fraction of aborted trajectories above which the whole run fails
FAILURE_QUOTA = 0.01

#: momentum-histogram defaults: half-range (units of p) and bin count;
#: binning this fine keeps the histogram Kolmogorov-Smirnov estimate well
#: below the 0.05 reliability gate
P_RANGE = 15.0
P_BINS = 1200


class EnsembleAccumulator:
    """Streaming per-site moment sums over trajectories and time samples.

    Holds everything the observable estimators need: <alpha>, <|alpha|^2>,
    <|alpha|^4>, <e^{i phi}>, <Im alpha>, <Im^2 alpha>, anchored coherence
    products, a momentum histogram per site, per-trajectory batch means for
    error bars, and the boundary-site occupation trace on the sample grid.
    """

    def __init__(self, L: int, g1_anchor=None, n_times: int = 0):
        if g1_anchor is not None and not 1 <= g1_anchor <= L:
            raise ValueError(f"anchor {g1_anchor} outside 1..{L}")
        self.L = L
        self.g1_anchor = g1_anchor
        self.count = 0
        self.n_traj = 0
        self.n_failed = 0
        self.s_alpha = np.zeros(L, dtype=np.complex128)
        self.s_abs2 = np.zeros(L)
        self.s_abs4 = np.zeros(L)
        self.s_phase = np.zeros(L, dtype=np.complex128)
        self.s_im = np.zeros(L)
        self.s_im2 = np.zeros(L)
        self.s_g1 = np.zeros(L, dtype=np.complex128) if g1_anchor else None
        self.batch_sum = np.zeros(L)
        self.batch_sumsq = np.zeros(L)
        self.p_hist = np.zeros((L, P_BINS))
        self.p_edges = np.linspace(-P_RANGE, P_RANGE, P_BINS + 1)
        self.trace_sum = np.zeros(n_times)
        self.trace_count = 0

    def clone_empty(self) -> "EnsembleAccumulator":
        return EnsembleAccumulator(self.L, self.g1_anchor,
                                   self.trace_sum.shape[0])

    def add_sample(self, alpha: np.ndarray) -> None:
        """Fold one steady-state field sample into the moment sums."""
        a2 = alpha.real * alpha.real + alpha.imag * alpha.imag
        self.s_alpha += alpha
        self.s_abs2 += a2
        self.s_abs4 += a2 * a2
        mod = np.sqrt(a2)
        with np.errstate(invalid="ignore", divide="ignore"):
            self.s_phase += np.where(mod > 0, alpha / np.where(mod > 0, mod, 1.0), 0.0)
        im = alpha.imag
        self.s_im += im
        self.s_im2 += im * im
        if self.s_g1 is not None:
            self.s_g1 += np.conj(alpha[self.g1_anchor - 1]) * alpha
        p = np.sqrt(2.0) * im
        # nan-safe cast: a diverging trajectory may push garbage through here
        # before the abort lands and its shard is discarded
        with np.errstate(invalid="ignore"):
            idx = np.clip(np.nan_to_num(
                (p + P_RANGE) * (P_BINS / (2.0 * P_RANGE))).astype(np.int64),
                0, P_BINS - 1)
        np.add.at(self.p_hist, (np.arange(self.L), idx), 1.0)
        self.count += 1

    def add_trace_sample(self, k: int, n_L: float) -> None:
        self.trace_sum[k] += n_L

    def finish_trajectory(self, tavg_abs2=None, failed: bool = False) -> None:
        """Close out one trajectory; tavg_abs2 feeds the batch-means bars."""
        if failed:
            self.n_failed += 1
            return
        self.n_traj += 1
        self.trace_count += 1
        if tavg_abs2 is not None:
            self.batch_sum += tavg_abs2
            self.batch_sumsq += tavg_abs2 * tavg_abs2

    # -- estimator inputs ---------------------------------------------------

    def mean_alpha(self):
        return self.s_alpha / self.count

    def mean_abs2(self):
        return self.s_abs2 / self.count

    def mean_abs4(self):
        return self.s_abs4 / self.count

    def mean_phase_factor(self):
        return self.s_phase / self.count

    def mean_im(self):
        return self.s_im / self.count

    def mean_im2(self):
        return self.s_im2 / self.count

    def g1_raw(self):
        return None if self.s_g1 is None else self.s_g1 / self.count

    def p_distribution(self, ell: int):
        """(edges, counts) of the momentum histogram at 1-based site ell."""
        return self.p_edges, self.p_hist[ell - 1]

    def photon_number_sem(self):
        """Standard error of n per site from per-trajectory batch means."""
        if self.n_traj < 2:
            return np.full(self.L, np.nan)
        m = self.batch_sum / self.n_traj
        var = (self.batch_sumsq / self.n_traj - m * m) * self.n_traj / (self.n_traj - 1)
        return np.sqrt(np.maximum(var, 0.0) / self.n_traj)

    def trace(self):
        """Ensemble-averaged n_L(t) on the sample grid."""
        if self.trace_count == 0:
            return np.full(self.trace_sum.shape[0], np.nan)
        return self.trace_sum / self.trace_count - 0.5

    # -- reductions ---------------------------------------------------------

    def merge(self, other: "EnsembleAccumulator") -> "EnsembleAccumulator":
        """Add another accumulator's sums into this one (in place)."""
        if other.L != self.L or other.g1_anchor != self.g1_anchor \
                or other.trace_sum.shape != self.trace_sum.shape:
            raise ValueError("accumulator shape mismatch")
        self.count += other.count
        self.n_traj += other.n_traj
        self.n_failed += other.n_failed
        self.s_alpha += other.s_alpha
        self.s_abs2 += other.s_abs2
        self.s_abs4 += other.s_abs4
        self.s_phase += other.s_phase
        self.s_im += other.s_im
        self.s_im2 += other.s_im2
        if self.s_g1 is not None:
            self.s_g1 += other.s_g1
        self.batch_sum += other.batch_sum
        self.batch_sumsq += other.batch_sumsq
        self.p_hist += other.p_hist
        self.trace_sum += other.trace_sum
        self.trace_count += other.trace_count
        return self


def merge(a: EnsembleAccumulator, b: EnsembleAccumulator) -> EnsembleAccumulator:
    """Non-mutating merge of two accumulators."""
    out = a.clone_empty()
    out.merge(a)
    out.merge(b)
    return out


@dataclass
class SteadyStateReport:
    """Steady-state onset diagnosis from the n_L(t) trace."""

    t_ss: float
    converged: bool
    criterion: np.ndarray = field(repr=False)
    eps: float = 0.01


#: tail fraction of the record that must sit inside the epsilon tube for
#: converged=True; keeps metastable switching from masquerading as a NESS
MIN_TAIL_FRACTION = 0.25


def detect_steady_state(times, n_L, eps: float = 0.01,
                        window: float = 25.0) -> SteadyStateReport:
    """Earliest time from which n_L stays within eps of its final value.

    Requires the record to cover at least one averaging window.  converged
    additionally demands that the settled tail spans MIN_TAIL_FRACTION of
    the record, so a series still switching between branches near the end
    is reported unconverged even though a formal t_ss exists.
    """
    times = np.asarray(times, dtype=float)
    n_L = np.asarray(n_L, dtype=float)
    if times.shape != n_L.shape or times.ndim != 1 or times.size < 2:
        raise ValueError("times and n_L must be equal-length 1-D series")
    span = times[-1] - times[0]
    if span < window - 1e-9:
        raise ValueError(f"series spans {span:.3g} < one window {window:.3g}")
    criterion = np.abs(n_L - n_L[-1])
    inside = criterion < eps
    # last index before which some point violates the tube
    bad = np.flatnonzero(~inside)
    first = 0 if bad.size == 0 else bad[-1] + 1
    if first >= times.size:
        return SteadyStateReport(t_ss=float("nan"), converged=False,
                                 criterion=criterion, eps=eps)
    t_ss = float(times[first])
    tail = times[-1] - t_ss
    converged = bool(tail >= MIN_TAIL_FRACTION * span)
    return SteadyStateReport(t_ss=t_ss, converged=converged,
                             criterion=criterion, eps=eps)


# ---------------------------------------------------------------------------
# Running ensembles
# ---------------------------------------------------------------------------


def _n_times(grid: SimGrid) -> int:
    stride = max(1, int(grid.sample_stride))
    return int(round(grid.t_max / grid.dt)) // stride + 1


def _run_one(params, grid, policy, index, acc_proto, collect_fields):
    """One trajectory folded into a fresh accumulator shard.

    Returns (shard, fields) where fields is the list of (t, alpha) samples
    in the steady-state window when requested (for histogram sinks), else
    None.
    """
    shard = acc_proto.clone_empty()
    gen = policy.generator(index)
    state = sample_vacuum_initial(params, gen)
    stride = max(1, int(grid.sample_stride))
    i_L = params.L - 1
    fields = [] if collect_fields else None
    scratch = {"k": 0, "s2": np.zeros(params.L), "m": 0}

    def on_sample(st):
        scratch["k"] += 1
        shard.add_trace_sample(scratch["k"],
                               st.alpha[i_L].real ** 2 + st.alpha[i_L].imag ** 2)
        if st.t >= grid.t_transient - 1e-9:
            shard.add_sample(st.alpha)
            a2 = st.alpha.real ** 2 + st.alpha.imag ** 2
            scratch["s2"] += a2
            scratch["m"] += 1
            if fields is not None:
                fields.append((st.t, st.alpha.copy()))

    shard.add_trace_sample(0, state.alpha[i_L].real ** 2 + state.alpha[i_L].imag ** 2)
    if grid.t_transient <= 1e-9:
        shard.add_sample(state.alpha)
        scratch["s2"] += state.alpha.real ** 2 + state.alpha.imag ** 2
        scratch["m"] += 1
        if fields is not None:
            fields.append((0.0, state.alpha.copy()))
    try:
        evolve(state, params, grid, gen, grid.t_max, on_sample=on_sample)
    except TrajectoryError:
        shard = acc_proto.clone_empty()
        shard.finish_trajectory(failed=True)
        return shard, None
    tavg = scratch["s2"] / scratch["m"] if scratch["m"] else None
    shard.finish_trajectory(tavg_abs2=tavg)
    return shard, fields


def _worker(args):
    params, grid, policy, indices, anchor = args
    proto = EnsembleAccumulator(params.L, anchor, _n_times(grid))
    out = proto.clone_empty()
    for idx in indices:
        shard, _ = _run_one(params, grid, policy, idx, proto, False)
        out.merge(shard)
    return out


def run_ensemble(params: ChainParams, grid: SimGrid, n_traj: int,
                 policy: NoisePolicy, *, g1_anchor=None, sinks=(),
                 workers=None, checkpoint_path=None, checkpoint_every=200,
                 eps_ss: float = 0.01):
    """Run n_traj trajectories and reduce them.

    Returns (EnsembleAccumulator, SteadyStateReport).  workers defaults to
    the BOSECHAIN_WORKERS environment variable (1 if unset); sinks receive
    (t, alpha) samples in the steady-state window and must expose
    add(alpha, t) plus merge(other) -- they force single-process execution.
    With checkpoint_path set, completed work is saved every
    checkpoint_every trajectories and an existing file resumes the run.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    if workers is None:
        workers = int(os.environ.get("BOSECHAIN_WORKERS", "1") or 1)
    n_times = _n_times(grid)
    acc = EnsembleAccumulator(params.L, g1_anchor, n_times)
    digest = _run_digest(params, grid, policy)
    start = 0
    if checkpoint_path and os.path.exists(checkpoint_path):
        acc, start = load_checkpoint(checkpoint_path, digest)
        if acc.g1_anchor != g1_anchor or acc.trace_sum.shape[0] != n_times:
            raise ValueError("checkpoint does not match this run request")
    done = start
    if sinks and workers > 1:
        workers = 1
    if workers > 1 and done < n_traj:
        import multiprocessing as mp

        chunks = np.array_split(np.arange(done, n_traj), workers * 4)
        chunks = [c for c in chunks if c.size]
        with mp.Pool(workers) as pool:
            shards = pool.map(
                _worker,
                [(params, grid, policy, list(c), g1_anchor) for c in chunks])
        for shard in shards:  # fixed submission order
            acc.merge(shard)
        done = n_traj
    else:
        proto = acc.clone_empty()
        since_ckpt = 0
        for idx in range(done, n_traj):
            shard, fields = _run_one(params, grid, policy, idx, proto,
                                     bool(sinks))
            acc.merge(shard)
            if fields:
                for t, alpha in fields:
                    for sink in sinks:
                        sink.add(alpha, t)
            done = idx + 1
            since_ckpt += 1
            if checkpoint_path and since_ckpt >= checkpoint_every:
                save_checkpoint(checkpoint_path, acc, done, digest)
                since_ckpt = 0
    if checkpoint_path:
        save_checkpoint(checkpoint_path, acc, done, digest)
    if acc.n_failed > FAILURE_QUOTA * n_traj:
        raise RuntimeError(
            f"{acc.n_failed}/{n_traj} trajectories aborted "
            f"(quota {FAILURE_QUOTA:.0%}); dt is too large for this drive")
    times = np.arange(n_times) * grid.sample_dt
    window = min(grid.window, grid.t_max / 2)
    # the tube test runs on window-block means: raw per-sample traces carry
    # Monte-Carlo noise well above eps for practical trajectory counts
    bt, bn = block_average(times, acc.trace(), window)
    report = detect_steady_state(bt, bn, eps=eps_ss, window=window)
    return acc, report


def block_average(times, values, window: float):
    """End-aligned block means of a time series, block span = window.

    The last block ends at the final sample so the reference value of the
    steady-state criterion is the settled tail average; a leading partial
    block is dropped.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if times.size < 2:
        return times, values
    dt = times[1] - times[0]
    bs = max(1, int(round(window / dt)))
    n_blocks = times.size // bs
    if n_blocks < 1:
        return times, values
    tail_t = times[times.size - n_blocks * bs:]
    tail_v = values[values.size - n_blocks * bs:]
    return (tail_t.reshape(n_blocks, bs).mean(axis=1),
            tail_v.reshape(n_blocks, bs).mean(axis=1))


def _run_digest(params, grid, policy):
    return config_digest(params, grid, extra={"master_seed": policy.master_seed})


# ---------------------------------------------------------------------------
# Checkpoint files: header (magic, version, params hash, shape fields,
# cursors) followed by raw little-endian sums.  The RNG position is the next
# trajectory index; per-trajectory streams are counter-based, so resuming
# there reproduces the uninterrupted run bit-for-bit.
# ---------------------------------------------------------------------------

_CKPT_HEAD = "<4sI32sIIIQQQQQdI4x"


def save_checkpoint(path, acc: EnsembleAccumulator, next_index: int,
                    digest: str) -> None:
    anchor = acc.g1_anchor or 0
    head = struct.pack(
        _CKPT_HEAD, _CKPT_MAGIC, _CKPT_VERSION,
        bytes.fromhex(digest)[:32], acc.L, anchor, acc.trace_sum.shape[0],
        acc.count, acc.n_traj, acc.n_failed, acc.trace_count, next_index,
        P_RANGE, P_BINS)
    blobs = [
        acc.s_alpha.astype("<c16").tobytes(),
        acc.s_abs2.astype("<f8").tobytes(),
        acc.s_abs4.astype("<f8").tobytes(),
        acc.s_phase.astype("<c16").tobytes(),
        acc.s_im.astype("<f8").tobytes(),
        acc.s_im2.astype("<f8").tobytes(),
        (acc.s_g1 if acc.s_g1 is not None
         else np.zeros(0, dtype=np.complex128)).astype("<c16").tobytes(),
        acc.batch_sum.astype("<f8").tobytes(),
        acc.batch_sumsq.astype("<f8").tobytes(),
        acc.p_hist.astype("<f8").tobytes(),
        acc.trace_sum.astype("<f8").tobytes(),
    ]
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(head)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load_checkpoint(path, digest: str):
    """Read a checkpoint; returns (accumulator, next_trajectory_index)."""
    with open(path, "rb") as fh:
        head = fh.read(struct.calcsize(_CKPT_HEAD))
        if len(head) < struct.calcsize(_CKPT_HEAD):
            raise ValueError("corrupt checkpoint header")
        (magic, version, saved_hash, L, anchor, n_times, count, n_traj,
         n_failed, trace_count, next_index, p_range, p_bins) = \
            struct.unpack(_CKPT_HEAD, head)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        if saved_hash != bytes.fromhex(digest)[:32]:
            raise ValueError("checkpoint belongs to a different run "
                             "(params/grid/seed hash mismatch)")
        if p_range != P_RANGE or p_bins != P_BINS:
            raise ValueError("checkpoint histogram layout mismatch")
        acc = EnsembleAccumulator(L, anchor or None, n_times)
        acc.count = count
        acc.n_traj = n_traj
        acc.n_failed = n_failed
        acc.trace_count = trace_count

        def arr(n, dt):
            raw = fh.read(n * np.dtype(dt).itemsize)
            if len(raw) != n * np.dtype(dt).itemsize:
                raise ValueError("truncated checkpoint payload")
            return np.frombuffer(raw, dtype=dt).copy()

        acc.s_alpha = arr(L, "<c16").astype(np.complex128)
        acc.s_abs2 = arr(L, "<f8")
        acc.s_abs4 = arr(L, "<f8")
        acc.s_phase = arr(L, "<c16").astype(np.complex128)
        acc.s_im = arr(L, "<f8")
        acc.s_im2 = arr(L, "<f8")
        g1 = arr(L if anchor else 0, "<c16")
        acc.s_g1 = g1.astype(np.complex128) if anchor else None
        acc.batch_sum = arr(L, "<f8")
        acc.batch_sumsq = arr(L, "<f8")
        acc.p_hist = arr(L * p_bins, "<f8").reshape(L, p_bins)
        acc.trace_sum = arr(n_times, "<f8")
    return acc, int(next_index)


# ---------------------------------------------------------------------------
# Results output
# ---------------------------------------------------------------------------


def write_results(csv_path, acc: EnsembleAccumulator, params: ChainParams,
                  grid: SimGrid, metadata=None) -> None:
    """Write the per-site observable table and its JSON sidecar.

    Columns: site, n, delta_n, var_phi, re_g1, im_g1, T_equip.  The sidecar
    (same stem, .json) records the configuration, counts, backend, and any
    extra metadata supplied.
    """
    n = observables.photon_number_profile(acc)
    dn = observables.number_fluctuation_profile(acc)
    vphi = observables.circular_variance_profile(acc)
    if acc.g1_anchor:
        g1 = observables.coherence_g1_profile(acc)
    else:
        g1 = np.full(acc.L, np.nan + 0j)
    temps = [observables.equipartition_temperature(acc, ell, params.detuning)
             for ell in range(1, acc.L + 1)]
    lines = ["site,n,delta_n,var_phi,re_g1,im_g1,T_equip"]
    for i in range(acc.L):
        lines.append(
            f"{i + 1},{n[i]:.10g},{dn[i]:.10g},{vphi[i]:.10g},"
            f"{g1[i].real:.10g},{g1[i].imag:.10g},{temps[i].T:.10g}")
    with open(csv_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    side = {
        "config": config_to_dict(params, grid),
        "n_trajectories": acc.n_traj,
        "n_failed": acc.n_failed,
        "sample_count": acc.count,
        "g1_anchor": acc.g1_anchor,
        "backend": _kernels.BACKEND,
        "version": __version__,
        "n_sem": [float(x) for x in acc.photon_number_sem()],
        "T_reliable": [t.reliable for t in temps],
        "T_ks": [t.ks_distance for t in temps],
    }
    if metadata:
        side.update(metadata)
    stem, _ = os.path.splitext(csv_path)
    with open(stem + ".json", "w") as fh:
        json.dump(side, fh, indent=1, sort_keys=True)
        fh.write("\n")
