"""Semiclassical phase out-of-time-order correlator.

Replica pairs share a noise realization; replica b receives a phase kick
epsilon at site k once the chain has settled, and the divergence of the
phase fields is tracked through

    D_{k,l}(tau) = 1 - < cos(phi_a - phi_b) >.

D grows exponentially in the chaotic regime, ballistically in space, and
saturates at its ergodic bound 1 when the replica phases fully decorrelate.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .integrate import (ReplicaPair, TrajectoryError, evolve, evolve_replicas,
                        perturb_phase, sample_vacuum_initial)
from .model import ChainParams, NoisePolicy, SimGrid, config_digest

#: default phase kick; far above machine precision, far below 1
DEFAULT_EPSILON = 1e-4

#: default light-cone arrival threshold on D
ARRIVAL_THRESHOLD = 1e-2

FAILURE_QUOTA = 0.01


@dataclass
class OtocMap:
    """Ensemble-averaged D_{k,l}(tau) on the sample grid."""

    D: np.ndarray = field(repr=False)  # (L, n_tau)
    tau: np.ndarray = field(repr=False)
    k: int
    epsilon: float
    n_traj: int
    n_failed: int = 0

    @property
    def L(self) -> int:
        return self.D.shape[0]


def _cos_phase_diff(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """cos(arg a - arg b), exactly 1.0 when a and b are bit-identical."""
    num = a.real * b.real + a.imag * b.imag
    den = np.sqrt((a.real * a.real + a.imag * a.imag)
                  * (b.real * b.real + b.imag * b.imag))
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0)
    return np.clip(c, -1.0, 1.0)


def run_otoc(params: ChainParams, grid: SimGrid, k: int,
             epsilon: float = DEFAULT_EPSILON, t_wait: float = 100.0,
             tau_max: float = 15.0, n_traj: int = 1000,
             policy: NoisePolicy | None = None,
             checkpoint_path=None, checkpoint_every: int = 500) -> OtocMap:
    """Accumulate the phase correlator map over n_traj replica pairs.

    Each pair burns in for t_wait (which should lie past the steady-state
    onset), is cloned, the clone is kicked by epsilon at site k, and both
    are co-evolved with shared noise for tau_max.  D is sampled every
    sample_stride steps starting at the kick (tau = 0).  checkpoint_path
    resumes an interrupted accumulation exactly as in ensemble runs.
    """
    if not 1 <= k <= params.L:
        raise ValueError(f"site {k} outside 1..{params.L}")
    if policy is None:
        policy = NoisePolicy(0)
    stride = max(1, int(grid.sample_stride))
    n_tau = int(round(tau_max / grid.dt)) // stride + 1
    tau = np.arange(n_tau) * (stride * grid.dt)
    digest = config_digest(params, grid, extra={
        "master_seed": policy.master_seed, "k": k, "epsilon": epsilon,
        "t_wait": t_wait, "tau_max": tau_max})
    cos_sum = np.zeros((params.L, n_tau))
    n_ok = 0
    n_failed = 0
    start = 0
    if checkpoint_path and os.path.exists(checkpoint_path):
        saved = np.load(checkpoint_path)
        if str(saved["digest"]) != digest:
            raise ValueError("checkpoint belongs to a different correlator run")
        cos_sum = saved["cos_sum"].copy()
        n_ok, n_failed, start = (int(saved["n_ok"]), int(saved["n_failed"]),
                                 int(saved["next_index"]))
    since = 0
    for idx in range(start, n_traj):
        gen = policy.generator(idx)
        state = sample_vacuum_initial(params, gen)
        try:
            evolve(state, params, grid, gen, t_wait)
            pair = ReplicaPair(state, perturb_phase(state, k, epsilon))
            cos_traj = np.empty((params.L, n_tau))
            cos_traj[:, 0] = _cos_phase_diff(pair.state_a.alpha,
                                             pair.state_b.alpha)
            cursor = {"j": 0}

            def on_sample(sa, sb):
                cursor["j"] += 1
                if cursor["j"] < n_tau:
                    cos_traj[:, cursor["j"]] = _cos_phase_diff(sa.alpha,
                                                               sb.alpha)

            evolve_replicas(pair, params, grid, gen, state.t + tau_max,
                            on_sample=on_sample)
        except TrajectoryError:
            n_failed += 1
        else:
            cos_sum += cos_traj
            n_ok += 1
        since += 1
        if checkpoint_path and since >= checkpoint_every:
            _save_otoc_checkpoint(checkpoint_path, digest, cos_sum, n_ok,
                                  n_failed, idx + 1)
            since = 0
    if checkpoint_path:
        _save_otoc_checkpoint(checkpoint_path, digest, cos_sum, n_ok,
                              n_failed, n_traj)
    if n_failed > FAILURE_QUOTA * n_traj or n_ok == 0:
        raise RuntimeError(
            f"{n_failed}/{n_traj} replica pairs aborted (quota "
            f"{FAILURE_QUOTA:.0%}); dt is too large for this drive")
    D = 1.0 - cos_sum / n_ok
    return OtocMap(D=D, tau=tau, k=k, epsilon=epsilon, n_traj=n_ok,
                   n_failed=n_failed)


def _save_otoc_checkpoint(path, digest, cos_sum, n_ok, n_failed, next_index):
    tmp = f"{path}.tmp.npz"
    np.savez(tmp.removesuffix(".npz"), digest=digest, cos_sum=cos_sum,
             n_ok=n_ok, n_failed=n_failed, next_index=next_index)
    os.replace(tmp, path)


def saturation_value(omap: OtocMap, window: float = 25.0) -> np.ndarray:
    """Per-site average of D over the trailing window of the tau record."""
    span = omap.tau[-1] - omap.tau[0]
    if window > span + 1e-9:
        raise ValueError(f"window {window:.3g} exceeds record span {span:.3g}")
    keep = omap.tau >= omap.tau[-1] - window + 1e-9
    return omap.D[:, keep].mean(axis=1)


@dataclass
class LyapunovFit:
    """Pooled exponential-growth fit of the correlator map."""

    ok: bool
    lam: float
    ci: float
    v: float
    n_points: int
    floor: float
    sites: list


def fit_lyapunov(omap: OtocMap, sites=None, v: float | None = None,
                 sat_window: float | None = None,
                 window=None) -> LyapunovFit:
    """Estimate the growth rate of D by a pooled log-linear fit.

    The correlator does not grow as one clean exponential: right at the
    front D rises faster than its asymptotic rate, and well before
    saturation the trajectory-to-trajectory spread of deviations bends
    the average over.  The stable exponential section sits a couple of
    decades above the injected floor 1 - cos(epsilon) and well below the
    bend, so the default fit window keeps 20x floor <= D <= 2e4x floor
    (capped at 1e-3 and at 0.1x each site's saturation).  Sites within
    an eighth of the chain of the perturbed site are skipped by default:
    the front has not settled there.  Times are shifted by the ballistic
    arrival |l - k|/v before pooling so all sites collapse onto one
    exponential; v defaults to the measured butterfly velocity.  Returns
    ok=False when no site has a usable window (regular dynamics).
    """
    floor = 1.0 - np.cos(omap.epsilon)
    if sat_window is None:
        sat_window = min(25.0, 0.25 * (omap.tau[-1] - omap.tau[0]))
    sat = saturation_value(omap, sat_window)
    if v is None:
        try:
            v, _ = butterfly_velocity(omap)
        except ValueError:
            v = np.nan
    if window is None:
        window = (20.0 * floor, min(2e4 * floor, 1e-3))
    if sites is None:
        near = max(4, omap.L // 8)
        sites = [ell for ell in range(1, omap.L + 1)
                 if abs(ell - omap.k) >= near and ell <= omap.L - 3]
    ts, ys, used = [], [], []
    for ell in sites:
        row = omap.D[ell - 1]
        lo = window[0]
        hi = min(window[1], 0.1 * sat[ell - 1])
        if hi <= lo:
            continue
        mask = (row >= lo) & (row <= hi)
        # demand a contiguous run covering at least half a decade of growth
        idx = np.flatnonzero(mask)
        if idx.size < 3 or row[idx].max() < np.sqrt(10.0) * row[idx].min():
            continue
        shift = abs(ell - omap.k) / v if np.isfinite(v) and v > 0 else 0.0
        ts.append(omap.tau[idx] - shift)
        ys.append(np.log(row[idx]))
        used.append(ell)
    if not ts:
        return LyapunovFit(ok=False, lam=float("nan"), ci=float("nan"),
                           v=float(v), n_points=0, floor=floor, sites=[])
    t = np.concatenate(ts)
    y = np.concatenate(ys)
    A = np.stack([t, np.ones_like(t)], axis=1)
    coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
    lam = float(coef[0])
    dof = max(t.size - 2, 1)
    s2 = float(res[0]) / dof if res.size else 0.0
    tvar = float(np.sum((t - t.mean()) ** 2))
    se = np.sqrt(s2 / tvar) if tvar > 0 else float("inf")
    return LyapunovFit(ok=True, lam=lam, ci=float(1.96 * se), v=float(v),
                       n_points=int(t.size), floor=floor, sites=used)


def butterfly_velocity(omap: OtocMap, threshold: float = ARRIVAL_THRESHOLD,
                       sites=None):
    """Front speed from threshold-crossing arrival times.

    t_l = first tau with D(l, tau) >= threshold (linearly interpolated
    between samples); a straight line fitted to t_l versus distance
    |l - k| gives v = 1/slope.  The front leaves the perturbed site
    faster than its asymptotic speed and only settles in the bulk, so by
    default the fit uses the far half of the chain (distance >= L/2, the
    last few sites dropped).  Returns (v, residual); the rms residual of
    the fit is reported so alternate thresholds and site windows can be
    compared.  Requires at least 3 crossed sites.
    """
    if sites is None:
        far = max(2, omap.L // 2)
        sites = [ell for ell in range(1, omap.L + 1)
                 if abs(ell - omap.k) >= far and ell <= omap.L - 4]
        if len(sites) < 3:
            sites = [ell for ell in range(1, omap.L + 1) if ell != omap.k]
    dists, arrivals = [], []
    for ell in sites:
        if ell == omap.k:
            continue
        row = omap.D[ell - 1]
        idx = np.flatnonzero(row >= threshold)
        if not idx.size:
            continue
        i = idx[0]
        if i == 0:
            t_cross = omap.tau[0]
        else:
            frac = (threshold - row[i - 1]) / (row[i] - row[i - 1])
            t_cross = omap.tau[i - 1] + frac * (omap.tau[i] - omap.tau[i - 1])
        dists.append(abs(ell - omap.k))
        arrivals.append(t_cross)
    if len(dists) < 3:
        raise ValueError(
            f"only {len(dists)} sites crossed threshold {threshold:.3g} in "
            "the fitted band; need at least 3 (pass sites= to widen)")
    d = np.asarray(dists, dtype=float)
    t = np.asarray(arrivals)
    A = np.stack([d, np.ones_like(d)], axis=1)
    coef, res, *_ = np.linalg.lstsq(A, t, rcond=None)
    slope = float(coef[0])
    if slope <= 0:
        raise ValueError("arrival times do not increase with distance")
    rms = float(np.sqrt(res[0] / d.size)) if res.size else 0.0
    return 1.0 / slope, rms


def write_otoc(csv_path, omap: OtocMap, summary_extra=None) -> None:
    """CSV of (ell, tau, D) plus a JSON summary next to it."""
    lines = ["ell,tau,D"]
    for ell in range(1, omap.L + 1):
        for j, tau in enumerate(omap.tau):
            lines.append(f"{ell},{tau:.10g},{omap.D[ell - 1, j]:.10g}")
    with open(csv_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    fit = fit_lyapunov(omap)
    try:
        v, vres = butterfly_velocity(omap)
    except ValueError:
        v, vres = float("nan"), float("nan")
    sat_w = min(25.0, 0.25 * (omap.tau[-1] - omap.tau[0]))
    summary = {
        "k": omap.k,
        "epsilon": omap.epsilon,
        "n_trajectories": omap.n_traj,
        "n_failed": omap.n_failed,
        "lambda": fit.lam if fit.ok else None,
        "lambda_ci": fit.ci if fit.ok else None,
        "growth_window_found": fit.ok,
        "v": None if np.isnan(v) else v,
        "v_residual": None if np.isnan(vres) else vres,
        "saturation": [float(x) for x in saturation_value(omap, sat_w)],
    }
    if summary_extra:
        summary.update(summary_extra)
    stem, _ = os.path.splitext(csv_path)
    with open(stem + ".json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
