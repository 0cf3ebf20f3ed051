"""Command-line experiments over the chain library.

Each subcommand wires a preset-class experiment to the library and drops
its outputs (CSV/JSON, npz dumps) plus a run manifest into --out.  The
manifest records the fully resolved configuration, seeds, and a source
digest; `bosechain rerun --manifest <file> --out <dir>` re-executes it
and reproduces every CSV byte for byte.  Scans keep per-cell results in
<out>/cells and never recompute a finished cell.  The worker budget for
ensemble runs comes from BOSECHAIN_WORKERS (default 1).
"""

from __future__ import annotations

import argparse
import glob
import hashlib
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__, _kernels, ansatzfit, ensemble, observables
from . import otoc as otoc_mod
from . import presets, wigner
from .model import (ChainParams, NoisePolicy, SimGrid, config_from_dict,
                    config_to_dict)
from . import integrate

MANIFEST_NAME = "manifest.json"


def _code_version() -> str:
    """Package version plus a digest of the installed source files."""
    h = hashlib.sha256()
    pkg_dir = os.path.dirname(os.path.abspath(__file__))
    for path in sorted(glob.glob(os.path.join(pkg_dir, "**", "*.py"),
                                 recursive=True)):
        with open(path, "rb") as fh:
            h.update(fh.read())
    return f"{__version__}+src.{h.hexdigest()[:12]}"


class _Manifest:
    """Collects what a run needs to be repeated, then writes manifest.json."""

    def __init__(self, command: str, config: dict, seed: int):
        self.doc = {
            "command": command,
            "config": config,
            "seed": seed,
            "code_version": _code_version(),
            "stages": {},
        }
        self._t0 = time.time()

    def stage(self, name: str, seconds: float) -> None:
        self.doc["stages"][name] = round(seconds, 3)

    def write(self, outdir: str) -> None:
        self.doc["wall_clock_s"] = round(time.time() - self._t0, 3)
        self.doc["backend"] = _kernels.BACKEND
        with open(os.path.join(outdir, MANIFEST_NAME), "w") as fh:
            json.dump(self.doc, fh, indent=1, sort_keys=True)
            fh.write("\n")


def _ensure_outdir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    os.makedirs(os.path.join(path, "cells"), exist_ok=True)
    return path


def _parse_grid(text: str) -> list:
    """Either "a:b:step" (inclusive endpoints) or a comma list."""
    if ":" in text:
        a, b, step = (float(x) for x in text.split(":"))
        n = int(round((b - a) / step))
        return [round(a + i * step, 10) for i in range(n + 1)]
    return [float(x) for x in text.split(",")]


def _log(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# phase-diagram
# ---------------------------------------------------------------------------


def run_phase_diagram(cfg: dict, outdir: str) -> None:
    man = _Manifest("phase-diagram", cfg, cfg["seed"])
    drives = cfg["drive_grid"]
    lengths = cfg["L_grid"]
    rows = []
    failures = []
    for iL, L in enumerate(lengths):
        for iF, F in enumerate(drives):
            cell = os.path.join(outdir, "cells", f"L{L:g}_F{F:g}.json")
            t0 = time.time()
            if os.path.exists(cell):
                with open(cell) as fh:
                    res = json.load(fh)
            else:
                res = _phase_cell(cfg, int(L), float(F), iL, iF)
                with open(cell, "w") as fh:
                    json.dump(res, fh, sort_keys=True)
                    fh.write("\n")
            if "error" in res:
                failures.append({"L": L, "F": F, "error": res["error"]})
                rows.append(f"{F:g},{L:g},nan,nan,nan,error")
            else:
                rows.append(f"{F:g},{L:g},{res['n_L']:.10g},"
                            f"{res['delta_n_L']:.10g},{res['D_sat']:.10g},"
                            f"{res['regime']}")
            man.stage(f"L{L:g}_F{F:g}", time.time() - t0)
            _log(f"cell L={L:g} F={F:g} done")
    with open(os.path.join(outdir, "phase_diagram.csv"), "w") as fh:
        fh.write("F,L,n_L,delta_n_L,D_sat,regime\n")
        fh.write("\n".join(rows) + "\n")
    with open(os.path.join(outdir, "phase_diagram.json"), "w") as fh:
        json.dump({"failures": failures, "n_cells": len(rows)}, fh,
                  indent=1, sort_keys=True)
        fh.write("\n")
    man.write(outdir)


def _phase_cell(cfg: dict, L: int, F: float, iL: int, iF: int) -> dict:
    """One (L, F) cell: steady-state stats plus correlator saturation."""
    try:
        params = ChainParams(L=L, drive=F)
        grid = SimGrid(dt=cfg["dt"], t_max=cfg["t_max"],
                       t_transient=cfg["t_transient"],
                       sample_stride=cfg["sample_stride"])
        policy = NoisePolicy(master_seed=cfg["seed"] + 1000 * iL + iF)
        acc, rep = ensemble.run_ensemble(params, grid, cfg["n_traj"], policy)
        n_L = observables.photon_number(acc, L)
        dn_L = observables.number_fluctuation(acc, L)
        ogrid = SimGrid(dt=cfg["dt"], t_max=1.0,
                        sample_stride=cfg["sample_stride"])
        omap = otoc_mod.run_otoc(
            params, ogrid, k=1, epsilon=cfg["epsilon"],
            t_wait=cfg["t_wait"], tau_max=cfg["tau_max"],
            n_traj=cfg["otoc_n_traj"],
            policy=NoisePolicy(master_seed=cfg["seed"] + 500_000
                               + 1000 * iL + iF))
        window = min(5.0, 0.25 * cfg["tau_max"])
        D_sat = float(otoc_mod.saturation_value(omap, window)[L - 1])
        regime = observables.classify_regime(n_L, dn_L, D_sat)
        return {"n_L": float(n_L), "delta_n_L": float(dn_L),
                "D_sat": D_sat, "regime": regime,
                "t_ss": float(rep.t_ss), "converged": bool(rep.converged)}
    except Exception as exc:  # recorded per cell, the scan continues
        return {"error": f"{type(exc).__name__}: {exc}"}


# ---------------------------------------------------------------------------
# profile
# ---------------------------------------------------------------------------


class _FieldTap:
    """Ensemble sink buffering steady-state field samples of chosen sites."""

    def __init__(self, sites):
        self.sites = tuple(int(s) for s in sites)
        self.values = {s: [] for s in self.sites}

    def add(self, alpha, t=0.0) -> None:
        for s in self.sites:
            self.values[s].append(alpha[s - 1])

    def merge(self, other) -> None:
        for s in self.sites:
            self.values[s].extend(other.values[s])

    def clone_empty(self):
        return _FieldTap(self.sites)

    def samples(self, site: int) -> np.ndarray:
        return np.asarray(self.values[site])


def run_profile(cfg: dict, outdir: str) -> None:
    man = _Manifest("profile", cfg, cfg["seed"])
    params = ChainParams(L=cfg["L"], drive=cfg["F"])
    grid = SimGrid(dt=cfg["dt"], t_max=cfg["t_max"],
                   t_transient=cfg["t_transient"],
                   sample_stride=cfg["sample_stride"])
    policy = NoisePolicy(master_seed=cfg["seed"])
    sites = cfg["wigner_sites"]
    sinks = (_FieldTap(sites),) if sites else ()
    t0 = time.time()
    acc, rep = ensemble.run_ensemble(
        params, grid, cfg["n_traj"], policy, g1_anchor=cfg["anchor"],
        sinks=sinks,
        checkpoint_path=None if sinks else os.path.join(
            outdir, "cells", "profile_ck.npz"))
    man.stage("ensemble", time.time() - t0)
    ensemble.write_results(
        os.path.join(outdir, "profile.csv"), acc, params, grid,
        metadata={"t_ss": rep.t_ss, "converged": rep.converged})
    fits = []
    if sites:
        t0 = time.time()
        for s in sites:
            hist = wigner.accumulate_histogram(sinks[0].samples(s), site=s)
            wigner.save_wigner(
                os.path.join(outdir, f"wigner_site{s}.npz"), hist)
            if cfg["fit"]:
                fits.append(_best_family_fit(hist, params.kerr))
        man.stage("wigner", time.time() - t0)
    if fits:
        ansatzfit.write_fit_csv(os.path.join(outdir, "fits.csv"), fits,
                                sites=sites)
        report = ansatzfit.classify_domains(fits)
        with open(os.path.join(outdir, "domains.json"), "w") as fh:
            json.dump({"sites": list(sites), "labels": list(report.labels),
                       "segments": [list(seg) for seg in report.segments]},
                      fh, indent=1, sort_keys=True)
            fh.write("\n")
    man.write(outdir)


def _best_family_fit(hist, U: float):
    """Lowest-residual accepted family for one site's histogram."""
    best = None
    for family in ansatzfit.FAMILIES:
        try:
            fit = ansatzfit.fit_wigner(hist, family, U=U)
        except ValueError:
            continue
        if best is None or (fit.accepted and not best.accepted) \
                or (fit.accepted == best.accepted
                    and fit.residual < best.residual):
            best = fit
    if best is None:
        raise RuntimeError("every family rejected this histogram")
    return best


# ---------------------------------------------------------------------------
# otoc
# ---------------------------------------------------------------------------


def run_otoc_cmd(cfg: dict, outdir: str) -> None:
    man = _Manifest("otoc", cfg, cfg["seed"])
    params = ChainParams(L=cfg["L"], drive=cfg["F"])
    grid = SimGrid(dt=cfg["dt"], t_max=1.0, sample_stride=cfg["sample_stride"])
    t0 = time.time()
    omap = otoc_mod.run_otoc(
        params, grid, k=cfg["k"], epsilon=cfg["eps"],
        t_wait=cfg["t_wait"], tau_max=cfg["tau_max"],
        n_traj=cfg["n_traj"], policy=NoisePolicy(master_seed=cfg["seed"]),
        checkpoint_path=os.path.join(outdir, "cells", "otoc_ck.npz"))
    man.stage("otoc", time.time() - t0)
    otoc_mod.write_otoc(os.path.join(outdir, "otoc.csv"), omap,
                        summary_extra={"F": cfg["F"]})
    man.write(outdir)


# ---------------------------------------------------------------------------
# rnw-metastability
# ---------------------------------------------------------------------------


def run_rnw(cfg: dict, outdir: str) -> None:
    man = _Manifest("rnw-metastability", cfg, cfg["seed"])
    window = cfg["window"]
    rows = []
    tss_by_L = []
    for L, t_max in zip(cfg["L_list"], cfg["t_max_list"]):
        cell = os.path.join(outdir, "cells", f"rnw_L{L}.npz")
        t0 = time.time()
        if os.path.exists(cell):
            d = np.load(cell)
            times, trace = d["times"], d["trace"]
            tail_means = d["tail_means"]
        else:
            times, trace, tail_means = _rnw_single_size(
                ChainParams(L=int(L), drive=cfg["F"]),
                SimGrid(dt=cfg["dt"], t_max=float(t_max),
                        t_transient=0.0,
                        sample_stride=cfg["sample_stride"]),
                NoisePolicy(master_seed=cfg["seed"] + int(L)),
                cfg["n_traj"], window)
            tmp = cell + ".tmp.npz"
            np.savez(tmp, times=times, trace=trace, tail_means=tail_means)
            os.replace(tmp, cell)
        bt, bn = ensemble.block_average(times, trace, window)
        rep = ensemble.detect_steady_state(
            bt, bn, eps=cfg["eps_frac"] * abs(bn[-1]), window=window)
        b = observables.bimodality_coefficient(tail_means)
        bimodal = bool(b > observables.BIMODALITY_THRESHOLD)
        tss_by_L.append((L, rep.t_ss))
        rows.append(f"{L:g},{rep.t_ss:.10g},{int(rep.converged)},"
                    f"{b:.10g},{int(bimodal)},{bn[-1]:.10g}")
        man.stage(f"L{L:g}", time.time() - t0)
        _log(f"L={L:g}: t_ss={rep.t_ss:g} b={b:.3f}")
    with open(os.path.join(outdir, "rnw.csv"), "w") as fh:
        fh.write("L,t_ss,converged,bimodality,bimodal,n_L\n")
        fh.write("\n".join(rows) + "\n")
    summary = {"t_ss": {f"{L:g}": t for L, t in tss_by_L}}
    if len(tss_by_L) >= 2 and all(t > 0 for _, t in tss_by_L):
        Ls = np.array([x[0] for x in tss_by_L], dtype=float)
        ts = np.array([x[1] for x in tss_by_L], dtype=float)
        c, loga = np.polyfit(Ls, np.log(ts), 1)
        summary["exponential_fit"] = {"rate_per_site": float(c),
                                      "prefactor": float(math.exp(loga))}
    with open(os.path.join(outdir, "rnw.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    man.write(outdir)


def _rnw_single_size(params, grid, policy, n_traj, window):
    """Ensemble boundary trace plus per-trajectory late-window means."""
    n_times = int(round(grid.t_max / grid.sample_dt)) + 1
    trace_sum = np.zeros(n_times)
    tail_means = np.zeros(n_traj)
    t_hist = grid.t_max - window
    for idx in range(n_traj):
        gen = policy.generator(idx)
        state = integrate.sample_vacuum_initial(params, gen)
        tail = [0.0, 0]

        def on_sample(st):
            k = int(round(st.t / grid.sample_dt))
            trace_sum[k] += abs(st.alpha[-1]) ** 2
            if st.t >= t_hist - 1e-9:
                tail[0] += abs(st.alpha[-1]) ** 2 - 0.5
                tail[1] += 1

        on_sample(state)
        integrate.evolve(state, params, grid, gen, grid.t_max, on_sample)
        tail_means[idx] = tail[0] / tail[1]
    times = np.arange(n_times) * grid.sample_dt
    return times, trace_sum / n_traj - 0.5, tail_means


# ---------------------------------------------------------------------------
# regime-classify, bench, rerun
# ---------------------------------------------------------------------------


def run_regime(cfg: dict, outdir: str | None) -> None:
    regime = observables.classify_regime(cfg["n_L"], cfg["delta_n_L"],
                                         cfg["D_sat"])
    doc = dict(cfg, regime=regime, code_version=_code_version())
    print(json.dumps(doc, indent=1, sort_keys=True))
    if outdir:
        man = _Manifest("regime-classify", cfg, 0)
        with open(os.path.join(outdir, "regime.json"), "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")
        man.write(outdir)


def benchmark_kernels(sizes=(10, 100), n_steps: int = 20_000,
                      repeats: int = 3):
    """Time the trajectory stepper on each available backend.

    Returns a list of dict rows (backend, L, steps/s); the compiled and
    pure backends are fed identical inputs and must produce bit-identical
    states, which is asserted here.
    """
    from .model import site_profiles

    backends = [("python", _kernels._pure)]
    if _kernels.HAVE_COMPILED:
        backends.append(("compiled", _kernels._compiled))
    rows = []
    dt = 1e-3
    for L in sizes:
        params = ChainParams(L=int(L), drive=7.5)
        damp, drive, rates = site_profiles(params)
        noise_sites = np.flatnonzero(rates > 0.0).astype(np.int64)
        noise_amp = np.sqrt(rates[noise_sites] * dt) / 2.0
        rng = np.random.default_rng(123)
        alpha0 = (rng.standard_normal(L) + 1j * rng.standard_normal(L)) / 2
        normals = rng.standard_normal((n_steps, noise_sites.size, 2))
        finals = {}
        for name, mod in backends:
            best = math.inf
            for _ in range(repeats):
                a = np.ascontiguousarray(alpha0, dtype=np.complex128)
                t0 = time.perf_counter()
                bad = mod.heun_steps(
                    a, None, dt, params.detuning, params.hopping,
                    params.kerr, 1.0, np.ascontiguousarray(damp),
                    np.ascontiguousarray(drive), noise_sites, noise_amp,
                    normals)
                best = min(best, time.perf_counter() - t0)
                if bad >= 0:
                    raise AssertionError("benchmark trajectory diverged")
            finals[name] = a
            rows.append({"backend": name, "L": int(L),
                         "steps_per_s": n_steps / best})
        if len(finals) == 2 and not np.array_equal(finals["python"],
                                                  finals["compiled"]):
            raise AssertionError("backends disagree on the same inputs")
    return rows


def run_bench(cfg: dict, outdir: str) -> None:
    man = _Manifest("bench", cfg, 0)
    rows = benchmark_kernels(tuple(cfg["sizes"]), cfg["n_steps"],
                             cfg["repeats"])
    print(f"{'backend':>10} {'L':>5} {'steps/s':>12}")
    for r in rows:
        print(f"{r['backend']:>10} {r['L']:>5} {r['steps_per_s']:>12.0f}")
    with open(os.path.join(outdir, "bench.csv"), "w") as fh:
        fh.write("backend,L,steps_per_s\n")
        for r in rows:
            fh.write(f"{r['backend']},{r['L']},{r['steps_per_s']:.1f}\n")
    man.write(outdir)


_COMMANDS = {
    "phase-diagram": run_phase_diagram,
    "profile": run_profile,
    "otoc": run_otoc_cmd,
    "rnw-metastability": run_rnw,
    "bench": run_bench,
}


def run_rerun(manifest_path: str, outdir: str) -> None:
    with open(manifest_path) as fh:
        doc = json.load(fh)
    command = doc["command"]
    if command not in _COMMANDS:
        raise SystemExit(f"manifest command {command!r} is not re-runnable")
    _COMMANDS[command](doc["config"], _ensure_outdir(outdir))


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="bosechain",
        description="boundary-driven dissipative chain experiments")
    sub = p.add_subparsers(dest="command", required=True)

    pd = sub.add_parser("phase-diagram",
                        help="drive/length scan of boundary statistics")
    pd.add_argument("--F-grid", default="0:14:0.25",
                    help="drive grid, a:b:step or comma list")
    pd.add_argument("--L-grid", default="10", help="comma list of lengths")
    pd.add_argument("--ntraj", type=int, default=500)
    pd.add_argument("--otoc-ntraj", type=int, default=200)
    pd.add_argument("--tau-max", type=float, default=15.0)
    pd.add_argument("--t-wait", type=float, default=50.0)
    pd.add_argument("--eps", type=float, default=otoc_mod.DEFAULT_EPSILON)
    pd.add_argument("--tmax", type=float, default=80.0)
    pd.add_argument("--transient", type=float, default=40.0)
    pd.add_argument("--seed", type=int,
                    default=presets.SEEDS["phase_diagram"])
    pd.add_argument("--out", required=True)

    pr = sub.add_parser("profile", help="spatial profiles at one (F, L)")
    pr.add_argument("--F", type=float, required=True)
    pr.add_argument("--L", type=int, required=True)
    pr.add_argument("--ntraj", type=int, default=1000)
    pr.add_argument("--tmax", type=float, default=120.0)
    pr.add_argument("--transient", type=float, default=60.0)
    pr.add_argument("--anchor", type=int, default=None,
                    help="g1 anchor site (default L//2)")
    pr.add_argument("--wigner-sites", default="",
                    help="comma list of sites to dump phase-space data for")
    pr.add_argument("--fit", action="store_true",
                    help="fit ansatz families at the wigner sites")
    pr.add_argument("--seed", type=int, default=presets.SEEDS["profile"])
    pr.add_argument("--out", required=True)

    ot = sub.add_parser("otoc", help="phase correlator map and chaos metrics")
    ot.add_argument("--F", type=float, required=True)
    ot.add_argument("--L", type=int, required=True)
    ot.add_argument("--k", type=int, default=1)
    ot.add_argument("--eps", type=float, default=otoc_mod.DEFAULT_EPSILON)
    ot.add_argument("--ntraj", type=int, default=5000)
    ot.add_argument("--t-wait", type=float, default=50.0)
    ot.add_argument("--tau-max", type=float, default=30.0)
    ot.add_argument("--seed", type=int, default=presets.SEEDS["otoc"])
    ot.add_argument("--out", required=True)

    rn = sub.add_parser("rnw-metastability",
                        help="late-time boundary statistics versus size")
    rn.add_argument("--F", type=float, default=12.5)
    rn.add_argument("--L-list", default="50,100,150")
    rn.add_argument("--tmax", default="",
                    help="comma list matching --L-list (default 20 per site)")
    rn.add_argument("--window", type=float, default=50.0)
    rn.add_argument("--ntraj", type=int, default=150)
    rn.add_argument("--eps-frac", type=float, default=0.01,
                    help="tube half-width as a fraction of the final level")
    rn.add_argument("--seed", type=int,
                    default=presets.SEEDS["metastability"])
    rn.add_argument("--out", required=True)

    rc = sub.add_parser("regime-classify",
                        help="label a steady state from its numbers")
    rc.add_argument("--n-L", type=float, required=True)
    rc.add_argument("--delta-n-L", type=float, required=True)
    rc.add_argument("--D-sat", type=float, required=True)
    rc.add_argument("--out", default=None)

    be = sub.add_parser("bench", help="compare kernel backends")
    be.add_argument("--sizes", default="10,100")
    be.add_argument("--n-steps", type=int, default=20_000)
    be.add_argument("--repeats", type=int, default=3)
    be.add_argument("--out", required=True)

    rr = sub.add_parser("rerun", help="re-execute a run manifest")
    rr.add_argument("--manifest", required=True)
    rr.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "phase-diagram":
        cfg = {"drive_grid": _parse_grid(args.F_grid),
               "L_grid": [int(x) for x in _parse_grid(args.L_grid)],
               "n_traj": args.ntraj, "otoc_n_traj": args.otoc_ntraj,
               "tau_max": args.tau_max, "t_wait": args.t_wait,
               "epsilon": args.eps, "t_max": args.tmax,
               "t_transient": args.transient, "dt": 1e-3,
               "sample_stride": 100, "seed": args.seed}
        run_phase_diagram(cfg, _ensure_outdir(args.out))
    elif args.command == "profile":
        sites = [int(x) for x in args.wigner_sites.split(",") if x]
        cfg = {"F": args.F, "L": args.L, "n_traj": args.ntraj,
               "t_max": args.tmax, "t_transient": args.transient,
               "dt": 1e-3, "sample_stride": 100,
               "anchor": args.anchor if args.anchor else args.L // 2,
               "wigner_sites": sites, "fit": bool(args.fit),
               "seed": args.seed}
        run_profile(cfg, _ensure_outdir(args.out))
    elif args.command == "otoc":
        cfg = {"F": args.F, "L": args.L, "k": args.k, "eps": args.eps,
               "n_traj": args.ntraj, "t_wait": args.t_wait,
               "tau_max": args.tau_max, "dt": 1e-3, "sample_stride": 50,
               "seed": args.seed}
        run_otoc_cmd(cfg, _ensure_outdir(args.out))
    elif args.command == "rnw-metastability":
        L_list = [int(x) for x in args.L_list.split(",")]
        if args.tmax:
            t_list = [float(x) for x in args.tmax.split(",")]
            if len(t_list) != len(L_list):
                raise SystemExit("--tmax must match --L-list")
        else:
            t_list = [20.0 * L for L in L_list]
        cfg = {"F": args.F, "L_list": L_list, "t_max_list": t_list,
               "window": args.window, "n_traj": args.ntraj,
               "eps_frac": args.eps_frac, "dt": 1e-3,
               "sample_stride": 100, "seed": args.seed}
        run_rnw(cfg, _ensure_outdir(args.out))
    elif args.command == "regime-classify":
        cfg = {"n_L": args.n_L, "delta_n_L": args.delta_n_L,
               "D_sat": args.D_sat}
        run_regime(cfg, _ensure_outdir(args.out) if args.out else None)
    elif args.command == "bench":
        cfg = {"sizes": [int(x) for x in args.sizes.split(",")],
               "n_steps": args.n_steps, "repeats": args.repeats}
        run_bench(cfg, _ensure_outdir(args.out))
    elif args.command == "rerun":
        run_rerun(args.manifest, args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
