"""Pure-NumPy compute kernels.

Fallback implementations of the hot loops, selected at import time when the
compiled extension is unavailable (see `bosechain._kernels`).  The stochastic
Heun stepper applies floating-point operations in exactly the same order as
the compiled kernel so that both backends produce bit-identical trajectories
for the same noise stream.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def heun_steps(alpha, alpha_b, dt, detuning, hopping, kerr, shift,
               damp, drive, noise_sites, noise_amp, normals):
    """Advance one (or a replica pair of) trajectory by len(normals) steps.

    Stochastic Heun scheme for additive noise: the same noise increment
    enters the predictor and the corrector.  When alpha_b is not None it is
    stepped with the identical increments (shared-noise replica).

    Parameters
    ----------
    alpha, alpha_b : complex ndarray (L,) updated in place; alpha_b may be None.
    dt, detuning, hopping, kerr, shift : scalars of the drift.
    damp : float ndarray (L,), amplitude decay rate per site (rate/2).
    drive : float ndarray (L,), drive amplitude per site.
    noise_sites : int64 ndarray, sites receiving noise.
    noise_amp : float ndarray, per-noisy-site increment amplitude
        sqrt(rate*dt)/2 for quadrature normals.
    normals : float ndarray (n_steps, n_noisy, 2), standard normals.

    Returns
    -------
    int : -1 on success, else the step index at which a nonfinite or
    runaway (|alpha|^2 > 1e30) value was detected.
    """
    n_steps = normals.shape[0]
    L = alpha.shape[0]
    nn = noise_sites.shape[0]
    clin = (1j * detuning) - damp
    drive_c = (-1j) * drive
    halfdt = 0.5 * dt
    inc = np.zeros(L, dtype=np.complex128)
    k1 = np.empty(L, dtype=np.complex128)
    k2 = np.empty(L, dtype=np.complex128)
    atmp = np.empty(L, dtype=np.complex128)
    nb = np.empty(L, dtype=np.complex128)

    def _drift(a, out):
        # Operation order mirrors the compiled kernel: linear, Kerr,
        # hopping, drive; |a|^2 formed as re*re + im*im.
        np.multiply(clin, a, out=out)
        n = a.real * a.real + a.imag * a.imag
        kc = kerr * (n - shift)
        out += (kc * a) * (-1j)
        nb[:] = 0.0
        nb[1:] += a[:-1]
        nb[:-1] += a[1:]
        out += (1j * hopping) * nb
        out += drive_c
        return n.max()

    for s in range(n_steps):
        if nn:
            inc[noise_sites] = (noise_amp * normals[s, :, 0]) \
                + 1j * (noise_amp * normals[s, :, 1])
        maxn = _drift(alpha, k1)
        if not maxn <= 1e30:
            return s
        np.multiply(k1, dt, out=atmp)
        atmp += alpha
        atmp += inc
        _drift(atmp, k2)
        k2 += k1
        np.multiply(k2, halfdt, out=atmp)
        alpha += atmp
        alpha += inc
        if alpha_b is not None:
            maxn = _drift(alpha_b, k1)
            if not maxn <= 1e30:
                return s
            np.multiply(k1, dt, out=atmp)
            atmp += alpha_b
            atmp += inc
            _drift(atmp, k2)
            k2 += k1
            np.multiply(k2, halfdt, out=atmp)
            alpha_b += atmp
            alpha_b += inc
    return -1


# ---------------------------------------------------------------------------
# Quantum-jump (MCWF) propagation.
#
# Between jumps the state evolves under exp(-i t H_nh) with the non-Hermitian
# H_nh = H - (i/2) sum_j rate_j L_j^dag L_j.  Segments are propagated by an
# adaptive Arnoldi-Krylov exponential; the jump time is located by the
# waiting-time (norm-threshold) construction, bisecting |psi(s)|^2 = r inside
# the Krylov subspace.  The anti-Hermitian part of H_nh is negative
# semidefinite, so the projected propagator never amplifies and the scheme is
# stable at any step size; accuracy is controlled by the residual estimate.
# ---------------------------------------------------------------------------


def _arnoldi(matvec, v0, m, V, hmat):
    """Build an orthonormal Krylov basis of K_m(H, v0); v0 must be normalized.

    Fills V[(m+1, ...)] and hmat[(m+1, m)]; returns the effective dimension
    (smaller than m on happy breakdown).
    """
    V[0] = v0
    for j in range(m):
        w = matvec(V[j])
        for i in range(j + 1):
            hij = np.vdot(V[i], w)
            w -= hij * V[i]
            hmat[i, j] = hij
        hn = np.sqrt(np.vdot(w, w).real)
        hmat[j + 1, j] = hn
        if hn < 1e-13:
            return j + 1
        V[j + 1] = w / hn
    return m


class _Segment:
    """Krylov-subspace propagator for one Arnoldi expansion point."""

    def __init__(self, matvec, psi, m):
        flat = psi.reshape(-1)
        m = min(m, flat.size - 1) if flat.size > 1 else 1
        self.V = np.empty((m + 1,) + psi.shape, dtype=np.complex128)
        hmat = np.zeros((m + 1, m), dtype=np.complex128)
        self.me = _arnoldi(matvec, psi, m, self.V, hmat)
        me = self.me
        self.hlast = abs(hmat[me, me - 1])
        hs = hmat[:me, :me].copy()
        self.shift = np.trace(hs) / me
        hs[np.diag_indices(me)] -= self.shift
        self.lam, Z = np.linalg.eig(hs)
        e1 = np.zeros(me, dtype=np.complex128)
        e1[0] = 1.0
        self.Z = Z
        self.w = np.linalg.solve(Z, e1)
        self.breakdown = self.hlast < 1e-13

    def coeffs(self, s):
        """Subspace coefficients of exp(-i s H) v0 (v0 normalized)."""
        u = self.Z @ (np.exp(-1j * s * self.lam) * self.w)
        return u * np.exp(-1j * s * self.shift)

    def norm2(self, s):
        u = self.coeffs(s)
        return np.vdot(u, u).real

    def error(self, s):
        """Residual-based local error estimate for a step of length s."""
        if self.breakdown:
            return 0.0
        return self.hlast * abs(self.coeffs(s)[-1]) * s

    def state(self, s):
        u = self.coeffs(s)
        return np.tensordot(u, self.V[: self.me], axes=(0, 0))


def _mcwf_engine(matvec, jump_weights, jump_apply, obs_eval, psi, dt_obs,
                 traces, gen, m=12, tol=1e-8):
    """Shared quantum-jump trajectory driver.

    matvec(psi) -> H_nh @ psi; jump_weights(psi) -> per-channel rates
    rate_j * |L_j psi|^2; jump_apply(psi, j) -> unnormalized L_j psi;
    obs_eval(psi_normalized, out_row) records one sample.  traces has shape
    (n_samples, n_obs); sample k is taken at time k*dt_obs.  Returns the
    number of jumps.
    """
    n_samples = traces.shape[0]
    t_end = (n_samples - 1) * dt_obs
    eps = 1e-9
    psi = psi / np.sqrt(np.vdot(psi, psi).real)
    obs_eval(psi, traces[0])
    next_k = 1
    t = 0.0
    n_jumps = 0
    logq = 0.0
    logr = np.log(max(gen.random(), 1e-300))
    dt_try = dt_obs
    while t < t_end - eps and next_k < n_samples:
        seg = _Segment(matvec, psi, m)
        delta = min(dt_try, t_end - t)
        while True:
            if seg.error(delta) <= tol or seg.breakdown:
                break
            delta *= 0.5
            if delta < 1e-12 * max(1.0, t_end):
                raise RuntimeError("Krylov step underflow in jump propagation")
        if seg.error(delta) <= 0.25 * tol and delta == min(dt_try, t_end - t):
            dt_try = min(dt_try * 1.4, 10.0 * dt_obs)
        else:
            dt_try = max(delta, 1e-12)
        n2_end = seg.norm2(delta)
        if logq + np.log(n2_end) <= logr:
            # jump inside (t, t+delta]: bisect the norm crossing
            lo, hi = 0.0, delta
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                if logq + np.log(seg.norm2(mid)) > logr:
                    lo = mid
                else:
                    hi = mid
                if hi - lo < 1e-13 * max(delta, 1e-6):
                    break
            s_star = hi
            while next_k < n_samples and (next_k * dt_obs) <= t + s_star + eps:
                st = seg.state(next_k * dt_obs - t)
                st /= np.sqrt(np.vdot(st, st).real)
                obs_eval(st, traces[next_k])
                next_k += 1
            psi_j = seg.state(s_star)
            weights = np.asarray(jump_weights(psi_j), dtype=float)
            tot = weights.sum()
            if tot > 0.0:
                u = gen.random() * tot
                ch = 0
                acc = weights[0]
                while acc < u and ch < weights.size - 1:
                    ch += 1
                    acc += weights[ch]
                psi_new = jump_apply(psi_j, ch)
                nrm = np.sqrt(np.vdot(psi_new, psi_new).real)
                if nrm > 0:
                    psi = psi_new / nrm
                    n_jumps += 1
                else:  # jump annihilated the state; keep pre-jump state
                    psi = psi_j / np.sqrt(np.vdot(psi_j, psi_j).real)
            else:
                psi = psi_j / np.sqrt(np.vdot(psi_j, psi_j).real)
            t += s_star
            logq = 0.0
            logr = np.log(max(gen.random(), 1e-300))
        else:
            while next_k < n_samples and (next_k * dt_obs) <= t + delta + eps:
                st = seg.state(next_k * dt_obs - t)
                st /= np.sqrt(np.vdot(st, st).real)
                obs_eval(st, traces[next_k])
                next_k += 1
            psi = seg.state(delta)
            psi /= np.sqrt(n2_end)
            logq += np.log(n2_end)
            t += delta
    while next_k < n_samples:  # guard against epsilon misses at t_end
        obs_eval(psi, traces[next_k])
        next_k += 1
    return n_jumps


def mcwf_chain(psi, diag, sq1, sq2, jhop, drive, gamma1, gamma2, dt_obs,
               traces, gen, m=12, tol=1e-8):
    """Quantum-jump trajectory for the two-site chain in a Fock-grid layout.

    psi : complex (d1, d2) initial wavefunction on occupation pairs
    (n1, n2), not modified; diag holds the complex diagonal of H_nh;
    sq1/sq2 are sqrt(n) tables.  traces gains 5 columns per sample:
    <n1>, <n2>, <n1(n1-1)>, <n2(n2-1)>, top-two-level population.  Returns
    the jump count.
    """
    d1, d2 = psi.shape
    n1 = np.arange(d1, dtype=float)[:, None]
    n2 = np.arange(d2, dtype=float)[None, :]
    wn1 = np.broadcast_to(n1, (d1, d2))
    wn2 = np.broadcast_to(n2, (d1, d2))
    wnn1 = wn1 * (wn1 - 1.0)
    wnn2 = wn2 * (wn2 - 1.0)
    wleak = ((wn1 >= d1 - 2) | (wn2 >= d2 - 2)).astype(float)
    hop_c = (-jhop) * np.outer(sq1[1:], sq2[1:])
    dr_c = drive * sq1[1:]

    def matvec(p):
        out = diag * p
        if jhop != 0.0:
            out[1:, :-1] += hop_c * p[:-1, 1:]
            out[:-1, 1:] += hop_c * p[1:, :-1]
        if drive != 0.0:
            out[:-1, :] += dr_c[:, None] * p[1:, :]
            out[1:, :] += dr_c[:, None] * p[:-1, :]
        return out

    def jump_weights(p):
        dens = p.real * p.real + p.imag * p.imag
        return np.array([gamma1 * float((wn1 * dens).sum()),
                         gamma2 * float((wn2 * dens).sum())])

    def jump_apply(p, ch):
        out = np.zeros_like(p)
        if ch == 0:
            out[:-1, :] = sq1[1:, None] * p[1:, :]
        else:
            out[:, :-1] = sq2[None, 1:] * p[:, 1:]
        return out

    def obs_eval(p, row):
        dens = p.real * p.real + p.imag * p.imag
        row[0] = float((wn1 * dens).sum())
        row[1] = float((wn2 * dens).sum())
        row[2] = float((wnn1 * dens).sum())
        row[3] = float((wnn2 * dens).sum())
        row[4] = float((wleak * dens).sum())
    return _mcwf_engine(matvec, jump_weights, jump_apply, obs_eval, psi,
                        dt_obs, traces, gen, m=m, tol=tol)


def mcwf_csr(psi, h_nh, channels, obs, dt_obs, traces, gen, m=12, tol=1e-8):
    """Quantum-jump trajectory for a generic model in sparse form.

    h_nh : scipy CSR non-Hermitian Hamiltonian; channels : list of
    (rate, csr_operator); obs : (n_obs, dim) real diagonal observable
    weights evaluated as <psi| diag(w) |psi>.  Returns the jump count.
    """
    rates = [float(r) for r, _ in channels]
    ops = [op for _, op in channels]

    def matvec(p):
        return h_nh @ p

    def jump_weights(p):
        return [r * float(np.vdot(op @ p, op @ p).real) for r, op in zip(rates, ops)]

    def jump_apply(p, ch):
        return ops[ch] @ p

    def obs_eval(p, row):
        dens = p.real * p.real + p.imag * p.imag
        row[:] = obs @ dens
    return _mcwf_engine(matvec, jump_weights, jump_apply, obs_eval, psi,
                        dt_obs, traces, gen, m=m, tol=tol)
