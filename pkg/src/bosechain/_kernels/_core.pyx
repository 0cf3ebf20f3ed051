# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled compute kernels.

Mirrors bosechain._kernels.pure: a stochastic Heun stepper for chain
trajectories (bit-compatible operation order with the pure backend) and an
adaptive Arnoldi-Krylov quantum-jump propagator on a two-mode Fock grid.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, exp, fabs, log, sin, sqrt
from libc.stdlib cimport free, malloc
from scipy.linalg.cython_lapack cimport zgeev, zgesv

cnp.import_array()

BACKEND = "compiled"


cdef double _drift_ri(Py_ssize_t L, double* are, double* aim,
                      double* kre, double* kim,
                      double detuning, double hopping, double kerr,
                      double shift, double* damp, double* drive) noexcept nogil:
    """Drift on split re/im arrays; returns max |alpha|^2 (1e301 on NaN).

    Term order (linear, Kerr, hopping, drive) and the elementary operations
    match the pure backend so both produce identical floating-point values.
    """
    cdef Py_ssize_t l
    cdef double xr, xi, n, kc, lre, lim, nbre, nbim, mx = 0.0
    for l in range(L):
        xr = are[l]
        xi = aim[l]
        n = xr * xr + xi * xi
        if n > mx:
            mx = n
        elif not (n == n):
            mx = 1e301
        lre = (-damp[l]) * xr - detuning * xi
        lim = (-damp[l]) * xi + detuning * xr
        kc = kerr * (n - shift)
        lre = lre + kc * xi
        lim = lim - kc * xr
        nbre = 0.0
        nbim = 0.0
        if l > 0:
            nbre = nbre + are[l - 1]
            nbim = nbim + aim[l - 1]
        if l < L - 1:
            nbre = nbre + are[l + 1]
            nbim = nbim + aim[l + 1]
        lre = lre - hopping * nbim
        lim = lim + hopping * nbre
        lim = lim - drive[l]
        kre[l] = lre
        kim[l] = lim
    return mx


def heun_steps(double complex[::1] alpha, object alpha_b_obj,
               double dt, double detuning, double hopping, double kerr,
               double shift, double[::1] damp, double[::1] drive,
               cnp.int64_t[::1] noise_sites, double[::1] noise_amp,
               double[:, :, ::1] normals):
    """Compiled mirror of pure.heun_steps; see that docstring."""
    cdef Py_ssize_t L = alpha.shape[0]
    cdef Py_ssize_t n_steps = normals.shape[0]
    cdef Py_ssize_t nn = noise_sites.shape[0]
    cdef bint has_b = alpha_b_obj is not None
    cdef double complex[::1] bview
    if has_b:
        bview = alpha_b_obj
    cdef double* buf = <double*> malloc(12 * L * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    cdef double* sre = buf
    cdef double* sim = buf + L
    cdef double* bre = buf + 2 * L
    cdef double* bim = buf + 3 * L
    cdef double* k1re = buf + 4 * L
    cdef double* k1im = buf + 5 * L
    cdef double* k2re = buf + 6 * L
    cdef double* k2im = buf + 7 * L
    cdef double* atre = buf + 8 * L
    cdef double* atim = buf + 9 * L
    cdef double* incre = buf + 10 * L
    cdef double* incim = buf + 11 * L
    cdef Py_ssize_t s, l, k, site
    cdef double halfdt = 0.5 * dt
    cdef double maxn, amp, sm
    cdef Py_ssize_t bad = -1
    for l in range(L):
        sre[l] = alpha[l].real
        sim[l] = alpha[l].imag
        incre[l] = 0.0
        incim[l] = 0.0
        if has_b:
            bre[l] = bview[l].real
            bim[l] = bview[l].imag
    for s in range(n_steps):
        for k in range(nn):
            site = noise_sites[k]
            amp = noise_amp[k]
            incre[site] = amp * normals[s, k, 0]
            incim[site] = amp * normals[s, k, 1]
        maxn = _drift_ri(L, sre, sim, k1re, k1im, detuning, hopping, kerr,
                         shift, &damp[0], &drive[0])
        if not (maxn <= 1e30):
            bad = s
            break
        for l in range(L):
            atre[l] = (dt * k1re[l] + sre[l]) + incre[l]
            atim[l] = (dt * k1im[l] + sim[l]) + incim[l]
        _drift_ri(L, atre, atim, k2re, k2im, detuning, hopping, kerr,
                  shift, &damp[0], &drive[0])
        for l in range(L):
            sm = k2re[l] + k1re[l]
            sre[l] = sre[l] + halfdt * sm
            sre[l] = sre[l] + incre[l]
            sm = k2im[l] + k1im[l]
            sim[l] = sim[l] + halfdt * sm
            sim[l] = sim[l] + incim[l]
        if has_b:
            maxn = _drift_ri(L, bre, bim, k1re, k1im, detuning, hopping,
                             kerr, shift, &damp[0], &drive[0])
            if not (maxn <= 1e30):
                bad = s
                break
            for l in range(L):
                atre[l] = (dt * k1re[l] + bre[l]) + incre[l]
                atim[l] = (dt * k1im[l] + bim[l]) + incim[l]
            _drift_ri(L, atre, atim, k2re, k2im, detuning, hopping, kerr,
                      shift, &damp[0], &drive[0])
            for l in range(L):
                sm = k2re[l] + k1re[l]
                bre[l] = bre[l] + halfdt * sm
                bre[l] = bre[l] + incre[l]
                sm = k2im[l] + k1im[l]
                bim[l] = bim[l] + halfdt * sm
                bim[l] = bim[l] + incim[l]
    for l in range(L):
        alpha[l] = sre[l] + 1j * sim[l]
        if has_b:
            bview[l] = bre[l] + 1j * bim[l]
    free(buf)
    return bad


# ---------------------------------------------------------------------------
# Quantum-jump propagation on a two-mode Fock grid (see pure.py for the
# algorithm).  State layout: psi[n1 * d2 + n2].  Complex products in the hot
# loops are written out in real arithmetic to avoid libgcc complex-multiply
# calls.
# ---------------------------------------------------------------------------


cdef void _matvec_chain(Py_ssize_t d1, Py_ssize_t d2,
                        double* dre, double* dim_, double* sq1, double* sq2,
                        double jhop, double drive,
                        double* pre, double* pim,
                        double* ore, double* oim) noexcept nogil:
    cdef Py_ssize_t i1, i2, base, idx
    cdef double vr, vi, c
    for i1 in range(d1):
        base = i1 * d2
        for i2 in range(d2):
            idx = base + i2
            vr = dre[idx] * pre[idx] - dim_[idx] * pim[idx]
            vi = dre[idx] * pim[idx] + dim_[idx] * pre[idx]
            if jhop != 0.0:
                if i1 > 0 and i2 < d2 - 1:
                    c = -jhop * sq1[i1] * sq2[i2 + 1]
                    vr += c * pre[idx - d2 + 1]
                    vi += c * pim[idx - d2 + 1]
                if i1 < d1 - 1 and i2 > 0:
                    c = -jhop * sq1[i1 + 1] * sq2[i2]
                    vr += c * pre[idx + d2 - 1]
                    vi += c * pim[idx + d2 - 1]
            if drive != 0.0:
                if i1 < d1 - 1:
                    c = drive * sq1[i1 + 1]
                    vr += c * pre[idx + d2]
                    vi += c * pim[idx + d2]
                if i1 > 0:
                    c = drive * sq1[i1]
                    vr += c * pre[idx - d2]
                    vi += c * pim[idx - d2]
            ore[idx] = vr
            oim[idx] = vi


cdef void _coeffs(Py_ssize_t me, double s, double complex* lam,
                  double complex* Z, double complex* w,
                  double shre, double shim, double complex* tmp,
                  double complex* u) noexcept nogil:
    """u = exp(-i s shift) * Z @ (exp(-i s lam) * w), Z column-major."""
    cdef Py_ssize_t i, k
    cdef double er, ph, fr, fi, ar, ai, zr, zi
    for k in range(me):
        er = exp(s * lam[k].imag)
        ph = -s * lam[k].real
        fr = er * cos(ph)
        fi = er * sin(ph)
        ar = w[k].real
        ai = w[k].imag
        tmp[k] = (fr * ar - fi * ai) + 1j * (fr * ai + fi * ar)
    er = exp(s * shim)
    ph = -s * shre
    fr = er * cos(ph)
    fi = er * sin(ph)
    for i in range(me):
        ar = 0.0
        ai = 0.0
        for k in range(me):
            zr = Z[i + k * me].real
            zi = Z[i + k * me].imag
            ar += zr * tmp[k].real - zi * tmp[k].imag
            ai += zr * tmp[k].imag + zi * tmp[k].real
        u[i] = (fr * ar - fi * ai) + 1j * (fr * ai + fi * ar)


cdef inline double _norm2_u(Py_ssize_t me, double complex* u) noexcept nogil:
    cdef Py_ssize_t i
    cdef double n2 = 0.0
    for i in range(me):
        n2 += u[i].real * u[i].real + u[i].imag * u[i].imag
    return n2


cdef void _state_into(Py_ssize_t me, Py_ssize_t dim, double complex* u,
                      double* Vre, double* Vim,
                      double* ore, double* oim) noexcept nogil:
    cdef Py_ssize_t i, k, off
    cdef double ur, ui
    for i in range(dim):
        ore[i] = 0.0
        oim[i] = 0.0
    for k in range(me):
        ur = u[k].real
        ui = u[k].imag
        off = k * dim
        for i in range(dim):
            ore[i] += ur * Vre[off + i] - ui * Vim[off + i]
            oim[i] += ur * Vim[off + i] + ui * Vre[off + i]


cdef void _obs_row(Py_ssize_t dim, double* wt, double* pre, double* pim,
                   double* row) noexcept nogil:
    cdef Py_ssize_t i, r
    cdef double dens, tot = 0.0
    cdef double acc[5]
    for r in range(5):
        acc[r] = 0.0
    for i in range(dim):
        dens = pre[i] * pre[i] + pim[i] * pim[i]
        tot += dens
        for r in range(5):
            acc[r] += wt[r * dim + i] * dens
    if tot > 0.0:
        for r in range(5):
            row[r] = acc[r] / tot
    else:
        for r in range(5):
            row[r] = 0.0


cdef void _jump_chain(Py_ssize_t d1, Py_ssize_t d2, Py_ssize_t ch,
                      double* sq1, double* sq2,
                      double* pre, double* pim,
                      double* ore, double* oim) noexcept nogil:
    cdef Py_ssize_t i1, i2, idx
    cdef double c
    for idx in range(d1 * d2):
        ore[idx] = 0.0
        oim[idx] = 0.0
    if ch == 0:
        for i1 in range(d1 - 1):
            c_row_scale(d2, sq1[i1 + 1], pre + (i1 + 1) * d2, pim + (i1 + 1) * d2,
                        ore + i1 * d2, oim + i1 * d2)
    else:
        for i1 in range(d1):
            for i2 in range(d2 - 1):
                idx = i1 * d2 + i2
                c = sq2[i2 + 1]
                ore[idx] = c * pre[idx + 1]
                oim[idx] = c * pim[idx + 1]


cdef inline void c_row_scale(Py_ssize_t n, double c, double* xre, double* xim,
                             double* ore, double* oim) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(n):
        ore[i] = c * xre[i]
        oim[i] = c * xim[i]


def mcwf_chain(double complex[:, ::1] psi0, double complex[:, ::1] diag,
               double[::1] sq1, double[::1] sq2,
               double jhop, double drive, double gamma1, double gamma2,
               double dt_obs, double[:, ::1] traces, object gen,
               Py_ssize_t m=12, double tol=1e-8):
    """Compiled mirror of pure.mcwf_chain; see that docstring."""
    cdef Py_ssize_t d1 = psi0.shape[0]
    cdef Py_ssize_t d2 = psi0.shape[1]
    cdef Py_ssize_t dim = d1 * d2
    cdef Py_ssize_t n_samples = traces.shape[0]
    if traces.shape[1] != 5:
        raise ValueError("traces must have 5 columns")
    if m > dim - 1:
        m = dim - 1
    if m < 1:
        m = 1
    cdef double t_end = (n_samples - 1) * dt_obs
    cdef double eps = 1e-9
    cdef double dmin = 1e-12 * (t_end if t_end > 1.0 else 1.0)
    cdef double bis_tol

    # split-complex workspace: Krylov basis, state + scratch, diag, weights
    cdef cnp.ndarray[cnp.float64_t, ndim=1] wk = np.empty(
        2 * dim * (m + 1) + 13 * dim, dtype=np.float64)
    cdef double* Vre = <double*> wk.data
    cdef double* Vim = Vre + dim * (m + 1)
    cdef double* pre = Vim + dim * (m + 1)
    cdef double* pim = pre + dim
    cdef double* wre = pim + dim
    cdef double* wim = wre + dim
    cdef double* jre = wim + dim
    cdef double* jim = jre + dim
    cdef double* dre = jim + dim
    cdef double* dim_ = dre + dim
    cdef double* wt = dim_ + dim

    cdef Py_ssize_t i1, i2, i, j, k, me, ch, next_k, n_jumps
    for i1 in range(d1):
        for i2 in range(d2):
            i = i1 * d2 + i2
            pre[i] = psi0[i1, i2].real
            pim[i] = psi0[i1, i2].imag
            dre[i] = diag[i1, i2].real
            dim_[i] = diag[i1, i2].imag
            wt[i] = i1
            wt[dim + i] = i2
            wt[2 * dim + i] = i1 * (i1 - 1.0)
            wt[3 * dim + i] = i2 * (i2 - 1.0)
            wt[4 * dim + i] = 1.0 if (i1 >= d1 - 2 or i2 >= d2 - 2) else 0.0

    cdef Py_ssize_t mm = m + 1
    cdef int lwork = 64 * (m + 1)
    cdef double complex* hb = <double complex*> malloc(
        (mm * mm + 2 * m * m + 4 * m + lwork) * sizeof(double complex))
    if hb == NULL:
        raise MemoryError()
    cdef double complex* af = hb + mm * mm
    cdef double complex* vr = af + m * m
    cdef double complex* lam = vr + m * m
    cdef double complex* wco = lam + m
    cdef double complex* usm = wco + m
    cdef double complex* tsm = usm + m
    cdef double complex* work = tsm + m
    cdef double* rwork = <double*> malloc(2 * m * sizeof(double))
    cdef int* ipiv = <int*> malloc(m * sizeof(int))
    if rwork == NULL or ipiv == NULL:
        free(hb)
        raise MemoryError()

    cdef double nrm, hn, hlast, shre, shim, delta, dcap, dt_try, n2_end
    cdef double t, logq, logr, lo, hi, mid, s_star, w1, w2, tot, u01
    cdef double dr_, di_, xr, xi
    cdef bint breakdown
    cdef int info = 0, nint, nrhs = 1, ldvl = 1
    cdef char jobvl = b'N'
    cdef char jobvr = b'V'
    cdef double complex vl_dummy[1]
    cdef double complex czero = 0.0

    nrm = 0.0
    for i in range(dim):
        nrm += pre[i] * pre[i] + pim[i] * pim[i]
    nrm = sqrt(nrm)
    for i in range(dim):
        pre[i] /= nrm
        pim[i] /= nrm
    _obs_row(dim, wt, pre, pim, &traces[0, 0])

    t = 0.0
    logq = 0.0
    n_jumps = 0
    next_k = 1
    logr = log(max(gen.random(), 1e-300))
    dt_try = dt_obs
    while t < t_end - eps and next_k < n_samples:
        # Arnoldi expansion at the normalized state
        for i in range(dim):
            Vre[i] = pre[i]
            Vim[i] = pim[i]
        me = m
        breakdown = False
        for j in range(m):
            _matvec_chain(d1, d2, dre, dim_, &sq1[0], &sq2[0], jhop, drive,
                          Vre + j * dim, Vim + j * dim, wre, wim)
            for i in range(j + 1):
                dr_ = 0.0
                di_ = 0.0
                for k in range(dim):
                    xr = Vre[i * dim + k]
                    xi = Vim[i * dim + k]
                    dr_ += xr * wre[k] + xi * wim[k]
                    di_ += xr * wim[k] - xi * wre[k]
                for k in range(dim):
                    wre[k] -= dr_ * Vre[i * dim + k] - di_ * Vim[i * dim + k]
                    wim[k] -= dr_ * Vim[i * dim + k] + di_ * Vre[i * dim + k]
                hb[i * mm + j] = dr_ + 1j * di_
            hn = 0.0
            for k in range(dim):
                hn += wre[k] * wre[k] + wim[k] * wim[k]
            hn = sqrt(hn)
            hb[(j + 1) * mm + j] = hn
            if hn < 1e-13:
                me = j + 1
                breakdown = True
                break
            for k in range(dim):
                Vre[(j + 1) * dim + k] = wre[k] / hn
                Vim[(j + 1) * dim + k] = wim[k] / hn
        hlast = fabs(hb[me * mm + (me - 1)].real)
        shre = 0.0
        shim = 0.0
        for i in range(me):
            shre += hb[i * mm + i].real
            shim += hb[i * mm + i].imag
        shre /= me
        shim /= me
        for j in range(me):
            for i in range(me):
                af[i + j * me] = hb[i * mm + j] if i <= j + 1 else czero
            af[j + j * me] = af[j + j * me] - (shre + 1j * shim)
        nint = <int> me
        zgeev(&jobvl, &jobvr, &nint, af, &nint, lam, vl_dummy, &ldvl,
              vr, &nint, work, &lwork, rwork, &info)
        if info != 0:
            raise RuntimeError(f"zgeev failed with info={info}")
        for i in range(me * me):
            af[i] = vr[i]
        for i in range(me):
            wco[i] = czero
        wco[0] = 1.0
        zgesv(&nint, &nrhs, af, &nint, ipiv, wco, &nint, &info)
        if info != 0:
            raise RuntimeError(f"zgesv failed with info={info}")

        dcap = dt_try if dt_try < t_end - t else t_end - t
        delta = dcap
        while True:
            _coeffs(me, delta, lam, vr, wco, shre, shim, tsm, usm)
            if breakdown or hlast * _cabs(usm[me - 1]) * delta <= tol:
                break
            delta *= 0.5
            if delta < dmin:
                raise RuntimeError("Krylov step underflow in jump propagation")
        if delta == dcap and hlast * _cabs(usm[me - 1]) * delta <= 0.25 * tol:
            dt_try = dt_try * 1.4
            if dt_try > 10.0 * dt_obs:
                dt_try = 10.0 * dt_obs
        else:
            dt_try = delta if delta > 1e-12 else 1e-12
        n2_end = _norm2_u(me, usm)
        if logq + log(n2_end) <= logr:
            lo = 0.0
            hi = delta
            bis_tol = 1e-13 * (delta if delta > 1e-6 else 1e-6)
            for k in range(60):
                mid = 0.5 * (lo + hi)
                _coeffs(me, mid, lam, vr, wco, shre, shim, tsm, usm)
                if logq + log(_norm2_u(me, usm)) > logr:
                    lo = mid
                else:
                    hi = mid
                if hi - lo < bis_tol:
                    break
            s_star = hi
            while next_k < n_samples and next_k * dt_obs <= t + s_star + eps:
                _coeffs(me, next_k * dt_obs - t, lam, vr, wco, shre, shim, tsm, usm)
                _state_into(me, dim, usm, Vre, Vim, wre, wim)
                _obs_row(dim, wt, wre, wim, &traces[next_k, 0])
                next_k += 1
            _coeffs(me, s_star, lam, vr, wco, shre, shim, tsm, usm)
            _state_into(me, dim, usm, Vre, Vim, pre, pim)
            w1 = 0.0
            w2 = 0.0
            for i in range(dim):
                mid = pre[i] * pre[i] + pim[i] * pim[i]
                w1 += wt[i] * mid
                w2 += wt[dim + i] * mid
            w1 *= gamma1
            w2 *= gamma2
            tot = w1 + w2
            if tot > 0.0:
                u01 = gen.random() * tot
                ch = 0 if u01 < w1 else 1
                _jump_chain(d1, d2, ch, &sq1[0], &sq2[0], pre, pim, jre, jim)
                nrm = 0.0
                for i in range(dim):
                    nrm += jre[i] * jre[i] + jim[i] * jim[i]
                if nrm > 0.0:
                    nrm = sqrt(nrm)
                    for i in range(dim):
                        pre[i] = jre[i] / nrm
                        pim[i] = jim[i] / nrm
                    n_jumps += 1
                else:
                    _normalize_ri(dim, pre, pim)
            else:
                _normalize_ri(dim, pre, pim)
            t += s_star
            logq = 0.0
            logr = log(max(gen.random(), 1e-300))
        else:
            while next_k < n_samples and next_k * dt_obs <= t + delta + eps:
                _coeffs(me, next_k * dt_obs - t, lam, vr, wco, shre, shim, tsm, usm)
                _state_into(me, dim, usm, Vre, Vim, wre, wim)
                _obs_row(dim, wt, wre, wim, &traces[next_k, 0])
                next_k += 1
            _coeffs(me, delta, lam, vr, wco, shre, shim, tsm, usm)
            _state_into(me, dim, usm, Vre, Vim, pre, pim)
            nrm = sqrt(n2_end)
            for i in range(dim):
                pre[i] /= nrm
                pim[i] /= nrm
            logq += log(n2_end)
            t += delta
    while next_k < n_samples:
        _obs_row(dim, wt, pre, pim, &traces[next_k, 0])
        next_k += 1
    free(hb)
    free(rwork)
    free(ipiv)
    return n_jumps


cdef inline double _cabs(double complex z) noexcept nogil:
    return sqrt(z.real * z.real + z.imag * z.imag)


cdef void _normalize_ri(Py_ssize_t dim, double* pre, double* pim) noexcept nogil:
    cdef Py_ssize_t i
    cdef double nrm = 0.0
    for i in range(dim):
        nrm += pre[i] * pre[i] + pim[i] * pim[i]
    nrm = sqrt(nrm)
    if nrm > 0.0:
        for i in range(dim):
            pre[i] /= nrm
            pim[i] /= nrm
