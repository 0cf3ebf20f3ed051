"""Exact open-system engines on truncated Fock spaces.

Small enough problems admit direct density-matrix treatment: impurity
models with configurable gain/loss/dephasing/two-photon channels, the
driven Kerr mode, and the two-site chain.  The module provides Gibbs
states, Liouvillian steady states with uniqueness diagnostics, exact
Wigner functions, master-equation time evolution, and quantum-jump
trajectory averages that benchmark the stochastic sampler.

Conventions: a Fock space with cutoff M keeps occupations 0..M (M+1
levels per mode); steady states carry their solver diagnostics in
``solve_info``.
"""

from __future__ import annotations

import json
import math
import struct
import warnings

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import expm_multiply

from . import _kernels
from .model import ChainParams, NoisePolicy, site_profiles
from .wigner import default_extent, fock_wigner_basis, save_wigner_grid

#: steady-state population allowed in the top two levels of each mode
LEAKAGE_TOL = 1e-6

#: Liouvillian residual bound a converged steady state must satisfy
RESIDUAL_TOL = 1e-9

_RHO_MAGIC = b"BRHO"
_RHO_VERSION = 1
_RHO_HEAD = "<4sIIII12x"


def mu_over_T_from_rates(gamma_up: float, gamma_down: float) -> float:
    """Effective chemical potential over temperature set by a gain/loss pair."""
    if gamma_up <= 0 or gamma_down <= 0:
        raise ValueError("need positive gain and loss rates")
    return math.log(gamma_up / gamma_down)


class FockSpace:
    """Truncated bosonic Hilbert space: occupations 0..M on 1 or 2 modes."""

    def __init__(self, M: int, modes: int = 1):
        if M < 2:
            raise ValueError("cutoff must be at least 2")
        if modes not in (1, 2):
            raise ValueError("only 1- and 2-mode spaces are supported")
        self.M = int(M)
        self.modes = int(modes)

    @property
    def levels(self) -> int:
        return self.M + 1

    @property
    def dim(self) -> int:
        return self.levels ** self.modes

    def destroy(self) -> np.ndarray:
        """Single-mode lowering operator (dense)."""
        d = self.levels
        a = np.zeros((d, d), dtype=complex)
        n = np.arange(1, d)
        a[n - 1, n] = np.sqrt(n)
        return a

    def number(self) -> np.ndarray:
        return np.diag(np.arange(self.levels, dtype=float)).astype(complex)

    def __eq__(self, other):
        return (isinstance(other, FockSpace)
                and (self.M, self.modes) == (other.M, other.modes))

    def __repr__(self):
        return f"FockSpace(M={self.M}, modes={self.modes})"


class DensityMatrix:
    """State of a truncated mode (or mode pair) with validity checks."""

    def __init__(self, rho: np.ndarray, space: FockSpace):
        rho = np.asarray(rho, dtype=complex)
        if rho.shape != (space.dim, space.dim):
            raise ValueError(
                f"matrix shape {rho.shape} does not match dim {space.dim}")
        self.rho = rho
        self.space = space
        self.solve_info: dict = {}

    def validate(self, atol_herm=1e-12, atol_trace=1e-10, atol_pos=1e-10):
        """Raise unless Hermitian, unit trace, and positive within tolerance."""
        herm = np.abs(self.rho - self.rho.conj().T).max()
        if herm > atol_herm:
            raise ValueError(f"not Hermitian: deviation {herm:.3e}")
        tr = self.rho.trace()
        if abs(tr - 1.0) > atol_trace:
            raise ValueError(f"trace {tr:.12g} is not 1")
        lam = np.linalg.eigvalsh(self.rho)
        if lam.min() < -atol_pos:
            raise ValueError(f"negative eigenvalue {lam.min():.3e}")
        return self

    def populations(self) -> np.ndarray:
        """Occupation probabilities; joint grid (levels, levels) for 2 modes."""
        p = np.diag(self.rho).real
        if self.space.modes == 2:
            return p.reshape(self.space.levels, self.space.levels)
        return p

    def reduced(self, mode: int) -> "DensityMatrix":
        """Partial trace onto one mode of a pair."""
        if self.space.modes != 2:
            raise ValueError("reduced() needs a 2-mode state")
        l_ = self.space.levels
        r4 = self.rho.reshape(l_, l_, l_, l_)
        if mode == 1:
            red = np.einsum("abcb->ac", r4)
        elif mode == 2:
            red = np.einsum("abad->bd", r4)
        else:
            raise ValueError("mode must be 1 or 2")
        return DensityMatrix(red, FockSpace(self.space.M, 1))

    def mean_n(self, mode: int = 1) -> float:
        p = self.populations()
        n = np.arange(self.space.levels, dtype=float)
        if self.space.modes == 2:
            return float((p.sum(axis=2 - mode) * n).sum())
        return float(np.dot(p, n))

    def delta_n(self, mode: int = 1) -> float:
        """Normally ordered fluctuation <a+a+aa> - <n>^2."""
        p = self.populations()
        n = np.arange(self.space.levels, dtype=float)
        if self.space.modes == 2:
            p = p.sum(axis=2 - mode)
        nbar = float(np.dot(p, n))
        nn = float(np.dot(p, n * (n - 1.0)))
        return nn - nbar * nbar

    def leakage(self) -> float:
        """Worst per-mode population of the two levels below the cutoff."""
        p = self.populations()
        if self.space.modes == 2:
            return float(max(p.sum(axis=1)[-2:].sum(), p.sum(axis=0)[-2:].sum()))
        return float(p[-2:].sum())

    @property
    def leakage_ok(self) -> bool:
        return self.leakage() < LEAKAGE_TOL

    def purity(self) -> float:
        return float(np.vdot(self.rho, self.rho).real)

    def von_neumann_entropy(self) -> float:
        lam = np.linalg.eigvalsh(self.rho)
        lam = lam[lam > 1e-14]
        return float(-np.sum(lam * np.log(lam)))


class LindbladModel:
    """Hamiltonian plus weighted jump operators on a FockSpace.

    kind/params label the constructor that built the model so it can be
    serialized; ad hoc matrices get kind "generic".
    """

    def __init__(self, h, jumps, space: FockSpace,
                 kind: str = "generic", params: dict | None = None):
        sparse = sp.issparse(h)
        h = h.tocsr().astype(complex) if sparse else np.asarray(h, dtype=complex)
        if h.shape != (space.dim, space.dim):
            raise ValueError("Hamiltonian shape does not match the space")
        herm = abs(h - h.conj().T).max()
        hmax = abs(h).max()
        if herm > 1e-12 * max(1.0, hmax):
            raise ValueError(f"Hamiltonian not Hermitian: deviation {herm:.3e}")
        clean = []
        for rate, op in jumps:
            if rate < 0:
                raise ValueError("jump rates must be nonnegative")
            if rate > 0:
                op = op.tocsr().astype(complex) if sp.issparse(op) \
                    else np.asarray(op, dtype=complex)
                clean.append((float(rate), op))
        self.h = h
        self.jumps = clean
        self.space = space
        self.kind = kind
        self.params = dict(params or {})

    @property
    def dissipative(self) -> bool:
        return bool(self.jumps)

    def h_nh(self) -> np.ndarray:
        """Non-Hermitian effective Hamiltonian H - (i/2) sum rate L+L."""
        out = self.h.astype(complex).copy()
        for rate, op in self.jumps:
            out -= 0.5j * rate * (op.conj().T @ op)
        return out

    def liouvillian(self) -> sp.csr_matrix:
        """Sparse generator acting on row-major flattened density matrices."""
        d = self.space.dim
        eye = sp.identity(d, format="csr", dtype=complex)
        h = sp.csr_matrix(self.h)
        gen = -1j * (sp.kron(h, eye) - sp.kron(eye, h.T))
        for rate, op in self.jumps:
            l_ = sp.csr_matrix(op)
            ldl = (l_.conjugate().transpose() @ l_).tocsr()
            gen = gen + rate * (sp.kron(l_, l_.conjugate())
                                - 0.5 * (sp.kron(ldl, eye)
                                         + sp.kron(eye, ldl.T)))
        return gen.tocsr()

    def population_closed(self) -> bool:
        """True when populations evolve autonomously: diagonal Hamiltonian
        and every jump operator maps Fock states to single Fock states."""
        scale = max(np.abs(self.h).max(), 1.0)
        if np.abs(self.h - np.diag(np.diag(self.h))).max() > 1e-14 * scale:
            return False
        for _, op in self.jumps:
            if (np.abs(op) > 1e-14 * max(np.abs(op).max(), 1.0)).sum(axis=0).max() > 1:
                return False
        return True


# ---------------------------------------------------------------------------
# Model constructors
# ---------------------------------------------------------------------------


def impurity_model(gamma_up: float, gamma_down: float, *, U: float = 0.1,
                   gamma_phi: float = 0.0, gamma_s: float = 0.0,
                   M: int = 30) -> LindbladModel:
    """Single nonlinear mode with incoherent gain, loss, dephasing, and
    two-photon loss.

    H = (U/2) n^2; channels sqrt(rate) x {a+, a, n, a^2}.  This is the
    local model whose Gibbs-like steady states parameterize chain sites.
    """
    space = FockSpace(M, 1)
    n = np.arange(space.levels, dtype=float)
    h = np.diag(0.5 * U * n * n).astype(complex)
    a = space.destroy()
    jumps = [(gamma_up, a.conj().T), (gamma_down, a),
             (gamma_phi, space.number()), (gamma_s, a @ a)]
    return LindbladModel(h, jumps, space, kind="impurity",
                         params=dict(gamma_up=gamma_up, gamma_down=gamma_down,
                                     U=U, gamma_phi=gamma_phi,
                                     gamma_s=gamma_s, M=M))


def scully_lamb_model(gamma_up: float, S: float, gamma_down: float, *,
                      U: float = 0.1, gamma_phi: float = 0.0,
                      M: int = 30) -> LindbladModel:
    """Impurity variant with saturable gain a+(gamma_up - S a a+)/sqrt(gamma_up).

    The saturation parameter S folds into the gain operator itself (unit
    channel rate).  Valid while S<a a+> stays well below gamma_up; the
    steady-state solvers emit a warning when S<a a+> >= 0.1 gamma_up.
    """
    if gamma_up <= 0:
        raise ValueError("saturable gain needs gamma_up > 0")
    space = FockSpace(M, 1)
    n = np.arange(space.levels, dtype=float)
    h = np.diag(0.5 * U * n * n).astype(complex)
    a = space.destroy()
    ad = a.conj().T
    gain = ad @ (gamma_up * np.eye(space.levels) - S * (a @ ad))
    gain /= math.sqrt(gamma_up)
    jumps = [(1.0, gain), (gamma_down, a), (gamma_phi, space.number())]
    return LindbladModel(h, jumps, space, kind="scully_lamb",
                         params=dict(gamma_up=gamma_up, S=S,
                                     gamma_down=gamma_down, U=U,
                                     gamma_phi=gamma_phi, M=M))


def driven_mode(detuning: float, kerr: float, drive: float, gamma: float, *,
                M: int = 30) -> LindbladModel:
    """Coherently driven lossy Kerr mode in the drive frame.

    H = -Delta n + (U/2) n(n-1) + F(a + a+), loss channel sqrt(gamma) a.
    """
    space = FockSpace(M, 1)
    n = np.arange(space.levels, dtype=float)
    a = space.destroy()
    h = np.diag(-detuning * n + 0.5 * kerr * n * (n - 1.0)).astype(complex)
    h += drive * (a + a.conj().T)
    return LindbladModel(h, [(gamma, a)], space, kind="driven_mode",
                         params=dict(detuning=detuning, kerr=kerr,
                                     drive=drive, gamma=gamma, M=M))


def chain_pair(params: ChainParams, M: int) -> LindbladModel:
    """Two-site chain as an exact model on the (M+1)^2 occupation grid.

    Same Hamiltonian and boundary losses as the stochastic sampler:
    H = sum_i [-Delta n_i + (U/2) n_i(n_i-1)] - J(a1+ a2 + a2+ a1)
        + F(a1 + a1+), loss channels on each site per the dissipation
    profile of ``params``.
    """
    if params.L != 2:
        raise ValueError("exact treatment is limited to 2 sites")
    space = FockSpace(M, 2)
    l_ = space.levels
    # dense operators are convenient below ~4k states; larger grids only
    # ever feed the jump sampler, so sparse assembly keeps memory flat
    dense = space.dim <= 4096
    a_mode = FockSpace(M, 1).destroy()
    if dense:
        a_s, eye = a_mode, np.eye(l_, dtype=complex)
        kron = np.kron
    else:
        a_s, eye = sp.csr_matrix(a_mode), sp.identity(l_, dtype=complex,
                                                      format="csr")
        kron = sp.kron
    a1 = kron(a_s, eye)
    a2 = kron(eye, a_s)
    n1 = a1.conj().T @ a1
    n2 = a2.conj().T @ a2
    eye2 = np.eye(space.dim, dtype=complex) if dense \
        else sp.identity(space.dim, dtype=complex, format="csr")
    damp, drive_arr, rate = site_profiles(params)
    h = (-params.detuning * (n1 + n2)
         + 0.5 * params.kerr * (n1 @ (n1 - eye2) + n2 @ (n2 - eye2))
         - params.hopping * (a1.conj().T @ a2 + a2.conj().T @ a1)
         + drive_arr[0] * (a1 + a1.conj().T)
         + drive_arr[1] * (a2 + a2.conj().T))
    jumps = [(float(rate[0]), a1), (float(rate[1]), a2)]
    meta = dict(detuning=params.detuning, hopping=params.hopping,
                kerr=params.kerr, drive=float(drive_arr[0]),
                drive2=float(drive_arr[1]), rate1=float(rate[0]),
                rate2=float(rate[1]), M=M)
    return LindbladModel(h, jumps, space, kind="chain_pair", params=meta)


def model_to_dict(model: LindbladModel) -> dict:
    if model.kind != "generic":
        return {"kind": model.kind, "params": model.params}
    return {
        "kind": "generic",
        "M": model.space.M,
        "modes": model.space.modes,
        "h_re": model.h.real.tolist(),
        "h_im": model.h.imag.tolist(),
        "jumps": [{"rate": rate, "op_re": op.real.tolist(),
                   "op_im": op.imag.tolist()} for rate, op in model.jumps],
    }


def model_from_dict(data: dict) -> LindbladModel:
    kind = data["kind"]
    if kind == "impurity":
        return impurity_model(**data["params"])
    if kind == "scully_lamb":
        return scully_lamb_model(**data["params"])
    if kind == "driven_mode":
        return driven_mode(**data["params"])
    if kind == "chain_pair":
        p = data["params"]
        cp = ChainParams(L=2, detuning=p["detuning"], hopping=p["hopping"],
                         kerr=p["kerr"], drive=p["drive"],
                         gamma=p["rate1"], gamma_int=0.0,
                         drive_mode="uniform" if p.get("drive2") else "boundary")
        return chain_pair(cp, p["M"])
    if kind == "generic":
        space = FockSpace(data["M"], data["modes"])
        h = np.asarray(data["h_re"]) + 1j * np.asarray(data["h_im"])
        jumps = [(j["rate"],
                  np.asarray(j["op_re"]) + 1j * np.asarray(j["op_im"]))
                 for j in data["jumps"]]
        return LindbladModel(h, jumps, space)
    raise ValueError(f"unknown model kind {kind!r}")


def save_model(path, model: LindbladModel) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=1)


def load_model(path) -> LindbladModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# States
# ---------------------------------------------------------------------------


def fock_state(space: FockSpace, n) -> np.ndarray:
    """Occupation eigenvector |n> (or |n1, n2> on a pair)."""
    psi = np.zeros(space.dim, dtype=complex)
    if space.modes == 2:
        n1, n2 = n
        if not (0 <= n1 <= space.M and 0 <= n2 <= space.M):
            raise ValueError("occupation outside the truncated space")
        psi[n1 * space.levels + n2] = 1.0
    else:
        if not 0 <= n <= space.M:
            raise ValueError("occupation outside the truncated space")
        psi[n] = 1.0
    return psi


def coherent_state(space: FockSpace, alpha) -> np.ndarray:
    """Normalized coherent state |alpha> (or product |alpha1>|alpha2> on a pair)."""
    if space.modes == 2:
        a1, a2 = alpha
        single = FockSpace(space.M, modes=1)
        psi = np.outer(coherent_state(single, a1), coherent_state(single, a2))
        return np.ascontiguousarray(psi.ravel())
    n = np.arange(space.levels)
    logfac = np.concatenate([[0.0], np.cumsum(np.log(np.arange(1, space.levels)))])
    r = abs(alpha)
    with np.errstate(divide="ignore"):
        logmag = n * (math.log(r) if r > 0 else -np.inf) - 0.5 * logfac
    logmag -= 0.5 * r * r
    phase = np.exp(1j * n * (np.angle(alpha) if r > 0 else 0.0))
    psi = np.where(np.isfinite(logmag), np.exp(logmag), 0.0) * phase
    captured = float(np.vdot(psi, psi).real)
    if captured < 1.0 - LEAKAGE_TOL:
        raise ValueError(
            f"cutoff {space.M} captures only {captured:.6f} of the coherent "
            f"state |alpha|={r:.3g}; increase M")
    return psi / math.sqrt(captured)


def build_gibbs(T: float, mu: float, U: float, M: int) -> DensityMatrix:
    """Diagonal Gibbs state p_n proportional to exp[-(U n^2/2 - mu n)/T].

    Normalization runs through log-sum-exp so any parameter combination
    is overflow-safe.  Raises when the cutoff leaks more than LEAKAGE_TOL
    into its top two levels.
    """
    if T <= 0:
        raise ValueError("temperature must be positive")
    space = FockSpace(M, 1)
    n = np.arange(space.levels, dtype=float)
    logw = -(0.5 * U * n * n - mu * n) / T
    logw -= logw.max()
    p = np.exp(logw - math.log(np.exp(logw).sum()))
    dm = DensityMatrix(np.diag(p).astype(complex), space)
    if not dm.leakage_ok:
        raise ValueError(
            f"top-level population {dm.leakage():.3e} exceeds {LEAKAGE_TOL}; "
            "increase the cutoff")
    return dm


# ---------------------------------------------------------------------------
# Steady states and evolution
# ---------------------------------------------------------------------------


def _steady_populations(model: LindbladModel):
    """Rate-equation steady state for population-closed models."""
    d = model.space.dim
    W = np.zeros((d, d))  # W[i, j]: rate i -> j
    for rate, op in model.jumps:
        W += rate * (np.abs(op.T) ** 2)
    A = W.T - np.diag(W.sum(axis=1))
    sing = np.linalg.svd(A, compute_uv=False)
    B = A.copy()
    B[-1, :] = 1.0
    rhs = np.zeros(d)
    rhs[-1] = 1.0
    p = np.linalg.solve(B, rhs)
    p = np.clip(p, 0.0, None)
    p /= p.sum()
    return np.diag(p).astype(complex), sing


def _steady_svd(model: LindbladModel):
    gen = model.liouvillian().toarray()
    sing, vh = sla.svd(gen, full_matrices=False)[1:]
    rho = vh[-1].conj().reshape(model.space.dim, model.space.dim)
    return rho, sing


def _steady_evolve(model: LindbladModel, t_step: float = 20.0,
                   max_rounds: int = 200):
    gen = model.liouvillian()
    d = model.space.dim
    rho = np.eye(d, dtype=complex).ravel() / d
    for _ in range(max_rounds):
        rho = expm_multiply(gen * t_step, rho)
        rho /= rho.reshape(d, d).trace()
        resid = np.linalg.norm(gen @ rho)
        if resid < RESIDUAL_TOL:
            break
    return rho.reshape(d, d), None


def steady_state(model: LindbladModel, method: str = "auto") -> DensityMatrix:
    """Stationary density matrix of the Lindblad generator.

    method "auto" picks the cheapest adequate solver: the rate-equation
    solve when populations close on themselves, a dense SVD null space
    while the superoperator stays desk-sized, relaxation by
    exponential-propagator time stepping beyond.  The result carries
    solver diagnostics in ``solve_info`` (residual, null-space gap,
    uniqueness flag) and is checked against the Liouvillian residual
    bound and the truncation leakage gate.
    """
    if not model.dissipative:
        raise ValueError("model has no jump channels; steady state undefined")
    d = model.space.dim
    if method == "auto":
        if model.population_closed():
            method = "populations"
        elif d <= 80:
            method = "svd"
        else:
            method = "evolve"
    if method == "populations":
        if not model.population_closed():
            raise ValueError("populations do not close for this model")
        rho, sing = _steady_populations(model)
    elif method == "svd":
        if d > 350:
            raise ValueError(
                f"dense null space at dim {d} needs {(d * d) ** 2 * 16 / 2 ** 30:.0f}"
                " GiB; use method='evolve'")
        rho, sing = _steady_svd(model)
    elif method == "evolve":
        rho, sing = _steady_evolve(model)
    else:
        raise ValueError(f"unknown method {method!r}")
    tr0 = rho.trace()
    if abs(tr0) < 1e-300:
        raise ValueError("null vector has vanishing trace")
    rho = rho * (tr0.conjugate() / abs(tr0))  # fix the arbitrary global phase
    rho = 0.5 * (rho + rho.conj().T)
    rho = rho / rho.trace().real
    dm = DensityMatrix(rho, model.space)
    info = {"method": method}
    gen = model.liouvillian()
    info["residual"] = float(np.linalg.norm(gen @ rho.ravel()))
    if sing is not None:
        info["gap"] = float(sing[-2])
        info["unique"] = bool(sing[-2] > max(1e-10 * sing[0], 1e-12))
        if not info["unique"]:
            warnings.warn(
                f"null-space gap {sing[-2]:.3e} is degenerate: multiple "
                "steady states; returned one representative", stacklevel=2)
    else:
        info["gap"] = None
        info["unique"] = None
    if info["residual"] > RESIDUAL_TOL and (info["unique"] is not False):
        warnings.warn(
            f"steady-state residual {info['residual']:.3e} exceeds "
            f"{RESIDUAL_TOL}", stacklevel=2)
    if not dm.leakage_ok:
        warnings.warn(
            f"truncation leakage {dm.leakage():.3e} exceeds {LEAKAGE_TOL}; "
            "increase the cutoff", stacklevel=2)
    info["leakage"] = dm.leakage()
    dm.solve_info = info
    _saturable_gain_check(model, dm)
    return dm


def _saturable_gain_check(model: LindbladModel, dm: DensityMatrix) -> None:
    if model.kind != "scully_lamb":
        return
    S = model.params["S"]
    gup = model.params["gamma_up"]
    n_aad = dm.mean_n() + 1.0
    if S * n_aad >= 0.1 * gup:
        warnings.warn(
            f"saturable-gain expansion strained: S<a a+> = {S * n_aad:.3g} "
            f">= 0.1 gamma_up = {0.1 * gup:.3g}", stacklevel=3)


def evolve_rho(model: LindbladModel, rho0, times) -> np.ndarray:
    """Master-equation evolution sampled at the given times.

    rho0 may be a DensityMatrix, a matrix, or a pure-state vector.
    Returns an array (len(times), dim, dim).
    """
    d = model.space.dim
    if isinstance(rho0, DensityMatrix):
        rho = rho0.rho
    else:
        rho0 = np.asarray(rho0, dtype=complex)
        rho = np.outer(rho0, rho0.conj()) if rho0.ndim == 1 else rho0
    gen = model.liouvillian()
    times = np.asarray(times, dtype=float)
    out = np.empty((times.size, d, d), dtype=complex)
    t_prev = 0.0
    vec = rho.ravel().astype(complex)
    for i, t in enumerate(times):
        if t < t_prev:
            raise ValueError("times must be nondecreasing")
        if t > t_prev:
            vec = expm_multiply(gen * (t - t_prev), vec)
            t_prev = t
        out[i] = vec.reshape(d, d)
    return out


# ---------------------------------------------------------------------------
# Exact Wigner functions
# ---------------------------------------------------------------------------


def wigner_exact(dm: DensityMatrix, points) -> np.ndarray:
    """Wigner function of a single-mode state at complex phase-space points.

    Diagonal states use the Laguerre series over level populations; states
    with coherences go through the displaced-parity evaluation, exactly
    unitary on the truncated space.  The state should pass the leakage
    gate, otherwise truncation bias reaches the result.
    """
    if dm.space.modes != 1:
        raise ValueError("wigner_exact works on single modes; reduce() first")
    if not dm.leakage_ok:
        warnings.warn(
            f"state leaks {dm.leakage():.3e} into the cutoff; Wigner values "
            "carry truncation bias", stacklevel=2)
    pts = np.asarray(points, dtype=complex)
    shape = pts.shape
    flat = pts.ravel()
    d = dm.space.levels
    offdiag = np.abs(dm.rho - np.diag(np.diag(dm.rho))).max()
    if offdiag <= 1e-13 * max(1.0, np.abs(dm.rho).max()):
        basis = fock_wigner_basis(d - 1, np.abs(flat))
        vals = np.diag(dm.rho).real @ basis
        return vals.reshape(shape)
    # displaced parity: W = (2/pi) tr[D+(a) rho D(a) P].  The displacement
    # acts on an enlarged truncation so displaced basis states stay
    # captured out to the farthest evaluation point; only the d rows that
    # meet the state's support are ever materialized.
    occ = np.diag(dm.rho).real
    s_top = int(np.max(np.nonzero(occ > 1e-12 * max(occ.max(), 1e-300))[0],
                       initial=0)) + 1
    reach = float(np.abs(flat).max()) + math.sqrt(s_top + 1.0) + 4.0
    d_eval = max(d, int(math.ceil(reach * reach)))
    a = FockSpace(d_eval - 1, 1).destroy()
    hk = 1j * (a.conj().T - a)
    mu, V = np.linalg.eigh(hk)
    Vd = V[:d, :]
    parity = np.where(np.arange(d_eval) % 2 == 0, 1.0, -1.0)
    ph_rows = np.arange(d)
    ph_cols = np.arange(d_eval)
    vals = np.empty(flat.size)
    for i, z in enumerate(flat):
        r = abs(z)
        th = np.angle(z)
        disp = (Vd * np.exp(-1j * r * mu)) @ V.conj().T
        if th != 0.0:
            disp = (np.exp(1j * th * ph_rows)[:, None] * disp) \
                * np.exp(-1j * th * ph_cols)[None, :]
        bl = dm.rho @ disp
        vals[i] = (2.0 / math.pi) * float(
            np.einsum("s,is,is->", parity, disp.conj(), bl).real)
    return vals.reshape(shape)


def wigner_exact_grid(dm: DensityMatrix, R: float | None = None,
                      n_bins: int = 201, check_integral: bool = True):
    """Wigner function on a square cell-center grid, ready for export.

    Returns (centers, grid).  With check_integral the midpoint integral
    must reach 1 within 1e-6, else the grid is too small and this raises.
    """
    if R is None:
        R = default_extent(dm.mean_n() + 3.0 * math.sqrt(abs(dm.delta_n()) + 1.0))
    width = 2.0 * R / n_bins
    centers = -R + (np.arange(n_bins) + 0.5) * width
    re, im = np.meshgrid(centers, centers, indexing="ij")
    grid = wigner_exact(dm, re + 1j * im)
    if check_integral:
        total = grid.sum() * width * width
        if abs(total - 1.0) > 1e-6:
            raise ValueError(
                f"Wigner integral {total:.8f} misses 1; enlarge the grid")
    return centers, grid


def save_wigner_exact(path, dm: DensityMatrix, R: float | None = None,
                      n_bins: int = 201) -> None:
    """Evaluate on a grid and dump in the binary grid format."""
    centers, grid = wigner_exact_grid(dm, R, n_bins)
    R_eff = centers[-1] + 0.5 * (centers[1] - centers[0])
    save_wigner_grid(path, R_eff, grid)


# ---------------------------------------------------------------------------
# Density-matrix binary export
# ---------------------------------------------------------------------------


def save_density_matrix(path, dm: DensityMatrix) -> None:
    """Binary dump: 32-byte header (magic, version, modes, levels, dim)
    then row-major little-endian complex entries."""
    head = struct.pack(_RHO_HEAD, _RHO_MAGIC, _RHO_VERSION, dm.space.modes,
                       dm.space.levels, dm.space.dim)
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(dm.rho.astype("<c16").tobytes())


def load_density_matrix(path) -> DensityMatrix:
    with open(path, "rb") as fh:
        head = fh.read(struct.calcsize(_RHO_HEAD))
        magic, version, modes, levels, dim = struct.unpack(_RHO_HEAD, head)
        if magic != _RHO_MAGIC:
            raise ValueError(f"bad density-matrix magic {magic!r}")
        if version != _RHO_VERSION:
            raise ValueError(f"unsupported density-matrix version {version}")
        data = np.frombuffer(fh.read(), dtype="<c16")
    if data.size != dim * dim:
        raise ValueError("density-matrix payload size mismatch")
    return DensityMatrix(data.reshape(dim, dim).copy(),
                         FockSpace(levels - 1, modes))


# ---------------------------------------------------------------------------
# Quantum-jump trajectory averages
# ---------------------------------------------------------------------------


def suggest_cutoff(nbar: float, dn: float) -> int:
    """Occupation cutoff sized from the number distribution itself.

    The number variance is dn + nbar (normally ordered fluctuation plus
    shot noise), which stays correct for sub-Poissonian states where dn
    is negative.  Seven standard deviations of headroom plus a constant
    floor keeps the tail population below ~1e-5 in practice; check the
    leakage diagnostic afterwards and enlarge if it flags.
    """
    spread = math.sqrt(max(nbar + dn, 1.0))
    return int(math.ceil(nbar + 7.0 * spread + 8.0))


class McwfResult:
    """Trajectory-resolved observable traces from quantum-jump sampling.

    traces has shape (n_traj, n_times, n_obs); per-site means and
    fluctuations with trajectory-level standard errors derive from it.
    """

    def __init__(self, times, traces, n_jumps, obs_names, space, kind):
        self.times = times
        self.traces = traces
        self.n_jumps = n_jumps
        self.obs_names = list(obs_names)
        self.space = space
        self.kind = kind

    @property
    def n_traj(self) -> int:
        return self.traces.shape[0]

    def mean(self) -> np.ndarray:
        return self.traces.mean(axis=0)

    def sem(self) -> np.ndarray:
        n = self.n_traj
        if n < 2:
            return np.full(self.traces.shape[1:], np.nan)
        return self.traces.std(axis=0, ddof=1) / math.sqrt(n)

    def _col(self, name: str) -> int:
        return self.obs_names.index(name)

    def mean_n(self, mode: int = 1):
        return self.mean()[:, self._col(f"n{mode}")]

    def mean_n_sem(self, mode: int = 1):
        return self.sem()[:, self._col(f"n{mode}")]

    def delta_n(self, mode: int = 1):
        m = self.mean()
        nbar = m[:, self._col(f"n{mode}")]
        nn = m[:, self._col(f"nn{mode}")]
        return nn - nbar * nbar

    def delta_n_sem(self, mode: int = 1):
        """Propagated standard error of nn_mean - n_mean^2 using the
        trajectory covariance of the two estimators."""
        i_n = self._col(f"n{mode}")
        i_nn = self._col(f"nn{mode}")
        n = self.n_traj
        if n < 2:
            return np.full(self.traces.shape[1], np.nan)
        x = self.traces[:, :, i_n]
        y = self.traces[:, :, i_nn]
        nbar = x.mean(axis=0)
        var_x = x.var(axis=0, ddof=1) / n
        var_y = y.var(axis=0, ddof=1) / n
        cov = ((x - nbar) * (y - y.mean(axis=0))).sum(axis=0) / (n - 1) / n
        var = var_y + 4.0 * nbar ** 2 * var_x - 4.0 * nbar * cov
        return np.sqrt(np.clip(var, 0.0, None))

    def leakage_max(self) -> float:
        return float(self.mean()[:, self._col("leak")].max())

    def window_stats(self, t0: float, t1: float) -> dict:
        """Time-window averages with trajectory-level standard errors.

        Each trajectory is averaged over [t0, t1] first, so within-
        trajectory time correlation cannot bias the error bars.  Returns
        mean, sem per observable plus derived delta_n per mode.
        """
        sel = (self.times >= t0 - 1e-9) & (self.times <= t1 + 1e-9)
        if sel.sum() < 2:
            raise ValueError("window contains fewer than 2 samples")
        per_traj = self.traces[:, sel, :].mean(axis=1)
        n = self.n_traj
        out = {"mean": per_traj.mean(axis=0),
               "sem": per_traj.std(axis=0, ddof=1) / math.sqrt(n),
               "obs_names": list(self.obs_names)}
        modes = 2 if self.kind == "chain_pair" else 1
        for mode in range(1, modes + 1):
            x = per_traj[:, self._col(f"n{mode}")]
            y = per_traj[:, self._col(f"nn{mode}")]
            nbar = x.mean()
            dn = y.mean() - nbar ** 2
            var = (y.var(ddof=1) / n + 4 * nbar ** 2 * x.var(ddof=1) / n
                   - 4 * nbar * np.cov(x, y, ddof=1)[0, 1] / n)
            out[f"n{mode}"] = (float(nbar), float(x.std(ddof=1) / math.sqrt(n)))
            out[f"delta_n{mode}"] = (float(dn), float(math.sqrt(max(var, 0.0))))
        return out


def _chain_tables(model: LindbladModel):
    l_ = model.space.levels
    n = np.arange(l_, dtype=float)
    p = model.params
    n1 = n[:, None]
    n2 = n[None, :]
    diag = (-p["detuning"] * (n1 + n2)
            + 0.5 * p["kerr"] * (n1 * (n1 - 1) + n2 * (n2 - 1))
            + 0j
            - 0.5j * (p["rate1"] * n1 + p["rate2"] * n2))
    sq = np.sqrt(n)
    return np.ascontiguousarray(diag, dtype=complex), sq


def mcwf_run(model: LindbladModel, psi0, t_max: float, n_traj: int, *,
             dt_obs: float = 0.25, policy: NoisePolicy | None = None,
             m: int = 12, tol: float = 1e-8,
             progress=None) -> McwfResult:
    """Average quantum-jump trajectories of the model.

    psi0 is a pure initial state on the model's space.  Observables are
    sampled every dt_obs: occupation, normally ordered pair density, and
    the top-two-level leakage per mode.  Trajectories draw independent
    counter-based random streams from ``policy`` so any subset can be
    reproduced.  The averaged leakage trace must stay below the gate or
    a warning is raised; rerun with a larger cutoff in that case.
    """
    if policy is None:
        policy = NoisePolicy(master_seed=0)
    n_samples = int(round(t_max / dt_obs)) + 1
    if abs((n_samples - 1) * dt_obs - t_max) > 1e-9 * max(1.0, t_max):
        raise ValueError("t_max must be a multiple of dt_obs")
    times = np.arange(n_samples) * dt_obs
    psi0 = np.asarray(psi0, dtype=complex)
    nrm = math.sqrt(float(np.vdot(psi0, psi0).real))
    if nrm < 1e-12:
        raise ValueError("initial state has vanishing norm")
    psi0 = psi0 / nrm

    if model.kind == "chain_pair":
        if model.params.get("drive2", 0.0) != 0.0:
            raise ValueError("jump sampling supports a driven first site only")
        l_ = model.space.levels
        psi_grid = np.ascontiguousarray(psi0.reshape(l_, l_))
        diag, sq = _chain_tables(model)
        obs_names = ["n1", "n2", "nn1", "nn2", "leak"]
        n_obs = 5

        def one(gen, traces):
            return _kernels.mcwf_chain(
                psi_grid, diag, sq, sq, model.params["hopping"],
                model.params["drive"], model.params["rate1"],
                model.params["rate2"], dt_obs, traces, gen, m=m, tol=tol)
    elif model.space.modes == 1:
        h_nh = sp.csr_matrix(model.h_nh())
        channels = [(rate, sp.csr_matrix(op)) for rate, op in model.jumps]
        n = np.arange(model.space.levels, dtype=float)
        obs = np.vstack([n, n * (n - 1.0), (n >= model.space.levels - 2)
                         .astype(float)])
        obs_names = ["n1", "nn1", "leak"]
        n_obs = 3

        def one(gen, traces):
            return _kernels.mcwf_csr(psi0, h_nh, channels, obs, dt_obs,
                                     traces, gen, m=m, tol=tol)
    else:
        raise ValueError("unsupported model layout for jump sampling")

    traces = np.zeros((n_traj, n_samples, n_obs))
    n_jumps = np.zeros(n_traj, dtype=np.int64)
    for i in range(n_traj):
        n_jumps[i] = one(policy.generator(i), traces[i])
        if progress is not None:
            progress(i + 1, n_traj)
    result = McwfResult(times, traces, n_jumps, obs_names, model.space,
                        model.kind)
    leak = result.leakage_max()
    if leak >= LEAKAGE_TOL:
        warnings.warn(
            f"averaged truncation leakage {leak:.3e} exceeds {LEAKAGE_TOL}; "
            "increase the cutoff", stacklevel=2)
    return result
