"""Phase-space density reconstruction.

Histograms of sampled field amplitudes estimate local Wigner functions;
rotationally symmetric ones are inverted to Fock-level populations through
the Laguerre basis

    w_n(r) = (2/pi) (-1)^n L_n(4 r^2) e^{-2 r^2},

the Wigner transform of |n><n|.  Populations give entropies; L2 distances
compare reconstructions with references.
"""

from __future__ import annotations

import math
import struct
import warnings

import numpy as np
from scipy.optimize import nnls

_WIG_MAGIC = b"BWIG"
_WIG_VERSION = 1

#: angular power ratio (m=1,2 over m=0) above which a histogram is treated
#: as anisotropic and Fock inversion is refused
ANISOTROPY_THRESHOLD = 0.05

#: recommended minimum sample count for a stable histogram
MIN_SAMPLES = 10_000


def default_extent(n_max: float) -> float:
    """Grid half-width that comfortably contains occupations up to n_max."""
    return 3.0 * max(math.sqrt(max(n_max, 0.0)), 1.0)


def fock_wigner_basis(n_max: int, r) -> np.ndarray:
    """Rows w_n(r) for n = 0..n_max, numerically stable at any radius.

    The recurrence runs on B_n = L_n(x) e^{-x/2} (x = 4 r^2) with a
    per-radius scale exponent carried separately, so the deeply suppressed
    region at large r keeps full relative precision instead of underflowing
    at B_0 = e^{-x/2}.  Result includes the (2/pi)(-1)^n prefactor.
    """
    r = np.atleast_1d(np.asarray(r, dtype=float))
    x = 4.0 * r * r
    out = np.empty((n_max + 1, r.size))
    # scaled values: B_{n-1} = g_prev * e^s, B_n = g_cur * e^s
    g_prev = np.zeros_like(x)
    g_cur = np.ones_like(x)
    s = -0.5 * x
    out[0] = (2.0 / math.pi) * _descale(g_cur, s)
    for n in range(n_max):
        g_next = ((2 * n + 1 - x) * g_cur - n * g_prev) / (n + 1)
        mag = np.abs(g_next)
        big = mag > 0
        scale = np.where(big, mag, 1.0)
        g_prev = g_cur / scale
        g_cur = g_next / scale
        s = s + np.log(scale)
        sign = -1.0 if (n + 1) % 2 else 1.0
        out[n + 1] = (2.0 / math.pi) * sign * _descale(g_cur, s)
    return out


def _descale(g, s):
    with np.errstate(over="ignore", under="ignore"):
        v = g * np.exp(s)
    return np.where(np.isfinite(v), v, 0.0)


def thermal_wigner(r, nbar: float) -> np.ndarray:
    """Closed-form isotropic Wigner density of a thermal state."""
    r = np.asarray(r, dtype=float)
    w = 2.0 * nbar + 1.0
    return (2.0 / (math.pi * w)) * np.exp(-2.0 * r * r / w)


class WignerHistogram:
    """Streaming 2-D histogram of one site's complex field samples.

    The grid covers [-R, R]^2 with n_bins^2 square cells; density() is
    normalized so cell-sum x cell-area = 1.  Samples landing outside the
    grid are counted separately and reported (keep them under 0.1%).
    Implements the ensemble sink protocol (add / merge / clone_empty).
    """

    def __init__(self, site: int, R: float, n_bins: int = 201):
        if R <= 0 or n_bins < 2:
            raise ValueError("need R > 0 and at least 2 bins")
        self.site = site
        self.R = float(R)
        self.n_bins = int(n_bins)
        self.counts = np.zeros((n_bins, n_bins))
        self.n_samples = 0
        self.n_outside = 0

    @property
    def cell_width(self) -> float:
        return 2.0 * self.R / self.n_bins

    def centers(self) -> np.ndarray:
        return -self.R + (np.arange(self.n_bins) + 0.5) * self.cell_width

    def add(self, alpha: np.ndarray, t: float = 0.0) -> None:
        """Fold one field sample in (uses component site-1 of alpha)."""
        z = alpha[self.site - 1]
        self.add_values(np.asarray([z]))

    def add_values(self, values: np.ndarray) -> None:
        values = np.asarray(values).ravel()
        ix = np.floor((values.real + self.R) / self.cell_width).astype(np.int64)
        iy = np.floor((values.imag + self.R) / self.cell_width).astype(np.int64)
        ok = (ix >= 0) & (ix < self.n_bins) & (iy >= 0) & (iy < self.n_bins)
        np.add.at(self.counts, (ix[ok], iy[ok]), 1.0)
        self.n_samples += int(values.size)
        self.n_outside += int(values.size - ok.sum())

    def clone_empty(self) -> "WignerHistogram":
        return WignerHistogram(self.site, self.R, self.n_bins)

    def merge(self, other: "WignerHistogram") -> "WignerHistogram":
        if (other.site, other.R, other.n_bins) != (self.site, self.R, self.n_bins):
            raise ValueError("histogram grid mismatch")
        self.counts += other.counts
        self.n_samples += other.n_samples
        self.n_outside += other.n_outside
        return self

    def outside_fraction(self) -> float:
        return self.n_outside / self.n_samples if self.n_samples else 0.0

    def density(self) -> np.ndarray:
        """Normalized density W[i, j] at (re_i, im_j) cell centers."""
        inside = self.n_samples - self.n_outside
        if inside <= 0:
            raise ValueError("no samples inside the grid")
        return self.counts / (inside * self.cell_width ** 2)


def accumulate_histogram(samples, site: int = 1, R: float | None = None,
                         n_bins: int = 201) -> WignerHistogram:
    """Histogram a batch of complex samples of one mode.

    R defaults to a span containing the sampled occupations; fewer than
    MIN_SAMPLES draws a warning, and a grid missing every sample is an
    error.
    """
    values = np.asarray(samples).ravel()
    if values.size < MIN_SAMPLES:
        warnings.warn(
            f"only {values.size} samples; histogram noise will be large",
            stacklevel=2)
    if R is None:
        n_est = float(np.mean(np.abs(values) ** 2)) if values.size else 1.0
        R = default_extent(n_est)
    hist = WignerHistogram(site, R, n_bins)
    hist.add_values(values)
    if hist.n_outside == hist.n_samples:
        raise ValueError("all samples fall outside the grid")
    return hist


# ---------------------------------------------------------------------------
# Radial analysis and Fock inversion
# ---------------------------------------------------------------------------


class RadialProfile:
    """Angle-averaged Wigner profile with per-bin statistics."""

    def __init__(self, r, W, counts, anisotropy, isotropic):
        self.r = r
        self.W = W
        self.counts = counts
        self.anisotropy = anisotropy
        self.isotropic = isotropic


def radial_profile(hist: WignerHistogram, n_radial: int | None = None) -> RadialProfile:
    """Angle-average a histogram; flags anisotropic input.

    The anisotropy score is the count-weighted angular Fourier power in
    m = 1, 2 relative to m = 0; above ANISOTROPY_THRESHOLD the profile is
    marked non-isotropic (Fock inversion will refuse it).
    """
    if n_radial is None:
        n_radial = hist.n_bins // 2
    dens = hist.density()
    c = hist.centers()
    re, im = np.meshgrid(c, c, indexing="ij")
    rad = np.hypot(re, im)
    theta = np.arctan2(im, re)
    edges = np.linspace(0.0, hist.R, n_radial + 1)
    which = np.clip(np.digitize(rad.ravel(), edges) - 1, 0, n_radial - 1)
    inside = rad.ravel() <= hist.R
    w_flat = dens.ravel()
    cnt_flat = hist.counts.ravel()
    nb = np.bincount(which[inside], minlength=n_radial)
    W = np.bincount(which[inside], weights=w_flat[inside], minlength=n_radial)
    counts = np.bincount(which[inside], weights=cnt_flat[inside],
                         minlength=n_radial)
    with np.errstate(invalid="ignore"):
        W = np.where(nb > 0, W / np.maximum(nb, 1), 0.0)
    # angular harmonics, count-weighted over the whole disc; the exact
    # center cell has no angle and would leak into every harmonic
    ang_ok = inside & (rad.ravel() >= 0.5 * hist.cell_width)
    nb_ang = np.bincount(which[ang_ok], minlength=n_radial)
    p0 = p12 = 0.0
    for m_ang in (0, 1, 2):
        ph = np.exp(-1j * m_ang * theta.ravel())
        num = np.bincount(which[ang_ok], weights=(w_flat * ph.real)[ang_ok],
                          minlength=n_radial) + 1j * np.bincount(
            which[ang_ok], weights=(w_flat * ph.imag)[ang_ok],
            minlength=n_radial)
        cm = np.where(nb_ang > 0, num / np.maximum(nb_ang, 1), 0.0)
        power = float(np.sum(counts * np.abs(cm) ** 2))
        if m_ang == 0:
            p0 = power
        else:
            p12 += power
    score = p12 / p0 if p0 > 0 else float("inf")
    centers = 0.5 * (edges[:-1] + edges[1:])
    return RadialProfile(r=centers, W=W, counts=counts, anisotropy=float(score),
                         isotropic=bool(score <= ANISOTROPY_THRESHOLD))


class FockPopulations:
    """Occupation-level probabilities p_0..p_ncut."""

    def __init__(self, p: np.ndarray, residual: float):
        self.p = np.asarray(p, dtype=float)
        self.n_cut = self.p.size - 1
        self.residual = float(residual)

    def mean_n(self) -> float:
        return float(np.dot(np.arange(self.p.size), self.p))


def fock_populations(profile: RadialProfile, n_cut: int,
                     force: bool = False) -> FockPopulations:
    """Invert an isotropic radial profile to level populations.

    Weighted nonnegative least squares on W(r) = sum_n p_n w_n(r) with the
    normalization sum p_n = 1 imposed through a heavily weighted extra
    equation and an exact renormalization afterwards.  The reported
    residual is the relative rms misfit on the counted bins.  Refuses
    anisotropic profiles unless force=True; a basis that cannot resolve
    the data (grid too small for n_cut) is an error.
    """
    if not profile.isotropic and not force:
        raise ValueError(
            f"profile anisotropy {profile.anisotropy:.3g} exceeds "
            f"{ANISOTROPY_THRESHOLD}; Fock inversion needs U(1) symmetry")
    keep = profile.counts > 0
    if keep.sum() < n_cut + 2:
        raise ValueError("fewer occupied radial bins than unknowns")
    r = profile.r[keep]
    y = profile.W[keep]
    w = np.sqrt(profile.counts[keep])
    w /= w.max()
    basis = fock_wigner_basis(n_cut, r)
    col_scale = np.abs(basis).max(axis=1)
    if col_scale.min() < 1e-12 * col_scale.max():
        raise ValueError(
            f"basis column for n={int(np.argmin(col_scale))} vanishes on "
            "this grid; increase the histogram extent R")
    A = (basis * w).T
    b = y * w
    lam = 100.0 * np.abs(b).max()
    A_aug = np.vstack([A, lam * np.ones((1, n_cut + 1))])
    b_aug = np.concatenate([b, [lam]])
    p, _ = nnls(A_aug, b_aug)
    total = p.sum()
    if total <= 0:
        raise ValueError("inversion collapsed to zero populations")
    p = p / total
    fit = basis.T @ p
    scale = float(np.sqrt(np.sum((w * y) ** 2)))
    resid = float(np.sqrt(np.sum((w * (fit - y)) ** 2)) / scale) if scale > 0 \
        else float("inf")
    return FockPopulations(p, resid)


def entropy(populations) -> float:
    """Diagonal von Neumann entropy -sum p ln p in nats."""
    p = populations.p if isinstance(populations, FockPopulations) \
        else np.asarray(populations, dtype=float)
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def l2_distance(hist: WignerHistogram, reference: np.ndarray) -> float:
    """sqrt of the integrated squared difference against a reference grid.

    The reference must be sampled on the same cell centers (same shape);
    the integral uses the cell area measure.
    """
    dens = hist.density()
    ref = np.asarray(reference, dtype=float)
    if ref.shape != dens.shape:
        raise ValueError(f"grid mismatch: {ref.shape} vs {dens.shape}")
    return float(np.sqrt(np.sum((dens - ref) ** 2) * hist.cell_width ** 2))


# ---------------------------------------------------------------------------
# Export formats
# ---------------------------------------------------------------------------


def save_wigner_grid(path, R: float, grid: np.ndarray) -> None:
    """Binary grid dump: 32-byte header (magic, version, R, bins), then
    row-major little-endian densities.  The grid must be square."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
        raise ValueError("Wigner grid must be square")
    head = struct.pack("<4sIdI12x", _WIG_MAGIC, _WIG_VERSION, float(R),
                       grid.shape[0])
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(grid.astype("<f8").tobytes())


def save_wigner(path, hist: WignerHistogram) -> None:
    """Dump a histogram's normalized density in the binary grid format."""
    save_wigner_grid(path, hist.R, hist.density())


def load_wigner(path):
    """Read a binary Wigner dump; returns (R, density grid)."""
    with open(path, "rb") as fh:
        head = fh.read(32)
        if len(head) < 32:
            raise ValueError("truncated Wigner header")
        magic, version, R, n_bins = struct.unpack("<4sIdI12x", head)
        if magic != _WIG_MAGIC:
            raise ValueError(f"bad Wigner magic {magic!r}")
        if version != _WIG_VERSION:
            raise ValueError(f"unsupported Wigner version {version}")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != n_bins * n_bins:
        raise ValueError("Wigner payload size mismatch")
    return R, data.reshape(n_bins, n_bins).copy()


def save_wigner_csv(path, hist: WignerHistogram) -> None:
    """CSV dump with columns re, im, density."""
    dens = hist.density()
    c = hist.centers()
    lines = ["re,im,density"]
    for i, x in enumerate(c):
        for j, y in enumerate(c):
            lines.append(f"{x:.10g},{y:.10g},{dens[i, j]:.10g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
