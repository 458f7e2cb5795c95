"""Density of states, support detection, quantiles and edge exponents.

The density is recovered from boundary values of the solved self-consistent
vector at the eta floor, Richardson-extrapolated in eta.  Near the support
edges the density behaves like a square root, so the sampling grid and all
quadrature run in the coordinate u = sqrt(|E - edge|), where the integrand
is smooth; the bulk is handled on a uniform grid with composite Simpson.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.interpolate import PchipInterpolator

from .errors import (
    CuspSuspect,
    InsufficientGrid,
    MultiCut,
    WindowTooNarrow,
)
from .qve import DEFAULT_OPTS, QveSolution, default_eta_schedule, solve_grid

__all__ = [
    "SpectralData",
    "SupportCertificate",
    "density_of_states",
    "detect_support",
    "quantiles",
    "edge_fit",
    "compute_spectral_data",
]


@dataclass(frozen=True)
class SupportCertificate:
    alpha: float
    beta: float
    threshold: float
    kappa: float
    bulk_min: float            # min of rho on [alpha+kappa, beta-kappa]
    refined: bool


def density_of_states(sol: QveSolution, extrapolate=True):
    """Sampled rho(E) on the solution's energy grid (nonnegative, clipped at 0)."""
    if sol.etas.size < 2:
        extrapolate = False
    m_bar = 2.0 * sol.m_bar[-1] - sol.m_bar[-2] if extrapolate else sol.m_bar[-1]
    return np.clip(m_bar.imag / np.pi, 0.0, None)


def _crossings(energies, density, threshold):
    """Support intervals where the density exceeds the threshold."""
    above = density > threshold
    if not above.any():
        raise InsufficientGrid("density never exceeds the support threshold")
    if above[0] or above[-1]:
        raise InsufficientGrid("energy window does not bracket the support")
    edges = np.flatnonzero(np.diff(above.astype(int)))
    runs = [(edges[i], edges[i + 1]) for i in range(0, len(edges), 2)]
    intervals = []
    for i0, i1 in runs:
        # linear interpolation of the threshold crossing
        x0, x1 = energies[i0], energies[i0 + 1]
        d0, d1 = density[i0], density[i0 + 1]
        a = x0 + (threshold - d0) / (d1 - d0) * (x1 - x0)
        x0, x1 = energies[i1], energies[i1 + 1]
        d0, d1 = density[i1], density[i1 + 1]
        b = x0 + (threshold - d0) / (d1 - d0) * (x1 - x0)
        intervals.append((a, b, i1 - i0))
    return intervals


def _sqrt_edge_refine(energies, density, edge, inward, fit_window):
    """Refine an edge location by fitting rho^2 linearly near the edge.

    For a square-root edge rho(E)^2 is asymptotically linear with a root at
    the true edge; the quadratic term absorbs the slowly varying factor.
    """
    lo, hi = fit_window
    dist = inward * (energies - edge)
    mask = (dist >= lo) & (dist <= hi) & (density > 0)
    if mask.sum() < 6:
        return edge, False
    x = energies[mask]
    y = density[mask] ** 2
    coeffs = np.polyfit(x, y, 2)
    roots = np.roots(coeffs)
    roots = roots[np.isreal(roots)].real
    if roots.size == 0:
        return edge, False
    root = roots[np.argmin(np.abs(roots - edge))]
    if abs(root - edge) > hi:
        return edge, False
    return float(root), True


def detect_support(energies, density, threshold=1e-4, kappa=None, c_bulk=1e-3,
                   refine=True, fit_window=(1e-3, 2e-2)):
    """Single support interval [alpha, beta] with a one-cut certificate.

    Raises MultiCut when more than one interval exceeds the threshold and
    CuspSuspect when the interior density dips below c_bulk.
    """
    energies = np.asarray(energies, dtype=float)
    density = np.asarray(density, dtype=float)
    intervals = [iv for iv in _crossings(energies, density, threshold) if iv[2] >= 3]
    if len(intervals) == 0:
        raise InsufficientGrid("support intervals are narrower than the grid resolution")
    if len(intervals) > 1:
        raise MultiCut(f"{len(intervals)} support components above threshold {threshold:g}")
    alpha, beta, _ = intervals[0]
    refined = False
    if refine:
        alpha, ok_a = _sqrt_edge_refine(energies, density, alpha, +1.0, fit_window)
        beta, ok_b = _sqrt_edge_refine(energies, density, beta, -1.0, fit_window)
        refined = ok_a and ok_b
    if kappa is None:
        kappa = (beta - alpha) / 20.0
    interior = (energies >= alpha + kappa) & (energies <= beta - kappa)
    bulk_min = float(density[interior].min()) if interior.any() else 0.0
    if bulk_min < c_bulk:
        raise CuspSuspect(
            f"interior density minimum {bulk_min:.3g} below c_bulk={c_bulk:g}"
        )
    return SupportCertificate(alpha, beta, threshold, kappa, bulk_min, refined)


@dataclass
class SpectralData:
    """Density of states with support, normalized CDF, quantiles and edge fits."""

    profile: object
    energies: np.ndarray            # full sample grid (sorted)
    density: np.ndarray             # rho at the sample grid
    support: SupportCertificate
    mass: float
    cdf_grid: np.ndarray            # unnormalized CDF at the sample grid
    quantile_values: np.ndarray     # gamma_1 .. gamma_n for profile.n
    edge_exponents: tuple = (None, None)
    _rho_interp: object = field(default=None, repr=False)
    _cdf_interp: object = field(default=None, repr=False)

    @property
    def alpha(self):
        return self.support.alpha

    @property
    def beta(self):
        return self.support.beta

    def _build_interps(self):
        if self._rho_interp is None:
            self._rho_interp = _EdgeAwareInterp(self.energies, self.density, self.support)
            self._cdf_interp = PchipInterpolator(self.energies, self.cdf_grid, extrapolate=False)

    def rho(self, e):
        self._build_interps()
        return self._rho_interp(e)

    def cdf(self, e):
        """Normalized CDF: fraction of spectral mass to the left of e."""
        self._build_interps()
        e = np.asarray(e, dtype=float)
        out = np.clip(self._cdf_interp(np.clip(e, self.energies[0], self.energies[-1])), 0.0, self.mass)
        out = np.where(e <= self.alpha, 0.0, out)
        out = np.where(e >= self.beta, self.mass, out)
        return out / self.mass

    def quantile(self, i, n=None):
        n = n if n is not None else self.profile.n
        if n == len(self.quantile_values):
            return self.quantile_values[i - 1]
        return quantiles(self, n)[i - 1]


class _EdgeAwareInterp:
    """rho(E) interpolation: PCHIP in u = sqrt(|E-edge|) near edges, in E in the bulk."""

    def __init__(self, energies, density, support, zone=0.05):
        self.support = support
        self.zone = min(zone, 0.25 * (support.beta - support.alpha))
        a, b = support.alpha, support.beta
        mask_a = (energies >= a) & (energies <= a + self.zone)
        mask_b = (energies >= b - self.zone) & (energies <= b)
        mask_m = (energies >= a + 0.5 * self.zone) & (energies <= b - 0.5 * self.zone)
        ua = np.sqrt(np.maximum(energies[mask_a] - a, 0.0))
        ub = np.sqrt(np.maximum(b - energies[mask_b], 0.0))
        self._left = PchipInterpolator(*_dedup(ua, density[mask_a]), extrapolate=False)
        self._right = PchipInterpolator(*_dedup(ub[::-1], density[mask_b][::-1]), extrapolate=False)
        self._mid = PchipInterpolator(*_dedup(energies[mask_m], density[mask_m]), extrapolate=False)

    def __call__(self, e):
        e = np.asarray(e, dtype=float)
        a, b = self.support.alpha, self.support.beta
        out = np.zeros(e.shape)
        inside = (e > a) & (e < b)
        left = inside & (e <= a + 0.75 * self.zone)
        right = inside & (e >= b - 0.75 * self.zone)
        mid = inside & ~left & ~right
        out[left] = self._left(np.sqrt(e[left] - a))
        out[right] = self._right(np.sqrt(b - e[right]))
        out[mid] = self._mid(e[mid])
        return np.clip(np.nan_to_num(out), 0.0, None) if out.ndim else float(np.clip(np.nan_to_num(out), 0.0, None))


def _dedup(x, y):
    x, idx = np.unique(x, return_index=True)
    return x, y[idx]


def quantiles(spectral: SpectralData, n: int, tol=1e-10):
    """gamma_i solving cdf(gamma_i) = i/n, by bisection on the monotone CDF."""
    spectral._build_interps()
    gammas = np.empty(n)
    lo0, hi0 = spectral.alpha, spectral.beta
    for i in range(1, n + 1):
        q = i / n
        lo, hi = lo0, hi0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            val = float(spectral.cdf(mid))
            if abs(val - q) <= tol:
                break
            if val < q:
                lo = mid
            else:
                hi = mid
            if hi - lo < 1e-15 * max(1.0, abs(hi)):
                break
        gammas[i - 1] = 0.5 * (lo + hi)
    return gammas


def edge_fit(spectral: SpectralData, window=(1e-3, 1e-2), npts=16):
    """Log-log least-squares exponents of rho near each edge over the window."""
    lo, hi = window
    if not lo < hi:
        raise WindowTooNarrow("edge-fit window is empty")
    dist = np.geomspace(lo, hi, npts)
    exps = []
    for edge, inward in ((spectral.alpha, +1.0), (spectral.beta, -1.0)):
        rho = np.asarray(spectral.rho(edge + inward * dist), dtype=float)
        good = rho > 0
        if good.sum() < 4:
            raise WindowTooNarrow("too few positive density samples in the fit window")
        slope = np.polyfit(np.log(dist[good]), np.log(rho[good]), 1)[0]
        exps.append(float(slope))
    return tuple(exps)


def _integrate_density(energies, density, support):
    """Unnormalized CDF at the sample nodes: sqrt-substituted Simpson at the
    edges, plain composite Simpson in the bulk."""
    a, b = support.alpha, support.beta
    cdf = np.zeros_like(energies)
    inside = (energies > a) & (energies < b)
    idx = np.flatnonzero(inside)
    e_in, d_in = energies[idx], density[idx]
    zone = min(0.05, 0.25 * (b - a))
    left = e_in <= a + zone
    right = e_in >= b - zone
    # left edge zone, coordinates u = sqrt(E - a): integrand 2 u rho
    cum = np.zeros(e_in.size)
    if left.any():
        u = np.sqrt(e_in[left] - a)
        vals = cumulative_simpson(2.0 * u * d_in[left], x=u, initial=0.0)
        cum[left] = vals
        base = vals[-1]
        start = int(np.flatnonzero(left)[-1])
    else:
        base, start = 0.0, -1
    mid = ~left & ~right
    if mid.any():
        sel = np.flatnonzero(mid)
        x = np.concatenate([[e_in[start]], e_in[sel]]) if start >= 0 else e_in[sel]
        y = np.concatenate([[d_in[start]], d_in[sel]]) if start >= 0 else d_in[sel]
        vals = cumulative_simpson(y, x=x, initial=0.0)
        cum[sel] = base + (vals[1:] if start >= 0 else vals)
        base = cum[sel[-1]]
        start = sel[-1]
    if right.any():
        sel = np.flatnonzero(right)
        # v = -sqrt(b - E) increases with E and dE = -2v dv
        v = -np.sqrt(b - e_in[sel])
        x = np.concatenate([[-np.sqrt(b - e_in[start])], v]) if start >= 0 else v
        y = np.concatenate([[d_in[start]], d_in[sel]]) if start >= 0 else d_in[sel]
        vals = cumulative_simpson(-2.0 * x * y, x=x, initial=0.0)
        cum[sel] = base + (vals[1:] if start >= 0 else vals)
    cdf[idx] = cum
    cdf[energies >= b] = cum[-1] if idx.size else 0.0
    return cdf


def _window_guess(profile, pad=0.6):
    values, diag, w = profile.reduced_system()
    row = float((values * w[None, :]).sum(axis=1).max() + (diag / profile.n).max())
    half = 2.0 * np.sqrt(row) + pad
    return (-half, half)


def compute_spectral_data(profile, window=None, opts=DEFAULT_OPTS, n_bulk=700,
                          n_edge=160, threshold=1e-4, kappa=None, c_bulk=1e-3,
                          edge_window=(1e-3, 1e-2), eta_schedule=None,
                          with_quantiles=True):
    """Full pipeline: solve, detect support, integrate, quantiles, edge fits."""
    if window is None:
        window = _window_guess(profile)
    lo, hi = window
    # pass 1: coarse scan to locate the support
    coarse_sched = default_eta_schedule(1e-4)
    coarse = solve_grid(profile, np.linspace(lo, hi, 601), coarse_sched, opts)
    rho_c = density_of_states(coarse)
    cert0 = detect_support(coarse.energies, rho_c, max(threshold, 5e-4), kappa=kappa,
                           c_bulk=0.0, refine=False)
    a0, b0 = cert0.alpha, cert0.beta
    # pass 2: refine each edge so the final sqrt-spaced grid anchors on it
    def _refine_edge(edge0, inward):
        offs = np.linspace(1e-3, 2.5e-2, 90)
        es = edge0 + inward * offs
        s = solve_grid(profile, es, eta_schedule, opts)
        rho_s = density_of_states(s)
        edge, _ = _sqrt_edge_refine(es, rho_s, edge0, inward, (5e-4, 2.5e-2))
        return edge

    a1 = _refine_edge(a0, +1.0)
    b1 = _refine_edge(b0, -1.0)
    # pass 3: sqrt-spaced clusters anchored at the refined edges + uniform bulk
    zone = min(0.05, 0.25 * (b1 - a1))
    u = np.linspace(0.0, np.sqrt(zone), n_edge)[1:]
    near_a = a1 + u**2
    near_b = b1 - u**2
    approach = np.geomspace(1e-5, 0.02, 12)
    bulk = np.linspace(a1 + 0.8 * zone, b1 - 0.8 * zone, n_bulk)
    outside = np.concatenate([
        np.linspace(lo, a1 - 0.021, 25), a1 - approach,
        b1 + approach, np.linspace(b1 + 0.021, hi, 25),
    ])
    energies = np.unique(np.concatenate([near_a, near_b, bulk, outside]))
    sol = solve_grid(profile, energies, eta_schedule, opts)
    rho = density_of_states(sol)
    cert = detect_support(energies, rho, threshold, kappa=kappa, c_bulk=c_bulk,
                          fit_window=edge_window)
    cdf_grid = _integrate_density(energies, rho, cert)
    mass = float(cdf_grid[-1])
    data = SpectralData(profile, energies, rho, cert, mass, cdf_grid,
                        np.empty(0))
    data.edge_exponents = edge_fit(data, window=edge_window)
    if with_quantiles:
        data.quantile_values = quantiles(data, profile.n)
    return data
