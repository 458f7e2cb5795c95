"""Free convolution with the semicircle law via rank-one profile augmentation.

The production path augments the variance matrix by a flat t/N shift (plus an
optional t/N diagonal term matching GOE increments) and reuses the vector
solver; the implicit subordination equation m_t(z) = m_0(z + t m_t(z)) is
kept as an independent verification oracle.  Characteristics z -> z + (t0 -
t) m_{t0}(z) and the transport-equation residual are exposed for tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AssumptionViolated, NonConvergence, StencilOutOfRange
from .profiles import VarianceProfile
from .qve import DEFAULT_OPTS, solve_at, stieltjes_derivative
from .spectrum import SpectralData, compute_spectral_data

__all__ = [
    "FreeConvolution",
    "convolve",
    "subordination_residual",
    "stieltjes_via_subordination",
    "characteristic",
    "burgers_residual",
    "diagonal_variant_gap",
    "find_epsilon_star",
]


@dataclass
class FreeConvolution:
    base_profile: VarianceProfile
    t: float
    augmented_profile: VarianceProfile
    spectral: SpectralData
    diag_variant: bool = False

    @property
    def quantiles(self):
        return self.spectral.quantile_values

    def stieltjes(self, z, opts=DEFAULT_OPTS):
        """Aggregate m_t(z) from the augmented profile."""
        m = solve_at(self.augmented_profile, z, opts)
        return complex(np.sum(self.augmented_profile.weights() * m))

    def stieltjes_vector(self, z, opts=DEFAULT_OPTS):
        return self.augmented_profile.expand_vector(solve_at(self.augmented_profile, z, opts))


def convolve(profile, t, diag_variant=False, opts=DEFAULT_OPTS, **spectral_kwargs):
    """Free convolution of the profile's density with the semicircle law at time t."""
    if t < 0:
        raise AssumptionViolated("time must be nonnegative")
    aug = profile.with_flat_shift(t, diag_extra=t if diag_variant else 0.0)
    try:
        spectral = compute_spectral_data(aug, opts=opts, **spectral_kwargs)
    except AssumptionViolated as exc:
        raise AssumptionViolated(f"augmented profile at t={t:g} is inadmissible: {exc}") from exc
    return FreeConvolution(profile, t, aug, spectral, diag_variant)


def _aggregate(profile, m):
    return np.sum(profile.weights() * m, axis=-1)


def subordination_residual(fc: FreeConvolution, zs, opts=DEFAULT_OPTS):
    """|m_t(z) - m_0(z + t m_t(z))| for each verification point z."""
    zs = np.atleast_1d(np.asarray(zs, dtype=complex))
    out = np.empty(zs.shape)
    for i, z in enumerate(zs):
        mt = _aggregate(fc.augmented_profile, solve_at(fc.augmented_profile, z, opts))
        shifted = z + fc.t * mt
        m0 = _aggregate(fc.base_profile, solve_at(fc.base_profile, shifted, opts))
        out[i] = abs(mt - m0)
    return out


def stieltjes_via_subordination(profile, z, t, init=None, opts=DEFAULT_OPTS,
                                tol=1e-12, max_iter=60):
    """Solve the scalar implicit equation m = m_0(z + t m) by damped Newton.

    Independent realization of the free convolution used as an oracle for
    the augmented-profile path.
    """
    z = complex(z)
    w = profile.weights()
    if init is None:
        m = _aggregate(profile, solve_at(profile, z, opts)) if t > 0 else -1.0 / z
    else:
        m = complex(init)
    for _ in range(max_iter):
        shifted = z + t * m
        if shifted.imag <= 0:
            raise NonConvergence("subordination iterate left the upper half-plane")
        mv = solve_at(profile, shifted, opts)
        m0 = complex(np.sum(w * mv))
        psi = m - m0
        if abs(psi) <= tol:
            return m
        m0p = complex(np.sum(w * stieltjes_derivative(profile, mv)))
        dpsi = 1.0 - t * m0p
        step = psi / dpsi
        # Damp so the iterate keeps Im(z + t m) > 0
        lam = 1.0
        for _ in range(30):
            trial = m - lam * step
            if (z + t * trial).imag > 0 and trial.imag > 0:
                break
            lam *= 0.5
        m = m - lam * step
    raise NonConvergence(f"subordination Newton stalled at z={z:.4g}", residual=abs(psi))


def characteristic(z, t0, t, m_t0_at_z):
    """Characteristic position z_t = z + (t0 - t) m_{t0}(z) of the transport flow."""
    return z + (t0 - t) * m_t0_at_z


def burgers_residual(profile, z, t, dt=1e-4, opts=DEFAULT_OPTS):
    """|d/dt m_t(z) - m_t(z) d/dz m_t(z)| by central differences in t.

    The z-derivative is exact (differentiated self-consistent equation); at
    t = 0 a one-sided second-order stencil is used.
    """
    if t < 0 or dt <= 0:
        raise StencilOutOfRange("need t >= 0 and dt > 0")
    aug = profile.with_flat_shift(t)
    mv = solve_at(aug, z, opts)
    m_t = _aggregate(aug, mv)
    mp_t = _aggregate(aug, stieltjes_derivative(aug, mv))

    def agg_at(tt):
        p = profile.with_flat_shift(tt)
        return _aggregate(p, solve_at(p, z, opts))

    if t >= dt:
        dm_dt = (agg_at(t + dt) - agg_at(t - dt)) / (2.0 * dt)
    else:
        dm_dt = (-3.0 * m_t + 4.0 * agg_at(t + dt) - agg_at(t + 2.0 * dt)) / (2.0 * dt)
    return abs(dm_dt - m_t * mp_t)


def diagonal_variant_gap(profile, t, z_grid, opts=DEFAULT_OPTS, **spectral_kwargs):
    """Gap between the flat-shift flow and its GOE-matched diagonal variant.

    Returns (sup_z ||m - m_hat||_inf, max_i |gamma_i - gamma_hat_i|).
    """
    plain = profile.with_flat_shift(t)
    diag = profile.with_flat_shift(t, diag_extra=t)
    gap_m = 0.0
    for z in np.atleast_1d(np.asarray(z_grid, dtype=complex)):
        ma = plain.expand_vector(solve_at(plain, z, opts))
        mb = diag.expand_vector(solve_at(diag, z, opts))
        gap_m = max(gap_m, float(np.abs(ma - mb).max()))
    sa = compute_spectral_data(plain, opts=opts, **spectral_kwargs)
    sb = compute_spectral_data(diag, opts=opts, **spectral_kwargs)
    gap_q = float(np.abs(sa.quantile_values - sb.quantile_values).max())
    return gap_m, gap_q


def find_epsilon_star(profile, t_max=1.0, steps=8, opts=DEFAULT_OPTS, **spectral_kwargs):
    """Largest admissible convolution time, bisected on the one-cut certificate."""
    lo, hi = 0.0, t_max

    def admissible(t):
        try:
            convolve(profile, t, opts=opts, **spectral_kwargs)
            return True
        except AssumptionViolated:
            return False

    if admissible(hi):
        return hi
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        if admissible(mid):
            lo = mid
        else:
            hi = mid
    return lo
