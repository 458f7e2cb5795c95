"""Solver for the self-consistent vector equation -1/m_i(z) = z + (S m(z))_i.

The map m -> -1/(z + S m) preserves the upper half-plane, so a damped
fixed-point iteration is globally safe; its contraction rate degrades like
1 - O(Im z) near the real axis, so once the iterate is close we switch to a
vector Newton step on R(m) = 1/m + z + S m, which converges quadratically
and is backtracked whenever it would leave the upper half-plane.

Everything is vectorized over grids of spectral parameters; block-constant
profiles are solved in their k-dimensional reduced system.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import HalfPlaneViolation, NonConvergence, OutOfGrid
from .profiles import VarianceProfile

__all__ = [
    "SolverOptions",
    "QveSolution",
    "solve_qve",
    "solve_at",
    "solve_grid",
    "solve_boundary",
    "boundary_values",
    "stieltjes_derivative",
    "perturbation_gap",
    "default_eta_schedule",
]


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-11              # residual target in the bulk
    tol_edge: float = 1e-9          # accepted fallback near spectral edges
    eta_floor: float = 1e-6
    max_fixed_point: int = 4000
    max_newton: int = 60
    newton_switch: float = 1e-2     # residual below which Newton takes over
    theta0: float = 1.0


DEFAULT_OPTS = SolverOptions()


def _reduced(profile):
    values, diag, w = profile.reduced_system()
    return values * w[None, :], diag / profile.n, values, w


class _System:
    """Reduced-system operator cache for one profile."""

    def __init__(self, profile: VarianceProfile):
        self.profile = profile
        self.bw, self.dn, self.values, self.w = _reduced(profile)
        self.k = profile.k

    def apply(self, m):
        """(S m) for stacked reduced vectors m (..., k)."""
        return np.einsum("ab,...b->...a", self.bw, m) + self.dn * m

    def residual_vec(self, m, z):
        return 1.0 / m + z[..., None] + self.apply(m)

    def residual(self, m, z):
        return np.abs(self.residual_vec(m, z)).max(axis=-1)

    def jacobian(self, m):
        """d/dm of 1/m + z + S m, stacked (..., k, k)."""
        jac = np.broadcast_to(self.bw, m.shape + (self.k,)).astype(complex).copy()
        idx = np.arange(self.k)
        jac[..., idx, idx] += self.dn - 1.0 / m**2
        return jac


def _fixed_point_phase(sys, m, z, opts, max_iter, target):
    theta = np.full(z.shape, opts.theta0)
    res = sys.residual(m, z)
    for _ in range(max_iter):
        active = res > target
        if not active.any():
            break
        phi = -1.0 / (z[..., None] + sys.apply(m))
        trial = (1.0 - theta[..., None]) * m + theta[..., None] * phi
        res_t = sys.residual(trial, z)
        worse = res_t > res
        accept = active & ~worse
        m[accept] = trial[accept]
        res[accept] = res_t[accept]
        theta[active & worse] *= 0.5
        theta[accept] = np.minimum(1.0, theta[accept] * 1.2)
        np.clip(theta, 1e-4, 1.0, out=theta)
    return m, res


def _newton_phase(sys, m, z, opts, target, keep_upper):
    res = sys.residual(m, z)
    stall = np.zeros(z.shape, dtype=int)
    for _ in range(opts.max_newton):
        active = (res > target) & (stall < 3)
        if not active.any():
            break
        ma, za = m[active], z[active]
        rhs = -sys.residual_vec(ma, za)
        try:
            delta = np.linalg.solve(sys.jacobian(ma), rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            stall[active] += 3
            continue
        step = np.ones(ma.shape[0])
        best = ma.copy()
        best_res = res[active].copy()
        improved = np.zeros(ma.shape[0], dtype=bool)
        for _ in range(25):
            trial = ma + step[:, None] * delta
            ok = np.isfinite(trial).all(axis=-1)
            if keep_upper:
                ok &= (trial.imag > 0).all(axis=-1)
            res_t = np.full(ma.shape[0], np.inf)
            if ok.any():
                res_t[ok] = sys.residual(trial[ok], za[ok])
            gain = res_t < best_res
            best[gain] = trial[gain]
            best_res[gain] = res_t[gain]
            improved |= gain
            if improved.all():
                break
            step[~gain] *= 0.5
        m[active] = best
        new_res = res.copy()
        new_res[active] = best_res
        stall[active] = np.where(improved, 0, stall[active] + 1)
        res = new_res
    return m, res


def _solve_batch(profile, zs, init, opts, keep_upper=True):
    """Solve the reduced system at each z; returns (m (..., k), residual)."""
    sys = _System(profile)
    z = np.asarray(zs, dtype=complex)
    shape = z.shape
    z = z.ravel()
    if init is None:
        m = np.repeat((-1.0 / z)[:, None], sys.k, axis=1)
    else:
        m = np.array(np.broadcast_to(init, (z.size, sys.k)), dtype=complex)
    m, res = _fixed_point_phase(sys, m, z, opts, opts.max_fixed_point, opts.newton_switch)
    m, res = _newton_phase(sys, m, z, opts, opts.tol, keep_upper)
    bad = res > opts.newton_switch
    if bad.any():
        # Newton stalled far from the solution: grind with fixed point, retry.
        mntry, _ = _fixed_point_phase(sys, m.copy(), z, opts, opts.max_fixed_point, opts.tol)
        m[bad] = mntry[bad]
        m, res = _newton_phase(sys, m, z, opts, opts.tol, keep_upper)
    if keep_upper and (m.imag <= 0).any(axis=-1).any():
        offenders = np.flatnonzero((m.imag <= 0).any(axis=-1))
        raise HalfPlaneViolation(
            f"solution left the upper half-plane at z={z[offenders[0]]:.6g}"
        )
    return m.reshape(shape + (sys.k,)), res.reshape(shape)


def solve_qve(profile, z, init=None, opts=DEFAULT_OPTS):
    """Solve at a single point z (Im z > 0); returns (m as length-n vector, residual).

    Without an initial guess, points close to the real axis are reached by
    the continuation ladder (start at -1/z high up, warm starts downward).
    """
    if np.imag(z) <= 0:
        raise OutOfGrid("solve_qve expects Im z > 0; use boundary_values for the real axis")
    if init is None and np.imag(z) < 0.5:
        m = solve_at(profile, z, opts)
        sys = _System(profile)
        res = float(sys.residual(m[None, :], np.asarray([complex(z)]))[0])
        return profile.expand_vector(m), res
    m, res = _solve_batch(profile, np.asarray([z]), init, opts)
    res = float(res[0])
    if res > opts.tol_edge:
        raise NonConvergence(
            f"residual {res:.3e} above tolerance at z={z:.6g}", residual=res, where=z
        )
    return profile.expand_vector(m[0]), res


def solve_at(profile, z, opts=DEFAULT_OPTS, n_stages=8):
    """Continuation solve at one z with small imaginary part; returns reduced m."""
    z = complex(z)
    if z.imag <= 0:
        raise OutOfGrid("solve_at expects Im z > 0")
    etas = np.geomspace(max(1.0, z.imag), z.imag, n_stages) if z.imag < 0.5 else [z.imag]
    m = None
    for eta in etas:
        zz = complex(z.real, eta)
        m, res = _solve_batch(profile, np.asarray([zz]), m, opts)
        m = m[0]
    if res[0] > opts.tol_edge:
        raise NonConvergence(f"residual {res[0]:.3e} at z={z:.6g}", residual=float(res[0]), where=z)
    return m


def default_eta_schedule(eta_floor=1e-6, top=1.0):
    """Geometric ladder eta_floor * 2^j, descending from >= top to eta_floor."""
    n = int(np.ceil(np.log2(top / eta_floor)))
    return eta_floor * 2.0 ** np.arange(n, -1, -1)


@dataclass
class QveSolution:
    """Vector solutions over an (energy, eta) grid, retained at the two lowest levels."""

    profile: VarianceProfile
    energies: np.ndarray            # (nE,)
    etas: np.ndarray                # (nL,) strictly decreasing
    m_bar: np.ndarray               # (nL, nE) aggregate (1/n) sum_i m_i
    residuals: np.ndarray           # (nL, nE)
    m_floor: np.ndarray             # (nE, k) at etas[-1]
    m_floor2: np.ndarray            # (nE, k) at etas[-2] (= 2 * floor by default)
    opts: SolverOptions = field(default_factory=lambda: DEFAULT_OPTS)

    @property
    def eta_floor(self):
        return float(self.etas[-1])

    @property
    def grid(self):
        return (self.energies[None, :] + 1j * self.etas[:, None]).ravel()

    def index_of(self, energy):
        if self.energies.size == 0:
            raise OutOfGrid("empty solution grid")
        if not (self.energies.min() - 1e-12 <= energy <= self.energies.max() + 1e-12):
            raise OutOfGrid(f"E={energy:g} outside solved range")
        return int(np.argmin(np.abs(self.energies - energy)))

    def floor_vectors(self, expand=True):
        m = self.m_floor
        return self.profile.expand_vector(m) if expand else m


def solve_grid(profile, energies, eta_schedule=None, opts=DEFAULT_OPTS):
    """Continuation solve over an energy grid; deterministic given inputs."""
    energies = np.asarray(energies, dtype=float)
    if eta_schedule is None:
        eta_schedule = default_eta_schedule(opts.eta_floor)
    etas = np.asarray(eta_schedule, dtype=float)
    if etas.size == 0 or np.any(np.diff(etas) >= 0):
        raise OutOfGrid("eta schedule must be strictly decreasing")
    if etas[-1] < opts.eta_floor * (1 - 1e-12):
        raise OutOfGrid("eta schedule ends below the configured floor")
    nE, nL = energies.size, etas.size
    k = profile.k
    if nE == 0:
        empty = np.zeros((nL, 0))
        return QveSolution(profile, energies, etas, empty.astype(complex), empty,
                           np.zeros((0, k), complex), np.zeros((0, k), complex), opts)
    w = profile.weights()
    m_bar = np.zeros((nL, nE), dtype=complex)
    residuals = np.zeros((nL, nE))
    m = None
    m_prev = None
    for lev, eta in enumerate(etas):
        zs = energies + 1j * eta
        m_prev = m
        m, res = _solve_batch(profile, zs, m, opts)
        bad = res > opts.tol_edge
        if bad.any():
            j = int(np.flatnonzero(bad)[0])
            raise NonConvergence(
                f"residual {res[j]:.3e} above tolerance",
                residual=float(res[j]),
                where=complex(energies[j], eta),
            )
        m_bar[lev] = np.einsum("a,...a->...", w, m)
        residuals[lev] = res
    if m_prev is None:
        m_prev = m
    return QveSolution(profile, energies, etas, m_bar, residuals, m, m_prev, opts)


def _newton_polish_real(profile, energies, init, opts):
    """Newton at eta = 0 from a near-boundary start; keeps Im m > 0 (bulk only)."""
    z = np.asarray(energies, dtype=complex)
    m, res = _newton_phase(_System(profile), init.copy(), z, opts, 1e-13, keep_upper=True)
    return m, res


def solve_boundary(profile, energies, opts=DEFAULT_OPTS, extrapolate=True, polish=False,
                   eta_schedule=None):
    """Boundary values m(E + i0) on an energy grid, as reduced vectors (nE, k).

    Default: evaluate at the eta floor, optionally Richardson-extrapolated
    using the floor and twice-floor levels.  polish=True runs a final Newton
    iteration directly on the real axis (valid in the bulk, where the
    Herglotz solution is an isolated root); it returns residuals at eta = 0.
    """
    scalar = np.ndim(energies) == 0
    energies = np.atleast_1d(np.asarray(energies, dtype=float))
    sol = solve_grid(profile, energies, eta_schedule, opts)
    m = 2.0 * sol.m_floor - sol.m_floor2 if extrapolate else sol.m_floor.copy()
    if polish:
        m, res = _newton_polish_real(profile, energies, m, opts)
        if (res > opts.tol_edge).any():
            j = int(np.argmax(res))
            raise NonConvergence(
                f"boundary polish stalled at E={energies[j]:g} (residual {res[j]:.2e})",
                residual=float(res[j]), where=energies[j],
            )
    return m[0] if scalar else m


def boundary_values(sol, energy, extrapolate=True, polish=False):
    """m(E + i0) for one energy of a solved grid, as a length-n vector.

    Negative-side values follow from the reflection m(E - i0) = conj(m(E + i0)).
    """
    idx = sol.index_of(energy)
    if abs(sol.energies[idx] - energy) > 1e-9 * max(1.0, abs(energy)):
        m = solve_boundary(sol.profile, energy, sol.opts, extrapolate, polish)
        return sol.profile.expand_vector(m)
    m = 2.0 * sol.m_floor[idx] - sol.m_floor2[idx] if extrapolate else sol.m_floor[idx].copy()
    if polish:
        m, res = _newton_polish_real(sol.profile, np.asarray([sol.energies[idx]]), m[None, :], sol.opts)
        if res[0] > sol.opts.tol_edge:
            raise NonConvergence("boundary polish stalled", residual=float(res[0]), where=energy)
        m = m[0]
    return sol.profile.expand_vector(m)


def stieltjes_derivative(profile, m, order=1):
    """Derivatives of m in z from the differentiated self-consistent equation.

    Solves (1 - m^2 S) m' = m^2 in the reduced system; m may be stacked
    (..., k).  order=2 additionally returns m'' from the second derivative
    relation (1 - m^2 S) m'' = 2 m m'(1 + S m') = 2 (m')^2 / m.
    """
    sys = _System(profile)
    k = sys.k
    m = np.asarray(m)
    jac = np.broadcast_to(sys.bw, m.shape + (k,)).astype(complex).copy()
    jac *= -(m**2)[..., None]
    idx = np.arange(k)
    jac[..., idx, idx] += 1.0 - sys.dn * m**2
    mprime = np.linalg.solve(jac, (m**2)[..., None])[..., 0]
    if order == 1:
        return mprime
    msecond = np.linalg.solve(jac, (2.0 * mprime**2 / m)[..., None])[..., 0]
    return mprime, msecond


def perturbation_gap(profile_a, profile_b, z_grid, opts=DEFAULT_OPTS):
    """sup over the grid of ||m_a(z) - m_b(z)||_inf for two admissible profiles."""
    gap = 0.0
    for z in np.asarray(z_grid, dtype=complex).ravel():
        ma = profile_a.expand_vector(solve_at(profile_a, z, opts))
        mb = profile_b.expand_vector(solve_at(profile_b, z, opts))
        gap = max(gap, float(np.abs(ma - mb).max()))
    return gap
