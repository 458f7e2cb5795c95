"""Two-parameter stability operator, its Perron data, resolvents and kernels.

The operator F(z, w) = |m(z) m(w)|^{1/2} S |m(z) m(w)|^{1/2} is symmetric
with positive entries; its top eigenpair controls the near-singularity of
(1 - S m(z) m(w))^{-1}, which is isolated with a rank-one (Sherman-Morrison)
split around the Perron mode.  Block-constant profiles get exact reduced
eigendata; dense profiles use power iteration with deflation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NearSingular, OutOfGrid, PowerIterationStall
from .profiles import VarianceProfile
from .qve import DEFAULT_OPTS, solve_at, solve_boundary, stieltjes_derivative

__all__ = [
    "StabilityOperator",
    "VarianceKernels",
    "vector_at",
    "build_stability",
    "stab_resolvent_apply",
    "kernels",
    "boundary_singularity",
    "edge_eigvec_relation",
]

DENSE_CAP = 4096


def vector_at(profile, z, opts=DEFAULT_OPTS, polish=True):
    """m at a complex point; real z means boundary value E + i0, and
    points in the lower half-plane reflect to the conjugate solution."""
    z = complex(z)
    if z.imag > 0:
        return profile.expand_vector(solve_at(profile, z, opts))
    if z.imag < 0:
        return np.conj(profile.expand_vector(solve_at(profile, np.conj(z), opts)))
    m = solve_boundary(profile, z.real, opts, polish=polish)
    return profile.expand_vector(m)


@dataclass
class StabilityOperator:
    profile: VarianceProfile
    z: complex
    w: complex
    m_z: np.ndarray             # length-n vectors
    m_w: np.ndarray
    lambda1: float
    v: np.ndarray               # Perron eigenvector, l2-normalized, positive
    gap: float                  # lambda1 - max_{j>1} |lambda_j|
    matrix: np.ndarray          # dense F (n <= DENSE_CAP)

    @property
    def u_phase(self):
        """Diagonal unitary m(z) m(w) / |m(z) m(w)|."""
        prod = self.m_z * self.m_w
        return prod / np.abs(prod)

    @property
    def deflated(self):
        """A = F - lambda1 v v^T."""
        return self.matrix - self.lambda1 * np.outer(self.v, self.v)

    def sm_denominator(self):
        """1 - lambda1 v^T (U* - A)^{-1} v from the rank-one split."""
        x = np.linalg.solve(np.diag(np.conj(self.u_phase)) - self.deflated, self.v)
        return 1.0 - self.lambda1 * np.dot(self.v, x)


def _power_top(mat, tol, maxit=20000):
    n = mat.shape[0]
    v = np.full(n, 1.0 / np.sqrt(n))
    lam = 0.0
    last_res = np.inf
    stall = 0
    for it in range(maxit):
        fv = mat @ v
        lam = float(v @ fv)
        res = float(np.linalg.norm(fv - lam * v))
        if res <= tol:
            return lam, v
        if res >= last_res * 0.99999:
            stall += 1
            if stall > 500:
                raise PowerIterationStall(f"top eigenpair stalled at residual {res:.2e}")
        else:
            stall = 0
        last_res = res
        v = fv / np.linalg.norm(fv)
    raise PowerIterationStall(f"top eigenpair: iteration budget exhausted (residual {res:.2e})")


def _power_second(mat, lam1, v1, tol, maxit=20000):
    """Largest |eigenvalue| of the deflated operator, from two canonical starts."""
    n = mat.shape[0]
    best = 0.0
    for pivot in (0, n // 2):
        u = np.zeros(n)
        u[pivot] = 1.0
        u -= v1 * (v1 @ u)
        nrm = np.linalg.norm(u)
        if nrm < 1e-300:
            continue
        u /= nrm
        lam = 0.0
        for _ in range(maxit):
            au = mat @ u - lam1 * v1 * (v1 @ u)
            au -= v1 * (v1 @ au)
            lam_new = float(u @ au)
            nrm = np.linalg.norm(au)
            if nrm < max(tol, 1e-15):
                lam = 0.0
                break
            u_new = au / nrm
            if abs(abs(lam_new) - abs(lam)) <= tol * max(1.0, abs(lam_new)):
                lam = lam_new
                break
            lam = lam_new
            u = u_new
        best = max(best, abs(lam))
    return best


def _block_eigendata(profile, m_z, m_w):
    """Exact spectrum of F for block-constant profiles via the reduced operator."""
    values, diag, wgt = profile.reduced_system()
    lab = profile.labels()
    # per-block |m_z m_w|^{1/2}
    r = np.sqrt(np.abs(m_z * m_w))
    r_red = np.array([r[lab == a][0] for a in range(profile.k)])
    xi = r_red**2 * diag / profile.n
    x = r_red[:, None] * values * r_red[None, :]
    k_mat = np.diag(xi) + np.sqrt(wgt)[:, None] * x * np.sqrt(wgt)[None, :]
    eigs, vecs = np.linalg.eigh(k_mat)
    lam1 = float(eigs[-1])
    chat = vecs[:, -1]
    if chat.sum() < 0:
        chat = -chat
    v = (chat / np.sqrt(profile.n * wgt))[lab]
    rest = np.concatenate([np.abs(eigs[:-1]), np.abs(xi)]) if profile.k > 0 else np.abs(xi)
    lam2 = float(rest.max()) if rest.size else 0.0
    return lam1, v, lam1 - lam2


def build_stability(profile, z, w, m_z=None, m_w=None, opts=DEFAULT_OPTS,
                    eig_tol=1e-12, method="auto"):
    """Stability operator with Perron eigenpair and spectral gap at (z, w)."""
    if profile.n > DENSE_CAP:
        raise OutOfGrid(f"dense stability operator capped at n={DENSE_CAP}")
    m_z = vector_at(profile, z, opts) if m_z is None else np.asarray(m_z)
    m_w = vector_at(profile, w, opts) if m_w is None else np.asarray(m_w)
    root = np.sqrt(np.abs(m_z * m_w))
    mat = root[:, None] * profile.s * root[None, :]
    if method == "auto":
        method = "block" if profile.is_structured else "power"
    if method == "block":
        lam1, v, gap = _block_eigendata(profile, m_z, m_w)
    else:
        lam1, v = _power_top(mat, eig_tol)
        if v.sum() < 0:
            v = -v
        lam2 = _power_second(mat, lam1, v, max(eig_tol, 1e-11))
        gap = lam1 - lam2
    return StabilityOperator(profile, complex(z), complex(w), m_z, m_w, lam1, v, gap, mat)


def stab_resolvent_apply(profile, z, w, rhs, m_z=None, m_w=None, opts=DEFAULT_OPTS,
                         check=True, denom_floor=1e-13):
    """(1 - S m(z) m(w))^{-1} rhs by direct solve, guarded by the rank-one denominator."""
    rhs = np.asarray(rhs, dtype=complex)
    if not rhs.any():
        return np.zeros_like(rhs)
    op = build_stability(profile, z, w, m_z=m_z, m_w=m_w, opts=opts)
    if check:
        den = op.sm_denominator()
        if abs(den) < denom_floor:
            raise NearSingular(f"rank-one denominator {abs(den):.2e} below floor")
    mat = np.eye(profile.n) - profile.s * (op.m_z * op.m_w)[None, :]
    return np.linalg.solve(mat, rhs)


@dataclass
class VarianceKernels:
    z: complex
    w: complex
    g: complex                  # d/dw of h
    h: complex                  # tr(m'(z) m(z)^{-1} (1 - S m(z) m(w))^{-1})
    p: complex                  # h minus its w-independent part


def kernels(profile, z, w, m_z=None, m_w=None, opts=DEFAULT_OPTS):
    """Variance kernels g, h, P at one parameter pair (dense path)."""
    m_z = vector_at(profile, z, opts) if m_z is None else np.asarray(m_z)
    m_w = vector_at(profile, w, opts) if m_w is None else np.asarray(m_w)
    mp_z = _derivative_full(profile, m_z)
    mp_w = _derivative_full(profile, m_w)
    s = profile.s
    res = np.linalg.inv(np.eye(profile.n) - s * (m_z * m_w)[None, :])
    d = mp_z / m_z
    h = complex(np.sum(d * np.diag(res)))
    p = h - complex(np.sum(d))
    k_right = s * (m_z * mp_w)[None, :]
    t_mat = res @ k_right @ res
    g = complex(np.sum(d * np.diag(t_mat)))
    return VarianceKernels(complex(z), complex(w), g, h, p)


def _derivative_full(profile, m_full):
    """m'(z) for a full-length vector, handling conjugate (lower half-plane) inputs."""
    if profile.is_structured:
        starts = np.concatenate([[0], np.cumsum(profile.structure.sizes)[:-1]])
        m_red = m_full[starts]
    else:
        m_red = m_full
    if (np.imag(m_red) < 0).all():
        return np.conj(profile.expand_vector(stieltjes_derivative(profile, np.conj(m_red))))
    return profile.expand_vector(stieltjes_derivative(profile, m_red))


def boundary_singularity(profile, x, y, eta=0.0, opts=DEFAULT_OPTS, denom_floor=1e-13):
    """P(x + i eta, y - i eta) via the rank-one split; also returns (y - x) P.

    eta = 0 uses Newton-polished boundary values on both sides.
    """
    z = complex(x, eta)
    w = complex(y, -eta)
    if eta == 0.0 and abs(x - y) < 1e-14:
        raise NearSingular("P(x+i0, x-i0) sits on the singularity")
    m_z = vector_at(profile, z, opts)
    # w sits on the lower side; at eta = 0 take the conjugate boundary value
    m_w = np.conj(vector_at(profile, y, opts)) if eta == 0.0 else vector_at(profile, w, opts)
    op = build_stability(profile, z, w, m_z=m_z, m_w=m_w, opts=opts)
    ustar = np.conj(op.u_phase)
    a_mat = op.deflated
    lhs = np.diag(ustar) - a_mat
    mp_z = _derivative_full(profile, m_z)
    d = mp_z / m_z
    sol_v = np.linalg.solve(lhs, op.v)
    den = 1.0 - op.lambda1 * np.dot(op.v, sol_v)
    if abs(den) < denom_floor:
        raise NearSingular(f"rank-one denominator {abs(den):.2e} below floor")
    # trace part, minus its w-independent limit
    term0 = np.sum(d * np.diag(np.linalg.solve(lhs, np.diag(ustar)))) - np.sum(d)
    rank1 = op.lambda1 * (sol_v @ (d * ustar * sol_v)) / den
    p_val = complex(term0 + rank1)
    return p_val, (y - x) * p_val


def edge_eigvec_relation(profile, offsets, spectral=None, opts=DEFAULT_OPTS):
    """Residual of the edge relation predicting Im m(beta - E) from Perron data.

    Im m_i(beta - E) ~ |m_i(beta)| v_i(beta)/q * Im m_sc(2 - E) with
    q^2 = <v^3>/<|m| v>; returns the max relative residual per offset.
    """
    from .spectrum import compute_spectral_data

    if spectral is None:
        spectral = compute_spectral_data(profile, opts=opts)
    beta = spectral.beta
    m_beta = solve_boundary(profile, beta, opts, polish=False)
    m_beta = profile.expand_vector(m_beta)
    op = build_stability(profile, beta, beta, m_z=m_beta, m_w=m_beta, opts=opts)
    q = np.sqrt(np.sum(op.v**3) / np.sum(np.abs(m_beta) * op.v))
    out = []
    for off in np.atleast_1d(offsets):
        if off == 0:
            out.append(0.0)
            continue
        m_in = profile.expand_vector(solve_boundary(profile, beta - off, opts, polish=True))
        pred = np.abs(m_beta) * op.v / q * _im_msc(2.0 - off)
        rel = np.abs(m_in.imag - pred) / np.abs(pred)
        out.append(float(rel.max()))
    return np.asarray(out)


def _im_msc(e):
    return float(np.sqrt(max(4.0 - e * e, 0.0)) / 2.0)
