"""Matrix sampling, spectral statistics, Dyson flows and the MC harness.

Entry laws are standardized (mean 0, variance 1) and scaled entrywise by the
profile's variance matrix; their third/fourth cumulants are recorded
analytically so cumulant-dependent formulas stay testable.  Per-sample
random streams come from spawning the master seed, which makes every batch
bit-reproducible and independent of the worker schedule.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from .errors import DegenerateInput, EigenFailure, OutOfGrid, ParticleCollision
from .profiles import Cumulants, VarianceProfile

__all__ = [
    "EnsembleSpec",
    "McResult",
    "DbmState",
    "law_cumulants",
    "sample_matrix",
    "eigen_spectrum",
    "sev_statistic",
    "counting_statistic",
    "lss_statistic",
    "txy_diagnostic",
    "dbm_run",
    "mc_harness",
]


# ---------------------------------------------------------------------------
# entry laws

def law_cumulants(law, params=None):
    """Standardized (variance 1) third and fourth cumulants of an entry law."""
    params = params or {}
    if law == "gaussian":
        return 0.0, 0.0
    if law == "rademacher_scaled":
        return 0.0, -2.0
    if law == "bernoulli_shifted":
        p = float(params.get("p", 0.3))
        if not 0.0 < p < 1.0:
            raise DegenerateInput("bernoulli parameter must be in (0, 1)")
        q = p * (1.0 - p)
        return (1.0 - 2.0 * p) / np.sqrt(q), (1.0 - 6.0 * q) / q
    if law == "gaussian_divisible":
        raise DegenerateInput("gaussian_divisible cumulants depend on the profile; "
                              "use EnsembleSpec.attach_cumulants")
    raise DegenerateInput(f"unknown entry law {law!r}")


def _standardized_draw(law, params, rng, size):
    if law == "gaussian":
        return rng.standard_normal(size)
    if law == "rademacher_scaled":
        return rng.integers(0, 2, size=size) * 2.0 - 1.0
    if law == "bernoulli_shifted":
        p = float(params.get("p", 0.3))
        return (rng.random(size) < p).astype(float) / np.sqrt(p * (1 - p)) \
            - p / np.sqrt(p * (1 - p))
    raise DegenerateInput(f"unknown entry law {law!r}")


@dataclass
class EnsembleSpec:
    """Sampling recipe: profile, entry law and a 64-bit master seed."""

    profile: VarianceProfile
    law: str = "gaussian"
    law_params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.law == "gaussian_divisible":
            t0 = float(self.law_params.get("t0", 0.0))
            ns_min = self.profile.ns_bounds[0]
            if not 0.0 < t0 < ns_min / 2.0:
                raise DegenerateInput("gaussian_divisible needs 0 < t0 < min(NS)/2")
            if "base" not in self.law_params:
                raise DegenerateInput("gaussian_divisible needs a base law")

    def attach_cumulants(self):
        """Profile copy with cumulants matching this law, per entry class."""
        prof = self.profile
        ns = prof.structure.values if prof.is_structured else prof.ns
        if self.law == "gaussian_divisible":
            t0 = float(self.law_params["t0"])
            s3b, s4b = law_cumulants(self.law_params["base"],
                                     self.law_params.get("base_params"))
            ns_eff = ns - t0
        else:
            s3b, s4b = law_cumulants(self.law, self.law_params)
            ns_eff = ns
        cum = Cumulants(s3=s3b * ns_eff**1.5, s4=s4b * ns_eff**2)
        if prof.is_structured:
            st = prof.structure
            return VarianceProfile.blocks(st.sizes, st.values, st.diag, cum, prof.name)
        return VarianceProfile.dense(ns, cum, prof.name)

    def to_dict(self):
        return {"profile": self.profile.to_dict(), "law": self.law,
                "law_params": dict(self.law_params), "seed": self.seed}

    @classmethod
    def from_dict(cls, doc):
        return cls(VarianceProfile.from_dict(doc["profile"]), doc.get("law", "gaussian"),
                   dict(doc.get("law_params", {}) or {}), int(doc.get("seed", 0)))


def _symmetrize_from_upper(upper):
    out = np.triu(upper, 1)
    out = out + out.T
    out[np.diag_indices_from(out)] = np.diag(upper)
    return out


def sample_matrix(spec: EnsembleSpec, seed=None):
    """One symmetric matrix with E[W_ij] = 0 and E[W_ij^2] = S_ij."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    n = spec.profile.n
    s = spec.profile.s
    if spec.law == "gaussian_divisible":
        t0 = float(spec.law_params["t0"])
        base = spec.law_params["base"]
        base_params = spec.law_params.get("base_params", {})
        shift = (t0 / n) * (1.0 + np.eye(n))
        x = _standardized_draw(base, base_params, rng, (n, n))
        z = np.sqrt(s - shift) * x
        g = rng.standard_normal((n, n)) * np.sqrt(shift)
        return _symmetrize_from_upper(z + g)
    x = _standardized_draw(spec.law, spec.law_params, rng, (n, n))
    return _symmetrize_from_upper(np.sqrt(s) * x)


def eigen_spectrum(w):
    """Ascending eigenvalues of a symmetric matrix."""
    try:
        return np.linalg.eigvalsh(w)
    except np.linalg.LinAlgError as exc:
        raise EigenFailure(str(exc)) from exc


# ---------------------------------------------------------------------------
# normalized statistics

def _as_spectrum(w_or_eigs):
    arr = np.asarray(w_or_eigs)
    return eigen_spectrum(arr) if arr.ndim == 2 else arr


def sev_statistic(w_or_eigs, spectral, i0, edge_fraction=0.05):
    """N rho(gamma_i0) (lambda_i0 - gamma_i0) / sqrt(log N) for a bulk index."""
    eigs = _as_spectrum(w_or_eigs)
    n = eigs.size
    if not edge_fraction * n <= i0 <= (1.0 - edge_fraction) * n:
        raise OutOfGrid(f"index {i0} outside the bulk band [{edge_fraction:.0%}, "
                        f"{1 - edge_fraction:.0%}] of n={n}")
    gamma = spectral.quantile(i0, n)
    rho = float(spectral.rho(gamma))
    return n * rho * (eigs[i0 - 1] - gamma) / np.sqrt(np.log(n))


def counting_statistic(w_or_eigs, spectral, energy):
    """(#{eigenvalues <= E} - N cdf(E)) / (pi^{-1} sqrt(log N))."""
    eigs = _as_spectrum(w_or_eigs)
    n = eigs.size
    kappa = (spectral.beta - spectral.alpha) / 20.0
    if not spectral.alpha + kappa < energy < spectral.beta - kappa:
        raise OutOfGrid("counting energy must sit in the bulk")
    count = int(np.searchsorted(eigs, energy, side="right"))
    return (count - n * float(spectral.cdf(energy))) * np.pi / np.sqrt(np.log(n))


def lss_statistic(w_or_eigs, fun, spectral, mean_density=None):
    """tr f(W) - N int f rho for a test function or plain callable."""
    from .lss import integrate_against_density

    eigs = _as_spectrum(w_or_eigs)
    n = eigs.size
    f = fun.f if hasattr(fun, "f") else fun
    if mean_density is None:
        mean_density = integrate_against_density(fun, spectral)
    return float(np.sum(f(eigs)) - n * mean_density)


def txy_diagnostic(spec: EnsembleSpec, z, w, x, y, n_samples, seed=None,
                   m_z=None, m_w=None, opts=None):
    """Empirical mean of T_xy(z, w) against its deterministic leading term.

    T_xy = (1/N) sum_i (N S_ix) G_iy(z) G_yi(w); the prediction is
    [(1 - S m(z) m(w))^{-1} S m(z) m(w)]_xy.  With x=None the full column
    over all x is returned (one weighted matvec per sample), which makes the
    gap statistically resolvable.
    """
    from .qve import DEFAULT_OPTS
    from .stability import vector_at

    opts = opts or DEFAULT_OPTS
    profile = spec.profile
    n = profile.n
    m_z = vector_at(profile, z, opts) if m_z is None else m_z
    m_w = vector_at(profile, w, opts) if m_w is None else m_w
    smat = profile.s
    prod = m_z * m_w
    lead_mat = np.linalg.solve(np.eye(n) - smat * prod[None, :], smat * prod[None, :])
    leading = lead_mat[:, y] if x is None else complex(lead_mat[x, y])
    seeds = np.random.SeedSequence(spec.seed if seed is None else seed).spawn(n_samples)
    acc = np.zeros(n, dtype=complex) if x is None else 0.0 + 0.0j
    ey = np.zeros(n)
    ey[y] = 1.0
    for s in seeds:
        wmat = sample_matrix(spec, s)
        gz = np.linalg.solve(wmat - z * np.eye(n), ey)
        gw = gz if w == z else np.linalg.solve(wmat - w * np.eye(n), ey)
        pair = gz * gw
        acc += profile.ns.T @ pair / n if x is None else np.sum(profile.ns[:, x] * pair) / n
    empirical = acc / n_samples
    return empirical, leading, np.abs(empirical - leading)


# ---------------------------------------------------------------------------
# Dyson flows

@dataclass
class DbmState:
    t: float
    particles: np.ndarray
    mode: str


def _goe_increment(rng, n, dt):
    a = rng.standard_normal((n, n))
    b = np.triu(a, 1) * np.sqrt(dt / n)
    b = b + b.T
    b[np.diag_indices(n)] = a.diagonal() * np.sqrt(2.0 * dt / n)
    return b


def dbm_run(initial, t_end, dt=None, mode="matrix-flow", coupling=None,
            seed=0, times_out=None):
    """Eigenvalue flow driven by Gaussian increments.

    matrix-flow: exact marginals (the matrix accumulates GOE-normalized
    Brownian increments and is rediagonalized at output times).
    sde-euler: explicit Euler on the particle system; optional coupling
    drives a companion GOE-initialized system with the same increments at
    indices offset by i0 - N/2.
    """
    rng = np.random.default_rng(seed)
    times_out = np.atleast_1d(np.asarray(times_out if times_out is not None else [t_end]))
    if np.any(np.diff(times_out) < 0) or times_out[-1] > t_end + 1e-12:
        raise OutOfGrid("output times must be sorted and within [0, t_end]")
    if mode == "matrix-flow":
        if coupling is not None:
            raise DegenerateInput("coupled mode requires sde-euler")
        if not isinstance(initial, np.ndarray) or initial.ndim != 2:
            raise DegenerateInput("matrix-flow needs the initial matrix")
        n = initial.shape[0]
        mat = initial.copy()
        states = []
        t_now = 0.0
        for t_next in times_out:
            if t_next > t_now:
                mat = mat + _goe_increment(rng, n, t_next - t_now)
                t_now = t_next
            states.append(DbmState(float(t_now), eigen_spectrum(mat), mode))
        return states
    if mode != "sde-euler":
        raise DegenerateInput(f"unknown mode {mode!r}")
    lam = np.sort(np.asarray(initial, dtype=float))
    n = lam.size
    if dt is None or dt <= 0:
        raise DegenerateInput("sde-euler needs a positive dt")
    comp = None
    offset = 0
    if coupling is not None:
        i0 = int(coupling["i0"])
        offset = i0 - n // 2
        comp = np.sort(eigen_spectrum(_goe_increment(np.random.default_rng(
            coupling.get("companion_seed", seed + 1)), n, 1.0)))
    states = []
    t_now = 0.0
    out_iter = iter(times_out)
    t_next_out = next(out_iter, None)

    def drift(v):
        diff = v[:, None] - v[None, :]
        np.fill_diagonal(diff, np.inf)
        return np.sum(1.0 / diff, axis=1) / n

    while t_next_out is not None:
        while t_now < t_next_out - 1e-15:
            step = min(dt, t_next_out - t_now)
            db = rng.standard_normal(n)
            lam = lam + np.sqrt(2.0 * step / n) * db + step * drift(lam)
            if np.any(np.diff(lam) <= 0):
                raise ParticleCollision(f"ordering lost at t={t_now + step:g}; reduce dt")
            if comp is not None:
                db_c = np.roll(db, -offset)
                comp = comp + np.sqrt(2.0 * step / n) * db_c + step * drift(comp)
                if np.any(np.diff(comp) <= 0):
                    raise ParticleCollision("companion ordering lost; reduce dt")
            t_now += step
        state = DbmState(float(t_now), lam.copy(), mode)
        if comp is not None:
            state.companion = comp.copy()
        states.append(state)
        t_next_out = next(out_iter, None)
    return states


# ---------------------------------------------------------------------------
# seeded Monte Carlo harness

@dataclass
class McResult:
    statistic_name: str
    samples: np.ndarray
    n_samples: int
    seed: int
    summary: dict
    ks_to_std_normal: float
    failures: list = field(default_factory=list)
    reference_ks: float = None

    @classmethod
    def from_samples(cls, name, samples, seed, failures=(), reference=None):
        samples = np.asarray(samples, dtype=float)
        good = samples[np.isfinite(samples)]
        if good.size:
            summary = {
                "mean": float(good.mean()),
                "variance": float(good.var(ddof=1)) if good.size > 1 else 0.0,
                "skewness": float(sps.skew(good)) if good.size > 2 else 0.0,
            }
            ks = float(sps.kstest(good, "norm").statistic)
        else:
            summary = {"mean": 0.0, "variance": 0.0, "skewness": 0.0}
            ks = 1.0
        ref_ks = None
        if reference is not None and good.size:
            ref_ks = float(sps.ks_2samp(good, np.asarray(reference)).statistic)
        return cls(name, samples, int(samples.size), int(seed), summary, ks,
                   list(failures), ref_ks)

    def to_dict(self):
        return {
            "statistic": self.statistic_name,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "summary": self.summary,
            "ks_to_std_normal": self.ks_to_std_normal,
            "reference_ks": self.reference_ks,
            "failures": self.failures,
        }


def _build_statistic(manifest, spectral):
    """Returns a per-sample callable (eigs, rng_seed) -> float."""
    from .testfn import testfn_from_dict

    name = manifest["statistic"]
    params = manifest.get("params", {}) or {}
    if name == "sev":
        i0 = int(params["i0"])
        n_dim = int(manifest["ensemble"]["profile"]["n"])
        frac = params.get("edge_fraction", 0.05)
        if not frac * n_dim <= i0 <= (1.0 - frac) * n_dim:
            raise OutOfGrid(f"index {i0} outside the bulk band of n={n_dim}")
        gamma = spectral.quantile(i0, n_dim)
        rho_gamma = float(spectral.rho(gamma))
        scale = n_dim * rho_gamma / np.sqrt(np.log(n_dim))

        def stat(eigs):
            return scale * (eigs[i0 - 1] - gamma)
    elif name == "counting":
        energy = float(params["energy"])

        def stat(eigs):
            return counting_statistic(eigs, spectral, energy)
    elif name == "lss":
        from .lss import integrate_against_density

        tf = testfn_from_dict(params["testfn"])
        mean_density = integrate_against_density(tf, spectral)
        scale = float(params.get("scale", 1.0))

        def stat(eigs):
            return lss_statistic(eigs, tf, spectral, mean_density) / scale
    elif name == "central_gap":
        def stat(eigs):
            return eigs[eigs.size // 2] - eigs[eigs.size // 2 - 1]
    elif name == "dbm_central_gap":
        t_flow = float(params["t"])

        def stat(eigs):
            return eigs[eigs.size // 2] - eigs[eigs.size // 2 - 1]
        stat.t_flow = t_flow
    else:
        raise DegenerateInput(f"unknown statistic {name!r}")
    return stat


def _one_sample(args):
    spec_doc, seed_entropy, stat_state = args
    spec = EnsembleSpec.from_dict(spec_doc)
    seed = np.random.SeedSequence(entropy=seed_entropy[0], spawn_key=seed_entropy[1])
    w = sample_matrix(spec, seed)
    t_flow = stat_state.get("t_flow")
    if t_flow:
        rng = np.random.default_rng(seed.spawn(1)[0])
        w = w + _goe_increment(rng, w.shape[0], t_flow)
    return eigen_spectrum(w)


def mc_harness(manifest, spectral=None, workers=1, reference=None):
    """Runs a manifest {statistic, ensemble, samples, seed, params} to an McResult.

    Deterministic per manifest: per-sample streams are spawned from the
    master seed by index, so any worker count yields identical output.
    """
    from .spectrum import compute_spectral_data

    spec = EnsembleSpec.from_dict(manifest["ensemble"])
    n_samples = int(manifest.get("samples", 0))
    master = int(manifest.get("seed", spec.seed))
    name = manifest["statistic"]
    if spectral is None:
        spectral = compute_spectral_data(spec.attach_cumulants())
    stat = _build_statistic(manifest, spectral)
    if n_samples == 0:
        return McResult.from_samples(name, np.empty(0), master)
    seeds = np.random.SeedSequence(master).spawn(n_samples)
    stat_state = {"t_flow": getattr(stat, "t_flow", None)}
    spec_doc = spec.to_dict()
    jobs = [(spec_doc, (s.entropy, s.spawn_key), stat_state) for s in seeds]
    out = np.full(n_samples, np.nan)
    failures = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            spectra = pool.map(_one_sample, jobs, chunksize=max(1, n_samples // (8 * workers)))
            for idx, eigs in enumerate(spectra):
                try:
                    out[idx] = stat(eigs)
                except Exception as exc:   # per-sample failures must not abort the batch
                    failures.append({"index": idx, "error": repr(exc)})
    else:
        for idx, job in enumerate(jobs):
            try:
                out[idx] = stat(_one_sample(job))
            except Exception as exc:
                failures.append({"index": idx, "error": repr(exc)})
    return McResult.from_samples(name, out, master, failures, reference)
