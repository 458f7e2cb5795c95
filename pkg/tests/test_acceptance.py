"""Acceptance suite: one test per criterion, one printed pass/fail line each.

The Monte Carlo batches (N = 1000 spectra) are shared across criteria via
session fixtures; everything is seeded and reproducible.  Run with

    pytest tests/test_acceptance.py -v -s
"""

import time

import numpy as np
import pytest
from scipy import stats as sps

from wigtype import (
    EnsembleSpec,
    VarianceProfile,
    boundary_singularity,
    build_stability,
    compute_spectral_data,
    convolve,
    dbm_gaussian_variance,
    dbm_run,
    eigen_spectrum,
    h12_form,
    integrate_against_density,
    logdet_derivative_pair,
    make_mollified_step,
    mc_harness,
    propagate_test_function,
    sample_matrix,
    sev_expectation,
    solve_boundary,
    stieltjes_derivative,
    stieltjes_via_subordination,
    subordination_residual,
    txy_diagnostic,
    variance_hat,
)
from wigtype.stability import vector_at

from conftest import msc

N_BIG = 1000
SEV_SEEDS = 4000
MESO_SEEDS = 1500


def _report(num, ok, detail):
    print(f"[criterion {num:>2}] {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"criterion {num}: {detail}"


def _batch(profile, law, n_samples, seed, t_flow=None, label=""):
    spec = EnsembleSpec(profile, law, seed=seed)
    out = np.empty((n_samples, profile.n))
    t0 = time.time()
    for i, s in enumerate(np.random.SeedSequence(seed).spawn(n_samples)):
        w = sample_matrix(spec, s)
        if t_flow:
            g = sample_matrix(EnsembleSpec(VarianceProfile.goe(profile.n), "gaussian"),
                              s.spawn(1)[0])
            w = w + np.sqrt(t_flow) * g
        out[i] = eigen_spectrum(w)
        if (i + 1) % 1000 == 0:
            print(f"    {label} batch {i + 1}/{n_samples} ({time.time() - t0:.0f}s)")
    return out


# ---------------------------------------------------------------------------
# shared fixtures

@pytest.fixture(scope="session")
def goe_1000():
    return VarianceProfile.goe(N_BIG)


@pytest.fixture(scope="session")
def two_block_1000():
    return VarianceProfile.blocks((N_BIG // 4, 3 * N_BIG // 4),
                                  [[2.0, 0.5], [0.5, 2.0]], name="two-block-1000")


@pytest.fixture(scope="session")
def const_1000():
    return VarianceProfile.constant(N_BIG)


@pytest.fixture(scope="session")
def sd_goe_1000(goe_1000):
    return compute_spectral_data(goe_1000)


@pytest.fixture(scope="session")
def sd_two_block_1000(two_block_1000):
    spec = EnsembleSpec(two_block_1000, "rademacher_scaled", seed=0)
    return compute_spectral_data(spec.attach_cumulants())


@pytest.fixture(scope="session")
def sd_const_1000(const_1000):
    return compute_spectral_data(const_1000)


@pytest.fixture(scope="session")
def eigs_goe(goe_1000):
    return _batch(goe_1000, "gaussian", SEV_SEEDS, seed=101, label="goe")


@pytest.fixture(scope="session")
def eigs_two_block(two_block_1000):
    return _batch(two_block_1000, "rademacher_scaled", SEV_SEEDS, seed=202,
                  label="two-block")


@pytest.fixture(scope="session")
def eigs_const(const_1000):
    return _batch(const_1000, "gaussian", SEV_SEEDS, seed=303, label="const")


def _sev_samples(eigs, spectral, i0):
    n = eigs.shape[1]
    gamma = spectral.quantile(i0, n)
    rho = float(spectral.rho(gamma))
    return n * rho * (eigs[:, i0 - 1] - gamma) / np.sqrt(np.log(n))


# ---------------------------------------------------------------------------
# criteria

def test_criterion_01_wigner_reduction(const_1000, sd_const_1000):
    t0 = time.time()
    energies = np.linspace(-1.9, 1.9, 200)
    m = solve_boundary(const_1000, energies, polish=True)
    sup_err = np.abs(m[:, 0] - msc(energies)).max()
    rho0_err = abs(float(sd_const_1000.rho(0.0)) - 1.0 / np.pi)
    grid_step = float(np.diff(sd_const_1000.energies).max())
    edge_err = max(abs(sd_const_1000.alpha + 2.0), abs(sd_const_1000.beta - 2.0))
    elapsed = time.time() - t0
    ok = sup_err <= 1e-8 and rho0_err <= 1e-6 and edge_err <= grid_step and elapsed < 10
    _report(1, ok, f"sup|m - m_sc|={sup_err:.2e} rho(0) err={rho0_err:.2e} "
                   f"edge err={edge_err:.2e} ({elapsed:.1f}s)")


def test_criterion_02_one_cut_fixtures():
    details = []
    ok = True
    for profile in (VarianceProfile.blocks((32, 96), [[2.0, 0.5], [0.5, 2.0]]),
                    VarianceProfile.blocks((32, 32, 64),
                                           [[1.0, 2.0, 0.5], [2.0, 1.0, 1.0],
                                            [0.5, 1.0, 2.0]])):
        sd = compute_spectral_data(profile)
        mass_err = abs(sd.mass - 1.0)
        exps = sd.edge_exponents
        n = profile.n
        cons = max(abs(float(sd.cdf(sd.quantile_values[i - 1])) - i / n)
                   for i in range(1, n + 1))
        ok &= mass_err <= 1e-6 and cons <= 1e-8
        ok &= all(abs(e - 0.5) <= 0.05 for e in exps)
        details.append(f"k={profile.k}: mass_err={mass_err:.1e} "
                       f"exps=({exps[0]:.3f},{exps[1]:.3f}) cons={cons:.1e}")
    _report(2, ok, "; ".join(details))


def test_criterion_03_stability_suite(two_block_1000):
    profile = VarianceProfile.blocks((32, 96), [[2.0, 0.5], [0.5, 2.0]])
    rng = np.random.default_rng(17)
    lam_max = 0.0
    for _ in range(40):
        z = complex(rng.uniform(-2.2, 2.2), 10 ** rng.uniform(-4, 0.5))
        w = complex(rng.uniform(-2.2, 2.2),
                    np.sign(rng.standard_normal()) * 10 ** rng.uniform(-4, 0.5))
        lam_max = max(lam_max, build_stability(profile, z, w).lambda1)
    bulk = np.linspace(-1.2, 1.2, 9)
    lam_bdry = [build_stability(profile, e, e).lambda1 for e in bulk]
    gap_min = min(build_stability(profile, e + 1e-3j, e - 1e-3j).gap for e in bulk)
    # eigenvalue perturbation formula vs finite differences
    eta, x0, h = 1e-3, 0.3, 1e-4
    fd = (build_stability(profile, x0 + 1j * eta, x0 + h - 1j * eta).lambda1
          - build_stability(profile, x0 + 1j * eta, x0 - h - 1j * eta).lambda1) / (2 * h)
    op = build_stability(profile, x0 + 1j * eta, x0 - 1j * eta)
    m_z = vector_at(profile, x0 + 1j * eta)
    mp_z = profile.expand_vector(stieltjes_derivative(profile, m_z[np.asarray([0, 32])]))
    pred = op.lambda1 * np.real(op.v @ (mp_z / m_z * op.v))
    pert_err = abs(fd - pred) / abs(pred)
    # Perron quadratic form on the real axis
    m0 = vector_at(profile, 0.4)
    op0 = build_stability(profile, 0.4, 0.4, m_z=m0, m_w=m0)
    mp0 = profile.expand_vector(
        stieltjes_derivative(profile, solve_boundary(profile, 0.4, polish=True)))
    re_quad = abs(np.real(op0.v @ (mp0 / m0 * op0.v)))
    ok = (lam_max <= 1.0 + 1e-12
          and max(abs(v - 1.0) for v in lam_bdry) <= 1e-3
          and gap_min >= 0.05
          and pert_err <= 1e-4
          and re_quad <= 1e-6)
    _report(3, ok, f"max lam1={lam_max:.6f} |lam1(E)-1|<={max(abs(v - 1) for v in lam_bdry):.1e} "
                   f"gap_min={gap_min:.3f} pert_err={pert_err:.1e} Re-form={re_quad:.1e}")


def test_criterion_04_boundary_singularity():
    t0 = time.time()
    ok = True
    details = []
    for profile in (VarianceProfile.constant(64),
                    VarianceProfile.blocks((32, 96), [[2.0, 0.5], [0.5, 2.0]])):
        x = 0.2
        seps = np.geomspace(1e-3, 1e-1, 14)
        pv = np.array([boundary_singularity(profile, x, x + s)[0] for s in seps])
        coef = float(np.polyfit(1.0 / seps, pv.real, 1)[0])
        ok &= abs(coef - 1.0) <= 0.05
        details.append(f"k={profile.k}: coef={coef:.4f}")
    elapsed = time.time() - t0
    ok &= elapsed < 60
    _report(4, ok, "; ".join(details) + f" ({elapsed:.1f}s)")


def test_criterion_05_h12_form():
    ok = True
    details = []
    for t in (1e-2, 1e-3, 1e-4):
        tf = make_mollified_step(0.0, t, m_width=5.0, l_star=4.0)
        val = h12_form(tf, 1.0)
        offset = val - 2.0 * abs(np.log(t))
        ok &= abs(offset) <= 3.5
        details.append(f"t={t:g}: offset={offset:+.3f}")
    _report(5, ok, "; ".join(details))


def test_criterion_06_variance_functional(const_1000, two_block_1000, sd_const_1000,
                                          sd_two_block_1000, eigs_const,
                                          eigs_two_block):
    t_start = time.time()
    target = abs(np.log(1e-2)) / np.pi**2
    ok = True
    details = []
    cases = [
        ("const", const_1000, sd_const_1000, eigs_const,
         make_mollified_step(0.0, 1e-2, m_width=5.0, l_star=4.0)),
        ("2-block", EnsembleSpec(two_block_1000, "rademacher_scaled", 0).attach_cumulants(),
         sd_two_block_1000, eigs_two_block,
         make_mollified_step(-1.5, 1e-2, m_width=5.0, l_star=4.0)),
    ]
    for name, profile, sd, eigs, tf in cases:
        vh = variance_hat(tf, profile, level=1, spectral=sd).value
        mean_density = integrate_against_density(tf, sd)
        lss = tf.f(eigs[:, :]).sum(axis=1) - profile.n * mean_density
        mc_var = float(np.var(lss[:2000], ddof=1))
        band = abs(vh - target) <= 0.15
        agree = abs(mc_var - vh) / vh <= 0.20
        ok &= band and agree
        details.append(f"{name}: V={vh:.4f} (target {target:.4f}) MC={mc_var:.4f}")
    elapsed = time.time() - t_start
    ok &= elapsed < 1800
    _report(6, ok, "; ".join(details) + f" ({elapsed:.0f}s)")


def test_criterion_07_single_eigenvalue_fluctuations(sd_goe_1000, sd_two_block_1000,
                                                     eigs_goe, eigs_two_block):
    i0 = N_BIG // 2
    s_goe = _sev_samples(eigs_goe, sd_goe_1000, i0)
    s_2b = _sev_samples(eigs_two_block, sd_two_block_1000, i0)
    v_goe = float(np.var(s_goe, ddof=1))
    v_2b = float(np.var(s_2b, ddof=1))
    ks = float(sps.ks_2samp(s_goe, s_2b).statistic)
    ok = 0.07 <= v_goe <= 0.14 and 0.07 <= v_2b <= 0.14 and ks < 0.05
    _report(7, ok, f"var(GOE)={v_goe:.4f} var(2b)={v_2b:.4f} "
                   f"(target {1 / np.pi**2:.4f}) two-sample KS={ks:.4f}")


def test_criterion_08_counting_clt(sd_goe_1000, eigs_goe):
    # NOTE: expected to fail at desk scale; see the analysis in the
    # companion shape test below.  The criterion is asserted as stated.
    energy = 0.0
    n = eigs_goe.shape[1]
    counts = (eigs_goe <= energy).sum(axis=1)
    stat = (counts - n * float(sd_goe_1000.cdf(energy))) * np.pi / np.sqrt(np.log(n))
    ks = float(sps.kstest(stat, "norm").statistic)
    var = float(np.var(stat, ddof=1))
    ok = ks < 0.05
    _report(8, ok, f"KS to N(0,1)={ks:.4f} (variance={var:.3f}, "
                   f"count std={np.sqrt(var * np.log(n)) / np.pi:.2f} levels)")


def test_invariant_counting_gaussian_shape(sd_goe_1000, eigs_goe):
    """What IS verifiable at N = 1000: the counting distribution matches the
    normal law discretized to the integer lattice.

    The statistic itself is supported on ~7 integers (its std is about one
    level), so its Kolmogorov distance to the *continuous* normal is pinned
    near half the modal mass (~0.2) no matter how many samples are drawn;
    comparing probability masses per lattice cell removes that obstruction.
    """
    energy = 0.0
    n = eigs_goe.shape[1]
    counts = (eigs_goe <= energy).sum(axis=1).astype(int)
    center = n * float(sd_goe_1000.cdf(energy))
    sigma = float(np.std(counts, ddof=1))
    lo, hi = counts.min(), counts.max()
    ks = np.arange(lo, hi + 1)
    emp = np.array([(counts == k).mean() for k in ks])
    model = (sps.norm.cdf((ks + 0.5 - center) / sigma)
             - sps.norm.cdf((ks - 0.5 - center) / sigma))
    tv = 0.5 * float(np.abs(emp - model).sum())
    _report("C", tv <= 0.05, f"TV(count pmf, discretized normal)={tv:.4f} "
                             f"over {ks.size} lattice cells")


def test_criterion_09_expectation(const_1000, sd_const_1000, eigs_const):
    fd, analytic = logdet_derivative_pair(
        VarianceProfile.blocks((32, 96), [[2.0, 0.5], [0.5, 2.0]]), 0.3)
    logdet_err = abs(fd - analytic) / abs(analytic)
    i0 = N_BIG // 2
    sev = sev_expectation(const_1000, sd_const_1000, i0)
    exact = abs(sev.total + np.pi)
    gamma = sd_const_1000.quantile(i0, N_BIG)
    rho = float(sd_const_1000.rho(gamma))
    mc = 2.0 * np.pi * N_BIG * rho * float(np.mean(eigs_const[:, i0 - 1] - gamma))
    mc_gap = abs(mc - sev.total)
    ok = logdet_err <= 1e-4 and exact <= 1e-8 and mc_gap <= 0.3
    _report(9, ok, f"logdet FD err={logdet_err:.1e} |sev-(-pi)|={exact:.1e} "
                   f"MC={mc:.3f} vs {sev.total:.3f} (gap {mc_gap:.3f})")


def test_criterion_10_free_convolution(const_1000):
    profile = VarianceProfile.constant(128)
    fc = convolve(profile, 0.21)
    edge_err = max(abs(fc.spectral.alpha + 2.2), abs(fc.spectral.beta - 2.2))
    rng = np.random.default_rng(23)
    e = rng.uniform(-1.8, 1.8, 20)
    sub_res = subordination_residual(fc, e + 1j * 10 ** rng.uniform(-5, -1, 20)).max()
    # semigroup: direct s+t flow vs subordination of the s-flow by t
    two_block = VarianceProfile.blocks((32, 96), [[2.0, 0.5], [0.5, 2.0]])
    fc_total = convolve(two_block, 0.15)
    fc_s = convolve(two_block, 0.08)
    worst = 0.0
    for x in np.linspace(fc_total.spectral.alpha + 0.3, fc_total.spectral.beta - 0.3, 20):
        direct = fc_total.stieltjes(complex(x, 1e-6))
        oracle = stieltjes_via_subordination(fc_s.augmented_profile, complex(x, 1e-6), 0.07)
        worst = max(worst, abs(direct.imag - oracle.imag) / np.pi)
    ok = edge_err <= 1e-4 and sub_res <= 1e-8 and worst <= 1e-6
    _report(10, ok, f"edge err={edge_err:.1e} subordination={sub_res:.1e} "
                    f"semigroup sup={worst:.1e}")


def test_criterion_11_dbm(goe_1000, sd_goe_1000, eigs_goe):
    # (a) matrix-flow marginal vs direct sampling, central gap, N = 200
    n_small, t_flow, n_seeds = 200, 0.3, 1000
    prof = VarianceProfile.goe(n_small)
    spec = EnsembleSpec(prof, "gaussian", seed=0)
    gaps_flow = np.empty(n_seeds)
    gaps_direct = np.empty(n_seeds)
    for i, s in enumerate(np.random.SeedSequence(404).spawn(n_seeds)):
        w0 = sample_matrix(spec, s)
        sub = np.random.default_rng(s.spawn(1)[0]).integers(2**31)
        ev = dbm_run(w0, t_flow, mode="matrix-flow", seed=sub, times_out=[t_flow])[0].particles
        gaps_flow[i] = ev[n_small // 2] - ev[n_small // 2 - 1]
        w2 = sample_matrix(spec, s.spawn(2)[1]) + np.sqrt(t_flow) * sample_matrix(spec, s.spawn(3)[2])
        ev2 = eigen_spectrum(w2)
        gaps_direct[i] = ev2[n_small // 2] - ev2[n_small // 2 - 1]
    ks = float(sps.ks_2samp(gaps_flow, gaps_direct).statistic)

    # (b) mesoscopic variance bookkeeping at N = 1000
    t0_flow, eta_star = 0.25, 0.004
    tf = make_mollified_step(0.0, eta_star, m_width=5.0, l_star=4.0)
    flowed_profile = VarianceProfile.constant(N_BIG, 1.0 + t0_flow, 1.0 + t0_flow)
    sd_flowed = compute_spectral_data(flowed_profile)
    mean_f = integrate_against_density(tf, sd_flowed)
    eigs_flowed = _batch(goe_1000, "gaussian", MESO_SEEDS, seed=505,
                         t_flow=t0_flow, label="flowed")
    lss_f = tf.f(eigs_flowed).sum(axis=1) - N_BIG * mean_f
    var_f = float(np.var(lss_f, ddof=1))
    _, _, g_interp = propagate_test_function(tf, t0_flow, goe_1000, n_out=900)

    def g_fun(x):
        x = np.asarray(x, dtype=float)
        lo, hi = g_interp.x[0], g_interp.x[-1]
        out = np.nan_to_num(g_interp(np.clip(x, lo, hi)))
        return np.where(x >= hi, float(g_interp(hi)), out)

    mean_g = integrate_against_density(g_fun, sd_goe_1000)
    lss_g = np.array([g_fun(ev).sum() for ev in eigs_goe[:MESO_SEEDS]]) - N_BIG * mean_g
    var_g = float(np.var(lss_g, ddof=1))
    noise = dbm_gaussian_variance(t0_flow, eta_star)
    balance = abs(var_f - var_g - noise) / (var_g + noise)
    ok = ks < 0.05 and balance <= 0.30
    _report(11, ok, f"gap KS={ks:.4f}; Var(f@t0)={var_f:.3f} vs Var(g@0)+noise="
                    f"{var_g:.3f}+{noise:.3f} (imbalance {balance:.0%})")


def test_criterion_12_txy_leading_term(two_block_1000):
    # gap measured as the RMS over all x (and three y columns) of the
    # difference between the empirical mean and the deterministic term
    # The sampling error of the empirical mean is a common mode shared by a
    # whole resolvent column, so the decay test averages the squared gap
    # over many independent columns (each column is one effective draw).
    z, w = 0.3 + 0.5j, -0.1 - 0.5j
    n_cols, n_samp = 16, 250
    gaps = {}
    bound_ok = True
    for n_dim in (400, 800):
        prof = VarianceProfile.blocks((n_dim // 4, 3 * n_dim // 4),
                                      [[2.0, 0.5], [0.5, 2.0]])
        spec = EnsembleSpec(prof, "gaussian", seed=606)
        m_z = vector_at(prof, z)
        m_w = vector_at(prof, w)
        sq = []
        for j in range(n_cols):
            y_col = int((j + 1) * n_dim / (n_cols + 1))
            _, _, gap = txy_diagnostic(spec, z, w, None, y_col, n_samp,
                                       seed=707 + j, m_z=m_z, m_w=m_w)
            sq.append(gap**2)
        gaps[n_dim] = float(np.sqrt(np.mean(np.concatenate(sq))))
        eta = 0.5
        bound_ok &= gaps[n_dim] <= 5.0 / (n_dim**1.5 * eta**1.5 * eta)
    ratio = gaps[800] / gaps[400]
    ok = ratio <= 0.6 and bound_ok
    _report(12, ok, f"rms gap(400)={gaps[400]:.2e} gap(800)={gaps[800]:.2e} "
                    f"ratio={ratio:.2f}")


def test_invariant_rigidity(sd_goe_1000, sd_two_block_1000, eigs_goe, eigs_two_block):
    # |lambda_i - gamma_i| N^{2/3} min(i, N+1-i)^{1/3} <= N^{0.1} in >= 99% of samples
    ok = True
    details = []
    for name, eigs, sd in (("goe", eigs_goe, sd_goe_1000),
                           ("2b", eigs_two_block, sd_two_block_1000)):
        n = eigs.shape[1]
        idx = np.arange(1, n + 1)
        weight = n ** (2.0 / 3.0) * np.minimum(idx, n + 1 - idx) ** (1.0 / 3.0)
        gammas = sd.quantile_values
        stat = (np.abs(eigs - gammas[None, :]) * weight[None, :]).max(axis=1)
        frac = float(np.mean(stat <= n**0.1))
        ok &= frac >= 0.99
        details.append(f"{name}: {frac:.1%}")
    _report("R", ok, "rigidity within band: " + "; ".join(details))


def test_invariant_local_law(goe_1000, sd_goe_1000, eigs_goe):
    n = N_BIG
    eta = n ** (-0.8)
    rng = np.random.default_rng(31)
    energies = rng.uniform(sd_goe_1000.alpha + 0.4, sd_goe_1000.beta - 0.4, 20)
    m_det = solve_boundary(goe_1000, energies, polish=False,
                           eta_schedule=np.geomspace(1.0, eta, 20), extrapolate=False)
    m_det = np.sum(goe_1000.weights() * m_det, axis=-1)
    zs = energies + 1j * eta
    sub = eigs_goe[:800]
    m_emp = np.mean(1.0 / (sub[:, None, :] - zs[None, :, None]), axis=2)
    err = np.abs(m_emp - m_det[None, :])
    frac = float(np.mean((err <= n**0.1 / (n * eta)).all(axis=1)))
    _report("L", frac >= 0.99, f"local law within band in {frac:.1%} of samples")


def test_invariant_empirical_density_ks(sd_goe_1000, eigs_goe):
    n = N_BIG
    ks_vals = []
    for ev in eigs_goe[:300]:
        cdf_at = np.asarray(sd_goe_1000.cdf(ev))
        ecdf_hi = np.arange(1, n + 1) / n
        ks_vals.append(np.max(np.abs(cdf_at - ecdf_hi) + 0.5 / n))
    med = float(np.median(ks_vals))
    _report("K", med <= 0.02, f"median empirical-vs-theoretical KS = {med:.4f}")


def test_criterion_13_reproducibility(goe_1000, sd_goe_1000):
    import json

    man = {"statistic": "sev",
           "ensemble": EnsembleSpec(goe_1000, "gaussian", seed=55).to_dict(),
           "samples": 6, "seed": 55, "params": {"i0": N_BIG // 2}}
    r1 = mc_harness(man, spectral=sd_goe_1000, workers=1)
    r2 = mc_harness(man, spectral=sd_goe_1000, workers=1)
    r3 = mc_harness(man, spectral=sd_goe_1000, workers=3)
    bit_equal = (np.array_equal(r1.samples, r2.samples)
                 and np.array_equal(r1.samples, r3.samples))
    json_equal = (json.dumps(r1.to_dict(), sort_keys=True)
                  == json.dumps(r3.to_dict(), sort_keys=True))
    ok = bit_equal and json_equal
    _report(13, ok, f"bit-identical={bit_equal} json-identical={json_equal}")
