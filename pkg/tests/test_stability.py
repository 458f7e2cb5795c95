import numpy as np
import pytest

from wigtype import (
    NearSingular,
    boundary_singularity,
    build_stability,
    edge_eigvec_relation,
    kernels,
    solve_boundary,
    stab_resolvent_apply,
    stieltjes_derivative,
)
from wigtype.stability import vector_at

from conftest import msc


def test_rank_one_structure(const64):
    z, w = 0.5 + 0.2j, -0.3 + 0.4j
    op = build_stability(const64, z, w)
    assert abs(op.lambda1 - abs(msc(z) * msc(w))) < 1e-12
    assert np.allclose(np.sqrt(64) * op.v, 1.0)
    assert abs(op.gap - op.lambda1) < 1e-14


def test_lambda1_is_one_on_bulk_axis(const64, two_block):
    for p, e in ((const64, 0.5), (two_block, -0.8)):
        op = build_stability(p, e, e)
        assert abs(op.lambda1 - 1.0) < 1e-10


def test_lambda1_below_one_everywhere(two_block):
    rng = np.random.default_rng(5)
    for _ in range(25):
        z = complex(rng.uniform(-2.2, 2.2), 10 ** rng.uniform(-4, 0.5))
        w = complex(rng.uniform(-2.2, 2.2), np.sign(rng.standard_normal())
                    * 10 ** rng.uniform(-4, 0.5))
        op = build_stability(two_block, z, w)
        assert op.lambda1 <= 1.0 + 1e-12


def test_bulk_contraction_rate(two_block):
    # lambda1 <= 1 - c (Im z + Im w): fit c > 0 over an eta sweep
    etas = np.geomspace(1e-4, 1e-1, 8)
    lam = np.array([build_stability(two_block, 0.3 + 1j * e, 0.3 + 1j * e).lambda1
                    for e in etas])
    c_fit = (1.0 - lam) / (2.0 * etas)
    assert c_fit.min() > 0.01


def test_convexity_inequality(two_block):
    rng = np.random.default_rng(11)
    for _ in range(50):
        z = complex(rng.uniform(-2, 2), 10 ** rng.uniform(-3, 0.3))
        w = complex(rng.uniform(-2, 2), 10 ** rng.uniform(-3, 0.3))
        f_zw = build_stability(two_block, z, w).lambda1
        f_zz = build_stability(two_block, z, z).lambda1
        f_ww = build_stability(two_block, w, w).lambda1
        assert f_zw <= 0.5 * (f_zz + f_ww) + 1e-10


def test_perron_entry_comparability(three_block):
    op = build_stability(three_block, 0.4 + 0.05j, -0.2 + 0.1j)
    scaled = np.sqrt(three_block.n) * op.v
    assert scaled.min() > 0.2
    assert scaled.max() < 5.0


def test_gap_positive_on_bulk_grid(two_block):
    gaps = []
    for e in np.linspace(-1.5, 1.5, 7):
        gaps.append(build_stability(two_block, e + 1e-3j, e - 1e-3j).gap)
    assert min(gaps) > 0.05     # fixture constant recorded for the 2-block profile


def test_power_iteration_matches_eigh(two_block):
    z, w = 0.5 + 0.2j, -0.3 + 0.4j
    dense = build_stability(two_block.as_dense(), z, w, method="power")
    eigs = np.linalg.eigvalsh(dense.matrix)
    assert abs(dense.lambda1 - eigs[-1]) < 1e-11
    gap_true = eigs[-1] - max(abs(eigs[0]), abs(eigs[-2]))
    assert abs(dense.gap - gap_true) < 1e-8
    block = build_stability(two_block, z, w)
    assert abs(block.lambda1 - dense.lambda1) < 1e-11


def test_resolvent_rank_one_closed_form(const64):
    # Sherman-Morrison on the flat profile: (1 - c J/n)^{-1} r = r + c/(n(1-c)) sum(r)
    z, w = 0.5 + 0.2j, -0.3 + 0.4j
    rng = np.random.default_rng(0)
    rhs = rng.standard_normal(64) + 1j * rng.standard_normal(64)
    c = msc(z) * msc(w)
    got = stab_resolvent_apply(const64, z, w, rhs)
    exact = rhs + (c / 64.0) / (1.0 - c) * rhs.sum()
    assert np.abs(got - exact).max() < 1e-10


def test_resolvent_zero_rhs(const64):
    out = stab_resolvent_apply(const64, 0.5 + 0.2j, -0.3 + 0.4j, np.zeros(64))
    assert not out.any()


def test_resolvent_same_halfplane_bound(two_block):
    # z, w in the same half-space: l-inf -> l-inf norm stays order one
    z, w = 0.3 + 1e-4j, 0.31 + 1e-4j
    n = two_block.n
    cols = np.linalg.inv(
        np.eye(n) - two_block.s * (vector_at(two_block, z) * vector_at(two_block, w))[None, :]
    )
    assert np.abs(cols).sum(axis=1).max() < 50.0


def test_resolvent_opposite_halfplane_bound(two_block):
    # bulk bound C / (Im z + Im w) for opposite half-planes
    for eta in (1e-2, 1e-3):
        z, w = 0.3 + 1j * eta, 0.3 - 1j * eta
        n = two_block.n
        mat = np.linalg.inv(
            np.eye(n) - two_block.s * (vector_at(two_block, z) * vector_at(two_block, w))[None, :]
        )
        norm = np.abs(mat).sum(axis=1).max()
        assert norm < 5.0 / (2 * eta)


def test_offdiagonal_resolvent_elements(two_block):
    z, w = 0.4 + 0.05j, -0.1 - 0.02j
    n = two_block.n
    mat = np.linalg.inv(
        np.eye(n) - two_block.s * (vector_at(two_block, z) * vector_at(two_block, w))[None, :]
    )
    off = mat - np.diag(np.diag(mat))
    bound = 20.0 / (n * (0.05 + 0.02))
    assert np.abs(off).max() < bound


def test_kernel_symmetry(two_block):
    rng = np.random.default_rng(9)
    for _ in range(20):
        z = complex(rng.uniform(-1.5, 1.5), 10 ** rng.uniform(-3, 0))
        w = complex(rng.uniform(-1.5, 1.5), np.sign(rng.standard_normal())
                    * 10 ** rng.uniform(-3, 0))
        kv, kv_swapped = kernels(two_block, z, w), kernels(two_block, w, z)
        assert abs(kv.g - kv_swapped.g) < 1e-8 * max(1.0, abs(kv.g))


def test_kernel_g_bulk_bound(two_block):
    # |g| <= C/(Im z + Im w)^2 fitted over an eta sweep
    etas = np.geomspace(1e-3, 1e-1, 6)
    ratio = []
    for eta in etas:
        kv = kernels(two_block, 0.3 + 1j * eta, 0.4 - 1j * eta)
        ratio.append(abs(kv.g) * (2 * eta) ** 2)
    assert max(ratio) < 10.0


def test_kernel_g_same_halfplane_bounded(two_block):
    rng = np.random.default_rng(13)
    for _ in range(10):
        z = complex(rng.uniform(-1.0, 1.0), 10 ** rng.uniform(-4, -1))
        w = complex(rng.uniform(-1.0, 1.0), 10 ** rng.uniform(-4, -1))
        assert abs(kernels(two_block, z, w).g) < 50.0


def test_boundary_singularity_coefficient(two_block, const64):
    for p in (two_block, const64):
        x = 0.2
        seps = np.geomspace(1e-3, 1e-1, 12)
        pvals = np.array([boundary_singularity(p, x, x + s)[0] for s in seps])
        coef = np.polyfit(1.0 / seps, pvals.real, 1)[0]
        assert abs(coef - 1.0) < 0.05
        scaled = np.array([boundary_singularity(p, x, x + s)[1] for s in seps])
        assert np.abs(scaled[0] - 1.0) < 0.1


def test_boundary_singularity_eta_bounded(two_block):
    # fixed separation, vertical sweep: |P| stays bounded
    vals = [abs(boundary_singularity(two_block, 0.2, 0.25, eta)[0])
            for eta in (1e-2, 1e-3, 1e-4, 1e-6)]
    assert max(vals) < 100.0
    assert max(vals) / min(vals) < 3.0


def test_boundary_singularity_on_diagonal_rejected(two_block):
    with pytest.raises(NearSingular):
        boundary_singularity(two_block, 0.2, 0.2, 0.0)


def test_perron_quadratic_form_identity(two_block):
    # on the bulk real axis the Perron form of m'/m is purely imaginary,
    # with imaginary part comparable to the inverse density
    e = 0.4
    m = vector_at(two_block, e)
    op = build_stability(two_block, e, e, m_z=m, m_w=m)
    mp = two_block.expand_vector(
        stieltjes_derivative(two_block, solve_boundary(two_block, e, polish=True))
    )
    quad = complex(op.v @ (mp / m * op.v))
    assert abs(quad.real) < 1e-6
    rho = float(np.mean(m.imag) / np.pi)
    assert 0.05 / rho < quad.imag < 20.0 / rho


def test_eigenvalue_perturbation_formula(two_block):
    eta, x0, h = 1e-3, 0.3, 1e-4
    lp = build_stability(two_block, x0 + 1j * eta, x0 + h - 1j * eta).lambda1
    lm = build_stability(two_block, x0 + 1j * eta, x0 - h - 1j * eta).lambda1
    fd = (lp - lm) / (2.0 * h)
    op = build_stability(two_block, x0 + 1j * eta, x0 - 1j * eta)
    m_z = vector_at(two_block, x0 + 1j * eta)
    mp_z = two_block.expand_vector(
        stieltjes_derivative(two_block, m_z[np.asarray([0, 32])])
    )
    pred = op.lambda1 * np.real(op.v @ (mp_z / m_z * op.v))
    assert abs(fd - pred) / abs(pred) < 1e-4


def test_edge_eigvec_relation(const64, two_block, sd_const64, sd_two_block):
    res_c = edge_eigvec_relation(const64, [1e-2], spectral=sd_const64)
    assert res_c[0] <= 0.1
    res_b = edge_eigvec_relation(two_block, [1e-3], spectral=sd_two_block)
    assert res_b[0] <= 0.05
    res_zero = edge_eigvec_relation(two_block, [0.0], spectral=sd_two_block)
    assert res_zero[0] == 0.0
