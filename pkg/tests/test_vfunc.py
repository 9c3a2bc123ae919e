import numpy as np
import pytest

from slbp.green import GreenKernel, laplacian
from slbp.lattice import SiteConfig, TestConfig, derive_params, geometric_law
from slbp.sim import replica_rng, sample_initial, simulate
from slbp.vfunc import (generator_moment_rhs, hierarchy_coeff, hierarchy_coeffs_numeric, hierarchy_residual,
                        hierarchy_rhs_values, product_coeffs, v_direct, v_estimate, v_exact, v_site, v_values,
                        v_translation_average)


@pytest.fixture
def p8():
    return derive_params(1 / 8, 0.25)


def _rand_config(rng, K, n):
    return TestConfig.from_sites(K, list(rng.integers(0, min(K, 4), n)))


def test_v_exact_examples(p8):
    K, e = 8, p8.e_kappa
    counts = np.array([3, 0, 5, 1, 2, 0, 7, 4])
    xp = SiteConfig(counts)
    rho = np.linspace(0.2, 1.6, K)
    X = e * counts
    assert abs(v_exact(TestConfig(K, {2: 1}), xp, rho, p8) - (X[2] - rho[2])) < 1e-13
    assert abs(v_exact(TestConfig(K, {2: 2}), xp, rho, p8) - ((X[2] - rho[2]) ** 2 - e * X[2])) < 1e-12
    assert abs(v_exact(TestConfig(K, {2: 1, 6: 1}), xp, rho, p8)
               - (X[2] - rho[2]) * (X[6] - rho[6])) < 1e-12
    assert v_exact(TestConfig(K, {}), xp, rho, p8) == 1.0
    with pytest.raises(ValueError):
        v_exact(TestConfig(K, {0: 7}), xp, rho, p8)


def test_factorised_equals_direct_sum(p8, rng):
    for _ in range(40):
        x = _rand_config(rng, 8, int(rng.integers(1, 5)))
        xp = SiteConfig(rng.integers(0, 6, 8))
        rho = rng.uniform(0, 2, 8)
        a, b = v_exact(x, xp, rho, p8), v_direct(x, xp, rho, p8)
        assert abs(a - b) <= 1e-10 * max(1.0, abs(b))


def test_vector_forms_agree(p8, rng):
    counts = rng.integers(0, 6, (5, 8))
    rho = rng.uniform(0, 2, 8)
    x = TestConfig(8, {1: 2, 2: 1})
    vals = v_values(x, counts, rho, p8)
    assert np.allclose(vals, [v_exact(x, SiteConfig(c), rho, p8) for c in counts], atol=1e-12)
    avg = v_translation_average(x, counts, rho, p8)
    shifted = [[v_exact(TestConfig(8, {(1 + s) % 8: 2, (2 + s) % 8: 1}), SiteConfig(c), rho, p8)
                for s in range(8)] for c in counts]
    assert np.allclose(avg, np.mean(shifted, axis=1), atol=1e-12)


def test_singleton_site_kills_v(p8, rng):
    counts = rng.integers(0, 6, 8)
    rho = p8.e_kappa * counts
    for x in (TestConfig(8, {3: 1}), TestConfig(8, {3: 1, 5: 2}), TestConfig(8, {0: 3, 1: 1})):
        assert abs(v_exact(x, SiteConfig(counts), rho, p8)) < 1e-12


def test_deterministic_ensemble_is_zero():
    p = derive_params(1 / 8, 0.0)
    counts = np.tile(np.array([2, 1, 0, 3, 1, 1, 2, 0]), (200, 1))
    m, se = v_estimate(TestConfig(8, {3: 1}), counts, counts[0].astype(float), p)
    assert m == 0.0 and se == 0.0
    with pytest.raises(ValueError):
        v_estimate(TestConfig(8, {3: 1}), counts[:10], counts[0].astype(float), p)
    with pytest.raises(ValueError):
        v_estimate(TestConfig(8, {3: 1}), np.zeros((0, 8)), counts[0].astype(float), p)


def test_poisson_factorial_moments(rng):
    lam = np.array([0.7, 2.5, 4.0])
    draws = rng.poisson(lam, size=(40000, 3))
    for ks in [(1, 0, 0), (2, 1, 0), (3, 0, 2), (1, 1, 1), (0, 3, 3)]:
        vals = np.prod([v_site(k, draws[:, i], 0.0, 1.0) for i, k in enumerate(ks)], axis=0)
        target = np.prod(lam ** np.array(ks))
        assert abs(vals.mean() - target) < 3 * vals.std(ddof=1) / np.sqrt(vals.size)


def test_initial_law_gives_zero_v():
    p = derive_params(1 / 16, 0.25)
    rho0 = 0.5 + 1.5 * np.exp(-((np.arange(16) / 16 - 0.5) / 0.15) ** 2)
    counts = np.array([sample_initial(rho0, p, replica_rng(30, i)).counts for i in range(20000)])
    for x in (TestConfig(16, {8: 1}), TestConfig(16, {8: 2}), TestConfig(16, {7: 1, 8: 1}),
              TestConfig(16, {8: 3}), TestConfig(16, {8: 2, 9: 1})):
        m, se = v_estimate(x, counts, rho0, p)
        assert abs(m) < 3 * se


@pytest.mark.parametrize("law", ["binary", geometric_law(0.5)])
def test_coefficients_match_basis_oracle(law):
    p = derive_params(1 / 16, 0.25, base_pmf=law, truncation=4)
    for m in range(1, 5):
        for u in (0.0, 0.3, 1.0, 1.7, -0.8):
            num = hierarchy_coeffs_numeric(m, u, p)
            closed = np.array([hierarchy_coeff(h, m, u, p) for h in range(-m, 2)])
            assert np.allclose(closed, num, rtol=1e-9, atol=1e-9)


def test_single_particle_removal_coefficients_vanish():
    for law in ("binary", geometric_law(0.4)):
        p = derive_params(1 / 32, 0.5, base_pmf=law)
        for u in np.linspace(-2, 3, 11):
            assert hierarchy_coeff(-1, 1, u, p) == 0.0


def test_binary_pair_coefficients():
    p = derive_params(1 / 16, 0.25, truncation=1)
    e, mu = p.e_kappa, p.truncated_mean
    assert mu == 1.0
    for u in (0.0, 0.5, 2.0):
        got = [hierarchy_coeff(h, 2, u, p) for h in (-2, -1, 0, 1)]
        want = [e * u * (2 - u), 2 * e * (1 - u), 2 - e - 2 * u, -1.0]
        assert np.allclose(got, want, atol=1e-12)


@pytest.mark.xfail(strict=True, reason="c_-1(2, u) = 2 e (1 - u) for the binary law; the 3 e claim does not hold")
def test_binary_pair_removal_is_three_e():
    p = derive_params(1 / 16, 0.25, truncation=1)
    for u in (0.0, 0.5, 2.0):
        assert abs(hierarchy_coeff(-1, 2, u, p) - 3 * p.e_kappa) < 1e-12


def test_coefficient_growth_bound(rng):
    p = derive_params(1 / 16, 0.25)
    ratios = []
    for m in range(1, 5):
        for u in rng.uniform(-3, 3, 30):
            c = max(abs(hierarchy_coeff(h, m, u, p)) for h in range(-m, 2))
            ratios.append(c / max(1.0, abs(u) ** (m + 1)))
    assert max(ratios) < 50.0


def test_pair_double_removal_bound():
    for eps in (1 / 16, 1 / 64, 1 / 256):
        p = derive_params(eps, 0.5)
        for u in np.linspace(-3, 3, 25):
            assert abs(hierarchy_coeff(-2, 2, u, p)) <= 3 * p.e_kappa * max(1.0, abs(u) ** 3) + 1e-12


def test_coefficient_index_errors(p8):
    with pytest.raises(ValueError):
        hierarchy_coeff(2, 1, 0.0, p8)
    with pytest.raises(ValueError):
        hierarchy_coeff(-3, 2, 0.0, p8)
    with pytest.raises(ValueError):
        hierarchy_coeff(0, 7, 0.0, p8)


def test_product_coeffs(p8, rng):
    e = p8.e_kappa
    assert np.allclose(product_coeffs(1, 1, 0.7, p8), [e * 0.7, e, 1.0], atol=1e-14)
    q = np.arange(13)
    for k, m in [(1, 2), (2, 2), (3, 1), (2, 4), (4, 4)]:
        u = rng.uniform(-2, 2)
        c = product_coeffs(k, m, u, p8)
        lhs = v_site(k, q, u, e) * v_site(m, q, u, e)
        rhs = sum(c[r] * v_site(r, q, u, e) for r in range(k + m + 1))
        assert np.allclose(lhs, rhs, rtol=1e-9, atol=1e-9 * np.abs(lhs).max())
    worst = 0.0
    for u in rng.uniform(-3, 3, 20):
        worst = max(worst, np.abs(product_coeffs(2, 3, u, p8)).max() / max(1.0, abs(u)) ** 5)
    assert worst < 100.0
    with pytest.raises(ValueError):
        product_coeffs(5, 4, 0.0, p8)


def test_generator_moment_rhs_single_particle(p8, rng):
    e, mu = p8.e_kappa, p8.truncated_mean
    counts = rng.integers(0, 7, 8)
    X = e * counts
    for z in range(8):
        got = generator_moment_rhs(TestConfig(8, {z: 1}), SiteConfig(counts), p8)
        assert abs(got - (mu * X[z] - 0.5 * X[z] * (X[z] - e))) < 1e-12
    assert generator_moment_rhs(TestConfig(8, {0: 2, 3: 1}), SiteConfig(np.zeros(8, int)), p8) == 0.0
    with pytest.raises(ValueError):
        generator_moment_rhs(TestConfig(8, {0: 5}), SiteConfig(counts), p8)


def _full_generator(x, counts, rho, drift, p):
    """Generator of the particle system on V(x, .; rho) plus the d rho/dt term."""
    K, e = counts.size, p.e_kappa
    pmf = np.asarray(p.truncated_pmf)

    def f(c):
        return v_values(x, c[None, :], rho, p)[0]

    base = f(counts)
    out = 0.0
    for z in range(K):
        n = counts[z]
        if n == 0:
            continue
        for s in (1, -1):
            c = counts.copy()
            c[z] -= 1
            c[(z + s) % K] += 1
            out += n * 0.5 * p.jump_rate * (f(c) - base)
        for ell in range(1, p.truncation + 1):
            c = counts.copy()
            c[z] += ell
            out += n * pmf[ell - 1] * (f(c) - base)
        c = counts.copy()
        c[z] -= 1
        out += e * n * (n - 1) / 2 * (f(c) - base)
    for z, k in x.entries.items():
        part = -k * v_site(k - 1, counts[z], rho[z], e) * drift[z]
        for w, kw in x.entries.items():
            if w != z:
                part *= v_site(kw, counts[w], rho[w], e)
        out += part
    return out


@pytest.mark.parametrize("law", ["binary", geometric_law(0.5)])
def test_hierarchy_is_exact_pointwise(law, rng):
    p = derive_params(1 / 8, 0.25, base_pmf=law, truncation=3)
    rho = rng.uniform(0.3, 2.0, 8)
    drift = 0.5 * laplacian(rho, p.epsilon) + rho * (p.truncated_mean - rho / 2)
    for x in (TestConfig(8, {2: 1}), TestConfig(8, {2: 2}), TestConfig(8, {2: 1, 3: 1}),
              TestConfig(8, {1: 2, 5: 1}), TestConfig(8, {4: 3})):
        for _ in range(5):
            c = rng.integers(0, 5, 8)
            a = _full_generator(x, c, rho, drift, p)
            b = hierarchy_rhs_values(x, c, rho, p)[0]
            assert abs(a - b) <= 1e-10 * max(1.0, abs(a))


def test_dynkin_identity_single_particle():
    # E Q(x, X_t) = G_t rho0 (z) + int_0^t sum_z' G_(t-s)(z, z') E[G_bc Q(z', X_s)] ds
    p = derive_params(1 / 16, 0.25)
    K, e, mu = 16, p.e_kappa, p.truncated_mean
    rho0 = 0.5 + 1.5 * np.exp(-((np.arange(K) / K - 0.5) / 0.15) ** 2)
    t, z0 = 0.25, 8
    s = np.linspace(0, t, 41)
    w = np.full(s.size, s[1])
    w[[0, -1]] /= 2
    G = GreenKernel(K, p.epsilon)
    kern = np.array([np.roll(G.row(t - si), z0) for si in s])
    R = 4000
    d = np.empty(R)
    for i in range(R):
        rng = replica_rng(22, i)
        tr = simulate(sample_initial(rho0, p, rng), p, s, rng)
        X = e * tr.snapshots
        g = mu * X - 0.5 * X * (X - e)
        d[i] = X[-1, z0] - np.sum(w * np.sum(kern * g, axis=1))
    lhs = G.apply(t, rho0)[z0]
    assert abs(d.mean() - lhs) < 3 * d.std(ddof=1) / np.sqrt(R)


def test_residual_of_empty_config_is_zero(p8):
    counts = np.ones((10, 8), int)
    assert hierarchy_residual(TestConfig(8, {}), 0.01, counts, counts, np.ones(8), np.ones(8), p8) == (0.0, 0.0)
    with pytest.raises(ValueError):
        hierarchy_residual(TestConfig(8, {0: 4}), 0.01, counts, counts, np.ones(8), np.ones(8), p8)
