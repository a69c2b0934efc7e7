import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import ortho_group

from oracles import jacobi_eigh, projection_complement
from spatial_mgiv.errors import NumericError, RankDeficiencyError
from spatial_mgiv.factors import annihilator, eigenvalue_ratio_count, estimate_loadings, extract_factors, second_moment


def _align(a, b):
    """Flip column signs of ``a`` to match ``b``."""
    return a * np.sign(np.sum(a * b, axis=0))


def test_rank_one_exact_recovery(rng):
    t = 12
    f = rng.standard_normal(t)
    f *= np.sqrt(t) / np.linalg.norm(f)
    gamma = 1.7
    est = extract_factors((f * gamma)[None, :, None], 1)
    np.testing.assert_allclose(np.abs(est.f_hat[:, 0]), np.abs(f), rtol=1e-12)
    assert est.eigenvalues[0] == pytest.approx(gamma ** 2 * (f @ f / t), rel=1e-12)


def test_matches_jacobi_oracle(rng):
    for _ in range(20):
        panels = rng.standard_normal((3, 4, 2))
        est = extract_factors(panels, 1)
        s = sum(x @ x.T for x in panels) / (3 * 4)
        vals, vecs = jacobi_eigh(s)
        np.testing.assert_allclose(est.spectrum, vals, rtol=1e-10, atol=1e-14)
        oracle = np.sqrt(4) * vecs[:, :1]
        np.testing.assert_allclose(_align(est.f_hat, oracle), oracle, atol=1e-8)


def test_pure_noise_normalisation(rng):
    est = extract_factors(rng.standard_normal((10, 30, 3)), 2)
    np.testing.assert_allclose(est.f_hat.T @ est.f_hat / 30, np.eye(2), atol=1e-8)
    assert np.all(np.diff(est.eigenvalues) <= 0) and np.all(est.spectrum >= 0)


def test_sign_rule_is_deterministic(rng):
    panels = rng.standard_normal((5, 9, 2))
    f = extract_factors(panels, 3).f_hat
    idx = np.argmax(np.abs(f), axis=0)
    assert np.all(f[idx, np.arange(3)] > 0)
    np.testing.assert_array_equal(f, extract_factors(-panels, 3).f_hat)


def test_errors(rng):
    with pytest.raises(RankDeficiencyError):
        extract_factors(np.ones((2, 5, 1)), 2)
    bad = rng.standard_normal((2, 5, 1))
    bad[0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        extract_factors(bad, 1)
    with pytest.raises(ValueError):
        extract_factors(rng.standard_normal((2, 5, 1)), 3)


def test_near_zero_eigenvalue_warns(rng):
    f = rng.standard_normal((20, 2))
    panels = np.einsum("tr,nrk->ntk", f, rng.standard_normal((6, 2, 3)))
    panels[0, 0, 0] += 1e-5
    with pytest.warns(UserWarning, match="tiny"):
        extract_factors(panels, 3)


def test_annihilator_closed_form():
    np.testing.assert_allclose(annihilator(np.ones((2, 1))).m, [[0.5, -0.5], [-0.5, 0.5]], atol=1e-15)
    np.testing.assert_array_equal(annihilator(np.zeros((4, 0))).m, np.eye(4))


def test_annihilator_matches_explicit_inverse(rng):
    f = rng.standard_normal((15, 3))
    np.testing.assert_allclose(annihilator(f).m, projection_complement(f), atol=1e-12)


def test_annihilator_rejects_rank_deficient():
    f = np.ones((6, 2))
    with pytest.raises(RankDeficiencyError):
        annihilator(f)


def test_exogeneity_identity(rng):
    t, n, k, r = 40, 7, 2, 2
    f = rng.standard_normal((t, r))
    v = rng.standard_normal((n, t, k))
    x = np.einsum("tr,nrk->ntk", f, rng.standard_normal((n, r, k))) + v
    m = annihilator(f).m
    for i in range(n):
        np.testing.assert_allclose(m @ x[i], m @ v[i], atol=1e-8)


def test_eigenvalue_ratio_two_strong_factors():
    hits = 0
    for seed in range(100):
        r = np.random.default_rng(seed)
        f = r.standard_normal((100, 2))
        x = np.einsum("tr,nrk->ntk", f, r.standard_normal((100, 2, 1))) + r.standard_normal((100, 100, 1))
        hits += eigenvalue_ratio_count(x, 8) == 2
    assert hits / 100 > 0.95


def test_eigenvalue_ratio_degenerate_cases(rng):
    f = rng.standard_normal(30)
    assert eigenvalue_ratio_count((f[:, None] * rng.standard_normal(4))[None], 3) == 1
    assert eigenvalue_ratio_count(rng.standard_normal((100, 100, 1)), 8) == 1
    with pytest.raises(ValueError):
        eigenvalue_ratio_count(rng.standard_normal((2, 5, 1)), 2)


def test_loadings_recover_exact_structure(rng):
    t = 25
    panels = rng.standard_normal((4, t, 2))
    est = extract_factors(panels, 2)
    x0 = est.f_hat @ np.array([[1.0, -2.0], [0.5, 3.0]])
    np.testing.assert_allclose(estimate_loadings(est, x0), [[1.0, -2.0], [0.5, 3.0]], atol=1e-12)


def test_second_moment_definition(rng):
    panels = rng.standard_normal((3, 6, 2))
    manual = np.zeros((6, 6))
    for x in panels:
        manual += x @ x.T
    np.testing.assert_allclose(second_moment(panels), manual / 18, rtol=1e-14)


@given(st.integers(3, 25), st.integers(1, 3), st.integers(0, 2**31))
def test_projection_properties(t, r, seed):
    r = min(r, t - 1)
    f = np.random.default_rng(seed).standard_normal((t, r))
    m = annihilator(f).m
    np.testing.assert_allclose(m @ m, m, atol=1e-10)
    np.testing.assert_allclose(m, m.T, atol=0)
    np.testing.assert_allclose(m @ f, 0, atol=1e-10 * max(1.0, np.abs(f).max()))
    assert np.trace(m) == pytest.approx(t - r, abs=1e-10)


@given(st.integers(4, 20), st.integers(1, 3), st.integers(0, 2**31))
def test_rotation_covariance_of_factors(t, r, seed):
    g = np.random.default_rng(seed)
    panels = g.standard_normal((4, t, 3))
    rot = ortho_group.rvs(t, random_state=g.integers(2**31))
    base = extract_factors(panels, r)
    turned = extract_factors(np.einsum("st,ntk->nsk", rot, panels), r)
    np.testing.assert_allclose(turned.eigenvalues, base.eigenvalues, rtol=1e-8, atol=1e-12)
    np.testing.assert_allclose(annihilator(turned).m, rot @ annihilator(base).m @ rot.T, atol=1e-7)


@given(st.integers(4, 20), st.integers(1, 3), st.integers(0, 2**31))
def test_annihilator_depends_only_on_column_space(t, r, seed):
    g = np.random.default_rng(seed)
    f = g.standard_normal((t, r))
    q = g.standard_normal((r, r)) + 3 * np.eye(r)
    np.testing.assert_allclose(annihilator(f @ q).m, annihilator(f).m, atol=1e-10)
