import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import neumann_impacts
from spatial_mgiv.errors import NumericError
from spatial_mgiv.impacts import compute_impacts, impact_inference, impact_matrix, summarize
from spatial_mgiv.spatial_weights import rook_circular


def _random_w(g, n):
    w = g.uniform(size=(n, n))
    np.fill_diagonal(w, 0)
    return w / w.sum(axis=1, keepdims=True)


def test_no_spatial_feedback_gives_diagonal(rng):
    beta = rng.standard_normal(5)
    m = impact_matrix(0.0, 0.0, beta, 0.0, rook_circular(5))
    np.testing.assert_array_equal(m, np.diag(beta))


def test_homogeneous_half_doubles_total():
    s = summarize(impact_matrix(0.5, 0.0, 1.0, 0.0, rook_circular(7)))
    assert s.total == pytest.approx(2.0, rel=1e-13)
    np.testing.assert_allclose(s.unit_total, 2.0, rtol=1e-13)


def test_summaries_of_simple_matrices():
    s = summarize(np.eye(4))
    assert (s.direct, s.indirect, s.total) == (1.0, 0.0, 1.0)
    s = summarize(np.ones((4, 4)))
    assert (s.direct, s.indirect, s.total) == (1.0, 3.0, 4.0)


def test_matches_neumann_series(rng):
    n = 6
    w = _random_w(rng, n)
    psi0 = rng.uniform(0.1, 0.4, n)
    psi1 = rng.uniform(0.0, 0.3, n)
    beta = rng.standard_normal(n)
    gamma = rng.standard_normal(n)
    for horizon, long_run in (("long_run", True), ("contemporaneous", False)):
        m = impact_matrix(psi0, psi1, beta, gamma, w, horizon)
        np.testing.assert_allclose(m, neumann_impacts(psi0, psi1, beta, gamma, w, long_run), rtol=1e-10, atol=1e-12)


def test_indirect_grand_sum_convention(rng):
    m = rng.standard_normal((5, 5))
    s = summarize(m)
    assert s.indirect == pytest.approx((m.sum() - np.trace(m)) / 5, rel=1e-14)
    assert s.indirect == pytest.approx(np.mean(m.sum(axis=1) - np.diag(m)), rel=1e-12)
    np.testing.assert_allclose(s.unit_indirect, m.sum(axis=1) - np.diag(m), rtol=1e-14)


def test_inference_examples(rng):
    inf = impact_inference([0.0, 2.0])
    assert inf.estimate == 1.0 and inf.se == pytest.approx(1.0)
    assert inf.z == pytest.approx(1.0)
    assert inf.ci_low == pytest.approx(1 - 1.959964, abs=1e-6)
    c = rng.standard_normal(10)
    mean = sum(c) / 10
    sd = (sum((v - mean) ** 2 for v in c) / 9) ** 0.5
    inf = impact_inference(c)
    assert inf.se == pytest.approx(sd / 10 ** 0.5, rel=1e-13)
    flat = impact_inference([3.0, 3.0, 3.0])
    assert flat.se == 0 and flat.p == 0.0 and flat.z == np.inf
    with pytest.raises(NumericError):
        impact_inference([1.0])


def test_singular_system_names_radius():
    w = rook_circular(4)
    with pytest.raises(NumericError, match="spectral radius"):
        impact_matrix(0.6, 0.4, 1.0, 0.0, w)
    with pytest.raises(ValueError):
        impact_matrix(0.1, 0.0, 1.0, 0.0, w, horizon="forever")


def test_compute_impacts_and_csv(tmp_path, rng):
    n = 5
    coefs = {"psi": np.full(n, 0.2), "psi1": np.full(n, 0.1), "inv": rng.uniform(0.5, 1.5, n),
             "W:inv": rng.standard_normal(n), "educ": rng.standard_normal(n)}
    table = compute_impacts(coefs, ["inv", "educ"], rook_circular(n))
    assert len(table.rows()) == 6
    m = impact_matrix(coefs["psi"], coefs["psi1"], coefs["inv"], coefs["W:inv"], rook_circular(n))
    assert table.inference[("direct", "inv")].estimate == pytest.approx(np.trace(m) / n, rel=1e-13)
    text = table.to_csv(tmp_path / "i.csv", header=["source: test"])
    lines = text.splitlines()
    assert lines[:3] == ["# source: test", "# horizon: long_run", lines[2]] and lines[2].startswith("# inference")
    assert lines[3] == "effect,covariate,impact,se,z,p,ci_low,ci_high"
    assert (tmp_path / "i.csv").read_text() == text
    with pytest.raises(ValueError):
        compute_impacts({"inv": coefs["inv"]}, ["inv"], rook_circular(n))


@given(st.permutations(range(6)), st.integers(0, 2**31))
def test_permutation_equivariance(perm, seed):
    g = np.random.default_rng(seed)
    n = 6
    w = _random_w(g, n)
    psi0, beta, gamma = g.uniform(0.0, 0.45, n), g.standard_normal(n), g.standard_normal(n)
    p = np.eye(n)[list(perm)]
    m = impact_matrix(psi0, 0.0, beta, gamma, w, "contemporaneous")
    moved = impact_matrix(p @ psi0, 0.0, p @ beta, p @ gamma, p @ w @ p.T, "contemporaneous")
    np.testing.assert_allclose(moved, p @ m @ p.T, rtol=1e-11, atol=1e-13)
    a, b = summarize(m), summarize(moved)
    assert b.total == pytest.approx(a.total, rel=1e-11, abs=1e-13)


@given(st.floats(-0.9, 0.9), st.floats(-3, 3), st.integers(3, 12))
def test_homogeneous_total_closed_form(psi, beta, n):
    s = summarize(impact_matrix(psi, 0.0, beta, 0.0, rook_circular(n)))
    assert s.total == pytest.approx(beta / (1 - psi), rel=1e-10, abs=1e-12)
