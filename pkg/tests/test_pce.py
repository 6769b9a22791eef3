import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from optexcite.pce import (BasisSizeError, ChaosBasis, DomainError, Gaussian, ParameterEnsemble,
                           QuadratureWarning, Uniform, build_multi_index_set, eval_basis, gauss_quadrature,
                           pce_moments, project)


def ens(*marginals):
    return ParameterEnsemble(list(marginals))


def test_index_set_sizes():
    assert len(build_multi_index_set(2, 3)) == 10
    assert len(build_multi_index_set(6, 3)) == 84
    assert build_multi_index_set(1, 0).tolist() == [[0]]


def test_index_set_order_graded():
    idx = build_multi_index_set(2, 2)
    assert idx[0].tolist() == [0, 0]
    deg = idx.sum(axis=1)
    assert np.all(np.diff(deg) >= 0)
    assert sorted(map(tuple, idx)) == sorted({tuple(r) for r in idx})


@given(st.integers(1, 6), st.integers(0, 4))
def test_index_set_count_formula(q, d):
    idx = build_multi_index_set(q, d)
    assert len(idx) == math.comb(q + d, d)
    assert idx.sum(axis=1).max() == d


def test_index_set_size_error():
    with pytest.raises(BasisSizeError):
        build_multi_index_set(40, 10)


def test_marginal_validation():
    with pytest.raises(ValueError):
        Uniform(1.0, 1.0)
    with pytest.raises(ValueError):
        Gaussian(0.0, 0.0)


def test_eval_basis_examples():
    b = ChaosBasis.create(ens(Uniform(1.8, 2.2)), 3)
    phi = eval_basis(b, [2.0])
    assert phi[0] == 1.0
    assert abs(phi[1]) < 1e-15
    b2 = ChaosBasis.create(ens(Uniform(-1, 1)), 2)
    assert eval_basis(b2, [1.0])[2] == pytest.approx(1.0, abs=1e-14)


def test_legendre_matches_numpy_oracle():
    b = ChaosBasis.create(ens(Uniform(-1, 1)), 5)
    z = np.linspace(-1, 1, 11)
    vals = b.evaluate(z[:, None])
    for k in range(6):
        ref = np.polynomial.legendre.legval(z, np.eye(6)[k])
        np.testing.assert_allclose(vals[:, k], ref, atol=1e-13)


def test_hermite_matches_numpy_oracle():
    b = ChaosBasis.create(ens(Gaussian(3.0, 2.0)), 4)
    x = np.linspace(-5, 10, 7)
    vals = b.evaluate(x[:, None])
    for k in range(5):
        ref = np.polynomial.hermite_e.hermeval((x - 3.0) / 2.0, np.eye(5)[k])
        np.testing.assert_allclose(vals[:, k], ref, rtol=1e-12, atol=1e-12)


def test_support_violation():
    b = ChaosBasis.create(ens(Uniform(0, 1)), 2)
    with pytest.raises(DomainError):
        eval_basis(b, [1.5])


def test_quadrature_examples():
    g = gauss_quadrature(ens(Uniform(0, 1), Uniform(0, 1)), 4)
    assert g.size == 16
    assert g.weights.sum() == pytest.approx(1.0, abs=1e-14)
    g1 = gauss_quadrature(ens(Uniform(-1, 1)), 2)
    assert abs(g1.weights @ g1.nodes[:, 0] ** 3) < 1e-15
    g2 = gauss_quadrature(ens(Uniform(0, 1)), 3)
    assert g2.weights @ g2.nodes[:, 0] ** 4 == pytest.approx(0.2, abs=1e-12)


def test_gaussian_quadrature_moments():
    g = gauss_quadrature(ens(Gaussian(1.0, 2.0)), 5)
    x = g.nodes[:, 0]
    assert g.weights @ x == pytest.approx(1.0, abs=1e-12)
    assert g.weights @ (x - 1) ** 2 == pytest.approx(4.0, abs=1e-12)
    assert g.weights @ (x - 1) ** 4 == pytest.approx(3 * 16.0, rel=1e-12)


marginal_st = st.one_of(
    st.builds(lambda a, w: Uniform(a, a + w), st.floats(-5, 5), st.floats(0.1, 5)),
    st.builds(Gaussian, st.floats(-5, 5), st.floats(0.1, 3)),
)


@settings(max_examples=30, deadline=None)
@given(st.lists(marginal_st, min_size=1, max_size=3), st.integers(0, 3))
def test_orthogonality_and_gram(marginals, d):
    b = ChaosBasis.create(ens(*marginals), d)
    g = gauss_quadrature(b.ensemble, d + 1)
    Phi = b.evaluate(g.nodes, check=False)
    G = (Phi * g.weights[:, None]).T @ Phi
    scale = np.sqrt(np.outer(b.norms, b.norms))
    np.testing.assert_allclose(G / scale, np.eye(b.size), atol=1e-10)
    assert b.norms[0] == 1.0 and np.all(b.norms > 0)


def test_orthogonality_q6_d4():
    b = ChaosBasis.create(ens(*[Uniform(0, 1)] * 3, *[Gaussian(0, 1)] * 3), 4)
    g = gauss_quadrature(b.ensemble, 5)
    Phi = b.evaluate(g.nodes, check=False)
    G = (Phi * g.weights[:, None]).T @ Phi
    off = G - np.diag(np.diag(G))
    assert np.abs(off).max() <= 1e-10
    np.testing.assert_allclose(np.diag(G), b.norms, atol=1e-10)


def test_project_examples():
    e = ens(Uniform(1.0, 3.0), Uniform(-1, 1))
    b = ChaosBasis.create(e, 3)
    g = gauss_quadrature(e, 4)
    c = project(b, g, lambda th: 2.5)
    np.testing.assert_allclose(c[0], [2.5] + [0] * 9, atol=1e-14)
    # theta_1 = 2 + 1 * P1(z1): mean 2, one degree-1 coefficient equal to half-width
    c1 = project(b, g, lambda th: th[0])[0]
    assert c1[0] == pytest.approx(2.0)
    nz = np.flatnonzero(np.abs(c1[1:]) > 1e-12) + 1
    assert len(nz) == 1 and b.indices[nz[0]].tolist() == [1, 0] and c1[nz[0]] == pytest.approx(1.0)
    c3 = project(b, g, lambda th: b.evaluate(th)[3])[0]
    np.testing.assert_allclose(c3, np.eye(10)[3], atol=1e-10)


def test_project_vectorized_matches_loop():
    e = ens(Uniform(0, 1), Gaussian(0, 1))
    b = ChaosBasis.create(e, 2)
    g = gauss_quadrature(e, 3)
    f = lambda th: np.stack([th[..., 0] * th[..., 1], th[..., 1] ** 2], axis=-1)
    np.testing.assert_allclose(project(b, g, f, vectorized=True), project(b, g, f), atol=1e-14)


def test_project_warns_when_order_too_low():
    e = ens(Uniform(0, 1))
    b = ChaosBasis.create(e, 3)
    with pytest.warns(QuadratureWarning):
        project(b, gauss_quadrature(e, 2), lambda th: th[0] ** 3, f_degree=3)


def test_pce_moments_examples():
    b = ChaosBasis.create(ens(Uniform(0, 1), Uniform(0, 1)), 2)
    R = np.zeros(b.size)
    R[0] = 3.0
    assert pce_moments(b, R) == (3.0, 0.0)
    R = np.zeros(b.size)
    R[2] = 0.7
    assert pce_moments(b, R)[1] == pytest.approx(b.norms[2] * 0.49)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=10, max_size=10))
def test_moments_consistent_with_quadrature(coef):
    e = ens(Uniform(-2, 1), Gaussian(1, 0.5))
    b = ChaosBasis.create(e, 3)
    R = np.array(coef)
    g = gauss_quadrature(e, 4)
    vals = b.evaluate(g.nodes, check=False) @ R
    mean = g.weights @ vals
    var = g.weights @ (vals - mean) ** 2
    m, v = pce_moments(b, R)
    assert m == pytest.approx(mean, abs=1e-9)
    assert v == pytest.approx(var, abs=1e-9)
    assert v >= 0


def test_moments_vs_monte_carlo_spring_damper():
    from optexcite import lpv, models
    spec = models.get_model("spring_damper")
    b = ChaosBasis.create(spec.ensemble, 3)
    s = lpv.build_surrogate(spec.system, b, gauss_quadrature(spec.ensemble, 8))
    grid = lpv.TimeGrid(0, 3, 1e-3)
    tr = lpv.simulate_surrogate(s, lambda t: np.sin(np.pi * t), grid, every=100)
    k = 20  # t = 2 s
    mean, var = pce_moments(b, tr.Y[k])
    th = spec.ensemble.marginals
    rng = np.random.default_rng(0)
    samples = np.column_stack([m.sample(rng, 100_000) for m in th])
    y = b.evaluate(samples) @ tr.Y[k]
    se_mean = y.std() / np.sqrt(len(y))
    assert abs(y.mean() - mean) <= 3 * se_mean
    se_var = np.sqrt(np.mean((y - y.mean()) ** 4) - y.var() ** 2) / np.sqrt(len(y))
    assert abs(y.var() - var) <= 3 * se_var


def test_ensemble_roundtrip():
    e = ParameterEnsemble([Uniform(0, 2), Gaussian(1, 3)], ["a", "b"])
    e2 = ParameterEnsemble.from_dict(e.to_dict())
    assert e2.names == e.names
    assert e2.marginals == e.marginals
    with pytest.raises(ValueError):
        ParameterEnsemble([Uniform(0, 1), Uniform(0, 1)], ["a", "a"])
