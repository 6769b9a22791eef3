import numpy as np
import pytest

from optexcite import excitation as ex
from optexcite import identify as idf
from optexcite import lpv, models

THETA = np.array([2.0, 1.0])
NOISE = np.sqrt(0.007)
LOWER, UPPER = [1.0, 0.5], [3.0, 1.5]
U_A = ex.Sinusoid().bind([1.0, 0.0, np.pi / 2])
U_B = ex.Sinusoid().bind([1.0, 0.33, 5.5])


@pytest.fixture
def model():
    return models.spring_damper_model()


@pytest.fixture(scope="module")
def grid():
    return lpv.TimeGrid(0, 10, 1e-3)


def test_zero_noise_is_exact(model, grid):
    d = idf.synthesize_measurements(model, THETA, U_B, grid, 0.0)
    np.testing.assert_array_equal(d.y, model.simulate(THETA, U_B, grid))
    r = idf.least_squares_fit(model, [d], [1.7, 1.3], LOWER, UPPER)
    np.testing.assert_allclose(r.theta, THETA, atol=1e-4)
    assert np.all(r.std <= 1e-6)


def test_synthesis_reproducible_and_noise_level(model, grid):
    a = idf.synthesize_measurements(model, THETA, U_B, grid, NOISE, seed=7)
    b = idf.synthesize_measurements(model, THETA, U_B, grid, NOISE, seed=7)
    assert np.array_equal(a.y, b.y)
    resid = a.y - model.simulate(THETA, U_B, grid)
    assert resid.size >= 10_000
    assert resid.std() == pytest.approx(NOISE, rel=0.03)
    assert a.duration == pytest.approx(10.0)
    with pytest.raises(ValueError):
        idf.synthesize_measurements(model, THETA, U_B, grid, -1.0)


def test_fit_input_validation(model, grid):
    d = idf.synthesize_measurements(model, THETA, U_B, grid, 0.0)
    with pytest.raises(ValueError):
        idf.least_squares_fit(model, [], THETA, LOWER, UPPER)
    with pytest.raises(ValueError):
        idf.least_squares_fit(model, [d], [5.0, 1.0], LOWER, UPPER)


def test_information_additivity(model, grid):
    da = idf.synthesize_measurements(model, THETA, U_A, grid, NOISE, seed=1, every=10)
    db = idf.synthesize_measurements(model, THETA, U_B, grid, NOISE, seed=2, every=10)
    th = np.array([2.01, 0.99])
    sa = idf.linearized_std(model, [da], th, NOISE ** 2)
    sb = idf.linearized_std(model, [db], th, NOISE ** 2)
    sab = idf.linearized_std(model, [da, db], th, NOISE ** 2)
    assert np.all(sab <= sa + 1e-12) and np.all(sab <= sb + 1e-12)


def test_covariance_matches_analytic_linear_regression():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(50, 2))
    cov, null = idf.covariance_from_jacobian(X, 0.3)
    np.testing.assert_allclose(cov, 0.3 * np.linalg.inv(X.T @ X), rtol=1e-10)
    assert null is None


def test_singular_information_reports_direction():
    Jac = np.column_stack([np.ones(10), 2 * np.ones(10)])
    cov, null = idf.covariance_from_jacobian(Jac, 1.0)
    assert cov is None
    v = null[:, 0]
    assert abs(v @ [2, -1]) / np.sqrt(5) == pytest.approx(1.0, abs=1e-9)


def test_unidentifiable_parameter_gives_nan_std(model, grid):
    # zero input: the output never depends on theta
    d = idf.synthesize_measurements(model, THETA, lambda t: 0 * t, grid, 0.01, seed=0, every=50)
    r = idf.least_squares_fit(model, [d], THETA, LOWER, UPPER, max_iter=3)
    assert np.all(np.isnan(r.std)) and r.unidentifiable is not None


def test_task_orderings_and_combined(model, grid):
    da = idf.synthesize_measurements(model, THETA, U_A, grid, NOISE, seed=0, name="a")
    db = idf.synthesize_measurements(model, THETA, U_B, grid, NOISE, seed=1, name="b")
    ra = idf.least_squares_fit(model, [da], [1.9, 0.95], LOWER, UPPER)
    rb = idf.least_squares_fit(model, [db], [1.9, 0.95], LOWER, UPPER)
    rab = idf.least_squares_fit(model, [da, db], [1.9, 0.95], LOWER, UPPER)
    assert ra.std[0] < ra.std[1]
    assert rb.std[1] < rb.std[0]
    best = np.minimum(ra.std, rb.std)
    assert np.all(rab.std <= 1.3 * best)
    assert rab.datasets == "a+b" and rab.duration == pytest.approx(20.0)
    assert rab.n_points == 2 * len(da.y)


def test_estimator_consistency(model, grid):
    est = []
    for seed in range(50):
        d = idf.synthesize_measurements(model, THETA, U_B, grid, NOISE, seed=seed, every=20)
        est.append(idf.least_squares_fit(model, [d], [1.9, 0.95], LOWER, UPPER).theta)
    est = np.array(est)
    se = est.std(axis=0, ddof=1) / np.sqrt(len(est))
    assert np.all(np.abs(est.mean(axis=0) - THETA) <= 3 * se)
