import numpy as np
import pytest

from optexcite import _kernels_py, lpv, models
from optexcite.pce import ChaosBasis, gauss_quadrature


def step(t):
    return np.ones_like(np.asarray(t, dtype=float))


def test_spring_damper_step_response():
    model = models.spring_damper_model()
    grid = lpv.TimeGrid(0, 5, 1e-3)
    y = model.simulate([2.0, 1.0], step, grid)[:, 0]
    assert abs(y[-1] - 0.5) <= 1e-4
    assert y[500] == pytest.approx(0.5 * (1 - np.exp(-1)), abs=1e-5)
    assert np.all(model.simulate([2.0, 1.0], lambda t: 0 * t, grid) == 0)


def test_rk4_observed_order():
    model = models.spring_damper_model()
    errs = []
    for h in (0.1, 0.05, 0.025):
        grid = lpv.TimeGrid(0, 2, h)
        y = model.simulate([2.0, 1.0], lambda t: np.sin(3 * t), grid)[:, 0]
        t = grid.times
        exact = (2 * np.sin(3 * t) - 3 * np.cos(3 * t) + 3 * np.exp(-2 * t)) / 13
        errs.append(np.abs(y - exact).max())
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 3.8)


def test_halving_step_changes_little():
    model = models.spring_damper_model()
    u = lambda t: np.sin(np.pi * t)
    a = model.simulate([2.0, 1.0], u, lpv.TimeGrid(0, 10, 1e-3), every=2)[:, 0]
    b = model.simulate([2.0, 1.0], u, lpv.TimeGrid(0, 10, 5e-4), every=4)[:, 0]
    assert np.abs(a - b).max() <= 1e-6 * np.abs(b).max()


def test_simulation_counter_and_parallel_equivalence():
    model = models.spring_damper_model()
    th = np.column_stack([np.linspace(1.8, 2.2, 9), np.linspace(0.9, 1.1, 9)])
    grid = lpv.TimeGrid(0, 1, 1e-2)
    u = lambda t: np.cos(t)
    a = models.simulate_many(model, th, u, grid, threads=1)
    b = models.simulate_many(model, th, u, grid, threads=3, chunk=2)
    assert np.array_equal(a, b)
    assert model.n_simulations == 18


@pytest.fixture(scope="module")
def nl():
    return models.NonlinearSingleTrack()


THETA_NL = [6000.0, 10.0, 10.0, 17.0, 0.75]


def test_vehicle_straight_line(nl):
    grid = lpv.TimeGrid(0, 3, 2e-3)
    y = nl.simulate(THETA_NL, lambda t: 0 * t, grid)
    assert np.all(y == 0)
    # speed stays at v0: check through the reference kernel state
    x = _integrate_states(THETA_NL, lambda t: 0 * t, grid)
    np.testing.assert_allclose(x[:, 2], 13.89, rtol=0, atol=1e-12)


def test_vehicle_symmetry(nl):
    grid = lpv.TimeGrid(0, 4, 2e-3)
    u = lambda t: 0.05 * np.sin(2 * np.pi * 0.7 * t) + 0.02
    a = nl.simulate(THETA_NL, u, grid)
    b = nl.simulate(THETA_NL, lambda t: -u(t), grid)
    np.testing.assert_allclose(a, -b, atol=1e-10)


def test_vehicle_step_sign(nl):
    grid = lpv.TimeGrid(0, 4, 2e-3)
    for amp in (0.02, -0.02):
        y = nl.simulate(THETA_NL, lambda t: amp + 0 * t, grid)[:, 0]
        assert np.sign(y[-1]) == np.sign(amp)


def _integrate_states(theta, u, grid):
    """RK4 of the full 7-state vector with the reference right-hand side."""
    p = models.VehicleParams()
    kf, kr = p.force_scales()
    c = np.array([p.m, p.lf, p.lr, kf, kr, p.Tf, p.Tr])
    U = lpv.sample_input(u, grid, 1)[:, 0]
    th = np.atleast_2d(theta)
    x = np.zeros((1, 7))
    x[0, 2] = p.v0
    out = [x[0].copy()]
    h = grid.h
    for k in range(grid.n_steps):
        k1 = _kernels_py._st_rhs(x, U[2 * k], th, c)
        k2 = _kernels_py._st_rhs(x + 0.5 * h * k1, U[2 * k + 1], th, c)
        k3 = _kernels_py._st_rhs(x + 0.5 * h * k2, U[2 * k + 1], th, c)
        k4 = _kernels_py._st_rhs(x + h * k3, U[2 * k + 2], th, c)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out.append(x[0].copy())
    return np.array(out)


def test_tire_forces_saturate():
    grid = lpv.TimeGrid(0, 3, 2e-3)
    x = _integrate_states(THETA_NL, lambda t: 0.4 * np.sign(np.sin(2 * np.pi * t)), grid)
    kf, kr = models.VehicleParams().force_scales()
    assert np.abs(x[:, 3]).max() <= kf * np.pi / 2 * (1 + 1e-9)
    assert np.abs(x[:, 4]).max() <= kr * np.pi / 2 * (1 + 1e-9)
    assert np.abs(x[:, 3]).max() > 0.5 * kf  # the bound is actually approached


def test_speed_guard(nl):
    guarded = models.NonlinearSingleTrack(v_min=13.5)
    with pytest.raises(models.SimulationError) as err:
        guarded.simulate(THETA_NL, lambda t: 0.3 + 0 * t, lpv.TimeGrid(0, 10, 2e-3))
    assert "guard" in str(err.value) and err.value.index == 0 and err.value.step > 0


def test_linearization_agreement(nl):
    grid = lpv.TimeGrid(0, 10, 2e-3)
    u = lambda t: 0.01 * np.sin(2 * np.pi * 0.5 * t)
    y_nl = nl.simulate(THETA_NL, u, grid)[:, 0]
    p = models.VehicleParams()
    # small-slip cornering stiffness: mu C B
    th_lin = [6000.0, p.mu_f * p.Cf * 10.0, p.mu_r * p.Cr * 10.0, 17.0, 0.75, p.v0]
    y_lin = models.linear_single_track_model().simulate(th_lin, u, grid)[:, 0]
    assert np.abs(y_nl - y_lin).max() <= 0.10 * np.abs(y_lin).max()


def test_linear_vehicle_properties():
    ens = models.linear_vehicle_ensemble()
    sys = models.linear_single_track_lpv()
    A = sys.evaluate("A", ens.means)
    assert np.linalg.eigvals(A).real.max() < 0
    m = models.linear_single_track_model()
    th = np.array([ens.means, ens.means * 1.1])
    assert np.all(m.simulate_batch(th, lambda t: 0 * t, lpv.TimeGrid(0, 1, 2e-3)) == 0)


@pytest.mark.slow
def test_linear_vehicle_surrogate_dimensions():
    spec = models.get_model("single_track_lin")
    basis = ChaosBasis.create(spec.ensemble, 3)
    s = lpv.build_surrogate(spec.system, basis, gauss_quadrature(spec.ensemble, 8))
    assert s.Ap.shape == (336, 336)
    assert s.Cp.shape == (84, 336)


def test_registry():
    for name in models.MODEL_NAMES:
        spec = models.get_model(name)
        assert spec.model.q == spec.ensemble.q
    with pytest.raises(KeyError):
        models.get_model("pendulum")
    with pytest.raises(ValueError):
        models.VehicleParams(m=-1.0)
