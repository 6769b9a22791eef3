import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from optexcite import excitation as ex
from optexcite import lpv, models
from optexcite import optimizer as opt
from optexcite.pce import ChaosBasis, gauss_quadrature

P_STAR = np.array([1.0, -2.0, 3.5])


def sphere(p):
    return -float(np.sum((np.asarray(p) - P_STAR) ** 2))


def test_de_config_validation():
    for bad in ({"n_pop": 3}, {"F": 0.0}, {"F": 2.5}, {"CR": 1.5}, {"max_iter": -1}):
        with pytest.raises(ValueError):
            opt.DeConfig(**bad)


def test_sphere_benchmark():
    res = opt.differential_evolution(sphere, [-5] * 3, [5] * 3,
                                     opt.DeConfig(n_pop=20, max_iter=200, seed=0, stagnation=0))
    assert np.linalg.norm(res.p - P_STAR) <= 1e-2
    assert res.n_evals == 60 * 201


def test_trace_monotone_and_boxes_respected():
    seen = []

    def f(p):
        seen.append(np.array(p))
        return -float(np.sum(np.asarray(p) ** 2)) + np.sin(5 * p[0])

    res = opt.differential_evolution(f, [-1, 0], [2, 3], opt.DeConfig(n_pop=6, max_iter=30, seed=4))
    assert np.all(np.diff(res.trace) >= 0)
    X = np.array(seen)
    assert np.all(X >= [-1, 0]) and np.all(X <= [2, 3])


def test_identical_population_is_stationary():
    pop = np.tile([0.3, 0.4, 0.5], (12, 1))
    res = opt.differential_evolution(sphere, [-5] * 3, [5] * 3, opt.DeConfig(n_pop=4, max_iter=10, F=1.7),
                                     population=pop)
    np.testing.assert_array_equal(res.p, [0.3, 0.4, 0.5])
    assert len(set(res.trace)) == 1


def test_same_seed_same_trace():
    cfg = opt.DeConfig(n_pop=8, max_iter=25, seed=11)
    a = opt.differential_evolution(sphere, [-5] * 3, [5] * 3, cfg)
    b = opt.differential_evolution(sphere, [-5] * 3, [5] * 3, cfg)
    assert a.trace == b.trace and np.array_equal(a.p, b.p)
    c = opt.differential_evolution(sphere, [-5] * 3, [5] * 3, opt.DeConfig(n_pop=8, max_iter=25, seed=12))
    assert c.trace != a.trace


def test_thread_count_does_not_change_result():
    a = opt.differential_evolution(sphere, [-5] * 3, [5] * 3, opt.DeConfig(n_pop=8, max_iter=20, seed=2))
    b = opt.differential_evolution(sphere, [-5] * 3, [5] * 3,
                                   opt.DeConfig(n_pop=8, max_iter=20, seed=2, threads=4))
    assert a.trace == b.trace and np.array_equal(a.p, b.p)


def test_stagnation_stop():
    res = opt.differential_evolution(lambda p: 1.0, [0, 0], [1, 1],
                                     opt.DeConfig(n_pop=4, max_iter=500, stagnation=5))
    assert res.stopped == "stagnation" and res.n_generations == 5


def test_nan_objective_is_never_selected():
    f = lambda p: math.nan if p[0] > 0 else -p[0] ** 2
    res = opt.differential_evolution(f, [-1], [1], opt.DeConfig(n_pop=8, max_iter=20, seed=0))
    assert res.p[0] <= 0 and math.isfinite(res.J)


def test_refine_at_optimum_stays():
    p, J, _ = opt.refine_local(sphere, P_STAR, [-5] * 3, [5] * 3)
    np.testing.assert_allclose(p, P_STAR, atol=1e-8)
    assert J == pytest.approx(0.0, abs=1e-14)


def test_refine_parabola_vertex():
    f = lambda p: -3.0 * (p[0] - 0.7) ** 2 + 2.0
    p, J, n = opt.refine_local(f, [2.5], [-5], [5], tol=1e-8)
    assert abs(p[0] - 0.7) <= 1e-6
    assert n > 1


def test_refine_respects_bounds():
    p, _, _ = opt.refine_local(sphere, [0.0, 0.0, 0.0], [-1] * 3, [1] * 3)
    np.testing.assert_allclose(p, [1.0, -1.0, 1.0], atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.floats(-2, 2), st.floats(0.1, 10))
def test_refine_never_worse_with_kink(x0, rho):
    f = lambda p: -abs(p[0] - 0.3) * rho - rho * max(p[0] - 1.0, 0.0) ** 2 + np.cos(7 * p[0])
    p, J, _ = opt.refine_local(f, [x0], [-2], [2])
    assert J >= f([x0])
    assert -2 <= p[0] <= 2


def test_refine_non_finite_start_warns():
    with pytest.warns(RuntimeWarning):
        p, J, n = opt.refine_local(lambda p: -math.inf, [0.5], [0], [1])
    assert p[0] == 0.5 and n == 1


# excitation problems on the spring-damper ----------------------------------

@pytest.fixture(scope="module")
def spring_surrogate():
    spec = models.get_model("spring_damper")
    basis = ChaosBasis.create(spec.ensemble, 3)
    return spec, lpv.build_surrogate(spec.system, basis, gauss_quadrature(spec.ensemble, 8))


def _problem(surrogate, S_min=0.0, params=(0,), R=0.0, rate_max=None, chance=(), grid=None):
    grid = grid or lpv.TimeGrid(0, 10, 1e-3)
    adm = ex.sinusoid_set()
    adm.rate_max = rate_max
    return opt.ExcitationProblem(ex.Sinusoid(), adm, ex.selection_weights(1, 2, params), np.atleast_2d(R),
                                 grid, opt.IntrusiveEngine(surrogate, S_min), list(chance), every=10)


def test_zero_signal_large_threshold_gives_zero(spring_surrogate):
    _, s = spring_surrogate
    pr = _problem(s, S_min=10.0)
    pr.engine.prepare(pr.grid, pr.every)
    ev = pr.evaluate([0.0, 0.0, 0.0])
    assert ev.J_raw == 0.0 and ev.violation == 0.0
    assert pr.penalized([0.0, 0.0, 0.0], 1e3) == 0.0


def test_penalty_arithmetic(spring_surrogate):
    _, s = spring_surrogate
    pr = _problem(s, rate_max=1.0)
    pr.engine.prepare(pr.grid, pr.every)
    p = [1.0, 0.5, 0.0]  # peak rate 2 pi 0.5 = pi
    ev = pr.evaluate(p)
    v = np.pi - 1.0
    assert ev.report.violations["rate"] == pytest.approx(v)
    assert pr.penalized(p, 7.0) == pytest.approx(ev.J_raw - 7.0 * v ** 2, rel=1e-12)


def test_chance_penalty(spring_surrogate):
    _, s = spring_surrogate
    cc = ex.ChanceConstraint(0, 0.05, 0.1)
    pr = _problem(s, chance=[cc])
    pr.engine.prepare(pr.grid, pr.every)
    ev = pr.evaluate([1.0, 0.3, 0.0])
    assert ev.report.violations["chance[0]"] > 0
    assert not ev.report.feasible
    assert ev.violation == pytest.approx(ev.report.violations["chance[0]"] ** 2)


def test_engine_failure_is_minus_infinity():
    class Broken:
        runs = 0

        def prepare(self, grid, every, seed=0):
            pass

        def evaluate(self, u):
            raise models.SimulationError("boom", index=0)

    pr = opt.ExcitationProblem(ex.Sinusoid(), ex.sinusoid_set(), np.eye(2), np.zeros((1, 1)),
                               lpv.TimeGrid(0, 1, 0.1), Broken())
    assert pr.penalized([0.5, 1.0, 0.0], 1.0) == -math.inf
    assert pr.evaluate([0.5, 1.0, 0.0]).error == "boom"


def test_problem_box_dimension_mismatch(spring_surrogate):
    _, s = spring_surrogate
    with pytest.raises(ValueError):
        opt.ExcitationProblem(ex.RampSuperposition(1), ex.sinusoid_set(), np.eye(2), np.zeros((1, 1)),
                              lpv.TimeGrid(0, 1, 0.1), opt.IntrusiveEngine(s))


def test_solve_counts_and_reproducibility(spring_surrogate):
    _, s = spring_surrogate
    cfg = opt.DeConfig(n_pop=4, max_iter=3, seed=5, refine=False)
    lines = []
    a = opt.solve(_problem(s), cfg, progress=lambda *args: lines.append(args))
    assert a.runs_per_generation == [12, 12, 12]
    assert len(lines) == 4
    b = opt.solve(_problem(s), cfg)
    assert a.trace == b.trace and np.array_equal(a.p, b.p)
    assert np.all(np.diff(a.trace) >= 0)
    assert a.penalty > 0 and a.feasibility is not None


def test_transport_engine_common_random_numbers():
    spec = models.get_model("spring_damper")
    model = models.spring_damper_model()
    eng = opt.TransportEngine(model, spec.ensemble, n_samples=20, M=4, seed=3)
    grid = lpv.TimeGrid(0, 2, 1e-2)
    pr = opt.ExcitationProblem(ex.Sinusoid(), ex.sinusoid_set(), ex.selection_weights(1, 2, [0]),
                               np.zeros((1, 1)), grid, eng, every=5)
    seen = []
    orig = model.simulate_batch

    def spy(thetas, u, g, every=1):
        seen.append(np.array(thetas))
        return orig(thetas, u, g, every)

    model.simulate_batch = spy
    res = opt.solve(pr, opt.DeConfig(n_pop=4, max_iter=2, seed=0, refine=False))
    assert all(np.array_equal(x, seen[0]) for x in seen)
    assert res.runs_per_generation == [12 * 20, 12 * 20]


def test_intrusive_vs_transport_objective_agree(spring_surrogate):
    spec, s = spring_surrogate
    grid = lpv.TimeGrid(0, 10, 1e-3)
    p = [1.0, 0.3, 0.5]
    pi = _problem(s, grid=grid, params=(0, 1))
    pi.engine.prepare(grid, 10)
    eng = opt.TransportEngine(models.spring_damper_model(), spec.ensemble, n_samples=4000, M=40, seed=1)
    pt = opt.ExcitationProblem(ex.Sinusoid(), ex.sinusoid_set(), ex.selection_weights(1, 2, [0, 1]),
                               np.zeros((1, 1)), grid, eng, every=10)
    eng.prepare(grid, 10)
    Ji, Jt = pi.evaluate(p).J_raw, pt.evaluate(p).J_raw
    assert Jt == pytest.approx(Ji, rel=0.1)


@pytest.mark.slow
def test_engines_agree_on_task_a_frequency(spring_surrogate):
    """Scan the frequency at u0 = 1 with both engines (N_s = 10^4) and compare the argmax."""
    spec, s = spring_surrogate
    grid = lpv.TimeGrid(0, 10, 5e-3)
    freqs = np.linspace(0.0, 0.3, 13)
    pi = _problem(s, grid=grid)
    pi.every = 2
    pi.engine.prepare(grid, 2)
    eng = opt.TransportEngine(models.spring_damper_model(), spec.ensemble, n_samples=10_000, seed=0)
    pt = opt.ExcitationProblem(ex.Sinusoid(), ex.sinusoid_set(), ex.selection_weights(1, 2, [0]),
                               np.zeros((1, 1)), grid, eng, every=2)
    eng.prepare(grid, 2)
    best = []
    for pr in (pi, pt):
        vals = [max(pr.evaluate([1.0, f, phi]).J_raw for phi in (np.pi / 2, 3 * np.pi / 2)) for f in freqs]
        best.append(freqs[int(np.argmax(vals))])
    assert abs(best[0] - best[1]) <= 0.05
