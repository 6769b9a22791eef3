"""Reference systems and the black-box simulation contract.

Three models are registered by name: ``spring_damper`` (LPV, two uniform
parameters), ``single_track_nl`` (nonlinear vehicle, black box only) and
``single_track_lin`` (linearized vehicle as an LPV system).
"""
from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .lpv import LpvSystem, TimeGrid, sample_input
from .pce import Gaussian, ParameterEnsemble, Uniform


class SimulationError(RuntimeError):
    """A model simulation failed; ``index`` is the offending row of the parameter batch."""

    def __init__(self, message: str, index: int | None = None, step: int | None = None):
        super().__init__(message)
        self.index = index
        self.step = step


class BlackBoxModel:
    """Deterministic simulator y = M(u, theta).

    Subclasses implement :meth:`simulate_batch`; ``n_simulations`` counts
    every single-parameter simulation performed (thread-safe).
    """

    q: int = 0
    m: int = 1
    l: int = 1
    names: tuple = ()

    def __init__(self):
        self._lock = threading.Lock()
        self.n_simulations = 0

    def _count(self, k: int) -> None:
        with self._lock:
            self.n_simulations += k

    def simulate(self, theta, u, grid: TimeGrid, every: int = 1) -> np.ndarray:
        """Output for one parameter vector, shape (K, m)."""
        return self.simulate_batch(np.atleast_2d(np.asarray(theta, dtype=float)), u, grid, every)[0]

    def simulate_batch(self, thetas, u, grid: TimeGrid, every: int = 1) -> np.ndarray:
        """Outputs for parameter rows ``thetas`` (S, q), shape (S, K, m)."""
        raise NotImplementedError


class LpvModel(BlackBoxModel):
    """Direct (non-surrogate) simulation of an LPV system at fixed parameters."""

    def __init__(self, system: LpvSystem, names=()):
        super().__init__()
        self.system = system
        self.q = len(names)
        self.m, self.l = system.m, system.l
        self.names = tuple(names)

    def simulate_batch(self, thetas, u, grid, every=1):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        sys = self.system
        U = sample_input(u, grid, sys.l)
        ev = {k: np.ascontiguousarray(sys.evaluate(k, thetas)) for k in ("A", "B", "C", "D", "E", "F", "x0")}
        X = kernels.lti_rk4_batch(ev["A"], ev["B"], ev["E"], ev["x0"], U, grid.h, every)
        self._count(len(thetas))
        bad = ~np.all(np.isfinite(X.reshape(len(X), -1)), axis=1)
        if bad.any():
            i = int(np.argmax(bad))
            raise SimulationError(f"non-finite state for parameter sample {i}: {thetas[i]}", index=i)
        K = X.shape[1]
        Uk = U[::2][::every][:K]
        return np.einsum("sij,skj->ski", ev["C"], X) + np.einsum("sij,kj->ski", ev["D"], Uk) + ev["F"][:, None, :]


def simulate_many(model: BlackBoxModel, thetas, u, grid: TimeGrid, every: int = 1,
                  threads: int = 1, chunk: int | None = None) -> np.ndarray:
    """Simulate every parameter row, optionally on worker threads.

    Results are written to index-addressed slots, so the output does not
    depend on scheduling. A failure is re-raised with the global row index.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    S = len(thetas)
    if threads <= 1 or S < 2:
        return model.simulate_batch(thetas, u, grid, every)
    U = sample_input(u, grid, model.l)
    chunk = chunk or -(-S // threads)
    bounds = [(i, min(i + chunk, S)) for i in range(0, S, chunk)]

    def run(b):
        lo, hi = b
        try:
            return model.simulate_batch(thetas[lo:hi], U, grid, every)
        except SimulationError as err:
            idx = None if err.index is None else lo + err.index
            raise SimulationError(f"parameter sample {idx}: {err}", index=idx, step=err.step) from err

    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(run, bounds))
    return np.concatenate(parts, axis=0)


# spring-damper ---------------------------------------------------------------

SPRING_DAMPER_NAMES = ("c", "d")


def spring_damper_ensemble(c_range=(1.8, 2.2), d_range=(0.9, 1.1)) -> ParameterEnsemble:
    return ParameterEnsemble([Uniform(*c_range), Uniform(*d_range)], SPRING_DAMPER_NAMES)


def spring_damper_system(noise_var: float = 0.007) -> LpvSystem:
    """d x' = -c x + u, y = x + nu with Var(nu) = noise_var, theta = (c, d)."""

    def A(th):
        return (-th[:, 0] / th[:, 1]).reshape(-1, 1, 1)

    def B(th):
        return (1.0 / th[:, 1]).reshape(-1, 1, 1)

    return LpvSystem(n=1, m=1, l=1, A=A, B=B, C=np.ones((1, 1)), nu_cov=np.array([[noise_var]]),
                     vectorized=True)


def spring_damper_model(noise_var: float = 0.007) -> LpvModel:
    return LpvModel(spring_damper_system(noise_var), SPRING_DAMPER_NAMES)


# single-track vehicle --------------------------------------------------------

@dataclass(frozen=True)
class VehicleParams:
    v0: float = 13.89
    m: float = 2700.0
    lf: float = 1.548
    lr: float = 1.441
    mu_f: float = 1.0
    mu_r: float = 1.0
    Cf: float = 0.953
    Cr: float = 1.878
    g: float = 9.81
    Tf: float = 0.02857
    Tr: float = 0.02857

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ValueError(f"vehicle parameter {k} must be positive")

    @property
    def wheelbase(self) -> float:
        return self.lf + self.lr

    def force_scales(self) -> tuple[float, float]:
        """Peak-force factors mu C m g l_(r|f) / (lf + lr) of the arctan tire curves."""
        L = self.wheelbase
        return (self.mu_f * self.Cf * self.m * self.g * self.lr / L,
                self.mu_r * self.Cr * self.m * self.g * self.lf / L)


NONLINEAR_NAMES = ("Jz", "Bf", "Br", "ws", "ds")
LINEAR_NAMES = ("Jz", "Kf", "Kr", "ws", "ds", "v")


def nonlinear_vehicle_ensemble() -> ParameterEnsemble:
    return ParameterEnsemble([Gaussian(6000.0, 1000.0), Gaussian(10.0, 1.0), Gaussian(10.0, 1.0),
                              Gaussian(17.0, 4.0), Gaussian(0.75, 0.05)], NONLINEAR_NAMES)


def linear_vehicle_ensemble() -> ParameterEnsemble:
    return ParameterEnsemble([Gaussian(6000.0, 1000.0), Gaussian(9.53, 1.20), Gaussian(18.8, 2.00),
                              Gaussian(17.0, 4.0), Gaussian(0.75, 0.05), Gaussian(11.27, 0.87)],
                             LINEAR_NAMES)


class NonlinearSingleTrack(BlackBoxModel):
    """Yaw-rate response of the nonlinear single-track model with arctan tires.

    States: yaw rate, side-slip angle, speed, front/rear lateral tire forces
    (first-order lag), steering angle and its rate (second-order lag of the
    steering command u). No longitudinal force acts on the vehicle.
    """

    q, m, l = 5, 1, 1
    names = NONLINEAR_NAMES

    def __init__(self, params: VehicleParams = VehicleParams(), v_min: float = 1.0):
        super().__init__()
        self.params = params
        self.v_min = v_min
        kf, kr = params.force_scales()
        self._consts = np.array([params.m, params.lf, params.lr, kf, kr, params.Tf, params.Tr])

    def simulate_batch(self, thetas, u, grid, every=1):
        thetas = np.ascontiguousarray(np.atleast_2d(np.asarray(thetas, dtype=float)))
        U = sample_input(u, grid, 1)[:, 0].copy()
        Y, status, fail = kernels.single_track_batch(thetas, self._consts, self.params.v0, U, grid.h,
                                                     every, self.v_min)
        self._count(len(thetas))
        if np.any(status):
            i = int(np.flatnonzero(status)[0])
            why = "speed fell below the guard" if status[i] == 1 else "non-finite state"
            t = grid.t0 + fail[i] * grid.h
            raise SimulationError(f"parameter sample {i} ({thetas[i]}): {why} at t = {t:.4g} s",
                                  index=i, step=int(fail[i]))
        return Y[:, :, None]


def linear_single_track_lpv(params: VehicleParams = VehicleParams()) -> LpvSystem:
    """Linearized single-track model, theta = (Jz, Kf, Kr, ws, ds, v).

    States (yaw rate, side slip, steering angle, steering rate); the
    cornering stiffnesses are c_f = Kf m g lr / L and c_r = Kr m g lf / L.
    """
    m, lf, lr, g, L = params.m, params.lf, params.lr, params.g, params.wheelbase

    def A(th):
        Jz, Kf, Kr, ws, ds, v = th.T
        cf = Kf * m * g * lr / L
        cr = Kr * m * g * lf / L
        out = np.zeros((len(th), 4, 4))
        out[:, 0, 0] = -(cf * lf ** 2 + cr * lr ** 2) / (Jz * v)
        out[:, 0, 1] = (cr * lr - cf * lf) / Jz
        out[:, 0, 2] = cf * lf / Jz
        out[:, 1, 0] = (cr * lr - cf * lf) / (m * v ** 2) - 1.0
        out[:, 1, 1] = -(cf + cr) / (m * v)
        out[:, 1, 2] = cf / (m * v)
        out[:, 2, 3] = 1.0
        out[:, 3, 2] = -ws ** 2
        out[:, 3, 3] = -2.0 * ds * ws
        return out

    def B(th):
        out = np.zeros((len(th), 4, 1))
        out[:, 3, 0] = th[:, 3] ** 2
        return out

    C = np.array([[1.0, 0.0, 0.0, 0.0]])
    return LpvSystem(n=4, m=1, l=1, A=A, B=B, C=C, vectorized=True)


def linear_single_track_model(params: VehicleParams = VehicleParams()) -> LpvModel:
    return LpvModel(linear_single_track_lpv(params), LINEAR_NAMES)


# registry --------------------------------------------------------------------

@dataclass
class ModelSpec:
    """Everything the CLI needs to know about a registered model."""

    name: str
    ensemble: ParameterEnsemble
    model: BlackBoxModel
    system: LpvSystem | None = None
    h: float = 1e-3
    horizon: float = 10.0
    quad_order: int | None = None  # None: 2 (d + 1) for rational entries
    extras: dict = field(default_factory=dict)


def get_model(name: str, **options) -> ModelSpec:
    if name == "spring_damper":
        noise = options.get("noise_var", 0.007)
        sys = spring_damper_system(noise)
        return ModelSpec(name, spring_damper_ensemble(options.get("c_range", (1.8, 2.2)),
                                                      options.get("d_range", (0.9, 1.1))),
                         LpvModel(sys, SPRING_DAMPER_NAMES), sys, h=1e-3, horizon=10.0)
    if name == "single_track_nl":
        vp = VehicleParams(**options.get("vehicle", {}))
        return ModelSpec(name, nonlinear_vehicle_ensemble(), NonlinearSingleTrack(vp), None,
                         h=2e-3, horizon=10.0)
    if name == "single_track_lin":
        vp = VehicleParams(**options.get("vehicle", {}))
        sys = linear_single_track_lpv(vp)
        return ModelSpec(name, linear_vehicle_ensemble(), LpvModel(sys, LINEAR_NAMES), sys,
                         h=2e-3, horizon=10.0)
    raise KeyError(f"unknown model {name!r}; available: {', '.join(MODEL_NAMES)}")


MODEL_NAMES = ("spring_damper", "single_track_nl", "single_track_lin")
