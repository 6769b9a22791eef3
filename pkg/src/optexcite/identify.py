"""Synthetic measurements and least-squares identification with linearized uncertainty."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lpv import TimeGrid
from .models import BlackBoxModel


@dataclass
class Measurement:
    times: np.ndarray
    y: np.ndarray  # (K, m)
    u: object  # input the data was generated with
    grid: TimeGrid
    every: int = 1
    noise_std: float = 0.0
    seed: int | None = None
    name: str = ""

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])


def synthesize_measurements(model: BlackBoxModel, theta_true, u, grid: TimeGrid, noise_std: float,
                            seed: int | None = None, every: int = 1, name: str = "") -> Measurement:
    """Model output at theta_true plus i.i.d. Gaussian noise of std ``noise_std``."""
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    y = model.simulate(theta_true, u, grid, every)
    if noise_std > 0:
        y = y + noise_std * np.random.default_rng(seed).standard_normal(y.shape)
    return Measurement(grid.output_times(every), y, u, grid, every, noise_std, seed, name)


@dataclass
class EstimateReport:
    theta: np.ndarray
    std: np.ndarray  # NaN where the information matrix is singular
    rss: float
    n_points: int
    datasets: str
    duration: float
    iterations: int = 0
    cov: np.ndarray | None = field(default=None, repr=False)
    unidentifiable: np.ndarray | None = None  # directions (columns) with no information


def _simulate_all(model, datasets, thetas):
    """Stacked predictions (S, n_points) for parameter rows ``thetas``."""
    out = [model.simulate_batch(thetas, d.u, d.grid, d.every).reshape(len(thetas), -1) for d in datasets]
    return np.concatenate(out, axis=1)


def _steps(theta, lower, upper):
    h = np.maximum(1e-6 * np.abs(theta), 1e-9)
    hi = np.minimum(theta + h, upper)
    lo = np.maximum(theta - h, lower)
    return lo, hi


def jacobian(model: BlackBoxModel, datasets, theta, lower=None, upper=None) -> np.ndarray:
    """Central-difference Jacobian of the stacked predictions, shape (n_points, p)."""
    theta = np.asarray(theta, dtype=float)
    p = len(theta)
    lower = np.full(p, -np.inf) if lower is None else np.asarray(lower, float)
    upper = np.full(p, np.inf) if upper is None else np.asarray(upper, float)
    lo, hi = _steps(theta, lower, upper)
    rows = np.repeat(theta[None], 2 * p, axis=0)
    rows[np.arange(p), np.arange(p)] = hi
    rows[p + np.arange(p), np.arange(p)] = lo
    Y = _simulate_all(model, datasets, rows)
    return ((Y[:p] - Y[p:]) / (hi - lo)[:, None]).T


def _residual(model, datasets, theta):
    yhat = _simulate_all(model, datasets, np.asarray(theta, float)[None])[0]
    return np.concatenate([d.y.reshape(-1) for d in datasets]) - yhat


def covariance_from_jacobian(Jac, sigma2: float, rcond: float = 1e-12):
    """sigma2 (J^T J)^-1 and the unidentifiable directions (None when regular)."""
    JtJ = Jac.T @ Jac
    w, V = np.linalg.eigh(JtJ)
    tiny = w <= rcond * max(w.max(initial=0.0), np.finfo(float).tiny)
    if tiny.any():
        return None, V[:, tiny]
    return sigma2 * (V / w) @ V.T, None


def least_squares_fit(model: BlackBoxModel, datasets, theta0, lower, upper, max_iter: int = 100,
                      tol: float = 1e-10, lam0: float = 1e-3) -> EstimateReport:
    """Levenberg-Marquardt fit of the model to every dataset at once.

    Standard deviations come from sigma_res^2 (J^T J)^-1 with
    sigma_res^2 = RSS / (n_points - n_params).
    """
    datasets = list(datasets)
    if not datasets:
        raise ValueError("need at least one dataset")
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    theta = np.asarray(theta0, dtype=float)
    if np.any(theta < lower) or np.any(theta > upper):
        raise ValueError("theta0 lies outside the parameter boxes")
    r = _residual(model, datasets, theta)
    rss = float(r @ r)
    lam = lam0
    it = 0
    for it in range(1, max_iter + 1):
        Jac = jacobian(model, datasets, theta, lower, upper)
        JtJ, g = Jac.T @ Jac, Jac.T @ r
        D = np.diag(np.maximum(np.diag(JtJ), 1e-300))
        improved = False
        while lam < 1e16:
            try:
                step = np.linalg.solve(JtJ + lam * D, g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand = np.clip(theta + step, lower, upper)
            rc = _residual(model, datasets, cand)
            rss_c = float(rc @ rc)
            if rss_c <= rss:
                improved = True
                done = np.all(np.abs(cand - theta) <= tol * (np.abs(theta) + tol)) or rss - rss_c <= tol * rss
                theta, r, rss = cand, rc, rss_c
                lam = max(lam / 10.0, 1e-12)
                break
            lam *= 10.0
        if not improved or done:
            break
    n = len(r)
    p = len(theta)
    sigma2 = rss / max(n - p, 1)
    Jac = jacobian(model, datasets, theta, lower, upper)
    cov, null = covariance_from_jacobian(Jac, sigma2)
    std = np.full(p, np.nan) if cov is None else np.sqrt(np.maximum(np.diag(cov), 0.0))
    names = "+".join(d.name or f"#{k}" for k, d in enumerate(datasets))
    return EstimateReport(theta, std, rss, n, names, sum(d.duration for d in datasets), it, cov, null)


def linearized_std(model: BlackBoxModel, datasets, theta, noise_var: float) -> np.ndarray:
    """Parameter std from a known noise variance and the Jacobian at theta."""
    cov, null = covariance_from_jacobian(jacobian(model, list(datasets), theta), noise_var)
    if cov is None:
        return np.full(len(theta), np.nan)
    return np.sqrt(np.maximum(np.diag(cov), 0.0))
