"""Input parameterizations, admissibility checks, cost functional and chance constraints."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class Signal:
    """A family of scalar input signals u(t; p) with a finite parameter vector p."""

    l = 1
    names: tuple = ()

    @property
    def dim(self) -> int:
        return len(self.names)

    def __call__(self, p, t):
        raise NotImplementedError

    def rate(self, p, t):
        raise NotImplementedError

    def analytic_extrema(self, p, T: float):
        """Exact (max |u|, max |u'|) over [0, T], or None when no closed form is known."""
        return None

    def bind(self, p) -> "BoundSignal":
        return BoundSignal(self, np.asarray(p, dtype=float))

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class BoundSignal:
    """A signal with its parameters fixed; callable on time arrays."""

    family: Signal
    p: np.ndarray

    def __call__(self, t):
        return self.family(self.p, t)

    def rate(self, t):
        return self.family.rate(self.p, t)


def _max_abs_sinusoid(A, w, phi, T):
    """max over t in [0, T] of |A sin(w t - phi)|."""
    if A == 0.0:
        return 0.0
    ends = max(abs(A * np.sin(-phi)), abs(A * np.sin(w * T - phi)))
    if w <= 0.0:
        return ends
    # first peak w t - phi = pi/2 + k pi at or after t = 0
    k = np.ceil((-phi - np.pi / 2) / np.pi)
    t_peak = (np.pi / 2 + k * np.pi + phi) / w
    return abs(A) if t_peak <= T * (1 + 1e-12) else ends


class Sinusoid(Signal):
    """u(t) = u0 sin(2 pi f t - phi), p = (u0, f, phi)."""

    names = ("u0", "f", "phi")

    def __call__(self, p, t):
        u0, f, phi = p
        return u0 * np.sin(2 * np.pi * f * np.asarray(t, dtype=float) - phi)

    def rate(self, p, t):
        u0, f, phi = p
        w = 2 * np.pi * f
        return u0 * w * np.cos(w * np.asarray(t, dtype=float) - phi)

    def analytic_extrema(self, p, T):
        u0, f, phi = (float(x) for x in p)
        w = 2 * np.pi * f
        return _max_abs_sinusoid(u0, w, phi, T), _max_abs_sinusoid(u0 * w, w, phi - np.pi / 2, T)

    def to_dict(self):
        return {"kind": "sinusoid"}


class RampSuperposition(Signal):
    """Sum of n_ramps saturated ramps, each p_i = (u0, uT, tT, tD).

    A ramp holds u0 until tT - tD, moves linearly to uT at tT and holds uT
    afterwards.
    """

    def __init__(self, n_ramps: int = 4):
        if n_ramps < 1:
            raise ValueError("need at least one ramp")
        self.n_ramps = n_ramps
        self.names = tuple(f"{k}_{i + 1}" for i in range(n_ramps) for k in ("u0", "uT", "tT", "tD"))

    def _ramps(self, p):
        p = np.asarray(p, dtype=float)
        if p.size != 4 * self.n_ramps:
            raise ValueError(f"expected {4 * self.n_ramps} ramp parameters, got {p.size}")
        return p.reshape(self.n_ramps, 4)

    def __call__(self, p, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        for u0, uT, tT, tD in self._ramps(p):
            lo, hi = min(u0, uT), max(u0, uT)
            if tD > 0:
                x = u0 + (t - (tT - tD)) / tD * (uT - u0)
            else:
                x = np.where(t < tT, u0, uT)
            out = out + np.clip(x, lo, hi)
        return out

    def rate(self, p, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        for u0, uT, tT, tD in self._ramps(p):
            if tD > 0 and uT != u0:
                active = (t > tT - tD) & (t < tT)
                out = out + np.where(active, (uT - u0) / tD, 0.0)
        return out

    def breakpoints(self, p, T):
        r = self._ramps(p)
        pts = np.concatenate(([0.0, T], r[:, 2] - r[:, 3], r[:, 2]))
        return np.unique(np.clip(pts, 0.0, T))

    def analytic_extrema(self, p, T):
        r = self._ramps(p)
        if np.any(r[:, 3] <= 0):
            return None
        bp = self.breakpoints(p, T)
        # piecewise linear: extremes sit at breakpoints, slopes are constant between them
        max_abs = float(np.max(np.abs(self(p, bp))))
        mids = 0.5 * (bp[1:] + bp[:-1])
        max_rate = float(np.max(np.abs(self.rate(p, mids)))) if len(mids) else 0.0
        return max_abs, max_rate

    def ordering_violation(self, p):
        """How far each rise time exceeds its end time (tD <= tT), summed over ramps."""
        r = self._ramps(p)
        return float(np.sum(np.maximum(r[:, 3] - r[:, 2], 0.0)))

    def to_dict(self):
        return {"kind": "ramps", "n_ramps": self.n_ramps}


class PiecewiseLinear(Signal):
    """Linear interpolation of coefficients p at fixed knots (hat-function basis)."""

    def __init__(self, knots):
        self.knots = np.asarray(knots, dtype=float)
        if self.knots.ndim != 1 or len(self.knots) < 2 or np.any(np.diff(self.knots) <= 0):
            raise ValueError("knots must be strictly increasing with at least two entries")
        self.names = tuple(f"c{i}" for i in range(len(self.knots)))

    def __call__(self, p, t):
        return np.interp(np.asarray(t, dtype=float), self.knots, np.asarray(p, dtype=float))

    def rate(self, p, t):
        t = np.asarray(t, dtype=float)
        slopes = np.diff(np.asarray(p, dtype=float)) / np.diff(self.knots)
        seg = np.clip(np.searchsorted(self.knots, t, side="right") - 1, 0, len(slopes) - 1)
        inside = (t >= self.knots[0]) & (t <= self.knots[-1])
        return np.where(inside, slopes[seg], 0.0)

    def analytic_extrema(self, p, T):
        p = np.asarray(p, dtype=float)
        pts = np.unique(np.clip(np.concatenate((self.knots, [0.0, T])), 0.0, T))
        slopes = np.diff(p) / np.diff(self.knots)
        active = (self.knots[1:] > 0) & (self.knots[:-1] < T)
        return float(np.max(np.abs(self(p, pts)))), float(np.max(np.abs(slopes[active]), initial=0.0))

    def to_dict(self):
        return {"kind": "piecewise_linear", "knots": self.knots.tolist()}


def signal_from_dict(d: dict) -> Signal:
    kind = d.get("kind")
    if kind == "sinusoid":
        return Sinusoid()
    if kind == "ramps":
        return RampSuperposition(int(d.get("n_ramps", 4)))
    if kind == "piecewise_linear":
        return PiecewiseLinear(d["knots"])
    raise ValueError(f"unknown signal kind {kind!r}")


@dataclass
class AdmissibleSet:
    """Amplitude/rate limits, boundary values and parameter boxes on [0, horizon]."""

    lower: np.ndarray
    upper: np.ndarray
    horizon: float
    u_max: float | None = None
    rate_max: float | None = None
    u_start: float | None = None
    u_end: float | None = None

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if self.lower.shape != self.upper.shape or np.any(self.lower > self.upper):
            raise ValueError("parameter boxes need lower <= upper")
        if not np.all(np.isfinite(self.lower)) or not np.all(np.isfinite(self.upper)):
            raise ValueError("parameter boxes must be finite")
        for name in ("u_max", "rate_max"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be non-negative")


def sinusoid_set(u0_max=1.0, f_max=5.0, phi_max=2 * np.pi, horizon=10.0) -> AdmissibleSet:
    """Boxes u0 in [0, u0_max], f in [0, f_max], phi in [0, phi_max]; no other limits."""
    return AdmissibleSet([0.0, 0.0, 0.0], [u0_max, f_max, phi_max], horizon)


def ramp_set(n_ramps=4, u_max=0.14, rate_max=0.157, horizon=10.0, min_rise=1e-3) -> AdmissibleSet:
    """Ramps starting at zero, ending anywhere in [-u_max, u_max] before the horizon,
    with u(0) = u(T) = 0 and amplitude/rate limits on the sum."""
    lo = np.tile([0.0, -u_max, min_rise, min_rise], n_ramps)
    hi = np.tile([0.0, u_max, horizon, horizon], n_ramps)
    return AdmissibleSet(lo, hi, horizon, u_max=u_max, rate_max=rate_max, u_start=0.0, u_end=0.0)


@dataclass
class FeasibilityReport:
    violations: dict = field(default_factory=dict)
    method: str = "analytic"

    @property
    def feasible(self) -> bool:
        return all(v <= 0.0 for v in self.violations.values())

    def squared_sum(self) -> float:
        return float(sum(v * v for v in self.violations.values()))

    def __str__(self):
        items = ", ".join(f"{k}={v:.4g}" for k, v in self.violations.items())
        return f"{'feasible' if self.feasible else 'infeasible'} ({self.method}): {items}"


def check_admissible(signal: Signal, p, adm: AdmissibleSet, h: float | None = None) -> FeasibilityReport:
    """Maximum violation of every constraint of ``adm`` for parameters p.

    Amplitude and rate use closed forms when the signal provides them;
    otherwise they are sampled on a grid ten times finer than the simulation
    step ``h`` (default T / 10^4).
    """
    p = np.asarray(p, dtype=float)
    T = adm.horizon
    v = {"box": float(max(np.max(adm.lower - p, initial=0.0), np.max(p - adm.upper, initial=0.0), 0.0))}
    method = "analytic"
    if adm.u_max is not None or adm.rate_max is not None:
        ext = signal.analytic_extrema(p, T)
        if ext is None:
            step = (h if h else T / 1000.0) / 10.0
            t = np.linspace(0.0, T, int(np.ceil(T / step)) + 1)
            ext = float(np.max(np.abs(signal(p, t)))), float(np.max(np.abs(signal.rate(p, t))))
            method = f"grid(dt={step:.3g})"
        if adm.u_max is not None:
            v["amplitude"] = max(ext[0] - adm.u_max, 0.0)
        if adm.rate_max is not None:
            v["rate"] = max(ext[1] - adm.rate_max, 0.0)
    if adm.u_start is not None:
        v["start"] = float(abs(signal(p, np.array([0.0]))[0] - adm.u_start))
    if adm.u_end is not None:
        v["end"] = float(abs(signal(p, np.array([T]))[0] - adm.u_end))
    if isinstance(signal, RampSuperposition):
        v["ordering"] = signal.ordering_violation(p)
    return FeasibilityReport(v, method)


def selection_weights(m: int, q: int, params, outputs=None, weight: float = 1.0) -> np.ndarray:
    """Diagonal Q selecting (output, parameter) pairs; vec index is j * m + i."""
    outputs = range(m) if outputs is None else outputs
    Q = np.zeros((m * q, m * q))
    for j in params:
        for i in outputs:
            Q[j * m + i, j * m + i] = weight
    return Q


def cost_functional(dS, u, Q, R, times) -> float:
    """Trapezoid integral of vec(dS)^T Q vec(dS) - u^T R u.

    ``dS`` has shape (K, m, q) and is vectorized column by column.
    """
    dS = np.asarray(dS, dtype=float)
    K, m, q = dS.shape
    vec = np.swapaxes(dS, 1, 2).reshape(K, m * q)
    u = np.asarray(u, dtype=float).reshape(K, -1)
    R = np.atleast_2d(np.asarray(R, dtype=float))
    stage = np.einsum("ka,ab,kb->k", vec, np.asarray(Q, dtype=float), vec)
    if np.any(R):
        stage = stage - np.einsum("ka,ab,kb->k", u, R, u)
    return float(np.trapezoid(stage, np.asarray(times, dtype=float)))


def cantelli_factor(alpha: float) -> float:
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    return float(np.sqrt((1.0 - alpha) / alpha))


def chance_constraint_margin(mean, variance, y_max, alpha):
    """y_max - mean - sigma sqrt((1 - alpha) / alpha); non-negative certifies P(y > y_max) <= alpha."""
    k = cantelli_factor(alpha)
    var = np.asarray(variance, dtype=float)
    if np.any(var < 0):
        raise ValueError("variance must be non-negative")
    return y_max - np.asarray(mean, dtype=float) - k * np.sqrt(var)


@dataclass(frozen=True)
class ChanceConstraint:
    """P(y_output(t) > y_max) <= alpha for every t."""

    output: int
    y_max: float
    alpha: float

    def worst_margin(self, mean, variance) -> float:
        """Smallest margin over time; mean and variance have shape (K, m)."""
        marg = chance_constraint_margin(np.asarray(mean)[:, self.output],
                                        np.asarray(variance)[:, self.output], self.y_max, self.alpha)
        return float(np.min(marg))
