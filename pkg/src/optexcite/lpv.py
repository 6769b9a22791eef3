"""Stochastic LPV systems and their deterministic Galerkin surrogates.

A surrogate stacks the chaos coefficients of every state (state-major:
entry ``i * l + a`` is coefficient ``a`` of state ``i``), so the surrogate
of an LTI system with constant matrices is ``kron(A, I_l)``.
"""
from __future__ import annotations

import json
import threading
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .pce import ChaosBasis, ParameterEnsemble, QuadratureGrid, QuadratureWarning

SURROGATE_FORMAT = "optexcite-surrogate/1"


class IntegrationError(RuntimeError):
    """Raised when a trajectory becomes non-finite; ``time`` is the first bad sample."""

    def __init__(self, message: str, time: float | None = None):
        super().__init__(message)
        self.time = time


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t0, t0 + h, ..., tf``."""

    t0: float
    tf: float
    h: float

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("step h must be positive")
        if not self.tf > self.t0:
            raise ValueError("tf must exceed t0")
        n = (self.tf - self.t0) / self.h
        if abs(n - round(n)) > 1e-6 * max(1.0, n):
            raise ValueError("horizon must be an integer number of steps")

    @property
    def n_steps(self) -> int:
        return int(round((self.tf - self.t0) / self.h))

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.h * np.arange(self.n_steps + 1)

    @property
    def half_times(self) -> np.ndarray:
        """Step and mid-step instants needed by RK4 (2 N + 1 points)."""
        return self.t0 + 0.5 * self.h * np.arange(2 * self.n_steps + 1)

    def output_times(self, every: int = 1) -> np.ndarray:
        return self.times[::every][: self.n_steps // every + 1]


def sample_input(u, grid: TimeGrid, l: int | None = None) -> np.ndarray:
    """Evaluate an input on the half-step grid, shape (2N+1, l).

    ``u`` may be a callable of time (vectorized or scalar) or an array that
    already lives on the half-step grid.
    """
    t = grid.half_times
    if callable(u):
        try:
            vals = np.asarray(u(t), dtype=float)
            if vals.shape[0] != len(t):
                raise ValueError
        except (TypeError, ValueError, IndexError):
            vals = np.array([np.atleast_1d(u(ti)) for ti in t], dtype=float)
    else:
        vals = np.asarray(u, dtype=float)
        if vals.shape[0] != len(t):
            raise ValueError(f"input array has {vals.shape[0]} samples, expected {len(t)} (half-step grid)")
    vals = vals.reshape(len(t), -1)
    if l is not None and vals.shape[1] != l:
        if l == 0:
            return np.zeros((len(t), 0))
        raise ValueError(f"input has {vals.shape[1]} channels, system expects {l}")
    return np.ascontiguousarray(vals)


def _as_fn(value, shape):
    if value is None:
        const = np.zeros(shape)
        return lambda th: const
    if callable(value):
        return value
    const = np.asarray(value, dtype=float).reshape(shape)
    return lambda th: const


@dataclass
class LpvSystem:
    """x' = A x + B u + E + w,  y = C x + D u + F + nu with theta-dependent matrices.

    Every matrix argument is a constant array or a callable of theta. With
    ``vectorized=True`` callables receive an (N, q) array and return
    (N, rows, cols); otherwise they receive one theta at a time. ``degree``
    declares the polynomial degree of the matrix entries in theta (None for
    rational entries) and is only used for quadrature warnings.
    """

    n: int
    m: int
    l: int
    A: object
    B: object = None
    C: object = None
    D: object = None
    E: object = None
    F: object = None
    x0: object = None
    w_mean: object = None
    w_cov: object = None
    nu_mean: object = None
    nu_cov: object = None
    vectorized: bool = False
    degree: int | None = None

    def _shapes(self):
        n, m, l = self.n, self.m, self.l
        return {"A": (n, n), "B": (n, l), "C": (m, n), "D": (m, l), "E": (n,), "F": (m,),
                "x0": (n,), "w_mean": (n,), "w_cov": (n, n), "nu_mean": (m,), "nu_cov": (m, m)}

    def evaluate(self, name: str, theta) -> np.ndarray:
        """Matrix ``name`` at one theta (q,) or a batch (N, q)."""
        shape = self._shapes()[name]
        value = getattr(self, name)
        fn = _as_fn(value, shape)
        theta = np.asarray(theta, dtype=float)
        single = theta.ndim == 1
        T = np.atleast_2d(theta)
        if self.vectorized or not callable(value):
            out = np.asarray(fn(T), dtype=float)
            if out.shape == shape:
                out = np.broadcast_to(out, (len(T),) + shape)
            else:
                out = out.reshape((len(T),) + shape)
        else:
            out = np.array([np.asarray(fn(th), dtype=float).reshape(shape) for th in T])
        return out[0] if single else out


@dataclass
class SurrogateSystem:
    Ap: np.ndarray
    Bp: np.ndarray
    Ep: np.ndarray
    Cp: np.ndarray
    Dp: np.ndarray
    Fp: np.ndarray
    X0: np.ndarray
    basis: ChaosBasis = field(repr=False)
    n: int = 0
    m: int = 0
    l: int = 0

    @property
    def ell(self) -> int:
        return self.basis.size


@dataclass
class SurrogateTrajectory:
    times: np.ndarray
    X: np.ndarray  # (K, n*ell)
    Y: np.ndarray  # (K, m*ell)


def _constant_entries(values):
    """Mask of matrix entries that take one value on every node."""
    return np.all(values == values[:1], axis=0)


def _project_blocks(values, const, Phi, w, norms, out):
    """Add the Galerkin blocks of a batch of matrices (N, r, c) into ``out`` (r*ell, c*ell).

    Block (i, j) is ``Phi^T diag(w * M_ij) Phi / norms``; constant entries
    are skipped here and filled in as ``M_ij * I`` by the caller.
    """
    ell = Phi.shape[1]
    r, c = values.shape[1:]
    for i in range(r):
        for j in range(c):
            if const[i, j]:
                continue
            block = (Phi * (w * values[:, i, j])[:, None]).T @ Phi
            out[i * ell:(i + 1) * ell, j * ell:(j + 1) * ell] += block / norms[:, None]


def _fill_constant_blocks(values, const, ell, out):
    r, c = values.shape[1:]
    for i, j in zip(*np.nonzero(const)):
        if values[0, i, j] != 0.0:
            out[i * ell:(i + 1) * ell, j * ell:(j + 1) * ell] = values[0, i, j] * np.eye(ell)


def _project_columns(values, Phi, w, norms):
    """(N, r, c) -> (r*ell, c): coefficient of phi_a of entry (i, k) at row i*ell + a."""
    r, c = values.shape[1:]
    ell = Phi.shape[1]
    coef = np.einsum("nrc,na->rac", values * w[:, None, None], Phi) / norms[None, :, None]
    return coef.reshape(r * ell, c)


def build_surrogate(sys: LpvSystem, basis: ChaosBasis, grid: QuadratureGrid,
                    chunk: int = 32768) -> SurrogateSystem:
    """Galerkin projection of the LPV system onto the chaos basis.

    Quadrature sums run over node chunks in a fixed order, so results are
    reproducible bit for bit. Matrix entries that are constant in theta are
    projected exactly (identity blocks) without quadrature.
    """
    if basis.q != grid.nodes.shape[1]:
        raise ValueError("quadrature grid and basis have different parameter counts")
    if sys.degree is not None and grid.order and 2 * grid.order - 1 < sys.degree + 2 * basis.degree:
        warnings.warn(f"quadrature order {grid.order} does not integrate degree-{sys.degree} "
                      f"matrices against a degree-{basis.degree} basis exactly",
                      QuadratureWarning, stacklevel=2)
    n, m, l, ell = sys.n, sys.m, sys.l, basis.size
    vals = {}
    for k in ("A", "B", "C", "D", "E", "F", "x0", "w_mean", "nu_mean"):
        try:
            vals[k] = sys.evaluate(k, grid.nodes)
        except (IndexError, ValueError) as err:
            raise ValueError(f"cannot evaluate {k} for {basis.q}-parameter ensemble: {err}") from err
    vals["E"] = vals["E"] + vals.pop("w_mean")
    vals["F"] = vals["F"] + vals.pop("nu_mean")
    for key, v in vals.items():
        bad = ~np.all(np.isfinite(v.reshape(len(v), -1)), axis=1)
        if bad.any():
            raise ValueError(f"non-finite {key} at quadrature node {grid.nodes[np.argmax(bad)]}")
    constA, constC = _constant_entries(vals["A"]), _constant_entries(vals["C"])
    Ap, Cp = np.zeros((n * ell, n * ell)), np.zeros((m * ell, n * ell))
    Bp, Dp = np.zeros((n * ell, l)), np.zeros((m * ell, l))
    Ep, Fp, X0 = np.zeros(n * ell), np.zeros(m * ell), np.zeros(n * ell)
    norms = basis.norms
    for start in range(0, grid.size, chunk):
        sl = slice(start, start + chunk)
        w = grid.weights[sl]
        Phi = basis.evaluate(grid.nodes[sl], check=False)
        _project_blocks(vals["A"][sl], constA, Phi, w, norms, Ap)
        _project_blocks(vals["C"][sl], constC, Phi, w, norms, Cp)
        Bp += _project_columns(vals["B"][sl], Phi, w, norms)
        Dp += _project_columns(vals["D"][sl], Phi, w, norms)
        Ep += _project_columns(vals["E"][sl, :, None], Phi, w, norms)[:, 0]
        Fp += _project_columns(vals["F"][sl, :, None], Phi, w, norms)[:, 0]
        X0 += _project_columns(vals["x0"][sl, :, None], Phi, w, norms)[:, 0]
    _fill_constant_blocks(vals["A"], constA, ell, Ap)
    _fill_constant_blocks(vals["C"], constC, ell, Cp)
    return SurrogateSystem(Ap, Bp, Ep, Cp, Dp, Fp, X0, basis, n, m, l)


def _check_finite(X, times, what="state"):
    bad = ~np.all(np.isfinite(X.reshape(len(X), -1)), axis=1)
    if bad.any():
        k = int(np.argmax(bad))
        raise IntegrationError(f"non-finite {what} at t = {times[k]:.6g} s (divergence)", float(times[k]))


def simulate_surrogate(s: SurrogateSystem, u, grid: TimeGrid, every: int = 1) -> SurrogateTrajectory:
    """RK4 integration of the coefficient dynamics; Y sampled every ``every`` steps."""
    U = sample_input(u, grid, s.l)
    X = kernels.lti_rk4_batch(s.Ap[None], np.ascontiguousarray(s.Bp[None]), s.Ep[None], s.X0[None],
                              U, grid.h, every)[0]
    times = grid.output_times(every)
    _check_finite(X, times)
    Uk = U[::2][::every][: len(times)]
    Y = X @ s.Cp.T + Uk @ s.Dp.T + s.Fp
    return SurrogateTrajectory(times, X, Y)


def reconstruct_output(s: SurrogateSystem, traj: SurrogateTrajectory, theta) -> np.ndarray:
    """Conditional mean output y(t, theta), shape (K, m)."""
    phi = s.basis.evaluate(theta)
    return traj.Y.reshape(len(traj.Y), s.m, s.ell) @ phi


def _check_psd(M, name, tol=1e-10):
    M = np.atleast_2d(M)
    if not np.allclose(M, M.T, atol=tol * max(1.0, np.abs(M).max())):
        raise ValueError(f"{name} is not symmetric")
    if M.size and np.linalg.eigvalsh(M).min() < -tol * max(1.0, np.abs(M).max()):
        raise ValueError(f"{name} is not positive semidefinite")


def noise_covariance(sys: LpvSystem, theta_bar, grid: TimeGrid, every: int = 1) -> np.ndarray:
    """State covariance V(t) from V' = A V + V A^T + Sigma_w, V(0) = 0, shape (K, n, n)."""
    A = sys.evaluate("A", theta_bar)
    Sw = sys.evaluate("w_cov", theta_bar)
    _check_psd(Sw, "process noise covariance")
    N, h = grid.n_steps, grid.h
    K = N // every + 1
    V = np.zeros((sys.n, sys.n))
    out = np.zeros((K, sys.n, sys.n))
    if not np.any(Sw):
        return out

    def f(V):
        AV = A @ V
        return AV + AV.T + Sw

    for k in range(N):
        k1 = f(V)
        k2 = f(V + 0.5 * h * k1)
        k3 = f(V + 0.5 * h * k2)
        k4 = f(V + h * k3)
        V = V + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        V = 0.5 * (V + V.T)
        if (k + 1) % every == 0:
            out[(k + 1) // every] = V
    _check_finite(out, grid.output_times(every), "covariance")
    return out


def noise_to_minimal_sensitivity(sys: LpvSystem, theta_bar, grid: TimeGrid, q: int,
                                 every: int = 1) -> np.ndarray:
    """Noise-induced output std broadcast over parameters: S_min(t), shape (K, m, q).

    sigma_y^2 = diag(C V C^T) + diag(Sigma_nu), all evaluated at theta_bar.
    """
    theta_bar = np.asarray(theta_bar, dtype=float)
    Snu = sys.evaluate("nu_cov", theta_bar)
    _check_psd(Snu, "measurement noise covariance")
    V = noise_covariance(sys, theta_bar, grid, every)
    C = sys.evaluate("C", theta_bar)
    var = np.einsum("ij,kjl,il->ki", C, V, C) + np.diag(Snu)
    sigma = np.sqrt(np.maximum(var, 0.0))
    return np.repeat(sigma[:, :, None], q, axis=2)


class SurrogateResponse:
    """Fast repeated evaluation of surrogate outputs for many inputs.

    For a linear system one RK4 step is exactly
    ``x+ = P x + G0 g(t) + Gh g(t + h/2) + G1 g(t + h)`` with ``Z = h A``,
    ``P = I + Z + Z^2/2 + Z^3/6 + Z^4/24``, ``G0 = h/6 (I + Z + Z^2/2 + Z^3/4)``,
    ``Gh = h/6 (4 I + 2 Z + Z^2/2)``, ``G1 = h/6 I``. The input part of the
    output is therefore a causal convolution with the Markov parameters
    ``C P^i [G0 B, Gh B, G1 B]``, evaluated here by FFT. Results match
    :func:`simulate_surrogate` to rounding.
    """

    def __init__(self, s: SurrogateSystem, grid: TimeGrid, every: int = 1):
        self.s, self.grid, self.every = s, grid, every
        N, h = grid.n_steps, grid.h
        nl = s.Ap.shape[0]
        Z = h * s.Ap
        Z2 = Z @ Z
        Z3 = Z2 @ Z
        I = np.eye(nl)
        P = I + Z + Z2 / 2 + Z3 / 6 + Z3 @ Z / 24
        G0 = h / 6 * (I + Z + Z2 / 2 + Z3 / 4)
        Gh = h / 6 * (4 * I + 2 * Z + Z2 / 2)
        G1 = h / 6 * I
        self.K = N // every + 1
        P = np.ascontiguousarray(P)
        # free response: X0 and the constant forcing E'
        W = np.broadcast_to((G0 + Gh + G1) @ s.Ep, (N, nl))
        Xf = kernels.linear_recurrence(P, np.ascontiguousarray(W), np.ascontiguousarray(s.X0))
        self.y_free = Xf[::every][: self.K] @ s.Cp.T + s.Fp
        # Markov parameters for each of the 3 l input columns
        cols = np.hstack([G0 @ s.Bp, Gh @ s.Bp, G1 @ s.Bp])  # (nl, 3l)
        zeros = np.zeros((max(N - 1, 0), nl))
        H = np.empty((max(N, 1), s.Cp.shape[0], cols.shape[1]))
        for c in range(cols.shape[1]):
            Xi = kernels.linear_recurrence(P, zeros, np.ascontiguousarray(cols[:, c]))
            H[:, :, c] = Xi @ s.Cp.T
        self.nfft = int(2 ** np.ceil(np.log2(max(2 * N, 2))))
        self.Hf = np.fft.rfft(H[:N], n=self.nfft, axis=0)  # (nf, m*ell, 3l)
        self.calls = 0
        self._lock = threading.Lock()

    def output(self, u) -> np.ndarray:
        """Surrogate output coefficients Y(t), shape (K, m*ell)."""
        s, N, every = self.s, self.grid.n_steps, self.every
        U = sample_input(u, self.grid, s.l)
        with self._lock:
            self.calls += 1
        seq = np.hstack([U[0:2 * N:2], U[1:2 * N:2], U[2:2 * N + 1:2]])  # (N, 3l)
        Sf = np.fft.rfft(seq, n=self.nfft, axis=0)
        conv = np.fft.irfft(np.einsum("fmc,fc->fm", self.Hf, Sf), n=self.nfft, axis=0)
        # y_k = sum_{j<k} H_{k-1-j} s_j  ->  conv index k-1
        Yu = np.zeros((N + 1, s.Cp.shape[0]))
        Yu[1:] = conv[:N]
        Y = Yu[::every][: self.K] + self.y_free
        if s.l:
            Y = Y + U[::2][::every][: self.K] @ s.Dp.T
        if not np.all(np.isfinite(Y)):
            raise IntegrationError("non-finite surrogate output (divergence)")
        return Y


def save_surrogate(path, s: SurrogateSystem) -> None:
    """Write a surrogate to an ``.npz`` container with a JSON header."""
    header = {"format": SURROGATE_FORMAT, "n": s.n, "m": s.m, "l": s.l, "ell": s.ell,
              "degree": s.basis.degree, "ensemble": s.basis.ensemble.to_dict(),
              "names": list(s.basis.ensemble.names)}
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), Ap=s.Ap, Bp=s.Bp, Ep=s.Ep, Cp=s.Cp,
                 Dp=s.Dp, Fp=s.Fp, X0=s.X0, indices=s.basis.indices, norms=s.basis.norms)


def load_surrogate(path) -> SurrogateSystem:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != SURROGATE_FORMAT:
            raise ValueError(f"{path}: not a surrogate file (format {header.get('format')!r})")
        ens = ParameterEnsemble.from_dict(header["ensemble"])
        basis = ChaosBasis.create(ens, header["degree"])
        if not np.array_equal(basis.indices, z["indices"]):
            raise ValueError(f"{path}: basis ordering does not match this version")
        return SurrogateSystem(z["Ap"], z["Bp"], z["Ep"], z["Cp"], z["Dp"], z["Fp"], z["X0"], basis,
                               header["n"], header["m"], header["l"])
