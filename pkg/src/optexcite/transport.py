"""Sample-based sensitivity indices from Bures-Wasserstein distances.

For each parameter the samples are split into bins along that parameter.
The distance between the unconditional output moments and the moments
within each bin, averaged with the bin weights, measures how much knowing
the parameter moves the output distribution.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pce import ParameterEnsemble

EQUIPROBABLE = "equiprobable"
EQUIWIDTH = "equiwidth"
MAX_DEFAULT_BINS = 100


class ZeroVarianceError(ValueError):
    """The output has (numerically) zero total variance, so indices are undefined."""


def sample_parameters(ensemble: ParameterEnsemble, n_samples: int, seed: int) -> np.ndarray:
    """I.i.d. draws (n_samples, q) from numpy's PCG64 generator seeded with ``seed``.

    Marginals are drawn one after another in parameter order, so the sample
    for a given seed never changes.
    """
    if n_samples < 2:
        raise ValueError("need at least 2 samples")
    rng = np.random.default_rng(seed)
    return np.column_stack([m.sample(rng, n_samples) for m in ensemble.marginals])


def empirical_moments(values):
    """Sample mean and population covariance (1/N normalization) of rows."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if len(values) < 1:
        raise ValueError("need at least one sample")
    mu = values.mean(axis=0)
    dev = values - mu
    return mu, dev.T @ dev / len(values)


def default_bin_count(n_samples: int) -> int:
    return int(min(max(2, np.floor(np.sqrt(n_samples))), MAX_DEFAULT_BINS, n_samples))


@dataclass(frozen=True)
class BinPartition:
    M: int
    assignments: np.ndarray  # bin id per sample
    p: np.ndarray
    counts: np.ndarray
    merged: int = 0  # empty bins folded into a neighbour


def partition_bins(theta_col, M: int, strategy: str = EQUIPROBABLE) -> BinPartition:
    """Split samples into M non-empty bins along one parameter.

    Equiprobable bins are assigned by rank (ties share the lowest rank), so
    the partition depends only on the values, not on the sample order, and
    bin counts differ by at most one when all values are distinct.
    Equiwidth bins split the sample range evenly; empty bins are merged into
    their neighbours and counted in ``merged``.
    """
    x = np.asarray(theta_col, dtype=float)
    N = len(x)
    if M < 2:
        raise ValueError("need at least 2 bins")
    if M > N:
        raise ValueError(f"{M} bins for {N} samples")
    if strategy == EQUIPROBABLE:
        rank = np.searchsorted(np.sort(x), x, side="left")
        raw = rank * M // N
    elif strategy == EQUIWIDTH:
        lo, hi = x.min(), x.max()
        if hi == lo:
            raw = np.zeros(N, dtype=int)
        else:
            raw = np.minimum(((x - lo) / (hi - lo) * M).astype(int), M - 1)
    else:
        raise ValueError(f"unknown binning strategy {strategy!r}")
    counts = np.bincount(raw, minlength=M)
    used = np.flatnonzero(counts)
    relabel = np.cumsum(counts > 0) - 1
    assign = relabel[raw]
    counts = counts[used]
    return BinPartition(len(used), assign, counts / N, counts, M - len(used))


def _sqrtm_psd(S):
    w, V = np.linalg.eigh(S)
    return (V * np.sqrt(np.maximum(w, 0.0))[..., None, :]) @ np.swapaxes(V, -1, -2)


def _check_cov(S, tol):
    S = np.asarray(S, dtype=float)
    scale = max(1.0, float(np.abs(S).max())) if S.size else 1.0
    if not np.allclose(S, np.swapaxes(S, -1, -2), atol=tol * scale):
        raise ValueError("covariance matrix is not symmetric")
    if S.size and np.linalg.eigvalsh(S).min() < -tol * scale:
        raise ValueError("covariance matrix is not positive semidefinite")


def bures_distance(mu1, S1, mu2, S2, tol: float = 1e-9):
    """Squared 2-Wasserstein distance between Gaussians: (W^2, mean part, covariance part).

    The covariance part is tr(S1 + S2 - 2 (S2^1/2 S1 S2^1/2)^1/2); for scalars it
    reduces to (sigma1 - sigma2)^2.
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, dtype=float)), np.atleast_1d(np.asarray(mu2, dtype=float))
    S1, S2 = np.atleast_2d(np.asarray(S1, dtype=float)), np.atleast_2d(np.asarray(S2, dtype=float))
    _check_cov(S1, tol)
    _check_cov(S2, tol)
    M2 = float(np.sum((mu1 - mu2) ** 2))
    if S1.shape == (1, 1):
        V2 = (np.sqrt(max(S1[0, 0], 0.0)) - np.sqrt(max(S2[0, 0], 0.0))) ** 2
    else:
        r2 = _sqrtm_psd(S2)
        cross = _sqrtm_psd(r2 @ S1 @ r2)
        V2 = max(float(np.trace(S1) + np.trace(S2) - 2.0 * np.trace(cross)), 0.0)
    return M2 + V2, M2, float(V2)


@dataclass
class OtIndices:
    """Indices for one parameter; arrays carry a leading time axis when computed along a trajectory."""

    xi_B: np.ndarray
    iota_B: np.ndarray
    iota_S: np.ndarray
    S_unnormalized: np.ndarray  # (..., m) in output units
    partition: BinPartition | None = field(default=None, repr=False)


def binned_indices(theta_col, Y, M: int | None = None, strategy: str = EQUIPROBABLE,
                   eps: float = 1e-12):
    """Bin-wise estimates for one parameter at every time step.

    ``Y`` has shape (N, K, m) (or (N, m) for a single snapshot). Returns
    :class:`OtIndices` whose normalized entries are NaN where tr Cov(y) <= eps.
    """
    Y = np.asarray(Y, dtype=float)
    snapshot = Y.ndim == 2
    if snapshot:
        Y = Y[:, None, :]
    N, K, m = Y.shape
    theta_col = np.asarray(theta_col, dtype=float)
    part = partition_bins(theta_col, M or default_bin_count(N), strategy)
    # canonical sample order (by parameter value, ties by final output) makes
    # every floating-point sum independent of how the samples were shuffled;
    # bins are contiguous runs in this order
    order = np.lexsort((Y[:, -1, 0], theta_col))
    Ys = Y[order]
    assign = part.assignments[order]
    starts = np.concatenate(([0], np.cumsum(part.counts)[:-1]))
    counts = part.counts.astype(float)
    mu = Ys.mean(axis=0)  # (K, m)
    mu_b = np.add.reduceat(Ys, starts, axis=0) / counts[:, None, None]
    dev = Ys - mu_b[assign]
    d0 = Ys - mu
    if m == 1:
        var_b = np.add.reduceat(dev[..., 0] ** 2, starts, axis=0) / counts[:, None]
        var = np.mean(d0[..., 0] ** 2, axis=0)
        tr = var
        V2 = (np.sqrt(var)[None] - np.sqrt(var_b)) ** 2  # (B, K)
    else:
        cov_b = np.add.reduceat(dev[..., :, None] * dev[..., None, :], starts, axis=0)
        cov_b /= counts[:, None, None, None]
        cov = np.einsum("nki,nkj->kij", d0, d0) / N
        tr = np.trace(cov, axis1=-2, axis2=-1)
        r = _sqrtm_psd(cov)  # (K, m, m)
        cross = _sqrtm_psd(r[None] @ cov_b @ r[None])
        V2 = np.maximum(tr[None] + np.trace(cov_b, axis1=-2, axis2=-1)
                        - 2.0 * np.trace(cross, axis1=-2, axis2=-1), 0.0)
    adv = (mu[None] - mu_b) ** 2  # (B, K, m)
    p = part.p
    adv_w = np.einsum("b,bki->ki", p, adv)  # per-output advective part
    M2 = adv_w.sum(axis=-1)
    xi = M2 + p @ V2
    defined = tr > eps
    safe = np.where(defined, tr, 1.0)
    iota_B = np.where(defined, xi / (2.0 * safe), np.nan)
    iota_S = np.where(defined, M2 / safe, np.nan)
    out = OtIndices(xi, iota_B, iota_S, np.sqrt(adv_w), part)
    if snapshot:
        out.xi_B, out.iota_B, out.iota_S = out.xi_B[0], out.iota_B[0], out.iota_S[0]
        out.S_unnormalized = out.S_unnormalized[0]
    return out


def ot_sensitivity(thetas, Y, j: int, M: int | None = None, strategy: str = EQUIPROBABLE,
                   eps: float = 1e-12) -> OtIndices:
    """Indices of parameter j from a single snapshot of samples Y (N, m)."""
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    res = binned_indices(np.asarray(thetas)[:, j], Y, M, strategy, eps)
    if np.isnan(res.iota_S):
        raise ZeroVarianceError("output has zero total variance; normalized indices are undefined")
    return res


@dataclass
class TransportTrajectory:
    times: np.ndarray
    xi_B: np.ndarray  # (K, q)
    iota_B: np.ndarray
    iota_S: np.ndarray
    S: np.ndarray  # (K, m, q) unnormalized first-order measure
    thetas: np.ndarray = field(repr=False)
    Y: np.ndarray = field(repr=False)  # (N, K, m)
    defined: np.ndarray = field(repr=False)  # (K,)


def indices_along_trajectory(thetas, Y, times, M: int | None = None, strategy: str = EQUIPROBABLE,
                             eps: float = 1e-12) -> TransportTrajectory:
    """Per-time indices for every parameter from pre-computed simulations Y (N, K, m)."""
    thetas = np.asarray(thetas, dtype=float)
    q = thetas.shape[1]
    per = [binned_indices(thetas[:, j], Y, M, strategy, eps) for j in range(q)]
    xi = np.stack([r.xi_B for r in per], axis=-1)
    iB = np.stack([r.iota_B for r in per], axis=-1)
    iS = np.stack([r.iota_S for r in per], axis=-1)
    S = np.stack([r.S_unnormalized for r in per], axis=-1)
    defined = ~np.isnan(iS[:, 0])
    return TransportTrajectory(np.asarray(times), xi, iB, iS, S, thetas, Y, defined)


def nonintrusive_sensitivity_trajectory(model, u, ensemble: ParameterEnsemble, n_samples: int, grid,
                                        M: int | None = None, strategy: str = EQUIPROBABLE,
                                        seed: int = 0, every: int = 1, threads: int = 1,
                                        eps: float = 1e-12, thetas=None) -> TransportTrajectory:
    """Simulate ``n_samples`` parameter draws once, then estimate indices at every time.

    Times where the output variance vanishes (e.g. the initial state) carry
    NaN normalized indices; if every time is degenerate ZeroVarianceError is
    raised.
    """
    from .models import simulate_many

    if thetas is None:
        thetas = sample_parameters(ensemble, n_samples, seed)
    Y = simulate_many(model, thetas, u, grid, every, threads)
    res = indices_along_trajectory(thetas, Y, grid.output_times(every), M, strategy, eps)
    if not res.defined.any():
        raise ZeroVarianceError("model output has zero variance at every time")
    return res
