"""Sensitivity trajectories from surrogate chaos coefficients.

``S[k, i, j]`` is the part of the standard deviation of output i at time
step k explained by parameter j (first order) or by every basis term that
involves parameter j (total order).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pce import ChaosBasis

FIRST_ORDER = "first_order"
TOTAL_ORDER = "total_order"


@dataclass(frozen=True)
class IndexSets:
    first_order: list  # list of index arrays, one per parameter
    total_order: list
    v_first: np.ndarray  # (q, ell) selection vectors carrying the basis norms
    v_total: np.ndarray

    def vectors(self, kind: str) -> np.ndarray:
        if kind == FIRST_ORDER:
            return self.v_first
        if kind == TOTAL_ORDER:
            return self.v_total
        raise ValueError(f"unknown sensitivity kind {kind!r}")


def build_index_sets(basis: ChaosBasis) -> IndexSets:
    """First-order sets hold the terms that depend on theta_j alone; total-order
    sets hold every term with a positive degree in theta_j."""
    idx = basis.indices
    q, ell = basis.q, basis.size
    active = idx > 0
    first, total = [], []
    v_first, v_total = np.zeros((q, ell)), np.zeros((q, ell))
    for j in range(q):
        tot = np.flatnonzero(active[:, j])
        fst = np.flatnonzero(active[:, j] & (active.sum(axis=1) == 1))
        first.append(fst)
        total.append(tot)
        v_first[j, fst] = basis.norms[fst]
        v_total[j, tot] = basis.norms[tot]
    return IndexSets(first, total, v_first, v_total)


@dataclass
class SensitivityTrajectory:
    times: np.ndarray
    S: np.ndarray  # (K, m, q)
    S_min: np.ndarray
    dS: np.ndarray
    kind: str = FIRST_ORDER


def _split(Y, ell):
    Y = np.asarray(Y, dtype=float)
    if Y.shape[-1] % ell:
        raise ValueError(f"coefficient dimension {Y.shape[-1]} is not a multiple of the basis size {ell}")
    return Y.reshape(Y.shape[:-1] + (Y.shape[-1] // ell, ell))


def sensitivity_trajectory(Y, sets: IndexSets, kind: str = FIRST_ORDER) -> np.ndarray:
    """S = sqrt((I_m kron v_j^T) Y^2) for every parameter j, shape (K, m, q)."""
    V = sets.vectors(kind)
    Yr = _split(Y, V.shape[1])
    return np.sqrt(np.maximum((Yr ** 2) @ V.T, 0.0))


def output_variance(Y, basis: ChaosBasis) -> np.ndarray:
    """Total variance of every output channel, shape (K, m)."""
    Yr = _split(Y, basis.size)
    return (Yr[..., 1:] ** 2) @ basis.norms[1:]


def normalized_sobol(S, total_variance, eps: float = 1e-12):
    """SU = S^2 / Var(y); returns (SU, defined) with SU = 0 where Var <= eps."""
    S = np.asarray(S, dtype=float)
    var = np.asarray(total_variance, dtype=float)
    defined = var > eps
    safe = np.where(defined, var, 1.0)
    SU = np.where(defined[..., None], S ** 2 / safe[..., None], 0.0)
    return SU, defined


def effective_sensitivity(S, S_min) -> np.ndarray:
    """max(0, S - S_min) elementwise."""
    return np.maximum(np.asarray(S, dtype=float) - np.asarray(S_min, dtype=float), 0.0)


def impact_score(dS, times) -> np.ndarray:
    """Trapezoid integral of |dS| over time (axis 0)."""
    dS = np.abs(np.asarray(dS, dtype=float))
    times = np.asarray(times, dtype=float)
    if len(times) < 2:
        return np.zeros(dS.shape[1:])
    return np.trapezoid(dS, times, axis=0)


def trajectory(Y, basis: ChaosBasis, times, S_min=0.0, kind: str = FIRST_ORDER,
               sets: IndexSets | None = None) -> SensitivityTrajectory:
    """Bundle S, S_min and the effective sensitivity for one surrogate output."""
    sets = sets or build_index_sets(basis)
    S = sensitivity_trajectory(Y, sets, kind)
    S_min = np.broadcast_to(np.asarray(S_min, dtype=float), S.shape)
    return SensitivityTrajectory(np.asarray(times), S, S_min, effective_sensitivity(S, S_min), kind)
