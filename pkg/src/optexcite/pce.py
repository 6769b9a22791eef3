"""Orthogonal polynomial chaos machinery.

Uniform marginals pair with Legendre polynomials on [-1, 1], Gaussian
marginals with probabilists' Hermite polynomials on the standard normal.
Polynomials are *not* normalized: ``ChaosBasis.norms`` carries E[phi_i^2].
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import hermite_e, legendre

MAX_BASIS_SIZE = 1_000_000
MAX_QUADRATURE_NODES = 50_000_000


class DomainError(ValueError):
    """Parameter value outside the support of a bounded marginal."""


class BasisSizeError(ValueError):
    """Requested truncation produces an unmanageable number of terms."""


class QuadratureWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Uniform:
    lower: float
    upper: float

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"Uniform requires lower < upper, got {self.lower}, {self.upper}")

    kind = "uniform"

    @property
    def mean(self) -> float:
        return 0.5 * (self.lower + self.upper)

    @property
    def std(self) -> float:
        return (self.upper - self.lower) / math.sqrt(12.0)

    def to_standard(self, x):
        return (2.0 * np.asarray(x, dtype=float) - (self.lower + self.upper)) / (self.upper - self.lower)

    def from_standard(self, z):
        return self.mean + 0.5 * (self.upper - self.lower) * np.asarray(z, dtype=float)

    def check_support(self, x, tol: float = 1e-12) -> None:
        x = np.asarray(x, dtype=float)
        span = self.upper - self.lower
        if np.any(x < self.lower - tol * span) or np.any(x > self.upper + tol * span):
            raise DomainError(f"value outside [{self.lower}, {self.upper}]")

    def polynomials(self, z, degree: int) -> np.ndarray:
        """Legendre P_0..P_degree at standardized points; shape (..., degree+1)."""
        z = np.asarray(z, dtype=float)
        out = np.empty(z.shape + (degree + 1,))
        out[..., 0] = 1.0
        if degree >= 1:
            out[..., 1] = z
        for k in range(1, degree):
            out[..., k + 1] = ((2 * k + 1) * z * out[..., k] - k * out[..., k - 1]) / (k + 1)
        return out

    def norms(self, degree: int) -> np.ndarray:
        k = np.arange(degree + 1)
        return 1.0 / (2 * k + 1)

    def gauss_rule(self, order: int) -> tuple[np.ndarray, np.ndarray]:
        z, w = legendre.leggauss(order)
        return self.from_standard(z), w / w.sum()

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=n)

    def to_dict(self) -> dict:
        return {"kind": "uniform", "lower": self.lower, "upper": self.upper}


@dataclass(frozen=True)
class Gaussian:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"Gaussian requires std > 0, got {self.std}")

    kind = "gaussian"

    def to_standard(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def from_standard(self, z):
        return self.mean + self.std * np.asarray(z, dtype=float)

    def check_support(self, x, tol: float = 0.0) -> None:
        if not np.all(np.isfinite(x)):
            raise DomainError("non-finite parameter value")

    def polynomials(self, z, degree: int) -> np.ndarray:
        """Probabilists' Hermite He_0..He_degree; shape (..., degree+1)."""
        z = np.asarray(z, dtype=float)
        out = np.empty(z.shape + (degree + 1,))
        out[..., 0] = 1.0
        if degree >= 1:
            out[..., 1] = z
        for k in range(1, degree):
            out[..., k + 1] = z * out[..., k] - k * out[..., k - 1]
        return out

    def norms(self, degree: int) -> np.ndarray:
        return np.array([float(math.factorial(k)) for k in range(degree + 1)])

    def gauss_rule(self, order: int) -> tuple[np.ndarray, np.ndarray]:
        z, w = hermite_e.hermegauss(order)
        return self.from_standard(z), w / w.sum()

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.normal(self.mean, self.std, size=n)

    def to_dict(self) -> dict:
        return {"kind": "gaussian", "mean": self.mean, "std": self.std}


Marginal = Uniform | Gaussian


def marginal_from_dict(d: dict) -> Marginal:
    kind = d["kind"].lower()
    if kind == "uniform":
        return Uniform(float(d["lower"]), float(d["upper"]))
    if kind == "gaussian":
        return Gaussian(float(d["mean"]), float(d["std"]))
    raise ValueError(f"unknown marginal kind {d['kind']!r}")


@dataclass(frozen=True)
class ParameterEnsemble:
    """Independent marginals of the q uncertain parameters."""

    marginals: tuple
    names: tuple

    def __init__(self, marginals: Sequence[Marginal], names: Sequence[str] | None = None):
        marginals = tuple(marginals)
        if len(marginals) < 1:
            raise ValueError("an ensemble needs at least one parameter")
        if names is None:
            names = tuple(f"theta{j + 1}" for j in range(len(marginals)))
        names = tuple(names)
        if len(names) != len(marginals):
            raise ValueError("names and marginals differ in length")
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        object.__setattr__(self, "marginals", marginals)
        object.__setattr__(self, "names", names)

    @property
    def q(self) -> int:
        return len(self.marginals)

    @property
    def means(self) -> np.ndarray:
        return np.array([m.mean for m in self.marginals])

    @property
    def stds(self) -> np.ndarray:
        return np.array([m.std for m in self.marginals])

    def check_support(self, theta) -> None:
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        for j, m in enumerate(self.marginals):
            m.check_support(theta[:, j])

    def to_dict(self) -> list[dict]:
        return [dict(name=n, **m.to_dict()) for n, m in zip(self.names, self.marginals)]

    @classmethod
    def from_dict(cls, items: Sequence[dict]) -> "ParameterEnsemble":
        return cls([marginal_from_dict(d) for d in items], [d["name"] for d in items])


def basis_size(q: int, d: int) -> int:
    return math.comb(q + d, d)


def build_multi_index_set(q: int, d: int) -> np.ndarray:
    """All multi-indices of total degree <= d in graded lexicographic order.

    Within one total degree the indices are sorted descending
    lexicographically, so for q=2, d=2 the order is
    (0,0), (1,0), (0,1), (2,0), (1,1), (0,2).
    """
    if q < 1 or d < 0:
        raise ValueError(f"need q >= 1 and d >= 0, got q={q}, d={d}")
    size = basis_size(q, d)
    if size > MAX_BASIS_SIZE:
        raise BasisSizeError(f"basis with q={q}, d={d} has {size} terms (limit {MAX_BASIS_SIZE})")
    rows = []
    for total in range(d + 1):
        block = [a for a in itertools.product(range(total + 1), repeat=q) if sum(a) == total]
        block.sort(reverse=True)
        rows.extend(block)
    return np.array(rows, dtype=int).reshape(size, q)


@dataclass(frozen=True, eq=False)
class ChaosBasis:
    ensemble: ParameterEnsemble
    degree: int
    indices: np.ndarray = field(repr=False)
    norms: np.ndarray = field(repr=False)

    @classmethod
    def create(cls, ensemble: ParameterEnsemble, degree: int) -> "ChaosBasis":
        idx = build_multi_index_set(ensemble.q, degree)
        uni = [m.norms(degree) for m in ensemble.marginals]
        norms = np.ones(len(idx))
        for j in range(ensemble.q):
            norms *= uni[j][idx[:, j]]
        idx.setflags(write=False)
        norms.setflags(write=False)
        return cls(ensemble, degree, idx, norms)

    @property
    def size(self) -> int:
        return len(self.indices)

    @property
    def q(self) -> int:
        return self.ensemble.q

    def evaluate(self, theta, check: bool = True) -> np.ndarray:
        """phi(theta); theta of shape (q,) gives (l,), (N, q) gives (N, l)."""
        theta = np.asarray(theta, dtype=float)
        single = theta.ndim == 1
        theta = np.atleast_2d(theta)
        if theta.shape[1] != self.q:
            raise ValueError(f"expected {self.q} parameters, got {theta.shape[1]}")
        if check:
            self.ensemble.check_support(theta)
        out = np.ones((theta.shape[0], self.size))
        for j, m in enumerate(self.ensemble.marginals):
            z = m.to_standard(theta[:, j])
            if isinstance(m, Uniform):
                z = np.clip(z, -1.0, 1.0)
            out *= m.polynomials(z, self.degree)[:, self.indices[:, j]]
        return out[0] if single else out

    def moment_vectors(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean extractor m = e_1 and variance weights v = [0, norms[1:]]."""
        m = np.zeros(self.size)
        m[0] = 1.0
        v = self.norms.copy()
        v[0] = 0.0
        return m, v


def eval_basis(basis: ChaosBasis, theta) -> np.ndarray:
    return basis.evaluate(theta)


@dataclass(frozen=True, eq=False)
class QuadratureGrid:
    nodes: np.ndarray
    weights: np.ndarray
    order: int = 0

    @property
    def size(self) -> int:
        return len(self.weights)


def gauss_quadrature(ensemble: ParameterEnsemble, order_per_dim: int) -> QuadratureGrid:
    """Tensor grid of univariate Gauss rules, weights summing to one.

    Nodes are ordered with the last parameter varying fastest.
    """
    if order_per_dim < 1:
        raise ValueError("order_per_dim must be >= 1")
    n_nodes = order_per_dim ** ensemble.q
    if n_nodes > MAX_QUADRATURE_NODES:
        raise BasisSizeError(f"tensor grid would have {n_nodes} nodes")
    rules = [m.gauss_rule(order_per_dim) for m in ensemble.marginals]
    nodes = np.stack(np.meshgrid(*[r[0] for r in rules], indexing="ij"), axis=-1).reshape(-1, ensemble.q)
    weights = np.ones(n_nodes)
    for j, grids in enumerate(np.meshgrid(*[r[1] for r in rules], indexing="ij")):
        weights *= grids.reshape(-1)
    weights /= weights.sum()
    return QuadratureGrid(nodes, weights, order_per_dim)


def project(basis: ChaosBasis, grid: QuadratureGrid, f: Callable, f_degree: int | None = None,
            vectorized: bool = False) -> np.ndarray:
    """Galerkin coefficients of f onto the basis, shape (k, l).

    ``f_degree`` declares the polynomial degree of f; when the grid is too
    coarse to integrate f * phi exactly a QuadratureWarning is issued.
    """
    if f_degree is not None and grid.order and 2 * grid.order - 1 < f_degree + basis.degree:
        warnings.warn(
            f"quadrature order {grid.order} is not exact for degree {f_degree} integrands "
            f"against a degree-{basis.degree} basis", QuadratureWarning, stacklevel=2)
    Phi = basis.evaluate(grid.nodes, check=False)
    if vectorized:
        values = np.asarray(f(grid.nodes), dtype=float).reshape(grid.size, -1)
    else:
        values = np.array([np.atleast_1d(f(th)) for th in grid.nodes], dtype=float).reshape(grid.size, -1)
    if not np.all(np.isfinite(values)):
        raise ValueError("f returned non-finite values at a quadrature node")
    coef = (values * grid.weights[:, None]).T @ Phi
    return coef / basis.norms


def pce_moments(basis: ChaosBasis, R) -> tuple:
    """Mean and variance of the expansion(s) with coefficients R (..., l)."""
    R = np.asarray(R, dtype=float)
    if R.shape[-1] != basis.size:
        raise ValueError(f"coefficient length {R.shape[-1]} != basis size {basis.size}")
    mean = R[..., 0]
    var = (R[..., 1:] ** 2) @ basis.norms[1:]
    return mean, var
