"""Domain types and the scatter/variance algebra shared by every stage.

Everything here is an immutable value object. Arrays stored on the
dataclasses are copied and flagged read-only on construction so they can
be shared freely between stages and worker processes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class SCEDError(Exception):
    """Base class for all errors raised by the package."""


class ConstantColumn(SCEDError):
    def __init__(self, column: int):
        super().__init__(f"column {column} has zero variance")
        self.column = column


class NotSPD(SCEDError):
    pass


class DegenerateScatter(SCEDError):
    pass


class EmptyCluster(SCEDError):
    pass


class TooFewPoints(SCEDError):
    pass


class LengthMismatch(SCEDError):
    pass


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# Dataset / Partition
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dataset:
    """n x p matrix of continuous observations plus standardization metadata."""

    values: np.ndarray
    standardized: bool = False
    col_means: Optional[np.ndarray] = None
    col_sds: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if values.ndim != 2:
            raise ValueError("values must be a 2-d array")
        n, p = values.shape
        if n < 2 or p < 1:
            raise ValueError(f"need n >= 2 and p >= 1, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("values contain non-finite entries")
        object.__setattr__(self, "values", _frozen(values))
        means = np.zeros(p) if self.col_means is None else self.col_means
        sds = np.ones(p) if self.col_sds is None else self.col_sds
        object.__setattr__(self, "col_means", _frozen(means))
        object.__setattr__(self, "col_sds", _frozen(sds))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    def to_original(self, x=None) -> np.ndarray:
        """Map standardized coordinates back to the original scale."""
        x = self.values if x is None else np.asarray(x, dtype=float)
        return x * self.col_sds + self.col_means


@dataclass(frozen=True)
class Partition:
    """Cluster labels in ``{1..k}`` for each of ``n`` indices."""

    labels: np.ndarray
    k: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 1:
            raise ValueError("labels must be 1-d")
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise ValueError("labels must be integers")
        labels = labels.astype(np.int64)
        k = int(self.k)
        if k < 1:
            raise ValueError("k must be >= 1")
        if labels.size and (labels.min() < 1 or labels.max() > k):
            raise ValueError(f"labels must lie in 1..{k}")
        object.__setattr__(self, "labels", _frozen(labels, dtype=np.int64))
        object.__setattr__(self, "k", k)

    @classmethod
    def from_zero_based(cls, labels, k: int) -> "Partition":
        return cls(np.asarray(labels, dtype=np.int64) + 1, k)

    @property
    def n(self) -> int:
        return self.labels.size

    @property
    def index(self) -> np.ndarray:
        """Zero-based labels, handy for array indexing."""
        return self.labels - 1

    def sizes(self) -> np.ndarray:
        return np.bincount(self.index, minlength=self.k)

    @property
    def is_proper(self) -> bool:
        return bool(np.all(self.sizes() > 0))

    def n_nonempty(self) -> int:
        return int(np.count_nonzero(self.sizes()))

    def members(self, c: int) -> np.ndarray:
        """Indices of points carrying label ``c`` (1-based label)."""
        return np.flatnonzero(self.labels == c)

    def same_as(self, other: "Partition") -> bool:
        return self.k == other.k and np.array_equal(self.labels, other.labels)

    def equivalent(self, other: "Partition") -> bool:
        """True if both induce the same set partition, ignoring label names."""
        if self.k != other.k or self.n != other.n:
            return False
        pairs = np.unique(np.stack([self.index, other.index]), axis=1)
        return pairs.shape[1] == len(np.unique(self.index)) == len(np.unique(other.index))

    def key(self) -> bytes:
        return self.labels.tobytes()

    def relabel(self, perm) -> "Partition":
        """Apply ``new_label = perm[old_label - 1]`` (perm holds 1-based labels)."""
        perm = np.asarray(perm, dtype=np.int64)
        return Partition(perm[self.index], self.k)


# ---------------------------------------------------------------------------
# Elliptical parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EllipticalParams:
    """Cluster means, shared scatter (first diagonal entry fixed at 1), mixing weights."""

    means: np.ndarray
    scatter: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        scatter = np.atleast_2d(np.asarray(self.scatter, dtype=float))
        probs = np.atleast_1d(np.asarray(self.probs, dtype=float))
        k, p = means.shape
        if scatter.shape != (p, p):
            raise ValueError(f"scatter must be {p}x{p}, got {scatter.shape}")
        if probs.shape != (k,):
            raise ValueError(f"probs must have length {k}")
        object.__setattr__(self, "means", _frozen(means))
        object.__setattr__(self, "scatter", _frozen(scatter))
        object.__setattr__(self, "probs", _frozen(probs))

    @property
    def k(self) -> int:
        return self.means.shape[0]

    @property
    def p(self) -> int:
        return self.means.shape[1]

    def permuted(self, order) -> "EllipticalParams":
        """Reorder clusters: new cluster ``j`` is old cluster ``order[j]`` (0-based)."""
        order = np.asarray(order)
        return EllipticalParams(self.means[order], self.scatter, self.probs[order])

    def with_(self, **changes) -> "EllipticalParams":
        kw = dict(means=self.means, scatter=self.scatter, probs=self.probs)
        kw.update(changes)
        return EllipticalParams(**kw)


# ---------------------------------------------------------------------------
# Transformation of the quadratic form
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TransformSpec:
    """The map ``Psi(t) = -d0 + (d0^(p/2) + t^(p/2))^(2/p)`` and its inverse.

    ``Psi`` is applied to Mahalanobis quadratic forms before kernel
    smoothing. All evaluations go through logs so that large ``p`` and
    large ``t`` do not overflow.
    """

    d0: float = 1.0
    p: int = 2

    def __post_init__(self):
        if not self.d0 > 0:
            raise ValueError("d0 must be positive")
        if int(self.p) < 1:
            raise ValueError("p must be >= 1")
        object.__setattr__(self, "d0", float(self.d0))
        object.__setattr__(self, "p", int(self.p))

    def forward(self, t):
        """Psi(t) for t >= 0."""
        t = np.asarray(t, dtype=float)
        a = 0.5 * self.p
        with np.errstate(divide="ignore"):
            lt = np.log(t)
        ld = np.log(self.d0)
        # d0 * ((1 + (t/d0)^a)^(1/a) - 1), computed as d0 * expm1(log1p(.)/a)
        r = np.exp(a * (lt - ld))
        return self.d0 * np.expm1(np.log1p(r) / a)

    def inverse(self, y):
        """psi(y) = ((y + d0)^(p/2) - d0^(p/2))^(2/p) for y >= 0."""
        y = np.asarray(y, dtype=float)
        a = 0.5 * self.p
        # d0 * (expm1(a*log1p(y/d0)))^(1/a)
        e = np.expm1(a * np.log1p(y / self.d0))
        with np.errstate(divide="ignore"):
            return self.d0 * np.exp(np.log(e) / a)

    def inverse_derivative(self, y):
        """d psi / dy = psi(y)^(1 - p/2) * (y + d0)^(p/2 - 1)."""
        y = np.asarray(y, dtype=float)
        a = 0.5 * self.p
        if self.p == 2:
            return np.ones_like(y)
        psi = self.inverse(y)
        with np.errstate(divide="ignore"):
            return np.exp((1.0 - a) * np.log(psi) + (a - 1.0) * np.log(y + self.d0))

    def log_weight_core(self, y):
        """log of ``psi(y)^(1-p/2) / psi'(y)``, which equals ``(1-p/2) log(y+d0)``.

        The identity makes the plug-in weight finite at the cluster centre
        for every ``p`` as long as ``d0 > 0``.
        """
        y = np.asarray(y, dtype=float)
        return (1.0 - 0.5 * self.p) * np.log(y + self.d0)


# ---------------------------------------------------------------------------
# Fit configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitConfig:
    k_range: tuple = (2, 2)
    d0: float = 1.0
    lambda_grid_size: int = 20
    admm_penalty: float = 1.0
    admm_tol: float = 1e-6
    admm_max_iter: int = 500
    cv_grid_size: int = 40
    refine_max_iter: int = 20
    init_max_iter: int = 20
    kmeans_restarts: int = 10
    objective: str = "pl1"
    optimizer_max_evals: int = 4000
    optimizer: str = "lbfgs"
    warm_start: bool = True
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        lo, hi = (int(v) for v in self.k_range)
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid k_range {self.k_range}")
        object.__setattr__(self, "k_range", (lo, hi))
        for name in ("d0", "admm_penalty", "admm_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lambda_grid_size < 2:
            raise ValueError("lambda_grid_size must be >= 2")
        if self.objective not in ("pl1", "pl2"):
            raise ValueError("objective must be 'pl1' or 'pl2'")

    @property
    def ks(self) -> range:
        return range(self.k_range[0], self.k_range[1] + 1)

    def transform(self, p: int) -> TransformSpec:
        return TransformSpec(self.d0, p)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def standardize(data: Dataset) -> Dataset:
    """Centre and scale every column to mean 0 and sample variance 1.

    Sample variance uses the ``n - 1`` denominator. The returned dataset
    carries the means and standard deviations needed to undo the map
    (composed with any earlier standardization).
    """
    x = np.asarray(data.values, dtype=float)
    mean = x.mean(axis=0)
    sd = x.std(axis=0, ddof=1)
    for j, s in enumerate(sd):
        if not s > 0 or not np.isfinite(s):
            raise ConstantColumn(j)
    z = (x - mean) / sd
    # compose with any previous standardization so to_original stays exact
    col_sds = data.col_sds * sd
    col_means = data.col_means + data.col_sds * mean
    return Dataset(z, standardized=True, col_means=col_means, col_sds=col_sds)


def _check_spd(m: np.ndarray, tol: float = 0.0) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise NotSPD("matrix must be square")
    if not np.allclose(m, m.T, rtol=1e-10, atol=1e-12):
        raise NotSPD("matrix is not symmetric")
    eig = np.linalg.eigvalsh(0.5 * (m + m.T))
    if eig.min() <= tol:
        raise NotSPD(f"smallest eigenvalue {eig.min():.3e} is not positive")
    return eig


def scatter_from_variance(sigma_x) -> tuple[np.ndarray, float]:
    """Normalize a variance matrix so its first diagonal entry is one.

    Returns ``(sigma_x / sigma_x[0, 0], sigma_x[0, 0])``.
    """
    sigma_x = np.atleast_2d(np.asarray(sigma_x, dtype=float))
    _check_spd(sigma_x)
    s2 = float(sigma_x[0, 0])
    scatter = sigma_x / s2
    scatter[0, 0] = 1.0
    return scatter, s2


def validate_params(params: EllipticalParams) -> EllipticalParams:
    """Repair small violations: symmetrize, renormalize, clip the mixing weights.

    Raises
    ------
    EmptyCluster
        if some mixing weight is zero (or negative).
    DegenerateScatter
        if the repaired scatter has an eigenvalue below 1e-10.
    """
    probs = np.asarray(params.probs, dtype=float)
    if np.any(~np.isfinite(probs)) or np.any(probs <= 0):
        raise EmptyCluster("mixing weight is zero or negative")
    probs = np.clip(probs, 1e-12, 1.0)
    probs = probs / probs.sum()

    s = np.asarray(params.scatter, dtype=float)
    s = 0.5 * (s + s.T)
    if not s[0, 0] > 0:
        raise DegenerateScatter("first diagonal entry of scatter is not positive")
    s = s / s[0, 0]
    s[0, 0] = 1.0
    eig = np.linalg.eigvalsh(s)
    if eig.min() < 1e-10:
        raise DegenerateScatter(f"scatter eigenvalue {eig.min():.3e} below 1e-10")
    return EllipticalParams(params.means, s, probs)
