"""k-means seeding followed by Mahalanobis reassignment.

For every candidate cluster count ``l`` in ``2..kbar`` the data are first
partitioned by k-means and the partition is then refined by alternating
between cluster means, the pooled within-cluster variance and
nearest-centre reassignment in the Mahalanobis metric of that variance.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from sklearn.cluster import KMeans

from .core import Dataset, EmptyCluster, Partition, SCEDError, TooFewPoints

log = logging.getLogger(__name__)


class SingularPooledVariance(SCEDError):
    """Pooled within-cluster variance cannot be inverted.

    ``last`` carries the most recent valid :class:`InitEntry` when the
    failure happens inside :func:`init_refine`.
    """

    def __init__(self, msg, last=None):
        super().__init__(msg)
        self.last = last


@dataclass(frozen=True)
class InitEntry:
    partition: Partition
    means: np.ndarray
    pooled_var: np.ndarray
    within_ss: float
    n_sweeps: int = 0

    @property
    def beta(self) -> np.ndarray:
        """Subject-level means: row i is the mean of the cluster holding point i."""
        return self.means[self.partition.index]


def kbar(n: int) -> int:
    """Largest cluster count considered by the initializer, floor(sqrt(n / ln n))."""
    if n < 2:
        raise TooFewPoints(f"n={n}")
    value = int(math.floor(math.sqrt(n / math.log(n))))
    if value < 2:
        raise TooFewPoints(f"floor(sqrt(n/log n)) = {value} < 2 for n={n}")
    return value


def within_ss(data, partition: Partition, means) -> float:
    """Half the within-cluster sum of squared Euclidean residuals."""
    x = _values(data)
    r = x - np.asarray(means)[partition.index]
    return 0.5 * float(np.sum(r * r))


def _values(data) -> np.ndarray:
    return data.values if isinstance(data, Dataset) else np.asarray(data, dtype=float)


def kmeans(data, n_clusters: int, seed=0, restarts: int = 10) -> Partition:
    """Lloyd k-means with k-means++ seeding, best of ``restarts`` runs."""
    x = _values(data)
    n = x.shape[0]
    if n_clusters > n:
        raise ValueError(f"cannot form {n_clusters} clusters from {n} points")
    if n_clusters == 1:
        return Partition(np.ones(n, dtype=np.int64), 1)
    rs = _as_int_seed(seed)
    km = KMeans(
        n_clusters=n_clusters,
        init="k-means++",
        n_init=restarts,
        algorithm="lloyd",
        tol=0.0,
        max_iter=300,
        random_state=rs,
    )
    labels = km.fit_predict(x)
    labels = _repair_empty(x, labels, n_clusters)
    return Partition.from_zero_based(labels, n_clusters)


def _as_int_seed(seed) -> int:
    if isinstance(seed, np.random.Generator):
        return int(seed.integers(0, 2**31 - 1))
    return int(seed) % (2**31 - 1)


def _repair_empty(x, labels, k, metric_inv=None) -> np.ndarray:
    """Give every empty cluster the point farthest from its own cluster mean."""
    labels = labels.copy()
    for _ in range(k):
        sizes = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(sizes == 0)
        if empty.size == 0:
            return labels
        means = np.zeros((k, x.shape[1]))
        for c in range(k):
            if sizes[c]:
                means[c] = x[labels == c].mean(axis=0)
        r = x - means[labels]
        d = np.einsum("ij,jk,ik->i", r, metric_inv, r) if metric_inv is not None else np.sum(r * r, 1)
        d[sizes[labels] <= 1] = -np.inf  # never empty another cluster
        labels[int(np.argmax(d))] = empty[0]
    return labels


def cluster_means(data, partition: Partition) -> np.ndarray:
    """Row c is the arithmetic mean of the points labelled c."""
    x = _values(data)
    sizes = partition.sizes()
    if np.any(sizes == 0):
        raise EmptyCluster(f"empty clusters: {np.flatnonzero(sizes == 0) + 1}")
    sums = np.zeros((partition.k, x.shape[1]))
    np.add.at(sums, partition.index, x)
    return sums / sizes[:, None]


def pooled_within_variance(data, partition: Partition, means, check: bool = True) -> np.ndarray:
    """(1/n) sum_i (X_i - mu_{c(i)})(X_i - mu_{c(i)})^T."""
    x = _values(data)
    if not partition.is_proper:
        raise EmptyCluster("partition has empty clusters")
    r = x - np.asarray(means)[partition.index]
    v = r.T @ r / x.shape[0]
    v = 0.5 * (v + v.T)
    if check:
        eig = np.linalg.eigvalsh(v)
        if eig.min() <= 1e-12 * max(1.0, eig.max()):
            raise SingularPooledVariance(
                f"pooled within-cluster variance is singular (min eigenvalue {eig.min():.3e})"
            )
    return v


def mahalanobis_reassign(data, means, pooled_var) -> Partition:
    """Assign each point to the mean with the smallest Mahalanobis distance.

    Ties go to the lowest cluster index.
    """
    x = _values(data)
    means = np.atleast_2d(np.asarray(means, dtype=float))
    try:
        chol = np.linalg.cholesky(np.asarray(pooled_var, dtype=float))
    except np.linalg.LinAlgError as exc:
        raise SingularPooledVariance(str(exc)) from exc
    d = _sq_mahalanobis(x, means, chol)
    return Partition.from_zero_based(np.argmin(d, axis=1), means.shape[0])


def _sq_mahalanobis(x, means, chol) -> np.ndarray:
    from scipy.linalg import solve_triangular

    k = means.shape[0]
    out = np.empty((x.shape[0], k))
    for c in range(k):
        z = solve_triangular(chol, (x - means[c]).T, lower=True)
        out[:, c] = np.sum(z * z, axis=0)
    return out


def init_refine(data, n_clusters: int, seed=0, max_iter: int = 20,
                restarts: int = 10, start: Partition | None = None) -> InitEntry:
    """k-means partition refined by Mahalanobis reassignment.

    Stops on a partition fixpoint, a relative within-SS change below
    1e-10, or after ``max_iter`` sweeps.
    """
    x = _values(data)
    part = start if start is not None else kmeans(x, n_clusters, seed=seed, restarts=restarts)
    means = cluster_means(x, part)
    var = pooled_within_variance(x, part, means)
    ss = within_ss(x, part, means)
    entry = InitEntry(part, means, var, ss, 0)
    for sweep in range(1, max_iter + 1):
        try:
            new = mahalanobis_reassign(x, means, var)
        except SingularPooledVariance as exc:
            raise SingularPooledVariance(str(exc), last=entry) from exc
        if not new.is_proper:
            labels = _repair_empty(x, new.index, n_clusters, np.linalg.inv(var))
            new = Partition.from_zero_based(labels, n_clusters)
        if new.same_as(part):
            return InitEntry(part, means, var, ss, sweep)
        new_means = cluster_means(x, new)
        try:
            new_var = pooled_within_variance(x, new, new_means)
        except SingularPooledVariance as exc:
            raise SingularPooledVariance(str(exc), last=entry) from exc
        new_ss = within_ss(x, new, new_means)
        part, means, var = new, new_means, new_var
        entry = InitEntry(part, means, var, new_ss, sweep)
        if abs(new_ss - ss) <= 1e-10 * max(abs(ss), 1e-300):
            return entry
        ss = new_ss
    return entry


def initialize(data, k_max: int | None = None, seed=0, max_iter: int = 20,
               restarts: int = 10, k_min: int = 2) -> dict[int, InitEntry]:
    """Run :func:`init_refine` for every l in ``k_min..k_max`` (default ``kbar(n)``).

    Each ``l`` gets its own child seed so the entries do not depend on
    which other ``l`` values were requested.
    """
    x = _values(data)
    top = kbar(x.shape[0]) if k_max is None else k_max
    ss = np.random.SeedSequence(_as_int_seed(seed))
    children = ss.spawn(max(top, k_min) + 1)
    out = {}
    for ell in range(k_min, top + 1):
        rs = int(children[ell].generate_state(1)[0])
        try:
            out[ell] = init_refine(x, ell, seed=rs, max_iter=max_iter, restarts=restarts)
        except SingularPooledVariance as exc:
            if exc.last is not None:
                log.warning("initializer l=%d hit a singular variance; using last iterate", ell)
                out[ell] = exc.last
            else:
                log.warning("initializer l=%d failed: %s", ell, exc)
    return out
