"""Separation-penalty estimation of subject-level and cluster means.

Minimizes

    1/2 sum_i (X_i - b_i)' W (X_i - b_i) + lam * sum_i min_c ||W^{1/2}(b_i - mu_c)||_1

with an ADMM splitting ``delta_ic = W^{1/2}(b_i - mu_c)``. The concave part
of the min-of-norms penalty is linearized at every outer iterate (a DC
step), the convex part is handled by soft thresholding.

Internally the iterations run in whitened coordinates ``z = W^{1/2} x``
where the updates have no matrix products; states are reported in the
original coordinates.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import Dataset, Partition, SCEDError

log = logging.getLogger(__name__)


class DegenerateGrid(SCEDError):
    pass


class SingularW(SCEDError):
    pass


class MaxIterExceeded(SCEDError):
    """ADMM hit its iteration cap; ``state`` holds the last iterate."""

    def __init__(self, state):
        super().__init__(f"ADMM stopped after {state.iter} iterations "
                         f"(residual {state.primal_residual:.3e})")
        self.state = state


def _values(data) -> np.ndarray:
    return data.values if isinstance(data, Dataset) else np.asarray(data, dtype=float)


def sym_sqrt(w) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric square root of an SPD matrix and its inverse."""
    w = np.atleast_2d(np.asarray(w, dtype=float))
    w = 0.5 * (w + w.T)
    vals, vecs = np.linalg.eigh(w)
    if vals.min() <= 1e-12 * max(1.0, vals.max()):
        raise SingularW(f"W has eigenvalue {vals.min():.3e}")
    half = (vecs * np.sqrt(vals)) @ vecs.T
    half_inv = (vecs / np.sqrt(vals)) @ vecs.T
    return 0.5 * (half + half.T), 0.5 * (half_inv + half_inv.T)


# ---------------------------------------------------------------------------
# Elementary updates
# ---------------------------------------------------------------------------

def soft_threshold(v, lam: float) -> np.ndarray:
    """Componentwise ``sign(v) * max(|v| - lam, 0)``: the prox of ``lam * ||.||_1``."""
    if lam < 0:
        raise ValueError("threshold must be non-negative")
    v = np.asarray(v, dtype=float)
    return np.sign(v) * np.maximum(np.abs(v) - lam, 0.0)


def l1_distances(beta, mu, w_half) -> np.ndarray:
    """n x k matrix of ||W^{1/2}(beta_i - mu_c)||_1."""
    zb = np.atleast_2d(beta) @ w_half
    zm = np.atleast_2d(mu) @ w_half
    return np.abs(zb[:, None, :] - zm[None, :, :]).sum(axis=2)


def assign_clusters_l1(beta, mu, w_half) -> Partition:
    """Nearest centre in the weighted L1 metric, ties to the lowest index."""
    d = l1_distances(beta, mu, w_half)
    return Partition.from_zero_based(np.argmin(d, axis=1), d.shape[1])


def dc_subgradient(beta, mu, w_half) -> np.ndarray:
    """Subgradient (in beta) of the concave part of the min-of-norms penalty.

    With ``min_c a_c = sum_c a_c - max_c sum_{c' != c} a_c'`` the subtracted
    convex term has, at the nearest centre ``c*(i)``, the subgradient
    ``W^{1/2} sum_{c != c*(i)} sign(W^{1/2}(beta_i - mu_c))``. Zero
    components contribute nothing.
    """
    zb = np.atleast_2d(beta) @ w_half
    zm = np.atleast_2d(mu) @ w_half
    s = np.sign(zb[:, None, :] - zm[None, :, :])          # n, k, p
    nearest = np.argmin(np.abs(zb[:, None, :] - zm[None, :, :]).sum(2), axis=1)
    s[np.arange(s.shape[0]), nearest] = 0.0
    return s.sum(axis=1) @ w_half


def beta_update(x_i, mu, delta_i, nu_i, w, dc_subgrad_i, lam: float) -> np.ndarray:
    """One subject-level mean update.

    ``(X_i + sum_c (mu_c + W^{-1/2} delta_ic - W^{-1/2} nu_ic) + lam W^{-1} g_i) / (k + 1)``
    with the augmented-Lagrangian penalty fixed at one.
    """
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    k, p = mu.shape
    w = np.atleast_2d(np.asarray(w, dtype=float))
    _, w_half_inv = sym_sqrt(w)
    delta_i = np.asarray(delta_i, dtype=float).reshape(k, p)
    nu_i = np.asarray(nu_i, dtype=float).reshape(k, p)
    total = np.asarray(x_i, dtype=float).reshape(p) + mu.sum(0)
    total = total + w_half_inv @ (delta_i - nu_i).sum(0)
    total = total + lam * np.linalg.solve(w, np.asarray(dc_subgrad_i, dtype=float).reshape(p))
    return total / (k + 1)


def _medians(zb, zm_prev, carry=None):
    """Whitened-space median update; returns (new centres, mask of empty sets)."""
    d = np.abs(zb[:, None, :] - zm_prev[None, :, :]).sum(2)
    dmin = d.min(axis=1, keepdims=True)
    member = d <= dmin  # a point joins every tied centre's set
    k = zm_prev.shape[0]
    out = zm_prev.copy()
    empty = np.zeros(k, dtype=bool)
    for c in range(k):
        rows = zb[member[:, c]]
        if rows.shape[0] == 0:
            empty[c] = True
            continue
        out[c] = np.median(rows, axis=0)
    return out, empty


def mu_update(beta_new, mu_prev, w_half) -> np.ndarray:
    """Coordinatewise median of ``W^{1/2} beta_i`` over each centre's L1-nearest set.

    A centre with an empty set keeps its previous value.
    """
    w_half = np.atleast_2d(np.asarray(w_half, dtype=float))
    zb = np.atleast_2d(np.asarray(beta_new, dtype=float)) @ w_half
    zm = np.atleast_2d(np.asarray(mu_prev, dtype=float)) @ w_half
    zm_new, _ = _medians(zb, zm)
    return np.linalg.solve(w_half, zm_new.T).T


# ---------------------------------------------------------------------------
# ADMM driver
# ---------------------------------------------------------------------------

@dataclass
class AdmmState:
    beta: np.ndarray
    mu: np.ndarray
    delta: np.ndarray
    nu: np.ndarray
    w_half: np.ndarray
    lam: float
    iter: int = 0
    primal_residual: float = float("inf")
    dual_residual: float = float("inf")
    converged: bool = False
    empty_carries: int = 0

    def residual(self) -> float:
        """Recompute (1/n) sum_i sum_c ||W^{1/2}(beta_i - mu_c) - delta_ic||."""
        zb = self.beta @ self.w_half
        zm = self.mu @ self.w_half
        r = zb[:, None, :] - zm[None, :, :] - self.delta
        return float(np.sqrt((r * r).sum(2)).sum() / self.beta.shape[0])

    def partition(self) -> Partition:
        return assign_clusters_l1(self.beta, self.mu, self.w_half)


def sp_objective(data, beta, mu, w, lam: float) -> float:
    """The penalized weighted least-squares objective at (beta, mu)."""
    x = _values(data)
    w = np.atleast_2d(np.asarray(w, dtype=float))
    w_half, _ = sym_sqrt(w)
    r = x - beta
    fit = 0.5 * float(np.einsum("ij,jk,ik->", r, w, r))
    pen = float(l1_distances(beta, mu, w_half).min(axis=1).sum())
    return fit + lam * pen


def admm_fit(data, w, lam: float, beta0, mu0, tol: float = 1e-6, max_iter: int = 500,
             penalty: float = 1.0, state: AdmmState | None = None,
             w_half=None, strict: bool = False) -> AdmmState:
    """Run the DC-linearized ADMM at a fixed shrinkage level ``lam``.

    ``state`` warm-starts duals and auxiliaries from a previous solve (used
    along the lambda path). Otherwise ``delta`` starts at the constraint
    value and the duals at zero.

    Stops when both the primal residual ``(1/n) sum_ic ||W^{1/2}(beta_i - mu_c) - delta_ic||``
    and the dual residual ``(1/n) sum_ic ||delta_ic - delta_ic_prev||`` drop
    below ``tol``. The primal test alone is met as soon as the duals reach
    the threshold level, typically long before (beta, mu) settle.

    Returns the final state; ``state.converged`` is False when the
    iteration cap was hit. With ``strict=True`` that case raises
    :class:`MaxIterExceeded` instead.
    """
    x = _values(data)
    n, p = x.shape
    if w_half is None:
        w_half, w_half_inv = sym_sqrt(w)
    else:
        w_half = np.asarray(w_half, dtype=float)
        w_half_inv = np.linalg.inv(w_half)
    z = x @ w_half
    if state is not None:
        zb = state.beta @ w_half
        zm = state.mu @ w_half
        delta = state.delta.copy()
        nu = state.nu.copy()
    else:
        zb = np.atleast_2d(np.asarray(beta0, dtype=float)) @ w_half
        zm = np.atleast_2d(np.asarray(mu0, dtype=float)) @ w_half
        delta = zb[:, None, :] - zm[None, :, :]
        nu = np.zeros_like(delta)
    k = zm.shape[0]
    thr = lam / penalty
    carries = 0
    resid = dual = float("inf")
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        # DC linearization at the current outer iterate
        diff = zb[:, None, :] - zm[None, :, :]
        s = np.sign(diff)
        nearest = np.argmin(np.abs(diff).sum(2), axis=1)
        s[np.arange(n), nearest] = 0.0
        g = s.sum(axis=1)
        zb = (z + (zm[None, :, :] + delta - nu).sum(axis=1) * penalty + lam * g) / (1.0 + k * penalty)
        zm, empty = _medians(zb, zm)
        carries += int(empty.sum())
        v = zb[:, None, :] - zm[None, :, :]
        delta_prev = delta
        delta = soft_threshold(v + nu, thr)
        r = v - delta
        nu = nu + r
        resid = float(np.sqrt((r * r).sum(2)).sum() / n)
        step = delta - delta_prev
        dual = float(penalty * np.sqrt((step * step).sum(2)).sum() / n)
        if resid < tol and dual < tol:
            converged = True
            break
    out = AdmmState(
        beta=zb @ w_half_inv,
        mu=zm @ w_half_inv,
        delta=delta,
        nu=nu,
        w_half=w_half,
        lam=float(lam),
        iter=it,
        primal_residual=resid,
        dual_residual=dual,
        converged=converged,
        empty_carries=carries,
    )
    if not converged:
        log.debug("ADMM at lambda=%.4g stopped at %d iterations, residual %.3e", lam, it, resid)
        if strict:
            raise MaxIterExceeded(out)
    return out


# ---------------------------------------------------------------------------
# Lambda path and selection
# ---------------------------------------------------------------------------

def lambda_grid(beta0, mu0, w_half, n_grid: int) -> np.ndarray:
    """``n_grid`` log-spaced shrinkage levels between the smallest nonzero and
    the largest weighted L1 distance from subject-level means to centres."""
    if n_grid < 2:
        raise ValueError("need at least two grid points")
    d = l1_distances(beta0, mu0, w_half).ravel()
    scale = max(1.0, float(np.max(d)))
    nonzero = d[d > 1e-12 * scale]
    if nonzero.size == 0:
        raise DegenerateGrid("every subject-level mean coincides with a centre")
    lo, hi = float(nonzero.min()), float(d.max())
    if hi <= lo:
        hi = lo * (1.0 + 1e-6)
    return np.exp(np.linspace(math.log(lo), math.log(hi), n_grid))


@dataclass
class PathEntry:
    lam: float
    beta: np.ndarray
    mu: np.ndarray
    partition: Partition
    fit_ss: float
    n_clusters_effective: int
    converged: bool
    iterations: int


@dataclass
class LambdaPath:
    grid: np.ndarray
    entries: list = field(default_factory=list)


def fit_lambda_path(data, w, beta0, mu0, grid, tol=1e-6, max_iter=500,
                    penalty=1.0, warm_start=True) -> LambdaPath:
    """Solve along an increasing grid, warm-starting each level from the last."""
    x = _values(data)
    w_half, _ = sym_sqrt(w)
    path = LambdaPath(np.asarray(grid, dtype=float))
    state = None
    for lam in path.grid:
        state = admm_fit(x, w, lam, beta0, mu0, tol=tol, max_iter=max_iter, penalty=penalty,
                         state=state if warm_start else None, w_half=w_half)
        part = state.partition()
        r = x - state.beta
        path.entries.append(PathEntry(
            lam=float(lam),
            beta=state.beta,
            mu=state.mu,
            partition=part,
            fit_ss=float(np.sum(r * r)),
            n_clusters_effective=part.n_nonempty(),
            converged=state.converged,
            iterations=state.iter,
        ))
    return path


def select_lambda(path: LambdaPath, k_target: int) -> PathEntry:
    """Smallest residual sum of squares among grid entries with ``k_target``
    nonempty clusters; if none qualifies, the entry with the most nonempty
    clusters (then the smallest residual sum of squares)."""
    entries = list(path.entries)
    if not entries:
        raise ValueError("empty lambda path")
    proper = [e for e in entries if e.n_clusters_effective == k_target]
    if proper:
        return min(proper, key=lambda e: e.fit_ss)
    most = max(e.n_clusters_effective for e in entries)
    return min((e for e in entries if e.n_clusters_effective == most), key=lambda e: e.fit_ss)


def variance_estimates(data, beta, mu, partition: Partition) -> tuple[np.ndarray, np.ndarray]:
    """Residual-based and cluster-based estimates of the shared variance matrix."""
    x = _values(data)
    n = x.shape[0]
    r1 = x - np.asarray(beta)
    r2 = x - np.asarray(mu)[partition.index]
    v1 = r1.T @ r1 / n
    v2 = r2.T @ r2 / n
    return 0.5 * (v1 + v1.T), 0.5 * (v2 + v2.T)


def a3_lambda_bound(w_half, n: int, d0_hat: float = 1.0) -> float:
    """The shrinkage level below which the oracle-recovery guarantee is not claimed."""
    p = w_half.shape[0]
    return 2.0 * p * float(np.linalg.norm(w_half, 2)) * math.sqrt(math.log(n) / d0_hat)
