"""Choosing the number of clusters, and a parametric adequacy check.

The information criterion trades the leave-one-out marginal
log-likelihood against penalties at rates ``log n / n^{4/5}`` (density
estimation) and ``log n / n`` (finite-dimensional parameters).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from sklearn.mixture import GaussianMixture

log = logging.getLogger(__name__)


def spic(k: int, loo_loglik: float, n: int, p: int) -> float:
    """``-loo_loglik/n + k log n / (2 n^{4/5}) + k (p+1) log n / (2n)``."""
    if n < 1 or k < 1:
        raise ValueError("need n >= 1 and k >= 1")
    ln = math.log(n)
    return -loo_loglik / n + k * ln / (2.0 * n ** 0.8) + k * (p + 1) * ln / (2.0 * n)


@dataclass
class SpicCurve:
    ks: list = field(default_factory=list)
    loo_loglik: list = field(default_factory=list)
    values: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)

    @property
    def selected(self) -> int | None:
        """Smallest k attaining the minimal criterion value."""
        if not self.values:
            return None
        vals = np.asarray(self.values)
        return int(self.ks[int(np.argmin(vals))])

    def add(self, k: int, loo: float, n: int, p: int) -> None:
        self.ks.append(int(k))
        self.loo_loglik.append(float(loo))
        self.values.append(spic(k, loo, n, p))

    def rows(self) -> list[tuple[int, float, float]]:
        return list(zip(self.ks, self.loo_loglik, self.values))


def select_k(n: int, p: int, ks, loo_for_k: Callable[[int], float]) -> SpicCurve:
    """Evaluate the criterion for every ``k`` in ``ks`` and keep the curve.

    ``loo_for_k`` runs the full fit at ``k`` and returns the leave-one-out
    marginal log-likelihood. A failing ``k`` is logged, recorded in
    ``failures`` and left out of the argmin.
    """
    curve = SpicCurve()
    for k in ks:
        try:
            loo = float(loo_for_k(k))
            if not np.isfinite(loo):
                raise ValueError("non-finite leave-one-out log-likelihood")
        except Exception as exc:  # noqa: BLE001 - per-k failures must not abort the sweep
            log.warning("fit at k=%d failed and is excluded from selection: %s", k, exc)
            curve.failures[int(k)] = f"{type(exc).__name__}: {exc}"
            continue
        curve.add(k, loo, n, p)
    return curve


def adequacy_D(pl_k: float, l0: float, n: int) -> float:
    """``(pl - l0)/n - log n / n^{4/5}``; positive values speak against the parametric fit."""
    return (pl_k - l0) / n - math.log(n) / n ** 0.8


def normal_mixture_loglik(x, k: int, seed: int = 0, n_init: int = 5) -> float:
    """Maximized log-likelihood of a k-component normal mixture with shared covariance."""
    x = np.asarray(x, dtype=float)
    gm = GaussianMixture(n_components=k, covariance_type="tied", n_init=n_init,
                         random_state=seed, tol=1e-8, max_iter=1000, reg_covar=1e-9)
    gm.fit(x)
    return float(gm.score(x) * x.shape[0])
