"""Comparator inference procedures without the noncentrality correction.

Three naive constructions used in the coverage comparison: the plain
WLS ellipsoid (no selection), WLS-shaped inference after exhaustive
AIC subset selection, and the WLS-shaped set recentered at the Lasso
estimate. None of them accounts for the selection event, which is the
behavior the coverage study quantifies.
"""

import warnings
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .confset import central_ellipsoid
from .lasso import wls
from .model import assemble_cov
from .ncchisq import chisq_quantile
from .reml import profile_ml

MAX_SUBSET_P = 15


@lru_cache(maxsize=256)
def _cached_chisq_quantile(prob, dof):
    return chisq_quantile(prob, dof)


@dataclass(frozen=True)
class SelectionResult:
    """Exhaustive AIC search outcome over fixed-effect column subsets.

    subsets are listed by size then lexicographically; ties in AIC are
    broken in that order, so the selected subset is the first minimizer.
    theta_by_subset holds each subset's profile ML covariance estimate
    (None where the fit did not converge and the subset was skipped).
    """

    subset: tuple
    subsets: tuple
    aic: np.ndarray
    theta_by_subset: tuple
    beta_selected: np.ndarray
    C_selected: np.ndarray
    theta_selected: np.ndarray
    skipped: tuple


@dataclass(frozen=True)
class AicWlsSet:
    """WLS-shaped set on the selected subset, zero elsewhere.

    A p-vector is a member only if its off-subset coordinates are
    exactly zero and the on-subset part lies in the chi-squared
    ellipsoid of the selected fit. An empty subset leaves only the
    origin.
    """

    subset: tuple
    center: np.ndarray
    shape: np.ndarray
    radius: float
    level: float
    n: int
    p: int

    def contains(self, beta):
        beta = np.asarray(beta, dtype=float).ravel()
        if beta.shape != (self.p,):
            raise ValueError(f"point has dimension {beta.shape[0]}, expected {self.p}")
        outside = np.setdiff1d(np.arange(self.p), np.asarray(self.subset, dtype=int))
        if np.any(beta[outside] != 0.0):
            return False
        if not self.subset:
            return True
        delta = self.center - beta[list(self.subset)]
        return bool(self.n * float(delta @ self.shape @ delta) <= self.radius)


def wls_ellipsoid(model, theta_hat, alpha):
    """Classical WLS confidence ellipsoid, central chi-squared radius."""
    beta_wls, _ = wls(model, theta_hat)
    return central_ellipsoid(model, theta_hat, beta_wls, alpha)


def naive_lasso_set(model, theta_hat, lasso_sol, alpha):
    """WLS-shaped set recentered at the Lasso estimate (no correction)."""
    return central_ellipsoid(model, theta_hat, lasso_sol.beta, alpha)


def _subset_wls(model, theta, cols):
    """WLS coefficients and shape matrix restricted to the given columns."""
    cols = list(cols)
    if not cols:
        return np.empty(0), np.empty((0, 0))
    cov = assemble_cov(model, theta)
    Xt = cov.whiten(model.X[:, cols])
    yt = cov.whiten(model.y)
    C = Xt.T @ Xt / model.n
    cho = cho_factor(0.5 * (C + C.T), lower=True)
    beta = cho_solve(cho, Xt.T @ yt / model.n)
    return beta, C


def aic_select(model, tol=1e-8, max_iter=100):
    """Exhaustive AIC search over all fixed-effect subsets.

    For every subset S (including the empty one) the covariance
    parameters are re-estimated by profile maximum likelihood jointly
    with the WLS coefficients on S, and
    AIC(S) = -2 loglik + 2 (|S| + r). Subsets whose ML fit does not
    converge are skipped with a warning. The minimizer's WLS fit and
    restricted shape matrix are evaluated at that subset's own ML
    covariance estimate.
    """
    p = model.p
    if p > MAX_SUBSET_P:
        raise ValueError(f"exhaustive subset search is capped at p <= {MAX_SUBSET_P}")

    subsets = [tuple(s) for size in range(p + 1) for s in combinations(range(p), size)]
    aic = np.full(len(subsets), np.inf)
    thetas = [None] * len(subsets)
    skipped = []

    for i, S in enumerate(subsets):
        est = profile_ml(model, columns=S, tol=tol, max_iter=max_iter)
        if not est.converged:
            warnings.warn(f"profile ML did not converge for subset {S}; skipped")
            skipped.append(S)
            continue
        thetas[i] = est.theta_hat
        aic[i] = -2.0 * est.loglik + 2.0 * (len(S) + model.r)

    if not np.isfinite(aic).any():
        raise ArithmeticError("no subset produced a converged ML fit")

    best = int(np.argmin(aic))  # first minimizer: size then lexicographic order
    subset = subsets[best]
    theta_sel = thetas[best]
    beta_sel, C_sel = _subset_wls(model, theta_sel, subset)
    return SelectionResult(
        subset=subset,
        subsets=tuple(subsets),
        aic=aic,
        theta_by_subset=tuple(thetas),
        beta_selected=beta_sel,
        C_selected=C_sel,
        theta_selected=theta_sel,
        skipped=tuple(skipped),
    )


def aic_wls_set(model, selection, alpha):
    """WLS confidence set on the AIC-selected subset.

    Coordinates outside the subset are pinned to exact zero; the
    on-subset part uses the central chi-squared radius with |S| degrees
    of freedom. With an empty subset the set is the origin alone.
    """
    S = selection.subset
    radius = _cached_chisq_quantile(1.0 - alpha, len(S)) if S else 0.0
    return AicWlsSet(
        subset=S,
        center=selection.beta_selected,
        shape=selection.C_selected,
        radius=float(radius),
        level=alpha,
        n=model.n,
        p=model.p,
    )
