"""Uniformly valid confidence ellipsoids centered at the Lasso estimate.

The ellipsoid {b : n ||C^{1/2}(center - b)||^2 <= tau} attains its
nominal level uniformly when tau is the 1-alpha quantile of the
non-central chi-squared distribution whose noncentrality is maximized
over all sign vectors d in {-1, 1}^p. Sign maximization is exact up to
p = 20; beyond that a spectral bound keeps the set conservative.
Membership is evaluated through the stored Cholesky factor of the shape
matrix, so a serialized ellipsoid reproduces membership decisions
exactly.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .lasso import wls
from .model import compute_C
from .ncchisq import chisq_quantile, ncchisq_cdf, ncchisq_quantile  # noqa: F401

EXACT_SIGN_LIMIT = 20
_ENUM_CHUNK = 1 << 16


@lru_cache(maxsize=256)
def _central_quantile(prob, dof):
    return chisq_quantile(prob, dof)


@dataclass(frozen=True)
class ConfidenceEllipsoid:
    """Ellipsoidal confidence set {b : n ||F^T (center - b)||^2 <= radius}.

    shape = F F^T is the whitened design Gram matrix; d_star is the
    noncentrality-maximizing sign vector (None when the conservative
    large-p bound was used) and xi_star the attained noncentrality.
    """

    center: np.ndarray
    shape: np.ndarray
    shape_factor: np.ndarray
    radius: float
    level: float
    n: int
    d_star: np.ndarray | None
    xi_star: float
    conservative: bool


def max_noncentrality(C, Lambda):
    """Maximize d^T (Lambda C^{-1} Lambda) d over sign vectors d.

    Exact enumeration over the 2^(p-1) sign classes (d and -d tie) for
    p <= 20; for larger p returns the conservative spectral bound
    p * eta_1(Lambda C^{-1} Lambda) with d_star None.
    """
    C = np.asarray(C, dtype=float)
    Lambda = np.asarray(Lambda, dtype=float)
    lam_diag = np.diag(Lambda) if Lambda.ndim == 2 else Lambda.ravel()
    p = C.shape[0]
    cho = cho_factor(C, lower=True)
    M = cho_solve(cho, np.diag(lam_diag))
    M = lam_diag[:, None] * M
    M = 0.5 * (M + M.T)

    if p == 1:
        return float(M[0, 0]), np.ones(1)

    if p > EXACT_SIGN_LIMIT:
        xi = p * float(np.linalg.eigvalsh(M)[-1])
        return max(xi, 0.0), None

    total = 1 << (p - 1)
    best_val = -np.inf
    best_d = None
    for start in range(0, total, _ENUM_CHUNK):
        idx = np.arange(start, min(start + _ENUM_CHUNK, total), dtype=np.uint64)
        D = np.ones((len(idx), p))
        for bit in range(p - 1):
            D[:, bit + 1] = 1.0 - 2.0 * ((idx >> np.uint64(bit)) & np.uint64(1))
        vals = np.einsum("ij,jk,ik->i", D, M, D)
        k = int(np.argmax(vals))
        if vals[k] > best_val:
            best_val = float(vals[k])
            best_d = D[k].copy()
    return max(best_val, 0.0), best_d


def build_ellipsoid(model, theta_hat, lasso_sol, lam, alpha):
    """Confidence ellipsoid at level 1 - alpha around the Lasso estimate.

    Forms C = X^T V(theta_hat)^{-1} X / n and the penalty matrix
    Lambda = diag(lam) / sqrt(n), maximizes the noncentrality over sign
    vectors, and sets the radius to the corresponding non-central
    chi-squared quantile.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"level alpha must lie in (0, 1), got {alpha}")
    lam = np.asarray(lam, dtype=float).ravel()
    if lam.shape != (model.p,):
        raise ValueError(f"penalty vector must have length {model.p}")

    n = model.n
    C = compute_C(model, theta_hat)
    lam_scaled = lam / np.sqrt(n)
    xi_star, d_star = max_noncentrality(C, lam_scaled)
    radius = ncchisq_quantile(1.0 - alpha, model.p, xi_star)
    return ConfidenceEllipsoid(
        center=np.asarray(lasso_sol.beta, dtype=float).copy(),
        shape=C,
        shape_factor=np.linalg.cholesky(C),
        radius=float(radius),
        level=alpha,
        n=n,
        d_star=d_star,
        xi_star=float(xi_star),
        conservative=d_star is None,
    )


def contains(ellipsoid, beta):
    """Boundary-inclusive membership test of beta in the ellipsoid."""
    beta = np.asarray(beta, dtype=float).ravel()
    if beta.shape != ellipsoid.center.shape:
        raise ValueError(f"point has dimension {beta.shape[0]}, "
                         f"expected {ellipsoid.center.shape[0]}")
    delta = ellipsoid.shape_factor.T @ (ellipsoid.center - beta)
    return bool(ellipsoid.n * float(delta @ delta) <= ellipsoid.radius)


def coordinate_interval(model, theta_hat, lasso_sol, lam, j, alpha):
    """Marginal interval for coordinate j from the one-dimensional set.

    Uses the scalar shape 1 / (C^{-1})_jj, noncentrality
    lam_j^2 (C^{-1})_jj / n, and the non-central chi-squared quantile
    with one degree of freedom. j is a zero-based column index.
    """
    lam = np.asarray(lam, dtype=float).ravel()
    if not 0 <= j < model.p:
        raise ValueError(f"coordinate index {j} out of range for p={model.p}")
    n = model.n
    C = compute_C(model, theta_hat)
    cho = cho_factor(C, lower=True)
    C_inv = cho_solve(cho, np.eye(model.p))
    c_jj = float(C_inv[j, j])
    xi_j = lam[j] ** 2 * c_jj / n
    t_j = ncchisq_quantile(1.0 - alpha, 1, xi_j)
    half = np.sqrt(t_j * c_jj / n)
    center = float(lasso_sol.beta[j])
    return center - half, center + half


def ellipsoid_to_dict(ellipsoid):
    """Serializable form; sufficient to reproduce membership exactly."""
    return {
        "center": ellipsoid.center.tolist(),
        "shape_factor": ellipsoid.shape_factor.tolist(),
        "radius": ellipsoid.radius,
        "alpha": ellipsoid.level,
        "n": ellipsoid.n,
        "d_star": None if ellipsoid.d_star is None else ellipsoid.d_star.tolist(),
        "xi_star": ellipsoid.xi_star,
        "conservative": ellipsoid.conservative,
    }


def ellipsoid_from_dict(data):
    factor = np.asarray(data["shape_factor"], dtype=float)
    d_star = data.get("d_star")
    return ConfidenceEllipsoid(
        center=np.asarray(data["center"], dtype=float),
        shape=factor @ factor.T,
        shape_factor=factor,
        radius=float(data["radius"]),
        level=float(data["alpha"]),
        n=int(data["n"]),
        d_star=None if d_star is None else np.asarray(d_star, dtype=float),
        xi_star=float(data["xi_star"]),
        conservative=bool(data["conservative"]),
    )


def central_ellipsoid(model, theta_hat, center, alpha, n=None):
    """Ellipsoid with the central chi-squared radius around a given center.

    Shared shape for the unpenalized comparison sets: radius is the
    1 - alpha quantile of chi^2_p with zero noncentrality.
    """
    n = model.n if n is None else n
    C = compute_C(model, theta_hat)
    radius = _central_quantile(1.0 - alpha, model.p)
    return ConfidenceEllipsoid(
        center=np.asarray(center, dtype=float).copy(),
        shape=C,
        shape_factor=np.linalg.cholesky(C),
        radius=float(radius),
        level=alpha,
        n=n,
        d_star=None,
        xi_star=0.0,
        conservative=False,
    )


def wls_center(model, theta_hat):
    """Weighted least squares center, re-exported for set construction."""
    beta, _ = wls(model, theta_hat)
    return beta
