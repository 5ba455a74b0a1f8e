"""Regularity-condition diagnostics for the linear covariance structure.

Computes the quantities users need to judge whether the model meets the
assumptions behind the uniform guarantees: the covariance-parameter
ratio bound, component trace/eigenvalue ratios of (sum_l H_l)^{-1} H_k,
the r x r matrix of normalized penalized-projector trace products and
its smallest eigenvalue, and the intraclass correlation ratios of
random-intercept models. Diagnostics are advisory; nothing here refuses
a fit.
"""

from dataclasses import dataclass

import numpy as np

from .model import assemble_cov
from .reml import _trace_products

RANK_X_TOL = None  # numpy matrix_rank default


@dataclass(frozen=True)
class OmegaBounds:
    """Trace and eigenvalue diagnostics of (sum_l H_l)^{-1} H_k.

    trace_over_rank normalizes each trace by rank(H_k); trace_share
    normalizes by n, giving nonnegative shares that sum to one across
    components. The reported bracket (omega_lo, omega_hi) spans the
    shares. eigsum holds the sum of the p largest eigenvalues per
    component.
    """

    trace_over_rank: np.ndarray
    trace_share: np.ndarray
    eigsum: np.ndarray
    omega_lo: float
    omega_hi: float


@dataclass(frozen=True)
class Thresholds:
    """Optional pass/fail cutoffs; None disables the corresponding flag."""

    max_theta_ratio: float | None = None
    min_eta: float | None = None


@dataclass(frozen=True)
class ConditionReport:
    ratio_c: float | None
    omega_per_k: np.ndarray       # rows (trace/rank, trace/n) per component
    eigsum_per_k: np.ndarray
    K: np.ndarray
    eta_min_K: float
    rank_X_ok: bool
    psd_ok: bool
    intraclass: np.ndarray | None
    flags: dict


def _whitened_component_eigs(model, cov):
    """Eigenvalues of L^{-1} H_k L^{-T} (similar to (sum H)^{-1} H_k)."""
    eigs = [[] for _ in range(model.r)]
    for grp, L in zip(cov.groups, cov.factors):
        for k, Hg in enumerate(grp.comps):
            T = np.linalg.solve(L, Hg)
            W = np.linalg.solve(L, T.transpose(0, 2, 1))
            W = 0.5 * (W + W.transpose(0, 2, 1))
            eigs[k].append(np.linalg.eigvalsh(W).ravel())
    return [np.concatenate(e) for e in eigs]


def omega_bounds(model):
    """Per-component trace ratios and eigenvalue sums of (sum_l H_l)^{-1} H_k."""
    ones = np.ones(model.r)
    cov = assemble_cov(model, ones)
    eigs = _whitened_component_eigs(model, cov)
    n = model.n
    p = model.p
    traces = np.array([e.sum() for e in eigs])
    eigsum = np.array([np.sort(e)[::-1][:p].sum() for e in eigs])
    share = traces / n
    over_rank = traces / model.ranks
    return OmegaBounds(trace_over_rank=over_rank, trace_share=share, eigsum=eigsum,
                       omega_lo=float(share.min()), omega_hi=float(share.max()))


def K_matrix(model, c):
    """Normalized trace products of the penalized projector at theta = 1.

    Entry (i, j) is tr{P(1, c) H_i P(1, c) H_j} / sqrt(rk(H_i) rk(H_j));
    returns the matrix together with its smallest eigenvalue.
    """
    if c < 1.0:
        raise ValueError(f"penalty constant must satisfy c >= 1, got {c}")
    ones = np.ones(model.r)
    cov = assemble_cov(model, ones)
    _, tr_phph, _ = _trace_products(model, cov, model.X, a=float(c))
    denom = np.sqrt(np.outer(model.ranks, model.ranks))
    K = tr_phph / denom
    K = 0.5 * (K + K.T)
    eta_min = float(np.linalg.eigvalsh(K)[0])
    return K, eta_min


def check_all(model, theta_hat=None, thresholds=None):
    """Aggregate condition diagnostics into a single advisory report.

    The penalty constant for the K matrix defaults to the estimated
    ratio max(theta_hat) / min(theta_hat), floored at one. For
    random-intercept models the per-cluster intraclass correlation
    ratios theta_1 / (theta_1 + theta_2 / n_i) are filled in.
    """
    thresholds = thresholds or Thresholds()

    ratio_c = None
    if theta_hat is not None:
        theta_hat = np.asarray(theta_hat, dtype=float)
        ratio_c = float(theta_hat.max() / theta_hat.min())

    c = max(ratio_c, 1.0) if ratio_c is not None else 1.0
    K, eta_min = K_matrix(model, c)
    omega = omega_bounds(model)

    rank_X_ok = bool(np.linalg.matrix_rank(model.X) == model.p)
    psd_ok = _psd_ok(model)

    intraclass = None
    if model.template == "random_intercept" and theta_hat is not None:
        sizes = model.block_sizes
        intraclass = theta_hat[0] / (theta_hat[0] + theta_hat[1] / sizes)

    flags = {
        "theta_ratio_ok": None if (thresholds.max_theta_ratio is None or ratio_c is None)
        else bool(ratio_c <= thresholds.max_theta_ratio),
        "eta_min_ok": None if thresholds.min_eta is None
        else bool(eta_min >= thresholds.min_eta),
    }

    return ConditionReport(
        ratio_c=ratio_c,
        omega_per_k=np.column_stack([omega.trace_over_rank, omega.trace_share]),
        eigsum_per_k=omega.eigsum,
        K=K,
        eta_min_K=eta_min,
        rank_X_ok=rank_X_ok,
        psd_ok=psd_ok,
        intraclass=intraclass,
        flags=flags,
    )


def _psd_ok(model):
    from .model import PD_RTOL, PSD_RTOL, _component_eigvals

    eigvals = _component_eigvals(model.groups)
    for k, vals in enumerate(eigvals):
        spectral = np.abs(vals).max()
        if vals.min() < -PSD_RTOL * spectral:
            return False
        if k == model.r - 1 and vals.min() <= PD_RTOL * spectral:
            return False
    return True
