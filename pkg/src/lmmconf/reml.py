"""Restricted maximum likelihood for the covariance parameters.

Provides the REML objective, analytic score and expected (Fisher)
information, and a multi-start Fisher-scoring optimizer in the
log-parameterization. A profile maximum-likelihood variant of the same
machinery backs the AIC baseline.

All traces involving the residual projector
P(theta, a) = V^{-1} - a V^{-1} X (X^T V^{-1} X)^{-1} X^T V^{-1}
are evaluated through whitened cross-products: with V = L L^T and
W_k = L^{-1} H_k L^{-T}, the projector reduces to I - a Xw G^{-1} Xw^T
in the whitened coordinates, so every trace is a combination of block
products of the W_k plus p-dimensional corrections. No n x n inverse is
ever formed.

For the random-intercept template the optimizer switches to a
sufficient-statistic evaluator: with V_b = th2 I + th1 J per cluster
(J the all-ones matrix), Sherman-Morrison reduces every likelihood
quantity to per-cluster cross-products of X and y, making one
evaluation O(m p^2). The generic whitened path remains the reference;
the two agree to floating-point accuracy and the tests enforce it.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .model import FactorizationError, assemble_cov

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100
MIN_STEP = 1e-12
MAX_LOG_STEP = 10.0
NEAR_BOUNDARY_RATIO = 1e-6


@dataclass(frozen=True)
class ThetaEstimate:
    """REML (or profile ML) point estimate with diagnostics.

    score_norm is the convergence criterion value: the max-abs score
    with component k scaled by 1 / nu_k. converged implies
    score_norm < tol. fisher_info holds the unnormalized expected
    information, entry (i, j) = tr(P H_i P H_j) / 2. loglik_path lists
    the objective after each accepted step of the winning start.
    """

    theta_hat: np.ndarray
    loglik: float
    score_norm: float
    fisher_info: np.ndarray
    nu: np.ndarray
    converged: bool
    iterations: int
    starts_tried: int
    near_boundary: np.ndarray
    loglik_path: tuple = ()


# ---------------------------------------------------------------------------
# Generic whitened evaluation
# ---------------------------------------------------------------------------


def _trace_products(model, cov, X, a, pairs=True, Xt=None):
    """Traces tr(P(theta, a) H_k) and tr(P(theta, a) H_i P(theta, a) H_j).

    Also returns tr(V^{-1} H_k), which the normalizers nu_k need.
    X may have zero columns, in which case the projector corrections
    vanish and the traces are those of V^{-1} alone.
    """
    r = model.r
    p = X.shape[1]
    tr_w = np.zeros(r)
    tr_ww = np.zeros((r, r)) if pairs else None
    M = np.zeros((r, p, p))
    N = np.zeros((r, r, p, p)) if pairs else None

    if p and Xt is None:
        Xt = cov.whiten(X)
    for grp, L in zip(cov.groups, cov.factors):
        g, s, _ = L.shape
        Xg = Xt[grp.rows] if p else None
        # One batched solve for all components: T_k = L^{-1} H_k, then
        # W_k = L^{-1} T_k^T, both stacked along the last axis.
        H_cat = np.concatenate(grp.comps, axis=2)
        T_cat = np.linalg.solve(L, H_cat)
        Tt_cat = np.concatenate(
            [T_cat[:, :, k * s:(k + 1) * s].transpose(0, 2, 1) for k in range(r)], axis=2)
        W_cat = np.linalg.solve(L, Tt_cat)
        Ws = [W_cat[:, :, k * s:(k + 1) * s] for k in range(r)]
        Us = []
        for k in range(r):
            tr_w[k] += np.einsum("gii->", Ws[k])
            if p:
                U = Ws[k] @ Xg
                Us.append(U)
                M[k] += np.einsum("gsp,gsq->pq", Xg, U)
        if pairs:
            for i in range(r):
                for j in range(i, r):
                    tr_ww[i, j] += np.einsum("gst,gst->", Ws[i], Ws[j])
                    if p:
                        N[i, j] += np.einsum("gsp,gsq->pq", Us[i], Us[j])

    if p and a != 0.0:
        G = Xt.T @ Xt
        cho = cho_factor(0.5 * (G + G.T), lower=True)
        Ginv = cho_solve(cho, np.eye(p))
        tr_ph = tr_w - a * np.array([np.trace(Ginv @ M[k]) for k in range(r)])
        if pairs:
            tr_phph = np.zeros((r, r))
            GM = [Ginv @ M[k] for k in range(r)]
            for i in range(r):
                for j in range(i, r):
                    val = (tr_ww[i, j]
                           - 2.0 * a * np.trace(Ginv @ N[i, j])
                           + a * a * np.trace(GM[i] @ GM[j]))
                    tr_phph[i, j] = tr_phph[j, i] = val
        else:
            tr_phph = None
    else:
        tr_ph = tr_w.copy()
        if pairs:
            tr_phph = np.zeros((r, r))
            for i in range(r):
                for j in range(i, r):
                    tr_phph[i, j] = tr_phph[j, i] = tr_ww[i, j]
        else:
            tr_phph = None
    return tr_ph, tr_phph, tr_w


def _evaluate(model, theta, X, kind):
    """Log-likelihood, score, expected information and nu at theta.

    kind "reml" uses the restricted likelihood with the projector
    traces; kind "ml" uses the profile likelihood over the fixed
    effects, whose trace terms involve V^{-1} alone.
    """
    cov = assemble_cov(model, theta)
    p = X.shape[1]
    if p:
        # Whiten response and design in a single stacked solve.
        YX = cov.whiten(np.concatenate([model.y[:, None], X], axis=1))
        yt, Xt = YX[:, 0], YX[:, 1:]
        G = Xt.T @ Xt
        cho = cho_factor(0.5 * (G + G.T), lower=True)
        beta = cho_solve(cho, Xt.T @ yt)
        resid_t = yt - Xt @ beta
        logdet_g = 2.0 * float(np.sum(np.log(np.diagonal(cho[0]))))
    else:
        yt = cov.whiten(model.y)
        Xt = None
        resid_t = yt
        logdet_g = 0.0
    rss = float(resid_t @ resid_t)

    if kind == "reml":
        loglik = -0.5 * cov.logdet - 0.5 * logdet_g - 0.5 * rss
        a = 1.0
    elif kind == "ml":
        loglik = -0.5 * cov.logdet - 0.5 * rss
        a = 0.0
    else:
        raise ValueError(f"unknown likelihood kind {kind!r}")

    Py = cov.solve_lower_t(resid_t)
    quad = np.empty(model.r)
    for k in range(model.r):
        acc = 0.0
        for grp in cov.groups:
            Pg = Py[grp.rows]
            acc += float(np.einsum("gs,gst,gt->", Pg, grp.comps[k], Pg))
        quad[k] = acc

    tr_ph, tr_phph, tr_w = _trace_products(model, cov, X, a, Xt=Xt)
    score = 0.5 * quad - 0.5 * tr_ph
    info = 0.5 * tr_phph
    nu_vals = tr_w / np.sqrt(model.ranks)
    return loglik, score, info, nu_vals


# ---------------------------------------------------------------------------
# Random-intercept fast path (sufficient statistics per cluster)
# ---------------------------------------------------------------------------


class _RandomInterceptStats:
    """Per-cluster cross-products for V_b = th2 I + th1 (ones outer ones)."""

    def __init__(self, model, columns):
        X = model.X if columns is None else model.X[:, list(columns)]
        y = model.y
        sizes = model.block_sizes
        offsets = np.concatenate(([0], np.cumsum(sizes)))
        m = len(sizes)
        p = X.shape[1]
        self.m = m
        self.n = model.n
        self.p = p
        self.nb = sizes.astype(float)
        self.ranks = model.ranks

        self.S = np.empty((m, p, p))
        self.x1 = np.empty((m, p))
        self.xy = np.empty((m, p))
        self.y1 = np.empty(m)
        self.yy = np.empty(m)
        for b in range(m):
            sl = slice(offsets[b], offsets[b + 1])
            Xb, yb = X[sl], y[sl]
            self.S[b] = Xb.T @ Xb
            self.x1[b] = Xb.sum(axis=0)
            self.xy[b] = Xb.T @ yb
            self.y1[b] = yb.sum()
            self.yy[b] = yb @ yb
        self.S_sum = self.S.sum(axis=0)
        self.xy_sum = self.xy.sum(axis=0)
        self.yy_sum = float(self.yy.sum())

    def evaluate(self, theta, kind):
        th1, th2 = float(theta[0]), float(theta[1])
        nb = self.nb
        m, n, p = self.m, self.n, self.p
        denom = th2 + nb * th1
        c = th1 / denom
        g = th2 / denom
        gt = g / th2                     # = 1 / denom

        logdet_v = (n - m) * math.log(th2) + float(np.sum(np.log(denom)))

        if p:
            cx = np.einsum("b,bi,bj->ij", c, self.x1, self.x1)
            G = (self.S_sum - cx) / th2
            xv_y = (self.xy_sum - (c * self.y1) @ self.x1) / th2
            yv_y = (self.yy_sum - c @ self.y1 ** 2) / th2
            cho = cho_factor(0.5 * (G + G.T), lower=True)
            beta = cho_solve(cho, xv_y)
            logdet_g = 2.0 * float(np.sum(np.log(np.diagonal(cho[0]))))
            ypy = yv_y - float(xv_y @ beta)
        else:
            beta = np.zeros(0)
            logdet_g = 0.0
            ypy = (self.yy_sum - c @ self.y1 ** 2) / th2

        if kind == "reml":
            loglik = -0.5 * logdet_v - 0.5 * logdet_g - 0.5 * ypy
            a = 1.0
        else:
            loglik = -0.5 * logdet_v - 0.5 * ypy
            a = 0.0

        r1 = self.y1 - self.x1 @ beta if p else self.y1
        if p:
            rssb = (self.yy - 2.0 * self.xy @ beta
                    + np.einsum("bij,i,j->b", self.S, beta, beta))
        else:
            rssb = self.yy
        c2 = 2.0 * c - c * c * nb
        quad1 = float(np.sum((gt * r1) ** 2))
        quad2 = float(np.sum(rssb) - c2 @ r1 ** 2) / th2 ** 2

        tr_v1 = float(np.sum(nb * gt))
        tr_v2 = ((n - m) + float(np.sum(g))) / th2
        tr_vv11 = float(np.sum((gt * nb) ** 2))
        tr_vv12 = float(np.sum(gt * gt * nb))
        tr_vv22 = ((n - m) + float(np.sum(g * g))) / th2 ** 2

        if a and p:
            A1 = np.einsum("b,bi,bj->ij", gt * gt, self.x1, self.x1)
            A2 = (self.S_sum - np.einsum("b,bi,bj->ij", c2, self.x1, self.x1)) / th2 ** 2
            GA1 = cho_solve(cho, A1)
            GA2 = cho_solve(cho, A2)
            tr_ph = np.array([tr_v1 - np.trace(GA1), tr_v2 - np.trace(GA2)])
            gt3 = gt ** 3
            B11 = np.einsum("b,bi,bj->ij", gt3 * nb, self.x1, self.x1)
            B12 = np.einsum("b,bi,bj->ij", gt3, self.x1, self.x1)
            c3 = 3.0 * c - 3.0 * c * c * nb + c ** 3 * nb ** 2
            B22 = (self.S_sum - np.einsum("b,bi,bj->ij", c3, self.x1, self.x1)) / th2 ** 3
            i11 = tr_vv11 - 2.0 * np.trace(cho_solve(cho, B11)) + np.trace(GA1 @ GA1)
            i12 = tr_vv12 - 2.0 * np.trace(cho_solve(cho, B12)) + np.trace(GA1 @ GA2)
            i22 = tr_vv22 - 2.0 * np.trace(cho_solve(cho, B22)) + np.trace(GA2 @ GA2)
            info = 0.5 * np.array([[i11, i12], [i12, i22]])
        else:
            tr_ph = np.array([tr_v1, tr_v2])
            info = 0.5 * np.array([[tr_vv11, tr_vv12], [tr_vv12, tr_vv22]])

        score = 0.5 * np.array([quad1, quad2]) - 0.5 * tr_ph
        nu_vals = np.array([tr_v1, tr_v2]) / np.sqrt(self.ranks)
        return loglik, score, info, nu_vals


def _make_objective(model, columns, kind):
    if model.template == "random_intercept" and model.r == 2:
        stats = _RandomInterceptStats(model, columns)
        return lambda theta: stats.evaluate(theta, kind)
    X = model.X if columns is None else (
        model.X[:, list(columns)] if len(list(columns)) else np.empty((model.n, 0)))
    return lambda theta: _evaluate(model, theta, X, kind)


# ---------------------------------------------------------------------------
# Public pointwise operations
# ---------------------------------------------------------------------------


def reml_loglik(model, theta):
    """Restricted log-likelihood, constant in the fixed effects."""
    loglik, _, _, _ = _evaluate(model, theta, model.X, "reml")
    return loglik


def reml_score(model, theta):
    """Gradient of the restricted log-likelihood in theta."""
    _, score, _, _ = _evaluate(model, theta, model.X, "reml")
    return score


def reml_fisher_info(model, theta):
    """Expected information: entry (i, j) equals tr(P H_i P H_j) / 2."""
    _, _, info, _ = _evaluate(model, theta, model.X, "reml")
    return info


def nu(model, theta):
    """Normalizers nu_k = tr(V^{-1} H_k) / sqrt(rank(H_k))."""
    cov = assemble_cov(model, theta)
    _, _, tr_w = _trace_products(model, cov, model.X, a=0.0, pairs=False)
    return tr_w / np.sqrt(model.ranks)


# ---------------------------------------------------------------------------
# Fisher-scoring optimizer
# ---------------------------------------------------------------------------


def _moments_start(model, columns):
    """Residual-variance moment start for the last component."""
    X = model.X if columns is None else model.X[:, list(columns)]
    y = model.y
    if X.shape[1]:
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        resid = y - X @ coef
    else:
        resid = y
    num = float(resid @ resid)
    H_r = model.components[-1]
    if X.shape[1]:
        pinv_term = np.linalg.lstsq(X.T @ X, X.T @ H_r @ X, rcond=None)[0]
        tr_mh = float(np.trace(H_r) - np.trace(pinv_term))
    else:
        tr_mh = float(np.trace(H_r))
    if num <= 0.0 or tr_mh <= 0.0:
        return None
    theta_r = num / tr_mh
    theta = np.full(model.r, 0.1 * theta_r)
    theta[-1] = theta_r
    return theta


def _fisher_step(theta, score, info):
    """Fisher-scoring direction in log(theta) coordinates."""
    s_log = theta * score
    i_log = np.outer(theta, theta) * info
    try:
        delta = np.linalg.solve(i_log + 1e-12 * np.eye(len(theta)), s_log)
    except np.linalg.LinAlgError:
        delta = np.linalg.pinv(i_log) @ s_log
    if not np.all(np.isfinite(delta)):
        return None
    big = np.abs(delta).max()
    if big > MAX_LOG_STEP:
        delta = delta * (MAX_LOG_STEP / big)
    return delta


def _run_start(objective, theta0, tol, max_iter):
    try:
        loglik, score, info, nu_vals = objective(theta0)
    except (FactorizationError, np.linalg.LinAlgError):
        return None
    if not np.isfinite(loglik):
        return None
    theta = np.asarray(theta0, dtype=float).copy()
    iterations = 0
    path = [loglik]
    for _ in range(max_iter):
        scaled = np.abs(score) / nu_vals
        if scaled.max() < tol:
            break
        delta = _fisher_step(theta, score, info)
        if delta is None:
            break
        predicted_gain = 0.5 * float((theta * score) @ delta)
        factor = 1.0
        accepted = False
        best_cand = None
        while factor * np.abs(delta).max() >= MIN_STEP:
            cand = theta * np.exp(factor * delta)
            try:
                cand_eval = objective(cand)
            except (FactorizationError, np.linalg.LinAlgError):
                factor *= 0.5
                continue
            if not np.isfinite(cand_eval[0]):
                factor *= 0.5
                continue
            if best_cand is None:
                best_cand = (cand, cand_eval)
            if cand_eval[0] > loglik:
                theta = cand
                loglik, score, info, nu_vals = cand_eval
                accepted = True
                break
            factor *= 0.5
        if not accepted and best_cand is not None:
            # Near the optimum the predicted gain drops below the
            # floating-point resolution of the objective; accept the
            # full step anyway when it strictly improves the scaled
            # score, which remains computable to much higher accuracy.
            cand, cand_eval = best_cand
            noise = 1e-9 * (1.0 + abs(loglik))
            cand_scaled = (np.abs(cand_eval[1]) / cand_eval[3]).max()
            if (predicted_gain < noise and cand_eval[0] >= loglik - noise
                    and cand_scaled < scaled.max()):
                theta = cand
                loglik, score, info, nu_vals = cand_eval
                accepted = True
        if not accepted:
            break
        path.append(loglik)
        iterations += 1
    score_norm = float((np.abs(score) / nu_vals).max())
    return {
        "theta": theta,
        "loglik": loglik,
        "score_norm": score_norm,
        "info": info,
        "nu": nu_vals,
        "converged": score_norm < tol,
        "iterations": iterations,
        "path": tuple(path),
    }


def _fit(model, columns, kind, tol, max_iter, starts):
    objective = _make_objective(model, columns, kind)
    start_list = [np.ones(model.r)]
    moments = _moments_start(model, columns)
    if moments is not None:
        start_list.append(moments)
    if starts is not None:
        start_list.extend(np.asarray(s, dtype=float) for s in starts)

    best = None
    tried = 0
    for theta0 in start_list:
        if np.any(theta0 <= 0.0) or not np.all(np.isfinite(theta0)):
            continue
        result = _run_start(objective, theta0, tol, max_iter)
        tried += 1
        if result is None:
            continue
        if best is None:
            best = result
        elif result["converged"] and not best["converged"]:
            best = result
        elif result["converged"] == best["converged"] and result["loglik"] > best["loglik"]:
            best = result

    if best is None:
        raise FactorizationError("no start could be evaluated", minor_index=-1)

    theta_hat = best["theta"]
    near = theta_hat < NEAR_BOUNDARY_RATIO * theta_hat.max()
    return ThetaEstimate(
        theta_hat=theta_hat,
        loglik=best["loglik"],
        score_norm=best["score_norm"],
        fisher_info=0.5 * (best["info"] + best["info"].T),
        nu=best["nu"],
        converged=best["converged"],
        iterations=best["iterations"],
        starts_tried=tried,
        near_boundary=near,
        loglik_path=best["path"],
    )


def fit_reml(model, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, starts=None):
    """Maximize the restricted likelihood by multi-start Fisher scoring.

    Iterates in log(theta) to keep every iterate strictly positive,
    with step halving until the objective increases. Convergence is
    declared when the nu-scaled score drops below tol; if no start
    converges, the best local result is returned with converged False.

    Args:
        model: ModelData instance.
        tol: Threshold on max_k |score_k| / nu_k.
        max_iter: Cap on accepted Fisher steps per start.
        starts: Optional extra start vectors tried after the built-in
            all-ones and moments starts.
    """
    return _fit(model, None, "reml", tol, max_iter, starts)


def profile_ml(model, columns=None, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, starts=None):
    """Profile maximum likelihood of theta over a fixed-effect subset.

    Maximizes -ln|V|/2 - (y - X_S b_S)^T V^{-1} (y - X_S b_S)/2 jointly
    with the weighted least squares coefficients of the columns in S.
    columns=None uses the full design; an empty sequence fits the
    zero-mean model. Supports the AIC-selection baseline.
    """
    if columns is not None:
        columns = tuple(int(c) for c in columns)
    return _fit(model, columns, "ml", tol, max_iter, starts)
