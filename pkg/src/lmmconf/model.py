"""Dependent linear model with a linear covariance structure.

Represents y = X b + e with Cov(e) = V(theta) = sum_k theta_k H_k, where
H_1..H_{r-1} are symmetric positive semi-definite and H_r is positive
definite. Clustered mixed-model specifications compile into this form
with block-diagonal H_k. Covariance assembly factors V(theta) by
Cholesky, per diagonal block when cluster structure is present; all
downstream quantities are computed through whitening (triangular
solves), never through explicit n x n inverses.

Blocks of equal size are stacked into 3-d arrays so factorization and
solves run as single batched LAPACK calls; a model without cluster
structure is handled as one group holding one n x n block.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_triangular
from scipy.linalg.lapack import dpotrf

SYM_RTOL = 1e-8       # relative Frobenius tolerance for component symmetry
PSD_RTOL = 1e-8       # eigenvalues >= -PSD_RTOL * ||H_k||_2 pass the PSD check
PD_RTOL = 1e-10       # smallest eigenvalue of H_r must exceed PD_RTOL * ||H_r||_2
RANK_RTOL = 1e-8      # numerical rank: eigenvalues > RANK_RTOL * eta_1(H_k)
BLOCK_ATOL = 1e-12    # allowed off-block magnitude relative to max |H_k|


class FactorizationError(ArithmeticError):
    """Cholesky factorization failed; records the offending leading minor."""

    def __init__(self, message, minor_index):
        super().__init__(message)
        self.minor_index = minor_index


@dataclass(frozen=True)
class _BlockGroup:
    """Blocks of one common size, stacked for batched linear algebra."""

    rows: np.ndarray    # (g, s) row indices of each block
    comps: tuple        # per component: (g, s, s) stacked diagonal blocks


@dataclass(frozen=True)
class ModelData:
    """Immutable model container; build through the factory functions."""

    y: np.ndarray
    X: np.ndarray
    components: tuple
    cluster_index: np.ndarray | None
    labels: tuple | None
    template: str | None
    ranks: np.ndarray
    groups: tuple

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def r(self):
        return len(self.components)

    @property
    def block_sizes(self):
        """Per-cluster sizes, or None for an unclustered model."""
        if self.cluster_index is None:
            return None
        _, counts = np.unique(self.cluster_index, return_counts=True)
        return counts

    def with_response(self, y):
        """Same model with a new response; reuses all precomputed structure."""
        y = np.asarray(y, dtype=float)
        if y.shape != (self.n,):
            raise ValueError(f"response must have length {self.n}, got shape {y.shape}")
        return replace(self, y=y)


@dataclass(frozen=True)
class CovOperator:
    """Cholesky factorization of V(theta), stored per block group."""

    theta: np.ndarray
    factors: tuple      # per group: (g, s, s) lower Cholesky factors
    groups: tuple       # matching _BlockGroup entries (row layout)
    logdet: float
    n: int

    def whiten(self, A):
        """L^{-1} A for the lower factor L of V = L L^T."""
        return self._solve(A, transpose=False)

    def solve_lower_t(self, A):
        """L^{-T} A, the adjoint solve used for residual projections."""
        return self._solve(A, transpose=True)

    def _solve(self, A, transpose):
        A = np.asarray(A, dtype=float)
        vector = A.ndim == 1
        if A.shape[0] != self.n:
            raise ValueError(f"leading dimension must be {self.n}, got {A.shape[0]}")
        if vector:
            A = A[:, None]
        out = np.empty_like(A)
        for grp, L in zip(self.groups, self.factors):
            blocks = A[grp.rows]                      # (g, s, q)
            if L.shape[0] == 1:
                sol = solve_triangular(L[0], blocks[0], lower=True,
                                       trans="T" if transpose else "N")[None]
            else:
                mats = L.transpose(0, 2, 1) if transpose else L
                sol = np.linalg.solve(mats, blocks)
            out[grp.rows] = sol
        return out[:, 0] if vector else out


def _as_sym_component(H, k, n):
    H = np.asarray(H, dtype=float)
    if H.shape != (n, n):
        raise ValueError(f"component {k} must be {n} x {n}, got shape {H.shape}")
    norm = np.linalg.norm(H)
    if norm == 0.0:
        raise ValueError(f"component {k} is identically zero")
    if np.linalg.norm(H - H.T) > SYM_RTOL * norm:
        raise ValueError(f"component {k} violates symmetry beyond relative tolerance {SYM_RTOL}")
    return 0.5 * (H + H.T)


def _cluster_runs(cluster_index, n):
    cluster_index = np.asarray(cluster_index)
    if cluster_index.shape != (n,):
        raise ValueError("cluster index must assign one label per observation")
    change = np.flatnonzero(cluster_index[1:] != cluster_index[:-1])
    starts = np.concatenate(([0], change + 1))
    stops = np.concatenate((change + 1, [n]))
    if len(np.unique(cluster_index)) != len(starts):
        raise ValueError("cluster labels must form contiguous runs")
    return starts, stops


def _make_groups(components, starts, stops):
    """Stack same-size blocks for batched factorization."""
    if starts is None:
        rows = np.arange(components[0].shape[0])[None, :]
        return (_BlockGroup(rows=rows, comps=tuple(H[None] for H in components)),)
    sizes = stops - starts
    groups = []
    for s in np.unique(sizes):
        ids = np.flatnonzero(sizes == s)
        rows = np.stack([np.arange(starts[b], stops[b]) for b in ids])
        comps = tuple(H[rows[:, :, None], rows[:, None, :]] for H in components)
        groups.append(_BlockGroup(rows=rows, comps=comps))
    return tuple(groups)


def _check_block_diagonal(components, starts, stops, n):
    mask = np.zeros((n, n), dtype=bool)
    for a, b in zip(starts, stops):
        mask[a:b, a:b] = True
    for k, H in enumerate(components):
        off = np.abs(H[~mask])
        if off.size and off.max() > BLOCK_ATOL * max(1.0, np.abs(H).max()):
            raise ValueError(f"component {k} is not block-diagonal under the cluster partition")


def _component_eigvals(groups):
    """Eigenvalues of each component, from per-block spectra."""
    r = len(groups[0].comps)
    out = []
    for k in range(r):
        vals = [np.linalg.eigvalsh(grp.comps[k]).ravel() for grp in groups]
        out.append(np.concatenate(vals))
    return out


def _finish_build(y, X, components, cluster_index, labels, template):
    y = np.asarray(y, dtype=float).ravel()
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("design matrix must be two-dimensional")
    n, p = X.shape
    if y.shape[0] != n:
        raise ValueError(f"response length {y.shape[0]} does not match design rows {n}")
    if not components:
        raise ValueError("at least one covariance component is required")
    if p >= n:
        raise ValueError(f"model requires p < n, got p={p}, n={n}")
    if np.linalg.matrix_rank(X) != p:
        raise ValueError("design matrix is rank deficient")

    components = tuple(_as_sym_component(H, k, n) for k, H in enumerate(components))

    starts = stops = None
    if cluster_index is not None:
        cluster_index = np.asarray(cluster_index)
        starts, stops = _cluster_runs(cluster_index, n)
        _check_block_diagonal(components, starts, stops, n)

    groups = _make_groups(components, starts, stops)
    eigvals = _component_eigvals(groups)

    r = len(components)
    ranks = np.empty(r, dtype=int)
    for k, vals in enumerate(eigvals):
        top = vals.max()
        spectral = np.abs(vals).max()
        if vals.min() < -PSD_RTOL * spectral:
            raise ValueError(f"component {k} is not positive semi-definite")
        if k == r - 1 and vals.min() <= PD_RTOL * spectral:
            raise ValueError("last component must be positive definite")
        ranks[k] = int(np.count_nonzero(vals > RANK_RTOL * top))

    if labels is not None:
        labels = tuple(labels)
        if len(labels) != p:
            raise ValueError(f"expected {p} column labels, got {len(labels)}")

    return ModelData(y=y, X=X, components=components, cluster_index=cluster_index,
                     labels=labels, template=template, ranks=ranks, groups=groups)


def build_from_components(y, X, components, labels=None):
    """Model from an explicit list of covariance component matrices."""
    return _finish_build(y, X, components, None, labels, None)


def build_from_clustered(y_blocks, X_blocks, Z_blocks, psi_templates, omega_templates,
                         labels=None, template=None):
    """Compile a clustered mixed-model specification into component form.

    The covariance of cluster i is Z_i Psi(theta) Z_i^T + Omega_i(theta)
    with both templates linear in theta: Psi(theta) = sum_k theta_k P_k
    and Omega_i(theta) = sum_k theta_k O_ik. Component k of the
    compiled model is blockdiag(Z_i P_k Z_i^T + O_ik), so
    V(theta) = sum_k theta_k H_k holds exactly for every theta.

    Args:
        y_blocks: Per-cluster response vectors, stacked in order.
        X_blocks: Per-cluster fixed-effect designs.
        Z_blocks: Per-cluster random-effect designs, or None when the
            specification carries no random effects.
        psi_templates: Length-r sequence of q x q coefficient matrices
            of theta_k in Psi; None entries contribute nothing.
        omega_templates: Length-r sequence; each entry is None, the
            string "identity" (Omega_ik = I_{n_i}), or a list of
            per-cluster matrices.
        labels: Optional fixed-effect column names.
        template: Optional template tag carried on the model.
    """
    m = len(y_blocks)
    if m == 0:
        raise ValueError("at least one cluster is required")
    if len(X_blocks) != m or (Z_blocks is not None and len(Z_blocks) != m):
        raise ValueError("per-cluster inputs must have equal length")
    if len(psi_templates) != len(omega_templates):
        raise ValueError("psi and omega templates must cover the same components")
    r = len(psi_templates)
    if r == 0:
        raise ValueError("at least one covariance component template is required")

    sizes = [len(np.asarray(yb).ravel()) for yb in y_blocks]
    if any(s == 0 for s in sizes):
        raise ValueError("clusters must be nonempty")
    n = int(np.sum(sizes))

    y = np.concatenate([np.asarray(b, dtype=float).ravel() for b in y_blocks])
    X = np.vstack([np.asarray(b, dtype=float) for b in X_blocks])
    if X.shape[0] != n:
        raise ValueError("stacked design rows do not match stacked response length")

    Zs = None
    if Z_blocks is not None:
        Zs = [np.asarray(Z, dtype=float) for Z in Z_blocks]
        q = Zs[0].shape[1]
        for i, Z in enumerate(Zs):
            if Z.shape != (sizes[i], q):
                raise ValueError(f"random-effect design of cluster {i} has shape {Z.shape}, "
                                 f"expected ({sizes[i]}, {q})")

    offsets = np.concatenate(([0], np.cumsum(sizes)))
    components = []
    for k in range(r):
        H = np.zeros((n, n))
        psi_k = psi_templates[k]
        omega_k = omega_templates[k]
        if psi_k is None and omega_k is None:
            raise ValueError(f"component {k} has neither a Psi nor an Omega template")
        for i in range(m):
            a, b = offsets[i], offsets[i + 1]
            if psi_k is not None:
                if Zs is None:
                    raise ValueError("Psi template given but no random-effect designs")
                H[a:b, a:b] += Zs[i] @ np.asarray(psi_k, dtype=float) @ Zs[i].T
            if omega_k is not None:
                if isinstance(omega_k, str):
                    if omega_k != "identity":
                        raise ValueError(f"unknown omega template shorthand {omega_k!r}")
                    H[a:b, a:b] += np.eye(sizes[i])
                else:
                    O = np.asarray(omega_k[i], dtype=float)
                    if O.shape != (sizes[i], sizes[i]):
                        raise ValueError(f"omega template of cluster {i} has shape {O.shape}, "
                                         f"expected ({sizes[i]}, {sizes[i]})")
                    H[a:b, a:b] += O
        components.append(H)

    cluster_index = np.repeat(np.arange(m), sizes)
    return _finish_build(y, X, components, cluster_index, labels, template)


def random_intercept_model(y, X, clusters, labels=None):
    """Random-intercept model: one shared intercept deviation per cluster.

    Components are H_1 = blockdiag(ones outer ones) and H_2 = I, so
    theta = (cluster variance, residual variance). Rows must be grouped
    by cluster (contiguous runs).
    """
    y = np.asarray(y, dtype=float).ravel()
    X = np.asarray(X, dtype=float)
    starts, stops = _cluster_runs(np.asarray(clusters), len(y))
    y_blocks = [y[a:b] for a, b in zip(starts, stops)]
    X_blocks = [X[a:b] for a, b in zip(starts, stops)]
    Z_blocks = [np.ones((b - a, 1)) for a, b in zip(starts, stops)]
    return build_from_clustered(
        y_blocks, X_blocks, Z_blocks,
        psi_templates=[np.array([[1.0]]), None],
        omega_templates=[None, "identity"],
        labels=labels, template="random_intercept")


def assemble_cov(model, theta):
    """Factor V(theta) = sum_k theta_k H_k by (blockwise) Cholesky.

    Raises FactorizationError with the offending leading minor index if
    V(theta) is not numerically positive definite; no jitter is applied.
    """
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.shape[0] != model.r:
        raise ValueError(f"theta must have length {model.r}, got {theta.shape[0]}")
    if np.any(theta <= 0.0):
        raise ValueError("all covariance parameters must be strictly positive")

    factors = []
    logdet = 0.0
    for grp in model.groups:
        V = sum(t * Hg for t, Hg in zip(theta, grp.comps))
        try:
            L = np.linalg.cholesky(V)
        except np.linalg.LinAlgError:
            _raise_factorization_error(V, grp)
        factors.append(L)
        diag = np.diagonal(L, axis1=1, axis2=2)
        logdet += 2.0 * float(np.sum(np.log(diag)))
    return CovOperator(theta=theta, factors=tuple(factors), groups=model.groups,
                       logdet=logdet, n=model.n)


def _raise_factorization_error(V_stack, grp):
    for b in range(V_stack.shape[0]):
        _, info = dpotrf(V_stack[b], lower=1)
        if info > 0:
            global_index = int(grp.rows[b, info - 1]) + 1
            raise FactorizationError(
                f"covariance factorization failed at leading minor {global_index}",
                minor_index=global_index)
    raise FactorizationError("covariance factorization failed", minor_index=-1)


def whiten(cov, A):
    """L^{-1} A, so that ||whiten(cov, v)||^2 = v^T V^{-1} v."""
    return cov.whiten(A)


def compute_C(model, theta):
    """Whitened design Gram matrix X^T V(theta)^{-1} X / n."""
    cov = assemble_cov(model, theta)
    Xt = cov.whiten(model.X)
    C = Xt.T @ Xt / model.n
    return 0.5 * (C + C.T)
