"""Monte Carlo coverage engine for the random-intercept design.

Generates the study design once per configuration, simulates responses
cell by cell over a grid of true coefficient vectors, and records the
empirical coverage of each requested confidence-set construction.
Per-replication randomness comes from a splittable seed sequence keyed
by (base seed, cell index, replication index), so results are
byte-identical regardless of execution order and worker count.
"""

import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from itertools import product

import numpy as np

from .baselines import aic_select, aic_wls_set, naive_lasso_set, wls_ellipsoid
from .confset import build_ellipsoid, contains
from .lasso import fit_lasso
from .model import FactorizationError, random_intercept_model
from .reml import fit_reml

METHODS = ("lasso_uniform", "wls", "aic_wls", "naive_lasso")
FAILURE_FLAG_FRACTION = 0.01


@dataclass(frozen=True)
class SimConfig:
    """Simulation study configuration; defaults mirror the reference design."""

    m: int = 20
    n_i: object = 20                 # balanced size or per-cluster sequence
    sigma_u: float = 4.0
    sigma_v: float = 4.0
    p: int = 2
    x_dist_var: float = 4.0
    lam: object = "sqrt_n_over_2"    # rule name or explicit penalty vector
    grid: tuple = None               # per-axis (lo, hi, points); None -> (-4, 4, 81) each
    reps: int = 2000
    alpha: float = 0.05
    seed: int = 0
    methods: tuple = METHODS
    theta_mode: str = "estimated"    # "estimated" (REML) or "oracle"

    def validate(self):
        if self.m < 1:
            raise ValueError("cluster count must be positive")
        if self.reps < 1:
            raise ValueError("at least one replication is required")
        if self.sigma_u <= 0.0 or self.sigma_v <= 0.0:
            raise ValueError("standard deviations must be positive")
        if self.p < 1:
            raise ValueError("coefficient dimension must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if not self.methods:
            raise ValueError("at least one method is required")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods: {sorted(unknown)}")
        if self.theta_mode not in ("estimated", "oracle"):
            raise ValueError(f"unknown theta mode {self.theta_mode!r}")
        if len(self.grid_axes()) != self.p:
            raise ValueError(f"grid must provide {self.p} axes")

    def cluster_sizes(self):
        if np.isscalar(self.n_i):
            return np.full(self.m, int(self.n_i))
        sizes = np.asarray(self.n_i, dtype=int)
        if sizes.shape != (self.m,):
            raise ValueError(f"per-cluster sizes must have length {self.m}")
        return sizes

    @property
    def n(self):
        return int(self.cluster_sizes().sum())

    @property
    def theta0(self):
        return np.array([self.sigma_v ** 2, self.sigma_u ** 2])

    def grid_axes(self):
        grid = self.grid if self.grid is not None else ((-4.0, 4.0, 81),) * self.p
        return tuple((float(lo), float(hi), int(pts)) for lo, hi, pts in grid)

    def lambda_vector(self):
        if isinstance(self.lam, str):
            if self.lam != "sqrt_n_over_2":
                raise ValueError(f"unknown penalty rule {self.lam!r}")
            return np.full(self.p, np.sqrt(self.n) / 2.0)
        lam = np.asarray(self.lam, dtype=float).ravel()
        if lam.shape != (self.p,):
            raise ValueError(f"penalty vector must have length {self.p}")
        return lam


@dataclass(frozen=True)
class CoverageRecord:
    beta0: tuple
    method: str
    coverage: float
    mc_se: float
    reps: int
    failures: int
    seed: int

    @property
    def flagged(self):
        """True when failed replications reached the reporting threshold."""
        total = self.reps + self.failures
        return self.failures >= FAILURE_FLAG_FRACTION * total


@dataclass(frozen=True)
class CoverageGrid:
    records: tuple
    design_digest: str


def _design_seed(config_seed):
    return np.random.SeedSequence(entropy=config_seed, spawn_key=(0,))


def _rep_seed(config_seed, cell_index, rep_index):
    return np.random.SeedSequence(entropy=config_seed, spawn_key=(1, cell_index, rep_index))


def gen_design(config, seed):
    """Draw the fixed design once and build the model skeleton.

    Covariate entries are independent centered normals with variance
    x_dist_var, shared across every cell and replication of the study.
    """
    sizes = config.cluster_sizes()
    n = int(sizes.sum())
    rng = np.random.default_rng(_design_seed(seed))
    X = rng.normal(0.0, np.sqrt(config.x_dist_var), size=(n, config.p))
    clusters = np.repeat(np.arange(config.m), sizes)
    return random_intercept_model(np.zeros(n), X, clusters)


def simulate_response(skeleton, beta0, theta0, seed):
    """One draw of y = X beta0 + Z v + u from the random-intercept model.

    theta0 = (cluster variance, residual variance); seed may be an
    integer, a SeedSequence, or a Generator and fully determines the
    output.
    """
    rng = np.random.default_rng(seed)
    sizes = skeleton.block_sizes
    v = rng.normal(0.0, np.sqrt(theta0[0]), size=len(sizes))
    u = rng.normal(0.0, np.sqrt(theta0[1]), size=skeleton.n)
    beta0 = np.asarray(beta0, dtype=float)
    return skeleton.X @ beta0 + np.repeat(v, sizes) + u


def coverage_cell(skeleton, beta0, config, cell_index=0):
    """Empirical coverage of every requested method at one true beta0.

    Replications with a non-converged REML fit are excluded from the
    hit counts and tallied as failures; the per-record flagged property
    trips once failures reach one percent of the attempted
    replications.
    """
    beta0 = np.asarray(beta0, dtype=float)
    theta0 = config.theta0
    lam = config.lambda_vector()
    alpha = config.alpha
    methods = tuple(config.methods)

    hits = dict.fromkeys(methods, 0)
    failures = 0
    effective = 0

    for rep in range(config.reps):
        rng = np.random.default_rng(_rep_seed(config.seed, cell_index, rep))
        y = simulate_response(skeleton, beta0, theta0, rng)
        model = skeleton.with_response(y)

        if config.theta_mode == "oracle":
            theta_hat = theta0
        else:
            try:
                est = fit_reml(model)
            except (FactorizationError, np.linalg.LinAlgError):
                failures += 1
                continue
            if not est.converged:
                failures += 1
                continue
            theta_hat = est.theta_hat

        lasso_sol = None
        if "lasso_uniform" in methods or "naive_lasso" in methods:
            lasso_sol = fit_lasso(model, theta_hat, lam)

        effective += 1
        for method in methods:
            if method == "lasso_uniform":
                ell = build_ellipsoid(model, theta_hat, lasso_sol, lam, alpha)
                hit = contains(ell, beta0)
            elif method == "wls":
                hit = contains(wls_ellipsoid(model, theta_hat, alpha), beta0)
            elif method == "naive_lasso":
                hit = contains(naive_lasso_set(model, theta_hat, lasso_sol, alpha), beta0)
            elif method == "aic_wls":
                selection = aic_select(model)
                hit = aic_wls_set(model, selection, alpha).contains(beta0)
            hits[method] += bool(hit)

    cell_seed = int(_rep_seed(config.seed, cell_index, 0).generate_state(1)[0])
    records = []
    for method in methods:
        coverage = hits[method] / effective if effective else float("nan")
        mc_se = float(np.sqrt(coverage * (1.0 - coverage) / effective)) if effective else float("nan")
        records.append(CoverageRecord(
            beta0=tuple(float(b) for b in beta0),
            method=method,
            coverage=float(coverage),
            mc_se=mc_se,
            reps=effective,
            failures=failures,
            seed=cell_seed,
        ))
    return records


def grid_cells(config):
    """Row-major Cartesian product of the per-axis grids."""
    axes = [np.linspace(lo, hi, pts) for lo, hi, pts in config.grid_axes()]
    return [tuple(float(v) for v in cell) for cell in product(*axes)]


_WORKER_STATE = {}


def _init_worker(skeleton, config):
    _WORKER_STATE["skeleton"] = skeleton
    _WORKER_STATE["config"] = config


def _run_cell(task):
    cell_index, beta0 = task
    return coverage_cell(_WORKER_STATE["skeleton"], beta0,
                         _WORKER_STATE["config"], cell_index)


def run_grid(config, threads=1):
    """Coverage grid over the full Cartesian product of beta0 cells.

    Cells are independent tasks; with threads > 1 they are distributed
    over a process pool. Output is identical for every worker count.
    """
    config.validate()
    skeleton = gen_design(config, config.seed)
    cells = grid_cells(config)
    tasks = list(enumerate(cells))

    if threads and threads > 1:
        with ProcessPoolExecutor(max_workers=threads, initializer=_init_worker,
                                 initargs=(skeleton, config)) as pool:
            per_cell = list(pool.map(_run_cell, tasks))
    else:
        _init_worker(skeleton, config)
        per_cell = [_run_cell(t) for t in tasks]

    records = tuple(rec for cell_records in per_cell for rec in cell_records)
    digest = hashlib.sha256(np.ascontiguousarray(skeleton.X).tobytes()).hexdigest()[:16]
    return CoverageGrid(records=records, design_digest=digest)


def grid_to_csv(grid, p):
    """Render a CoverageGrid as CSV text (full float precision, LF lines)."""
    header = [f"beta_{j + 1}" for j in range(p)]
    header += ["method", "coverage", "mc_se", "reps", "failures", "seed"]
    lines = [",".join(header)]
    for rec in grid.records:
        row = [repr(b) for b in rec.beta0]
        row += [rec.method, repr(rec.coverage), repr(rec.mc_se),
                str(rec.reps), str(rec.failures), str(rec.seed)]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def write_grid_csv(grid, path, p):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(grid_to_csv(grid, p))
