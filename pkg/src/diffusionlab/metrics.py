"""Measurements: exposure bias, per-step prediction error, and sample quality.

The bias measurements quantify the train/generate input mismatch two ways: a
deterministic reconstruction error that is cheap and noise-free, and a
stochastic distribution distance that reflects what sampling actually does.
The quality metrics (Frechet, energy, kNN precision/recall) are written
against small exact oracles in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps
from scipy.spatial.distance import cdist

from .errors import BudgetError, NumericError
from .models import predict_eps
from .sampling import SamplerConfig, reverse_from, reverse_step
from .schedules import predict_x0, q_sample

# -- result containers ------------------------------------------------------------


@dataclass
class BiasRow:
    t: int
    n: int
    value: float


@dataclass
class BiasTable:
    """Per-timestep bias measurements; `kind` says which protocol produced them."""

    kind: str
    rows: list = field(default_factory=list)

    @property
    def ts(self) -> np.ndarray:
        return np.array([r.t for r in self.rows])

    @property
    def values(self) -> np.ndarray:
        return np.array([r.value for r in self.rows])

    def to_csv(self, path):
        with open(path, "w") as f:
            f.write("t,n,value\n")
            for r in self.rows:
                f.write(f"{r.t},{r.n},{r.value:.8g}\n")


@dataclass
class ErrorRow:
    t: int
    n: int
    mu: float
    nu: float
    sw_stat: float | None = None
    sw_p: float | None = None
    reject: bool | None = None


@dataclass
class ErrorStats:
    """Per-timestep prediction-error moments and normality verdicts."""

    mode: str
    rows: list = field(default_factory=list)

    @property
    def ts(self) -> np.ndarray:
        return np.array([r.t for r in self.rows])

    @property
    def nus(self) -> np.ndarray:
        return np.array([r.nu for r in self.rows])

    @property
    def mean_nu(self) -> float:
        """Average error spread over the grid; a natural perturbation scale."""
        return float(np.mean(self.nus)) if self.rows else 0.0

    def to_csv(self, path):
        with open(path, "w") as f:
            f.write("t,n,mu,nu,sw_stat,sw_p,reject\n")
            for r in self.rows:
                sw = "" if r.sw_stat is None else f"{r.sw_stat:.6g}"
                p = "" if r.sw_p is None else f"{r.sw_p:.6g}"
                rej = "" if r.reject is None else str(int(r.reject))
                f.write(f"{r.t},{r.n},{r.mu:.8g},{r.nu:.8g},{sw},{p},{rej}\n")


@dataclass
class MetricReport:
    """A single scalar measurement plus its context."""

    name: str
    value: float
    n: int
    details: dict = field(default_factory=dict)


@dataclass
class NormalityVerdict:
    stat: float
    p_value: float | None
    reject: bool


@dataclass
class PrecisionRecall:
    precision: float
    recall: float
    k: int


# -- normality ----------------------------------------------------------------------


def normality_test(values, alpha: float = 0.05, method: str = "shapiro") -> NormalityVerdict:
    """Test whether `values` look Gaussian; reject at significance alpha.

    shapiro gives a p-value; anderson only compares against tabulated critical
    values, so its p_value field is None and alpha must be one of the
    tabulated levels.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if len(values) < 3:
        raise ValueError("normality test needs at least 3 values")
    if method == "shapiro":
        res = sps.shapiro(values)
        return NormalityVerdict(stat=float(res.statistic), p_value=float(res.pvalue), reject=res.pvalue < alpha)
    if method == "anderson":
        res = sps.anderson(values, dist="norm")
        levels = np.asarray(res.significance_level, dtype=np.float64) / 100.0
        match = np.nonzero(np.isclose(levels, alpha))[0]
        if len(match) == 0:
            raise ValueError(f"alpha={alpha} not in tabulated levels {levels}")
        crit = res.critical_values[match[0]]
        return NormalityVerdict(stat=float(res.statistic), p_value=None, reject=bool(res.statistic > crit))
    raise ValueError(f"unknown method {method!r}")


# -- exposure bias ---------------------------------------------------------------


def exposure_bias_deterministic(
    model,
    dataset,
    n_draws: int,
    schedule,
    rng: np.random.Generator,
    t_grid=None,
) -> BiasTable:
    """Mean per-coordinate L1 reconstruction error after a noise-free reverse walk.

    Each draw picks a data point, a timestep from t_grid (uniformly), diffuses
    to x_t, walks back deterministically to an x0 estimate, and scores
    mean(|x0 - x0_hat|) over coordinates. With data in [-1, 1] and a sane
    model the score lives in [0, 2].

    Draw order is fixed (all indices, then all timesteps, then all noise), so
    a given rng state yields one exact measurement regardless of grouping.
    """
    x_data = np.asarray(dataset.samples, dtype=np.float64)
    n_data, dim = x_data.shape
    T = len(schedule.betas)
    grid = np.asarray(t_grid if t_grid is not None else np.arange(1, T + 1), dtype=np.int64)
    if np.any(grid < 1) or np.any(grid > T):
        raise ValueError("t_grid entries must lie in 1..T")

    idx = rng.integers(0, n_data, size=n_draws)
    ts = grid[rng.integers(0, len(grid), size=n_draws)]
    eps = rng.standard_normal((n_draws, dim))

    cfg = SamplerConfig(schedule=schedule, kind="deterministic")
    table = BiasTable(kind="deterministic")
    for t in np.unique(ts):
        sel = ts == t
        x0 = x_data[idx[sel]]
        xt = q_sample(x0, int(t), eps[sel], schedule)
        x0_hat = reverse_from(model, xt, int(t), cfg).final
        delta = np.mean(np.abs(x0 - x0_hat), axis=1)
        table.rows.append(BiasRow(t=int(t), n=int(sel.sum()), value=float(np.mean(delta))))
    return table


def exposure_bias_stochastic(
    model,
    dataset,
    t_grid,
    n_chains: int,
    schedule,
    rng: np.random.Generator,
    ref_samples=None,
    metric: str = "energy",
    variance_choice: str = "posterior_small",
) -> BiasTable:
    """Distribution distance between stochastic reverse walks and real data.

    For each t, diffuse real points to x_t, run the ancestral sampler back to
    x0, and measure the distance between the reconstructed batch and a
    reference batch. t = 0 scores the undisturbed data batch itself, which
    calibrates the floor of the measurement.
    """
    x_data = np.asarray(dataset.samples, dtype=np.float64)
    n_data, dim = x_data.shape
    ref = np.asarray(ref_samples if ref_samples is not None else x_data, dtype=np.float64)
    T = len(schedule.betas)
    cfg = SamplerConfig(schedule=schedule, kind="ancestral", variance_choice=variance_choice)

    table = BiasTable(kind="stochastic")
    for t in np.asarray(t_grid, dtype=np.int64):
        idx = rng.integers(0, n_data, size=n_chains)
        x0 = x_data[idx]
        if t == 0:
            recon = x0
        else:
            if t < 1 or t > T:
                raise ValueError("t_grid entries must lie in 0..T")
            eps = rng.standard_normal((n_chains, dim))
            xt = q_sample(x0, int(t), eps, schedule)
            recon = reverse_from(model, xt, int(t), cfg, rng).final
        if metric == "energy":
            value = energy_distance(recon, ref)
        elif metric == "frechet":
            value = frechet_gaussian_distance(recon, ref)
        else:
            raise ValueError(f"unknown metric {metric!r}")
        table.rows.append(BiasRow(t=int(t), n=n_chains, value=float(value)))
    return table


# -- per-step prediction error ------------------------------------------------------


def prediction_error_stats(
    model,
    dataset,
    schedule,
    rng: np.random.Generator,
    t_stride: int = 10,
    n_samples: int = 200,
    mode: str = "generation",
    normality_n: int = 50,
    alpha: float = 0.05,
) -> ErrorStats:
    """Moments of the x0 prediction error e = x0_hat - x0 on a strided t grid.

    generation mode follows live ancestral chains (started from diffused real
    points) and evaluates the error at each grid timestep along the way;
    teacher mode evaluates on fresh forward draws at each grid point
    independently. Normality of the standardized errors is tested on a
    subsample of normality_n values per t.
    """
    if mode not in ("generation", "teacher"):
        raise ValueError("mode must be 'generation' or 'teacher'")
    x_data = np.asarray(dataset.samples, dtype=np.float64)
    n_data, dim = x_data.shape
    T = len(schedule.betas)
    if not (1 <= t_stride <= T):
        raise ValueError("t_stride must lie in 1..T")
    grid = np.arange(t_stride, T + 1, t_stride, dtype=np.int64)

    stats = ErrorStats(mode=mode)
    if mode == "teacher":
        for t in grid:
            idx = rng.integers(0, n_data, size=n_samples)
            x0 = x_data[idx]
            eps = rng.standard_normal((n_samples, dim))
            xt = q_sample(x0, int(t), eps, schedule)
            eps_hat = predict_eps(model, xt, int(t), schedule)
            x0_hat = predict_x0(xt, eps_hat, int(t), schedule)
            stats.rows.append(_error_row(int(t), (x0_hat - x0).ravel(), rng, normality_n, alpha))
        return stats

    idx = rng.integers(0, n_data, size=n_samples)
    x0 = x_data[idx]
    eps = rng.standard_normal((n_samples, dim))
    x = q_sample(x0, T, eps, schedule)
    cfg = SamplerConfig(schedule=schedule, kind="ancestral")
    grid_set = set(int(g) for g in grid)
    collected = {}
    for t in range(T, 0, -1):
        if t in grid_set:
            eps_hat = predict_eps(model, x, t, schedule)
            x0_hat = predict_x0(x, eps_hat, t, schedule)
            collected[t] = (x0_hat - x0).ravel()
        x = reverse_step(model, x, t, cfg, rng)
    for t in grid:
        stats.rows.append(_error_row(int(t), collected[int(t)], rng, normality_n, alpha))
    return stats


def _error_row(t: int, e: np.ndarray, rng, normality_n: int, alpha: float) -> ErrorRow:
    mu = float(np.mean(e))
    nu = float(np.std(e, ddof=1))
    row = ErrorRow(t=t, n=len(e), mu=mu, nu=nu)
    amax = float(np.max(np.abs(e))) if len(e) else 0.0
    if amax <= 1e-12:
        # reconstruction exact down to float rounding: nothing to test
        return row
    if nu <= 1e-13 * amax:
        raise NumericError(f"degenerate error spread at t={t}: nonzero errors with no spread")
    if len(e) >= normality_n:
        sub = rng.choice(e, size=normality_n, replace=False)
        z = (sub - mu) / nu
        verdict = normality_test(z, alpha=alpha, method="shapiro")
        row.sw_stat, row.sw_p, row.reject = verdict.stat, verdict.p_value, verdict.reject
    return row


# -- Lipschitz probe ------------------------------------------------------------------


def empirical_lipschitz(
    model,
    dataset,
    t: int,
    schedule,
    rng: np.random.Generator,
    n_pairs: int = 256,
    radius: float = 1e-3,
) -> MetricReport:
    """Finite-difference slope of the predictor around diffused data points.

    Probes ||eps_hat(x + r u) - eps_hat(x)|| / r along random unit directions
    u at points x ~ q(x_t | x0). Reports the max slope with quantiles in the
    details.
    """
    if radius <= 0:
        raise ValueError("radius must be > 0")
    x_data = np.asarray(dataset.samples, dtype=np.float64)
    n_data, dim = x_data.shape
    idx = rng.integers(0, n_data, size=n_pairs)
    eps = rng.standard_normal((n_pairs, dim))
    x = q_sample(x_data[idx], int(t), eps, schedule)
    u = rng.standard_normal((n_pairs, dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    y = x + radius * u
    fx = predict_eps(model, x, int(t), schedule)
    fy = predict_eps(model, y, int(t), schedule)
    slopes = np.linalg.norm(fy - fx, axis=1) / radius
    return MetricReport(
        name="empirical_lipschitz",
        value=float(np.max(slopes)),
        n=n_pairs,
        details={
            "t": int(t),
            "radius": radius,
            "p50": float(np.percentile(slopes, 50)),
            "p95": float(np.percentile(slopes, 95)),
            "mean": float(np.mean(slopes)),
        },
    )


# -- Gaussian fits and Frechet distance -------------------------------------------------


def fit_gaussian_stats(samples):
    """Sample mean and covariance (rows are observations)."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if n <= d:
        raise ValueError(f"need more samples ({n}) than dimensions ({d}) for a full-rank covariance")
    mu = x.mean(axis=0)
    cov = np.cov(x, rowvar=False)
    cov = np.atleast_2d(cov)
    return mu, cov


def _sym(a: np.ndarray) -> np.ndarray:
    return (a + a.T) / 2.0


def _psd_sqrt(c: np.ndarray, floor: float) -> np.ndarray:
    w, v = np.linalg.eigh(_sym(c))
    scale = max(float(np.max(np.abs(w))), 1.0)
    if float(np.min(w)) < -1e-8 * scale:
        raise NumericError(f"covariance strongly non-PSD (min eigenvalue {np.min(w):.3e})")
    w = np.maximum(w, floor if floor > 0 else 0.0)
    return (v * np.sqrt(w)) @ v.T


def frechet_gaussian_distance(a, b, eig_floor: float = 1e-10) -> float:
    """Frechet distance between Gaussian fits of two sample sets.

    Arguments may be sample arrays or precomputed (mu, cov) pairs. Covariance
    eigenvalues are floored at eig_floor before the matrix square roots; a
    cross term that stays significantly non-PSD after flooring raises
    NumericError rather than silently clamping a large negative mass.
    """
    mu1, c1 = a if isinstance(a, tuple) else fit_gaussian_stats(a)
    mu2, c2 = b if isinstance(b, tuple) else fit_gaussian_stats(b)
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    c1, c2 = np.atleast_2d(np.asarray(c1, dtype=np.float64)), np.atleast_2d(np.asarray(c2, dtype=np.float64))
    if mu1.shape != mu2.shape or c1.shape != c2.shape:
        raise ValueError("mean/covariance shapes do not match")

    s1 = _psd_sqrt(c1, eig_floor)
    inner = _sym(s1 @ c2 @ s1)
    w, _ = np.linalg.eigh(inner)
    scale = max(float(np.max(np.abs(w))), 1.0)
    if np.min(w) < -1e-8 * scale:
        raise NumericError(f"cross-covariance term strongly non-PSD (min eigenvalue {np.min(w):.3e})")
    tr_sqrt = float(np.sum(np.sqrt(np.maximum(w, 0.0))))
    diff = mu1 - mu2
    fd = float(diff @ diff + np.trace(c1) + np.trace(c2) - 2.0 * tr_sqrt)
    return max(fd, 0.0)


# -- energy distance ---------------------------------------------------------------------


def _mean_pair_dist(a: np.ndarray, b: np.ndarray, chunk: int = 2048) -> float:
    """Mean Euclidean distance over all ordered pairs, chunked to bound memory."""
    total = 0.0
    for i in range(0, len(a), chunk):
        total += float(cdist(a[i : i + chunk], b).sum())
    return total / (len(a) * len(b))


def energy_distance(a, b, chunk: int = 2048) -> float:
    """Energy distance 2 E|A-B| - E|A-A'| - E|B-B'| with V-statistic means.

    Means include the zero diagonal (all ordered pairs), so identical sample
    multisets score exactly 0.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[1] == 1:
        return _energy_stat_1d(a.ravel(), b.ravel())
    return 2.0 * _mean_pair_dist(a, b, chunk) - _mean_pair_dist(a, a, chunk) - _mean_pair_dist(b, b, chunk)


def _sorted_self_mean(x_sorted: np.ndarray) -> float:
    """V-statistic mean |x_i - x_j| for sorted x, all ordered pairs, O(n)."""
    n = len(x_sorted)
    coef = 2.0 * np.arange(n) - (n - 1)
    return float(np.sum(coef * x_sorted)) * 2.0 / (n * n)


def _sorted_cross_mean(u_sorted: np.ndarray, v: np.ndarray) -> float:
    """Mean |u_i - v_j| with u pre-sorted, O((n+m) log n)."""
    n = len(u_sorted)
    prefix = np.concatenate([[0.0], np.cumsum(u_sorted)])
    k = np.searchsorted(u_sorted, v, side="left")
    total_u = prefix[-1]
    below = v * k - prefix[k]
    above = (total_u - prefix[k]) - v * (n - k)
    return float(np.sum(below + above)) / (n * len(v))


def _energy_stat_1d(a: np.ndarray, b: np.ndarray) -> float:
    a_s, b_s = np.sort(a), np.sort(b)
    return 2.0 * _sorted_cross_mean(a_s, b_s) - _sorted_self_mean(a_s) - _sorted_self_mean(b_s)


def energy_distance_test(
    a,
    b,
    n_perms: int = 200,
    rng: np.random.Generator | None = None,
    max_pooled: int = 4000,
) -> tuple[float, float]:
    """Two-sample permutation test on the energy distance; returns (stat, p).

    p = (1 + #{perm stat >= observed}) / (n_perms + 1). One-dimensional data
    uses an O(n log n) statistic and scales to large n; higher dimensions need
    the pooled pairwise matrix and are capped at max_pooled points.
    """
    rng = rng if rng is not None else np.random.default_rng()
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError("dimension mismatch")
    n, m = len(a), len(b)

    if a.shape[1] == 1:
        av, bv = a.ravel(), b.ravel()
        observed = _energy_stat_1d(av, bv)
        pooled = np.concatenate([av, bv])
        count = 0
        for _ in range(n_perms):
            perm = rng.permutation(n + m)
            stat = _energy_stat_1d(pooled[perm[:n]], pooled[perm[n:]])
            if stat >= observed:
                count += 1
        return observed, (1 + count) / (n_perms + 1)

    if n + m > max_pooled:
        raise BudgetError(
            f"pooled size {n + m} exceeds max_pooled {max_pooled} for multi-dimensional permutation test"
        )
    pooled = np.concatenate([a, b], axis=0)
    D = cdist(pooled, pooled)
    idx = np.arange(n + m)
    observed = _energy_from_matrix(D, idx[:n], idx[n:])
    count = 0
    for _ in range(n_perms):
        perm = rng.permutation(n + m)
        if _energy_from_matrix(D, perm[:n], perm[n:]) >= observed:
            count += 1
    return observed, (1 + count) / (n_perms + 1)


def _energy_from_matrix(D: np.ndarray, ia: np.ndarray, ib: np.ndarray) -> float:
    cross = D[np.ix_(ia, ib)].mean()
    within_a = D[np.ix_(ia, ia)].mean()
    within_b = D[np.ix_(ib, ib)].mean()
    return float(2.0 * cross - within_a - within_b)


# -- kNN precision / recall -----------------------------------------------------------------


def _knn_radii(x: np.ndarray, k: int, chunk: int = 1024) -> np.ndarray:
    """Distance to the k-th nearest neighbor (excluding self) for each row."""
    n = len(x)
    radii = np.empty(n, dtype=np.float64)
    for i in range(0, n, chunk):
        d = cdist(x[i : i + chunk], x)
        part = np.partition(d, k, axis=1)
        radii[i : i + chunk] = part[:, k]
    return radii


def _any_within(queries: np.ndarray, anchors: np.ndarray, radii: np.ndarray, chunk: int = 1024) -> np.ndarray:
    out = np.empty(len(queries), dtype=bool)
    for i in range(0, len(queries), chunk):
        d = cdist(queries[i : i + chunk], anchors)
        out[i : i + chunk] = np.any(d <= radii[None, :], axis=1)
    return out


def knn_precision_recall(real, generated, k: int = 3) -> PrecisionRecall:
    """Manifold precision/recall with k-NN balls around each sample.

    precision: fraction of generated points inside some real point's k-NN
    ball; recall: fraction of real points inside some generated point's k-NN
    ball. Ball membership uses <=, so a point sitting exactly on a radius
    counts as covered.
    """
    real = np.atleast_2d(np.asarray(real, dtype=np.float64))
    generated = np.atleast_2d(np.asarray(generated, dtype=np.float64))
    if real.shape[1] != generated.shape[1]:
        raise ValueError("dimension mismatch")
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= len(real) or k >= len(generated):
        raise ValueError(f"k={k} must be smaller than both sample counts")
    real_radii = _knn_radii(real, k)
    gen_radii = _knn_radii(generated, k)
    precision = float(np.mean(_any_within(generated, real, real_radii)))
    recall = float(np.mean(_any_within(real, generated, gen_radii)))
    return PrecisionRecall(precision=precision, recall=recall, k=k)
