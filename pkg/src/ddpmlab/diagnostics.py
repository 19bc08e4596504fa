"""Monte Carlo and geometric verifiers for the posterior-shrinkage story.

Everything here is reported in forward time u (noise level), where the
posterior trace curve u -> E[Tr Cov(X0 | X_u)] is non-decreasing; that is
the directly assertable form of the shrinkage monotonicity.  The module
also evaluates the posterior-size envelope min(E||X0||^2, (e^{2u}-1) k log k),
the localization identity tying E||Cov||_F^2 to the trace slope, greedy
covering counts for intrinsic-dimension sanity, and an energy-distance
two-sample test for distribution-level checks where no closed form exists.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .schedules import sigma_sq
from .tables import write_csv

__all__ = [
    "TraceCurve",
    "MonotoneReport",
    "LocalizationReport",
    "EnergyTestResult",
    "mc_mean_trace",
    "trace_curve",
    "check_trace_monotone",
    "posvar_bound_ratio",
    "localization_residual",
    "greedy_cover",
    "cover_curve",
    "energy_distance",
    "energy_test",
]


def _data(x):
    from .sampler import SampleBatch

    if isinstance(x, SampleBatch):
        return x.data
    return np.atleast_2d(np.asarray(x, dtype=float))


def mc_mean_trace(target, u, n, seed):
    """Monte Carlo estimate of E[Tr Cov(X0 | X_u)] with its standard error."""
    from .targets import forward_sample

    if not u > 0:
        raise ValueError("noise level must be positive")
    batch = forward_sample(target, u, n, seed)
    vals = np.atleast_1d(target.posterior_cov_trace(u, batch.data))
    stderr = float(vals.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return float(vals.mean()), stderr


@dataclass
class TraceCurve:
    u: np.ndarray
    estimates: np.ndarray
    stderrs: np.ndarray
    n: int
    seed: int

    def rows(self):
        return [
            {"u": float(u), "estimate": float(e), "stderr": float(s),
             "n": self.n, "seed": self.seed}
            for u, e, s in zip(self.u, self.estimates, self.stderrs)
        ]

    def to_csv(self, path):
        write_csv(path, ["u", "estimate", "stderr", "n", "seed"], self.rows())


def trace_curve(target, grid, n, seed) -> TraceCurve:
    """Estimate the trace curve on an increasing grid, one substream per point."""
    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be increasing in forward time")
    est = np.empty(grid.size)
    se = np.empty(grid.size)
    for j, u in enumerate(grid):
        est[j], se[j] = mc_mean_trace(target, float(u), n, seed=(seed, j))
    return TraceCurve(u=grid, estimates=est, stderrs=se, n=n, seed=seed)


@dataclass
class MonotoneReport:
    passed: bool
    curve: TraceCurve
    worst_margin: float  # most negative slack-adjusted increment

    def __bool__(self):
        return self.passed


def check_trace_monotone(target, grid, n, seed, slack: float = 4.0) -> MonotoneReport:
    """One-sided monotonicity check with statistical slack.

    Passes when every increment satisfies e(u_{j+1}) >= e(u_j) - slack * s_j
    with s_j the combined standard error of the two estimates.
    """
    curve = trace_curve(target, grid, n, seed)
    inc = np.diff(curve.estimates)
    combined = np.sqrt(curve.stderrs[1:] ** 2 + curve.stderrs[:-1] ** 2)
    margins = inc + slack * combined
    worst = float(margins.min()) if margins.size else 0.0
    return MonotoneReport(passed=bool(np.all(margins >= 0.0)), curve=curve, worst_margin=worst)


def posvar_bound_ratio(target, u, k_declared, n, seed):
    """Estimated trace over min(E||X0||^2, (e^{2u} - 1) k log k).

    The k log k branch is vacuous at k = 1, so k_declared >= 2 is required.
    """
    if k_declared < 2:
        raise ValueError("posterior-size envelope needs a declared k >= 2")
    est, _ = mc_mean_trace(target, u, n, seed)
    envelope = min(
        target.second_moment(), math.expm1(2.0 * u) * k_declared * math.log(k_declared)
    )
    if envelope == 0.0:  # degenerate target at the origin
        return 0.0 if est == 0.0 else math.inf
    return est / envelope


@dataclass
class LocalizationReport:
    lhs: float                 # MC mean of ||Cov||_F^2 at level u
    rhs: float                 # scaled central difference of the trace curve
    residual: float
    rel_residual: float        # residual / max(|lhs|, tiny)
    sigma_residual: float      # residual / combined paired standard error
    combined_stderr: float


def localization_residual(target, u, h, n, seed) -> LocalizationReport:
    """Check E||Cov||_F^2 = sigma_u^4 e^{2u} / 2 * d/du E[Tr Cov] by coupled MC.

    The same (X0, W) pair generates the corrupted points at u - h, u and
    u + h, so the residual is a paired statistic whose standard error stays
    finite as h shrinks; the h^2 truncation error of the central difference
    is far below any tolerance used here.
    """
    if not (u - h > 0 and h > 0):
        raise ValueError("need 0 < h < u")
    rng = np.random.default_rng(seed)
    x0 = target.sample_clean(n, rng)
    w = rng.standard_normal(x0.shape)

    def corrupt(t):
        return math.exp(-t) * x0 + math.sqrt(sigma_sq(t)) * w

    frob = np.atleast_1d(target.posterior_frob_sq(u, corrupt(u)))
    tr_plus = np.atleast_1d(target.posterior_cov_trace(u + h, corrupt(u + h)))
    tr_minus = np.atleast_1d(target.posterior_cov_trace(u - h, corrupt(u - h)))
    scale = sigma_sq(u) ** 2 * math.exp(2.0 * u) / 2.0
    rhs_vals = scale * (tr_plus - tr_minus) / (2.0 * h)
    diff = frob - rhs_vals
    lhs = float(frob.mean())
    rhs = float(rhs_vals.mean())
    residual = abs(float(diff.mean()))
    combined = float(diff.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return LocalizationReport(
        lhs=lhs,
        rhs=rhs,
        residual=residual,
        rel_residual=residual / max(abs(lhs), 1e-300),
        sigma_residual=residual / combined if combined > 0 else (0.0 if residual == 0 else math.inf),
        combined_stderr=combined,
    )


def greedy_cover(points, eps0):
    """Farthest-point cover count at radius eps0.

    Points are pre-sorted lexicographically so the center sequence, and
    hence the count, is a pure function of the point set.  The returned
    count upper-bounds the covering number at scale eps0 and lower-bounds
    it at scale eps0/2 (net duality).
    """
    if not eps0 > 0:
        raise ValueError("covering radius must be positive")
    pts = _data(points)
    order = np.lexsort(pts.T[::-1])
    pts = pts[order]
    dist = np.linalg.norm(pts - pts[0], axis=1)
    count = 1
    while dist.max() > eps0:
        center = pts[int(np.argmax(dist))]
        dist = np.minimum(dist, np.linalg.norm(pts - center, axis=1))
        count += 1
    return count


def cover_curve(points, eps_grid, n=None, seed=None):
    """Cover counts over a radius grid, as CSV-ready rows."""
    pts = _data(points)
    rows = []
    for eps0 in eps_grid:
        count = greedy_cover(pts, float(eps0))
        rows.append({
            "eps0": float(eps0), "estimate": count, "stderr": 0.0,
            "n": pts.shape[0] if n is None else n, "seed": -1 if seed is None else seed,
        })
    return rows


def _pair_sums(dist, idx_a, idx_b):
    row_sums = dist[idx_a].sum(axis=0)
    s_aa = float(row_sums[idx_a].sum())
    s_ab = float(row_sums[idx_b].sum())
    return s_aa, s_ab


def energy_distance(a, b, block: int = 2048):
    """Energy statistic 2 E||A - B|| - E||A - A'|| - E||B - B'||.

    Within-sample means exclude self-pairs (U-statistic); distances are
    accumulated in fixed blocks so memory stays bounded for large batches.
    """
    xa, xb = _data(a), _data(b)
    if xa.shape[1] != xb.shape[1]:
        raise ValueError("batches must share a dimension")
    na, nb = len(xa), len(xb)

    def mean_cross(x, y):
        total = 0.0
        for lo in range(0, len(x), block):
            total += cdist(x[lo : lo + block], y).sum()
        return total / (len(x) * len(y))

    def mean_within(x):
        n = len(x)
        if n < 2:
            return 0.0
        total = 0.0
        for lo in range(0, n, block):
            total += cdist(x[lo : lo + block], x).sum()
        return total / (n * (n - 1))  # diagonal contributes zero

    return 2.0 * mean_cross(xa, xb) - mean_within(xa) - mean_within(xb)


@dataclass
class EnergyTestResult:
    statistic: float
    p_value: float
    null_q95: float
    null_q99: float
    n_used: int


def energy_test(a, b, n_perm: int = 200, max_n: int = 1500, seed: int = 0) -> EnergyTestResult:
    """Permutation two-sample energy test.

    Batches larger than max_n are deterministically subsampled so the
    pooled distance matrix stays small; the permutation null is computed by
    reshuffling labels over that pool.
    """
    rng = np.random.default_rng(seed)
    xa, xb = _data(a), _data(b)
    if len(xa) > max_n:
        xa = xa[rng.choice(len(xa), size=max_n, replace=False)]
    if len(xb) > max_n:
        xb = xb[rng.choice(len(xb), size=max_n, replace=False)]
    na, nb = len(xa), len(xb)
    pool = np.vstack([xa, xb])
    dist = cdist(pool, pool)

    def stat(idx_a, idx_b):
        s_aa, s_ab = _pair_sums(dist, idx_a, idx_b)
        s_bb = dist.sum() - 2.0 * s_ab - s_aa
        m_ab = s_ab / (na * nb)
        m_aa = s_aa / (na * (na - 1)) if na > 1 else 0.0
        m_bb = s_bb / (nb * (nb - 1)) if nb > 1 else 0.0
        return 2.0 * m_ab - m_aa - m_bb

    labels = np.arange(na + nb)
    observed = stat(labels[:na], labels[na:])
    null = np.empty(n_perm)
    for p in range(n_perm):
        perm = rng.permutation(na + nb)
        null[p] = stat(perm[:na], perm[na:])
    p_value = float((1 + np.sum(null >= observed)) / (n_perm + 1))
    return EnergyTestResult(
        statistic=float(observed),
        p_value=p_value,
        null_q95=float(np.quantile(null, 0.95)),
        null_q99=float(np.quantile(null, 0.99)),
        n_used=na + nb,
    )
