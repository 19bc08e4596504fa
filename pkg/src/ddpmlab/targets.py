"""Analytic target distributions and their exact denoising oracles.

Each target knows its own law under the forward corruption
x -> e^{-t} x0 + sigma(t) W and exposes closed-form posterior quantities of
x0 given the corrupted point:

    posterior_mean(t, x)       E[X0 | X_t = x]
    posterior_cov_trace(t, x)  Tr Cov[X0 | X_t = x]
    score(t, x)                grad log q_t(x), via the posterior-mean identity
                               s = (e^{-t} mu - x) / sigma^2

Two families are provided.  A PointCloud is a weighted empirical measure
whose corrupted law is a Gaussian mixture; posterior weights are computed
with log-sum-exp so that queries far from the support never underflow to
non-finite values.  A SubspaceGaussian places an isotropic Gaussian of
per-coordinate scale sigma0 on a k-dimensional linear subspace; everything
is a one-line conjugate-Gaussian formula there.

Score oracles wrap a target and optionally inject a controlled per-step
error whose schedule-weighted mean square equals a declared budget.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .sampler import SampleBatch
from .schedules import Schedule, sigma_sq

__all__ = [
    "PointCloud",
    "SubspaceGaussian",
    "ExactScoreOracle",
    "PerturbedScoreOracle",
    "perturb",
    "forward_sample",
    "mixture_score",
    "make_point_cloud",
    "point_cloud_from_csv",
    "target_from_config",
    "GENERATORS",
]

# queries are processed in row blocks so the (block, n_points) kernel matrix
# stays modest regardless of batch size
_BLOCK_ELEMENTS = 4_000_000


def _as_batch(x, dim):
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"expected points of dimension {dim}")
    return x, squeeze


def _check_time(t):
    t = float(t)
    if not t > 0:
        raise ValueError("posterior quantities need a strictly positive time")
    return t


class PointCloud:
    """Weighted point set; the corrupted law is an n_points-component mixture.

    ``intrinsic_dim`` and ``radius`` are bookkeeping for diagnostics: the
    sampler itself never reads them.
    """

    def __init__(self, points, weights=None, intrinsic_dim=0, radius=None):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        m = points.shape[0]
        if weights is None:
            weights = np.full(m, 1.0 / m)
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (m,):
            raise ValueError("one weight per point required")
        if np.any(weights < 0):
            raise ValueError("weights must be nonnegative")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1 within 1e-12")
        norms = np.linalg.norm(points, axis=1)
        if radius is None:
            radius = float(norms.max())
        elif norms.max() > radius * (1.0 + 1e-12):
            raise ValueError("a point lies outside the declared radius")
        self.points = points
        self.weights = weights
        self.intrinsic_dim = int(intrinsic_dim)
        self.radius = float(radius)
        self._sq_norms = np.einsum("md,md->m", points, points)
        self._log_w = np.where(weights > 0, np.log(np.maximum(weights, 1e-300)), -np.inf)

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def n_points(self):
        return self.points.shape[0]

    def second_moment(self):
        """E ||X0||^2 = sum_i w_i ||x_i||^2."""
        return float(self.weights @ self._sq_norms)

    def sample_clean(self, n, rng):
        idx = rng.choice(self.n_points, size=n, p=self.weights)
        return self.points[idx]

    def _responsibilities(self, t, x):
        """Posterior weights of each support point given the corrupted query.

        Row q of the result is softmax_i( log w_i - ||x_q - e^{-t} p_i||^2 / (2 sigma^2) );
        the ||x_q||^2 term is constant per row and dropped before the softmax.
        """
        c = math.exp(-t)
        s2 = sigma_sq(t)
        logits = self._log_w + (c * (x @ self.points.T) - 0.5 * c * c * self._sq_norms) / s2
        logits -= logits.max(axis=1, keepdims=True)
        resp = np.exp(logits)
        resp /= resp.sum(axis=1, keepdims=True)
        return resp

    def _blocks(self, x):
        step = max(1, _BLOCK_ELEMENTS // self.n_points)
        for lo in range(0, x.shape[0], step):
            yield lo, x[lo : lo + step]

    def posterior_mean(self, t, x):
        t = _check_time(t)
        x, squeeze = _as_batch(x, self.dim)
        out = np.empty_like(x)
        for lo, xb in self._blocks(x):
            out[lo : lo + xb.shape[0]] = self._responsibilities(t, xb) @ self.points
        return out[0] if squeeze else out

    def posterior_cov_trace(self, t, x):
        t = _check_time(t)
        x, squeeze = _as_batch(x, self.dim)
        out = np.empty(x.shape[0])
        for lo, xb in self._blocks(x):
            resp = self._responsibilities(t, xb)
            mu = resp @ self.points
            tr = resp @ self._sq_norms - np.einsum("qd,qd->q", mu, mu)
            out[lo : lo + xb.shape[0]] = np.maximum(tr, 0.0)
        return float(out[0]) if squeeze else out

    def posterior_cov(self, t, x):
        """Full posterior covariance, one (d, d) matrix per query row."""
        t = _check_time(t)
        x, squeeze = _as_batch(x, self.dim)
        resp = self._responsibilities(t, x)
        mu = resp @ self.points
        cov = np.einsum("qm,mi,mj->qij", resp, self.points, self.points)
        cov -= np.einsum("qi,qj->qij", mu, mu)
        return cov[0] if squeeze else cov

    def posterior_frob_sq(self, t, x):
        """||Cov[X0 | X_t = x]||_F^2 via the support Gram matrix."""
        t = _check_time(t)
        x, squeeze = _as_batch(x, self.dim)
        gram_sq = (self.points @ self.points.T) ** 2
        out = np.empty(x.shape[0])
        for lo, xb in self._blocks(x):
            resp = self._responsibilities(t, xb)
            mu = resp @ self.points
            proj = mu @ self.points.T
            term1 = np.einsum("qm,mn,qn->q", resp, gram_sq, resp)
            term2 = np.einsum("qm,qm->q", resp, proj**2)
            mu_sq = np.einsum("qd,qd->q", mu, mu)
            out[lo : lo + xb.shape[0]] = np.maximum(term1 - 2.0 * term2 + mu_sq**2, 0.0)
        return float(out[0]) if squeeze else out

    def score(self, t, x):
        t = _check_time(t)
        x, squeeze = _as_batch(x, self.dim)
        s2 = sigma_sq(t)
        mu = self.posterior_mean(t, x if not squeeze else x[0])
        out = (math.exp(-t) * np.atleast_2d(mu) - x) / s2
        return out[0] if squeeze else out

    def describe(self):
        digest = hashlib.sha256(np.ascontiguousarray(self.points).tobytes()).hexdigest()[:12]
        return {
            "kind": "point-cloud",
            "n_points": self.n_points,
            "dim": self.dim,
            "intrinsic_dim": self.intrinsic_dim,
            "radius": self.radius,
            "points_sha": digest,
        }


class SubspaceGaussian:
    """Isotropic Gaussian of scale sigma0 on a k-dimensional linear subspace.

    X0 = sigma0 * U z with orthonormal U (d, k) and standard normal z.  The
    corrupted covariance is sigma^2 I + e^{-2t} sigma0^2 U U^T, so posterior
    quantities reduce to a scalar gain
    gain(t) = sigma0^2 / (sigma^2 + e^{-2t} sigma0^2); with sigma0 = 1 the
    denominator is exactly 1 and Tr Cov[X0|X_t] = k sigma^2.
    """

    def __init__(self, basis, scale=1.0):
        basis = np.asarray(basis, dtype=float)
        if basis.ndim != 2:
            raise ValueError("basis must be a (d, k) matrix")
        d, k = basis.shape
        if k > d:
            raise ValueError("more basis columns than ambient dimensions")
        if np.max(np.abs(basis.T @ basis - np.eye(k))) > 1e-10:
            raise ValueError("basis columns must be orthonormal within 1e-10")
        if not scale > 0:
            raise ValueError("scale must be positive")
        self.basis = basis
        self.scale = float(scale)

    @classmethod
    def axis_aligned(cls, d, k, scale=1.0):
        return cls(np.eye(d)[:, :k], scale=scale)

    @classmethod
    def random_rotation(cls, d, k, seed=0, scale=1.0):
        q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((d, k)))
        return cls(q, scale=scale)

    @property
    def dim(self):
        return self.basis.shape[0]

    @property
    def intrinsic_dim(self):
        return self.basis.shape[1]

    def second_moment(self):
        return self.intrinsic_dim * self.scale**2

    def sample_clean(self, n, rng):
        z = rng.standard_normal((n, self.intrinsic_dim))
        return self.scale * z @ self.basis.T

    def _gain(self, t):
        s2 = sigma_sq(t)
        v0 = self.scale**2
        return v0 / (s2 + math.exp(-2.0 * t) * v0)

    def project(self, x):
        return (x @ self.basis) @ self.basis.T

    def posterior_mean(self, t, x):
        t = _check_time(t)
        x, squeeze = _as_batch(x, self.dim)
        out = math.exp(-t) * self._gain(t) * self.project(x)
        return out[0] if squeeze else out

    def posterior_cov_trace(self, t, x):
        t = _check_time(t)
        x, squeeze = _as_batch(x, self.dim)
        val = self.intrinsic_dim * sigma_sq(t) * self._gain(t)
        out = np.full(x.shape[0], val)
        return float(out[0]) if squeeze else out

    def posterior_cov(self, t, x):
        t = _check_time(t)
        x, squeeze = _as_batch(x, self.dim)
        mat = (sigma_sq(t) * self._gain(t)) * (self.basis @ self.basis.T)
        out = np.broadcast_to(mat, (x.shape[0], self.dim, self.dim))
        return out[0] if squeeze else out.copy()

    def posterior_frob_sq(self, t, x):
        t = _check_time(t)
        x, squeeze = _as_batch(x, self.dim)
        val = self.intrinsic_dim * (sigma_sq(t) * self._gain(t)) ** 2
        out = np.full(x.shape[0], val)
        return float(out[0]) if squeeze else out

    def score(self, t, x):
        t = _check_time(t)
        x, squeeze = _as_batch(x, self.dim)
        s2 = sigma_sq(t)
        out = (math.exp(-2.0 * t) * self._gain(t) * self.project(x) - x) / s2
        return out[0] if squeeze else out

    def describe(self):
        digest = hashlib.sha256(np.ascontiguousarray(self.basis).tobytes()).hexdigest()[:12]
        return {
            "kind": "subspace-gaussian",
            "dim": self.dim,
            "intrinsic_dim": self.intrinsic_dim,
            "scale": self.scale,
            "basis_sha": digest,
        }


def mixture_score(points, weights, t, x):
    """Score of the corrupted law computed as the mixture-density gradient.

    Averages the per-component Gaussian gradients -(x - e^{-t} p_i)/sigma^2
    under the posterior component weights.  Algebraically identical to the
    posterior-mean route but follows an independent summation path, which is
    what makes it useful as a consistency oracle.
    """
    t = _check_time(t)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    x, squeeze = _as_batch(x, points.shape[1])
    weights = np.asarray(weights, dtype=float)
    c = math.exp(-t)
    s2 = sigma_sq(t)
    means = c * points
    diffs = x[:, None, :] - means[None, :, :]
    log_kernel = np.log(weights)[None, :] - 0.5 * np.einsum("qmd,qmd->qm", diffs, diffs) / s2
    log_kernel -= log_kernel.max(axis=1, keepdims=True)
    w = np.exp(log_kernel)
    grads = -diffs / s2
    out = np.einsum("qm,qmd->qd", w, grads) / w.sum(axis=1)[:, None]
    return out[0] if squeeze else out


class ExactScoreOracle:
    """Evaluates the true score of a target's corrupted law."""

    def __init__(self, target):
        self.target = target

    @property
    def dim(self):
        return self.target.dim

    def score(self, t, x, step=None):
        return self.target.score(t, x)

    def posterior_mean(self, t, x):
        return self.target.posterior_mean(t, x)

    def posterior_cov_trace(self, t, x):
        return self.target.posterior_cov_trace(t, x)

    def step_errors(self):
        return None

    def budget(self):
        return 0.0

    def describe(self):
        return {"kind": "exact", "target": self.target.describe()}


class PerturbedScoreOracle:
    """Exact score plus a deterministic unit-direction error of size eps_n.

    The per-step magnitudes satisfy sum_n (t_{n+1}-t_n) eps_n^2 = budget,
    the schedule-weighted mean-square error the convergence theory charges
    for.  ``direction`` picks the unit field: "radial" uses x/||x|| (queries
    at the origin fall back to the first coordinate axis), "fixed-random"
    draws one frozen unit vector per step.
    """

    def __init__(self, base, eps_steps, schedule: Schedule, direction="radial", seed=0):
        eps_steps = np.asarray(eps_steps, dtype=float)
        if eps_steps.shape != (schedule.N,):
            raise ValueError("need one error magnitude per sampling step")
        if np.any(eps_steps < 0):
            raise ValueError("error magnitudes must be nonnegative")
        if direction not in ("radial", "fixed-random"):
            raise ValueError(f"unknown direction field {direction!r}")
        self.base = base
        self.eps_steps = eps_steps
        self.schedule = schedule
        self.direction = direction
        self.seed = seed
        if direction == "fixed-random":
            raw = np.random.default_rng(seed).standard_normal((schedule.N, base.dim))
            self._dirs = raw / np.linalg.norm(raw, axis=1, keepdims=True)

    @property
    def target(self):
        return self.base.target

    @property
    def dim(self):
        return self.base.dim

    def _unit_field(self, step, x):
        if self.direction == "fixed-random":
            return np.broadcast_to(self._dirs[step], x.shape)
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        u = np.zeros_like(x)
        nz = norms[:, 0] > 0
        u[nz] = x[nz] / norms[nz]
        u[~nz, 0] = 1.0
        return u

    def score(self, t, x, step=None):
        s = self.base.score(t, x)
        if step is None:
            raise ValueError("perturbed oracle needs the current step index")
        if not 0 <= step < self.schedule.N:
            raise IndexError(f"step {step} outside 0..{self.schedule.N - 1}")
        eps = self.eps_steps[step]
        if eps == 0.0:
            return s
        x2d, squeeze = _as_batch(x, self.dim)
        out = np.atleast_2d(s) + eps * self._unit_field(step, x2d)
        return out[0] if squeeze else out

    def posterior_mean(self, t, x, step=None):
        # invert the score identity: mu_hat = e^t (x + sigma^2 s_hat)
        s = self.score(t, x, step=step)
        return math.exp(float(t)) * (np.asarray(x, dtype=float) + sigma_sq(t) * s)

    def step_errors(self):
        return self.eps_steps.copy()

    def budget(self):
        gaps = self.schedule.gaps[: self.schedule.N]
        return float(gaps @ self.eps_steps**2)

    def describe(self):
        return {
            "kind": "perturbed",
            "target": self.target.describe(),
            "direction": self.direction,
            "budget": self.budget(),
            "seed": self.seed,
        }


def perturb(oracle, budget, schedule: Schedule, direction="radial", seed=0):
    """Wrap an oracle with errors of uniform per-step size eps^2 = budget/(T-delta)."""
    if budget < 0:
        raise ValueError("error budget must be nonnegative")
    base = oracle.base if isinstance(oracle, PerturbedScoreOracle) else oracle
    eps = math.sqrt(budget / (schedule.T - schedule.delta))
    return PerturbedScoreOracle(
        base, np.full(schedule.N, eps), schedule, direction=direction, seed=seed
    )


def forward_sample(target, t, n, seed):
    """n independent draws of e^{-t} X0 + sigma(t) W, deterministic in seed."""
    t = float(t)
    if t < 0:
        raise ValueError("forward time must be nonnegative")
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    x0 = target.sample_clean(n, rng)
    data = math.exp(-t) * x0
    if t > 0:
        data = data + math.sqrt(sigma_sq(t)) * rng.standard_normal((n, target.dim))
    return SampleBatch(
        data=data, forward_time=t, step_index=None, root_seed=seed, kind="forward"
    )


# ---------------------------------------------------------------------------
# built-in point-cloud generators

def _two_points(d=2, a=1.0):
    points = np.zeros((2, d))
    points[0, 0] = a
    points[1, 0] = -a
    return PointCloud(points, intrinsic_dim=0)


def _circle(d=16, n_points=4096, radius=1.0, seed=0):
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n_points)
    points = np.zeros((n_points, d))
    points[:, 0] = radius * np.cos(theta)
    points[:, 1] = radius * np.sin(theta)
    return PointCloud(points, intrinsic_dim=1, radius=radius)


def _subspace_ball(d=64, k=2, n_points=4096, radius=1.0, seed=0):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_points, k))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    r = radius * rng.uniform(0.0, 1.0, size=n_points) ** (1.0 / k)
    points = np.zeros((n_points, d))
    points[:, :k] = z * r[:, None]
    return PointCloud(points, intrinsic_dim=k, radius=radius)


def _cube_skeleton(d=8, n_points=4096, half_width=1.0, seed=0):
    """Uniform draws from the 12 edges of a 3-cube, embedded in d dims."""
    if d < 3:
        raise ValueError("cube skeleton needs d >= 3")
    rng = np.random.default_rng(seed)
    edges = []
    for axis in range(3):
        fixed = [i for i in range(3) if i != axis]
        for s0 in (-1.0, 1.0):
            for s1 in (-1.0, 1.0):
                edges.append((axis, fixed, s0, s1))
    which = rng.integers(0, len(edges), size=n_points)
    u = rng.uniform(-1.0, 1.0, size=n_points)
    points = np.zeros((n_points, d))
    for e, (axis, fixed, s0, s1) in enumerate(edges):
        mask = which == e
        points[mask, axis] = u[mask]
        points[mask, fixed[0]] = s0
        points[mask, fixed[1]] = s1
    points[:, :3] *= half_width
    return PointCloud(points, intrinsic_dim=1, radius=math.sqrt(3.0) * half_width)


GENERATORS = {
    "two-points": _two_points,
    "circle": _circle,
    "subspace-ball": _subspace_ball,
    "cube-skeleton": _cube_skeleton,
}


def make_point_cloud(name, **kwargs):
    if name not in GENERATORS:
        raise KeyError(f"unknown generator {name!r}; choices: {sorted(GENERATORS)}")
    return GENERATORS[name](**kwargs)


def point_cloud_from_csv(path, has_weights=False, intrinsic_dim=0, radius=None):
    """Load a point cloud: one row per point, d columns, optional trailing weight."""
    raw = np.loadtxt(path, delimiter=",", ndmin=2)
    if has_weights:
        points, weights = raw[:, :-1], raw[:, -1]
        weights = weights / weights.sum()
    else:
        points, weights = raw, None
    return PointCloud(points, weights, intrinsic_dim=intrinsic_dim, radius=radius)


def target_from_config(cfg):
    """Build a target from a config mapping: {"kind": ..., **params}."""
    cfg = dict(cfg)
    kind = cfg.pop("kind")
    if kind == "subspace-gaussian":
        d, k = cfg.pop("d"), cfg.pop("k")
        seed = cfg.pop("seed", None)
        scale = cfg.pop("scale", 1.0)
        if seed is None:
            return SubspaceGaussian.axis_aligned(d, k, scale=scale)
        return SubspaceGaussian.random_rotation(d, k, seed=seed, scale=scale)
    if kind == "csv":
        return point_cloud_from_csv(cfg.pop("path"), **cfg)
    return make_point_cloud(kind, **cfg)
