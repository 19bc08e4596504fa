"""Sampling-free analysis of the reverse chain on linear-score targets.

For a subspace Gaussian with unit scale (or a point mass when k = 0) the
true score is linear and every step map commutes with the projector onto
the subspace, so the sampler's output law stays a zero-mean Gaussian whose
covariance has just two eigenvalues: v_par on the k-dimensional subspace
and v_perp on its orthogonal complement.  Both follow the scalar recursion

    v <- m^2 v + noise_var,   m_par = a - w,   m_perp = a - w / sigma_n^2

with a the drift scale, w the score weight and sigma_n^2 the forward noise
variance at the frozen query time.  From the final state the divergence to
the early-stopped data law (eigenvalues 1 and sigma_delta^2) is closed
form, as are the other pieces of the error budget: the drift-mismatch
integral accumulated over the grid intervals, and the divergence between
the noised data law at the horizon and the standard normal the chain is
actually started from.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .sampler import variant_coeffs
from .schedules import Schedule, make_two_phase, make_uniform, sigma_sq

__all__ = [
    "SpectralState",
    "BoundReport",
    "DiscretizationResult",
    "InitTerms",
    "variance_divergence",
    "propagate_covariance",
    "linear_bias_steps",
    "exact_kl",
    "discretization_integral",
    "init_terms",
    "find_min_N",
    "bound_report",
    "graded_even_grid",
]


def _x_minus_log1p(x):
    """x - log(1 + x), series near 0 to dodge the cancellation."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-4
    xs = np.where(small, x, 0.0)
    series = xs * xs * (1.0 / 2.0 + xs * (-1.0 / 3.0 + xs * (1.0 / 4.0 + xs * (-1.0 / 5.0))))
    with np.errstate(invalid="ignore"):
        direct = x - np.log1p(np.where(small, 0.0, x))
    out = np.where(small, series, direct)
    return float(out) if out.ndim == 0 else out


def variance_divergence(r):
    """g(r) = r - 1 - log r: twice the KL between N(0, r) and N(0, 1)."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise ValueError("variance ratio must be positive")
    return _x_minus_log1p(r - 1.0)


@dataclass(frozen=True)
class SpectralState:
    """Output variance along the subspace (v_par) and across it (v_perp)."""

    v_par: float
    v_perp: float
    k: int
    d: int


@dataclass(frozen=True)
class DiscretizationResult:
    total: float
    per_interval: np.ndarray

    def interval_rows(self, schedule: Schedule):
        return [
            {
                "n": n,
                "t_lo": float(schedule.times[n]),
                "t_hi": float(schedule.times[n + 1]),
                "contribution": float(self.per_interval[n]),
            }
            for n in range(len(self.per_interval))
        ]


@dataclass(frozen=True)
class InitTerms:
    exact: float
    bound: float
    slack: float


def _linear_multipliers(schedule: Schedule, variant: str, n_steps: int, bias=None):
    a = np.empty(n_steps)
    w = np.empty(n_steps)
    noise_var = np.empty(n_steps)
    s2 = np.empty(n_steps)
    for n in range(n_steps):
        c = variant_coeffs(schedule, n, variant)
        a[n], w[n], noise_var[n], s2[n] = (
            c.drift_scale, c.score_weight, c.noise_var, c.sigma_sq,
        )
    m_par = a - w
    m_perp = a - w / s2
    if bias is not None:
        bias = np.asarray(bias, dtype=float)
        if bias.shape != (schedule.N,):
            raise ValueError("need one bias coefficient per sampling step")
        m_par = m_par + w * bias[:n_steps]
        m_perp = m_perp + w * bias[:n_steps]
    return m_par, m_perp, noise_var


def _accumulate(m, noise_var, v0):
    """Closed form of v_N = (prod m^2) v0 + sum_j noise_j prod_{i>j} m_i^2."""
    if m.size == 0:
        return float(v0)
    msq = m * m
    suffix = np.ones(m.size + 1)
    suffix[:-1] = np.cumprod(msq[::-1])[::-1]
    return float(suffix[0] * v0 + noise_var @ suffix[1:])


def propagate_covariance(schedule: Schedule, k: int, d: int, variant: str = "ddpm",
                         bias=None, init: str = "standard", n_steps=None) -> SpectralState:
    """Run the two scalar variance recursions down to t_{n_steps}.

    ``init="standard"`` starts from the N(0, I) law (v_par = v_perp = 1);
    ``init="forward"`` starts from the noised data law at the horizon
    (v_par = 1, v_perp = sigma_T^2), isolating discretization error from
    initialization error.  ``bias`` adds the linear score error
    s(x) + beta_n x; see linear_bias_steps for the budget-normalized beta.
    """
    if not 0 <= k <= d:
        raise ValueError("need 0 <= k <= d")
    n_steps = schedule.N if n_steps is None else int(n_steps)
    if not 0 <= n_steps <= schedule.N:
        raise ValueError("n_steps outside 0..N")
    m_par, m_perp, noise_var = _linear_multipliers(schedule, variant, n_steps, bias)
    if init == "standard":
        v_par0 = v_perp0 = 1.0
    elif init == "forward":
        v_par0, v_perp0 = 1.0, sigma_sq(schedule.T)
    else:
        raise ValueError(f"unknown init {init!r}")
    v_par = _accumulate(m_par, noise_var, v_par0)
    v_perp = _accumulate(m_perp, noise_var, v_perp0)
    if not (v_par > 0 and v_perp > 0):
        raise ArithmeticError("variance recursion left the positive cone")
    return SpectralState(v_par=v_par, v_perp=v_perp, k=k, d=d)


def forward_second_moment(schedule: Schedule, k: int, d: int) -> np.ndarray:
    """E ||X_u||^2 = e^{-2u} k + sigma_u^2 d at each frozen query time u = T - t_n."""
    u = schedule.forward_times[: schedule.N]
    return np.exp(-2.0 * u) * k + sigma_sq(u) * d


def linear_bias_steps(budget: float, schedule: Schedule, k: int, d: int, sign: int = 1):
    """Per-step bias beta_n with uniform mean-square error budget/(T - delta).

    The step-n mean squared score error of s + beta x under the forward law
    is beta_n^2 E||X_{T-t_n}||^2, so the schedule-weighted total equals
    ``budget`` exactly.
    """
    if budget < 0:
        raise ValueError("error budget must be nonnegative")
    per_step_mse = budget / (schedule.T - schedule.delta)
    return sign * np.sqrt(per_step_mse / forward_second_moment(schedule, k, d))


def exact_kl(state: SpectralState, delta: float, orientation: str = "q-first") -> float:
    """Divergence between the output law and the early-stopped data law.

    The data law at time delta has eigenvalue 1 with multiplicity k and
    sigma_delta^2 with multiplicity d - k.  "q-first" puts the data law in
    the first slot (the quantity the convergence bound controls);
    "p-first" reverses the arguments.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    s2d = sigma_sq(delta)
    if orientation == "q-first":
        terms = state.k * variance_divergence(1.0 / state.v_par) + (
            state.d - state.k
        ) * variance_divergence(s2d / state.v_perp)
    elif orientation == "p-first":
        terms = state.k * variance_divergence(state.v_par) + (
            state.d - state.k
        ) * variance_divergence(state.v_perp / s2d)
    else:
        raise ValueError(f"unknown orientation {orientation!r}")
    return 0.5 * float(terms)


def discretization_integral(schedule: Schedule, k: int, d: int) -> DiscretizationResult:
    """Exact-score drift-mismatch integral, split per interval.

    On the subspace Gaussian the expected posterior trace at noise level u
    is exactly k sigma_u^2, so the integrand over [t_n, t_{n+1}] reduces to
    k e^{-2u} (e^{-2u} - e^{-2 u_n}) / (1 - e^{-2u})^2 in the forward-time
    variable u = T - t (which also tames the growth near t_N).  Each
    interval is integrated by adaptive Gauss-Kronrod quadrature to relative
    tolerance 1e-8 with absolute floor 1e-14.
    """
    if not 0 <= k <= d:
        raise ValueError("need 0 <= k <= d")
    per_interval = np.zeros(schedule.N)
    if k == 0:
        return DiscretizationResult(total=0.0, per_interval=per_interval)
    fwd = schedule.forward_times
    for n in range(schedule.N):
        u_hi, u_lo = float(fwd[n]), float(fwd[n + 1])

        def integrand(u, u_n=u_hi):
            e = math.exp(-2.0 * u)
            gap_term = -math.expm1(-2.0 * (u_n - u))  # 1 - e^{-2(u_n - u)}
            return k * e * e * gap_term / (-math.expm1(-2.0 * u)) ** 2

        with warnings.catch_warnings():
            warnings.simplefilter("error", integrate.IntegrationWarning)
            try:
                val, _ = integrate.quad(integrand, u_lo, u_hi, epsabs=1e-14, epsrel=1e-8)
            except integrate.IntegrationWarning as exc:
                raise ArithmeticError(
                    f"quadrature failed on interval {n} = [{u_lo}, {u_hi}]"
                ) from exc
        per_interval[n] = val
    return DiscretizationResult(total=float(per_interval.sum()), per_interval=per_interval)


def init_terms(T: float, d: int, k: int) -> InitTerms:
    """Exact divergence of the noised data law at the horizon from N(0, I).

    The subspace eigenvalue is exactly 1 there, so only the d - k ambient
    directions contribute: exact = (d - k)/2 * g(sigma_T^2).  The bound is
    the exponential-convergence envelope (d + E||X0||^2) e^{-2T} with
    E||X0||^2 = k; the slack ratio exact/bound decays like e^{-2T}.
    """
    if not 0 <= k <= d:
        raise ValueError("need 0 <= k <= d")
    exact = 0.5 * (d - k) * _x_minus_log1p(-math.exp(-2.0 * T))
    bound = (d + k) * math.exp(-2.0 * T)
    return InitTerms(exact=float(exact), bound=float(bound), slack=float(exact / bound))


_FAMILIES = {"two-phase": make_two_phase, "uniform": make_uniform}

N_MAX = 2**20


def graded_even_grid(n_max: int = N_MAX):
    """Even step counts 2, 4, 6, 8, 12, 16, 24, ... up to n_max."""
    grid = set()
    j = 1
    while 2**j <= n_max:
        grid.add(2**j)
        if j >= 2 and 3 * 2 ** (j - 1) <= n_max:
            grid.add(3 * 2 ** (j - 1))
        j += 1
    return sorted(grid)


def find_min_N(k: int, d: int, eps2: float, T: float, delta: float,
               family: str = "two-phase"):
    """Smallest grid member N with exact_kl + init_kl <= eps2, or None.

    Searches the graded even grid {2^j, 1.5 * 2^j} up to 2^20 by leftmost
    binary search (the total is decreasing in N on these families).  None
    means the tolerance was not reached below the cap.
    """
    if eps2 <= 0:
        raise ValueError("tolerance must be positive")
    maker = _FAMILIES[family]
    init = init_terms(T, d, k).exact

    def ok(n):
        state = propagate_covariance(maker(T, delta, n), k, d)
        return exact_kl(state, delta) + init <= eps2

    grid = graded_even_grid()
    lo, hi = 0, len(grid) - 1
    if ok(grid[0]):
        return grid[0]
    if not ok(grid[hi]):
        return None
    while hi - lo > 1:  # invariant: not ok(lo), ok(hi)
        mid = (lo + hi) // 2
        if ok(grid[mid]):
            hi = mid
        else:
            lo = mid
    return grid[hi]


@dataclass
class BoundReport:
    """Evaluated terms of the error-budget chain for one configuration."""

    discretization_integral: float
    score_term: float
    init_kl: float
    init_bound: float
    init_slack: float
    exact_kl: float
    exact_kl_reverse: float
    t2_split: np.ndarray
    state: SpectralState

    def __post_init__(self):
        for name in ("discretization_integral", "score_term", "init_kl",
                     "init_bound", "exact_kl", "exact_kl_reverse"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def chain_holds(self) -> bool:
        """exact_kl <= discretization_integral + score_term + init_kl."""
        return self.exact_kl <= self.discretization_integral + self.score_term + self.init_kl

    def to_dict(self):
        return {
            "discretization_integral": self.discretization_integral,
            "score_term": self.score_term,
            "init_kl": self.init_kl,
            "init_bound": self.init_bound,
            "init_slack": self.init_slack,
            "exact_kl": self.exact_kl,
            "exact_kl_reverse": self.exact_kl_reverse,
            "v_par": self.state.v_par,
            "v_perp": self.state.v_perp,
        }


def bound_report(schedule: Schedule, k: int, d: int, variant: str = "ddpm",
                 score_budget: float = 0.0, bias_sign: int = 1) -> BoundReport:
    """Evaluate every term of the error budget on one schedule."""
    bias = None
    if score_budget > 0.0:
        bias = linear_bias_steps(score_budget, schedule, k, d, sign=bias_sign)
    state = propagate_covariance(schedule, k, d, variant=variant, bias=bias)
    disc = discretization_integral(schedule, k, d)
    init = init_terms(schedule.T, d, k)
    return BoundReport(
        discretization_integral=disc.total,
        score_term=float(score_budget),
        init_kl=init.exact,
        init_bound=init.bound,
        init_slack=init.slack,
        exact_kl=exact_kl(state, schedule.delta),
        exact_kl_reverse=exact_kl(state, schedule.delta, orientation="p-first"),
        t2_split=disc.per_interval,
        state=state,
    )
