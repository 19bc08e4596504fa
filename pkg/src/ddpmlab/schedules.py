"""Noise-level algebra and reverse-time discretization grids.

The forward corruption at time t has signal coefficient e^{-t} and noise
scale sigma(t) = sqrt(1 - e^{-2t}), so a data vector x0 becomes
e^{-t} x0 + sigma(t) W with W standard normal.  A Schedule fixes the
reverse-time grid 0 = t_0 < ... < t_N = T - delta < t_{N+1} = T and every
per-step coefficient of the sampler is derived from it:

    alpha_n     = e^{-2(t_{n+1} - t_n)}
    alpha_bar_n = e^{-2(T - t_n)}        (so alpha_bar_n = alpha_n * alpha_bar_{n+1})

Coefficients are always derived from the stored times, never accepted from
input, so the product identity above holds by construction.  All noise
algebra uses expm1/log1p forms; 1 - alpha_bar_n is exact even when T - t_n
is tiny.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "sigma",
    "sigma_sq",
    "eta",
    "Schedule",
    "StepCoefficients",
    "make_two_phase",
    "make_uniform",
    "step_coeffs",
]


def sigma_sq(t):
    """Noise variance sigma(t)^2 = 1 - e^{-2t} of the forward corruption."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("forward time must be nonnegative")
    out = -np.expm1(-2.0 * t)
    return float(out) if out.ndim == 0 else out


def sigma(t):
    """Noise scale sigma(t) = sqrt(1 - e^{-2t}); increases from 0 to 1."""
    return np.sqrt(sigma_sq(t))


def eta(t):
    """Score weight eta(t) = e^{-t} / (1 - e^{-2t}); decreasing, pole at t = 0."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("eta(t) requires t > 0")
    out = np.exp(-t) / (-np.expm1(-2.0 * t))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class StepCoefficients:
    """Per-step sampler coefficients for the interval [t_n, t_{n+1}].

    The reverse update is y' = drift_scale * y + score_weight * s + noise_std * z
    with drift_scale = 1/sqrt(alpha_n), score_weight = (1 - alpha_n)/sqrt(alpha_n)
    and noise variance (1 - alpha_n)(1 - alpha_bar_{n+1})/(1 - alpha_bar_n).
    ``forward_time`` is T - t_n, the noise level at which the score is queried,
    and ``sigma_sq`` its noise variance 1 - alpha_bar_n.
    """

    drift_scale: float
    score_weight: float
    noise_std: float
    forward_time: float
    sigma_sq: float

    @classmethod
    def from_intervals(cls, gap: float, tail: float) -> "StepCoefficients":
        """Build coefficients from gap = t_{n+1} - t_n and tail = T - t_n."""
        if gap < 0 or tail <= 0 or gap > tail:
            raise ValueError("need 0 <= gap <= tail and tail > 0")
        one_m_alpha = -math.expm1(-2.0 * gap)
        s2_n = -math.expm1(-2.0 * tail)
        s2_next = -math.expm1(-2.0 * (tail - gap))
        inv_sqrt_alpha = math.exp(gap)
        noise_std = math.sqrt(one_m_alpha * s2_next / s2_n)
        return cls(
            drift_scale=inv_sqrt_alpha,
            score_weight=one_m_alpha * inv_sqrt_alpha,
            noise_std=noise_std,
            forward_time=tail,
            sigma_sq=s2_n,
        )

    @property
    def noise_var(self) -> float:
        return self.noise_std**2


@dataclass(frozen=True, eq=False)
class Schedule:
    """A reverse-time grid with its derived per-step noise coefficients.

    ``times`` holds t_0 .. t_{N+1}; the sampler runs steps n = 0 .. N-1 and
    stops at t_N = T - delta.  ``kappa`` is the largest ratio
    (t_{n+1} - t_n) / min(1, T - t_n) over all N+1 intervals including the
    final early-stopping one (whose ratio is 1 whenever delta < 1);
    ``kappa_sampling`` is the same maximum over the N intervals the sampler
    actually traverses, which is the quantity that shrinks like
    (T + log(1/delta))/N on the two-phase grid and enters the step-size
    hypotheses of the convergence analysis.
    """

    T: float
    delta: float
    N: int
    times: np.ndarray
    alphas: np.ndarray       # length N+1, alpha_n = e^{-2(t_{n+1}-t_n)}
    alpha_bars: np.ndarray   # length N+2, alpha_bar_n = e^{-2(T-t_n)}
    kappa: float
    kappa_sampling: float

    @classmethod
    def from_times(cls, times) -> "Schedule":
        times = np.asarray(times, dtype=float).copy()
        if times.ndim != 1 or times.size < 3:
            raise ValueError("need a 1-d grid t_0..t_{N+1} with N >= 1")
        if not np.all(np.isfinite(times)):
            raise ValueError("non-finite time in grid")
        if times[0] != 0.0:
            raise ValueError("grid must start at t_0 = 0")
        if np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        T = float(times[-1])
        delta = T - float(times[-2])
        if delta <= 0:
            raise ValueError("early stop delta = T - t_N must be positive")
        N = times.size - 2
        gaps = np.diff(times)
        tails = T - times[:-1]
        alphas = np.exp(-2.0 * gaps)
        alpha_bars = np.exp(-2.0 * (T - times))
        ratios = gaps / np.minimum(1.0, tails)
        times.flags.writeable = False
        alphas.flags.writeable = False
        alpha_bars.flags.writeable = False
        return cls(
            T=T,
            delta=delta,
            N=N,
            times=times,
            alphas=alphas,
            alpha_bars=alpha_bars,
            kappa=float(ratios.max()),
            kappa_sampling=float(ratios[:N].max()),
        )

    @property
    def gaps(self) -> np.ndarray:
        """Interval lengths t_{n+1} - t_n, length N+1."""
        return np.diff(self.times)

    @property
    def forward_times(self) -> np.ndarray:
        """Noise levels T - t_n, length N+2 (descending from T to 0)."""
        return self.T - self.times

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "delta": self.delta,
            "N": self.N,
            "times": [float(t) for t in self.times],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, payload: dict) -> "Schedule":
        sched = cls.from_times(payload["times"])
        # Derived fields are recomputed; the stored header must agree with them.
        if sched.N != int(payload["N"]):
            raise ValueError("stored N disagrees with the time grid")
        if not math.isclose(sched.T, float(payload["T"]), rel_tol=0, abs_tol=1e-12):
            raise ValueError("stored T disagrees with the time grid")
        if not math.isclose(sched.delta, float(payload["delta"]), rel_tol=1e-9, abs_tol=1e-12):
            raise ValueError("stored delta disagrees with the time grid")
        return sched

    @classmethod
    def from_json(cls, text: str) -> "Schedule":
        return cls.from_dict(json.loads(text))


def make_two_phase(T: float, delta: float, N: int) -> Schedule:
    """Two-phase grid: N/2 uniform points on [0, T-1], then N/2 points whose
    distance to T decays geometrically from 1 down to delta.

    Requires T > 1, 0 < delta < 1 and even N >= 2 (odd N is rejected, not
    rounded).  The sampling-interval ratio kappa_sampling of this family
    behaves like (T + log(1/delta))/N.
    """
    if not T > 1:
        raise ValueError("two-phase grid needs T > 1")
    if not 0 < delta < 1:
        raise ValueError("two-phase grid needs 0 < delta < 1")
    if N < 2 or N % 2 != 0:
        raise ValueError("two-phase grid needs even N >= 2")
    half = N // 2
    phase1 = 2.0 * (T - 1.0) * np.arange(0, half + 1) / N
    j = np.arange(half + 1, N + 1) - half
    phase2 = T - np.exp((2.0 * j / N) * math.log(delta))
    times = np.concatenate([phase1, phase2, [T]])
    times[N] = T - delta  # pin the early-stop point exactly
    return Schedule.from_times(times)


def make_uniform(T: float, delta: float, N: int) -> Schedule:
    """Uniform grid t_n = n (T - delta) / N, baseline for comparisons.

    The final interval [T - delta, T] always has ratio 1 in the kappa
    maximum, so uniform schedules report kappa = 1 regardless of N.
    """
    if not T > delta > 0:
        raise ValueError("uniform grid needs T > delta > 0")
    if N < 1:
        raise ValueError("uniform grid needs N >= 1")
    times = np.concatenate([np.arange(0, N + 1) * ((T - delta) / N), [T]])
    return Schedule.from_times(times)


def step_coeffs(schedule: Schedule, n: int) -> StepCoefficients:
    """Coefficients of sampling step n (0 <= n <= N-1) of ``schedule``."""
    if not 0 <= n <= schedule.N - 1:
        raise IndexError(f"step index {n} outside 0..{schedule.N - 1}")
    gap = float(schedule.times[n + 1] - schedule.times[n])
    tail = float(schedule.T - schedule.times[n])
    return StepCoefficients.from_intervals(gap, tail)
