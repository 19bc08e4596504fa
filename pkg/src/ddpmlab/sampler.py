"""Reverse-time samplers driven by a score oracle.

The reference update ("ddpm") over the interval [t_n, t_{n+1}] is

    y' = (1/sqrt(alpha_n)) * (y + (1 - alpha_n) * s_hat(T - t_n, y))
         + sqrt((1 - alpha_n)(1 - alpha_bar_{n+1})/(1 - alpha_bar_n)) * z

with the score frozen at the left endpoint of the interval.  This is the
exact solution of the semi-linear reverse SDE whose nonlinear drift is
frozen per interval, so its coefficients are fully determined by the time
grid.  Two deliberately miscalibrated variants keep the same first-order
expansion but break the exact per-step noise/drift calibration:

    alt-noise   noise variance (1 - alpha_n)
    alt-drift   drift scale    (2 - sqrt(alpha_n))

Chains are reproducible per (root seed, chain index): every chain owns the
substream default_rng((seed, i)) and consumes it as one (steps+1, d) block
of standard normals, so batches are byte-identical for any worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .schedules import Schedule, StepCoefficients, step_coeffs
from .tables import write_csv, write_json

__all__ = [
    "VARIANTS",
    "SampleBatch",
    "SamplerError",
    "variant_coeffs",
    "ddpm_step",
    "run_chain",
    "run_batch",
]

VARIANTS = ("ddpm", "alt-noise", "alt-drift")


class SamplerError(RuntimeError):
    def __init__(self, message, step=None, chains=None):
        super().__init__(message)
        self.step = step
        self.chains = chains


def variant_coeffs(schedule: Schedule, n: int, kind: str = "ddpm") -> StepCoefficients:
    """Step coefficients of a sampler variant; "ddpm" is untouched."""
    c = step_coeffs(schedule, n)
    if kind == "ddpm":
        return c
    gap = float(schedule.times[n + 1] - schedule.times[n])
    if kind == "alt-noise":
        return StepCoefficients(
            drift_scale=c.drift_scale,
            score_weight=c.score_weight,
            noise_std=math.sqrt(-math.expm1(-2.0 * gap)),
            forward_time=c.forward_time,
            sigma_sq=c.sigma_sq,
        )
    if kind == "alt-drift":
        return StepCoefficients(
            drift_scale=2.0 - math.exp(-gap),
            score_weight=c.score_weight,
            noise_std=c.noise_std,
            forward_time=c.forward_time,
            sigma_sq=c.sigma_sq,
        )
    raise ValueError(f"unknown sampler variant {kind!r}; choices: {VARIANTS}")


def _coefficient_arrays(schedule: Schedule, kind: str, n_steps: int):
    cs = [variant_coeffs(schedule, n, kind) for n in range(n_steps)]
    return (
        np.array([c.drift_scale for c in cs]),
        np.array([c.score_weight for c in cs]),
        np.array([c.noise_std for c in cs]),
        np.array([c.forward_time for c in cs]),
    )


def ddpm_step(y, s_hat, coeffs: StepCoefficients, z):
    """One reverse step: drift_scale*y + score_weight*s_hat + noise_std*z."""
    y = np.asarray(y, dtype=float)
    s_hat = np.asarray(s_hat, dtype=float)
    z = np.asarray(z, dtype=float)
    if y.shape != s_hat.shape or y.shape != z.shape:
        raise ValueError("y, s_hat and z must share a shape")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(s_hat)) and np.all(np.isfinite(z))):
        raise ValueError("non-finite input to sampler step")
    return coeffs.drift_scale * y + coeffs.score_weight * s_hat + coeffs.noise_std * z


def run_chain(oracle, schedule: Schedule, variant: str = "ddpm", seed=0, n_steps=None):
    """One chain from y ~ N(0, I_d) down to t_N (or to t_{n_steps}).

    ``seed`` may be an int or the (root, index) pair a batch would derive.
    """
    n_steps = schedule.N if n_steps is None else int(n_steps)
    if not 0 <= n_steps <= schedule.N:
        raise ValueError("n_steps outside 0..N")
    d = oracle.dim
    rng = np.random.default_rng(seed)
    y = rng.standard_normal(d)
    for n in range(n_steps):
        c = variant_coeffs(schedule, n, variant)
        try:
            s_hat = oracle.score(c.forward_time, y, step=n)
        except Exception as exc:  # surface the failing step
            raise SamplerError(f"oracle evaluation failed at step {n}", step=n) from exc
        z = rng.standard_normal(d)
        y = ddpm_step(y, s_hat, c, z)
        if not np.all(np.isfinite(y)):
            raise SamplerError(f"non-finite iterate at step {n}", step=n)
    return y


@dataclass
class SampleBatch:
    """n samples in d dimensions tagged with their time label and seed origin."""

    data: np.ndarray
    forward_time: float
    step_index: int | None
    root_seed: object
    kind: str = "reverse"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=float))

    @property
    def n(self):
        return self.data.shape[0]

    @property
    def dim(self):
        return self.data.shape[1]

    def to_csv(self, path):
        header = [f"x{j}" for j in range(self.dim)]
        rows = [dict(zip(header, row)) for row in self.data]
        write_csv(path, header, rows)

    def save(self, prefix, schedule=None, variant=None, oracle=None, extra=None):
        """Write <prefix>.csv plus a JSON sidecar describing provenance."""
        self.to_csv(f"{prefix}.csv")
        sidecar = {
            "kind": self.kind,
            "n": self.n,
            "dim": self.dim,
            "forward_time": self.forward_time,
            "step_index": self.step_index,
            "root_seed": repr(self.root_seed),
        }
        if schedule is not None:
            sidecar["schedule"] = schedule.to_dict()
        if variant is not None:
            sidecar["variant"] = variant
        if oracle is not None:
            sidecar["oracle"] = oracle.describe()
        if extra:
            sidecar.update(extra)
        write_json(f"{prefix}.json", sidecar)
        return f"{prefix}.csv", f"{prefix}.json"


def _run_block(oracle, a, w, std, fwd, root_seed, lo, hi, d, n_steps):
    noise = np.stack(
        [np.random.default_rng((root_seed, i)).standard_normal((n_steps + 1, d))
         for i in range(lo, hi)]
    )
    y = noise[:, 0, :].copy()
    for n in range(n_steps):
        try:
            s_hat = oracle.score(fwd[n], y, step=n)
        except Exception as exc:
            raise SamplerError(
                f"oracle evaluation failed at step {n} (chains {lo}..{hi - 1})", step=n
            ) from exc
        y = a[n] * y + w[n] * np.atleast_2d(s_hat) + std[n] * noise[:, n + 1, :]
        bad = ~np.all(np.isfinite(y), axis=1)
        if bad.any():
            chains = (lo + np.nonzero(bad)[0]).tolist()
            raise SamplerError(
                f"non-finite iterate at step {n} in chains {chains}",
                step=n, chains=chains,
            )
    return y


def run_batch(oracle, schedule: Schedule, n, variant: str = "ddpm", seed=0,
              workers: int = 1, n_steps=None) -> SampleBatch:
    """n independent chains; identical output for any worker count.

    Chains are partitioned into fixed blocks; each block regenerates its
    chains' noise from the per-chain substreams, so scheduling order never
    affects the values.  ``n_steps`` stops early at t_{n_steps} (for
    intermediate-marginal checks); the default runs all N steps to t_N.
    """
    if n < 1:
        raise ValueError("need at least one chain")
    n_steps = schedule.N if n_steps is None else int(n_steps)
    if not 0 <= n_steps <= schedule.N:
        raise ValueError("n_steps outside 0..N")
    d = oracle.dim
    a, w, std, fwd = _coefficient_arrays(schedule, variant, n_steps)
    block = max(1, int(8_000_000 // ((n_steps + 1) * d)))
    spans = [(lo, min(lo + block, n)) for lo in range(0, n, block)]
    out = np.empty((n, d))

    def work(span):
        lo, hi = span
        out[lo:hi] = _run_block(oracle, a, w, std, fwd, seed, lo, hi, d, n_steps)

    if workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, spans))
    else:
        for span in spans:
            work(span)
    return SampleBatch(
        data=out,
        forward_time=float(schedule.T - schedule.times[n_steps]),
        step_index=n_steps,
        root_seed=seed,
        kind="reverse",
        meta={"variant": variant, "workers": workers},
    )
