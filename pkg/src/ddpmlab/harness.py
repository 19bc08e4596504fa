"""Named desk-scale experiments with reproducible records.

Each experiment resolves a spec (defaults, then config file, then explicit
overrides), runs through the library modules, and produces a record whose
results.csv is a pure function of (spec, seed): floats are written with
shortest-roundtrip repr and no wall-clock data enters the CSV, so reruns
at any worker count are byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import subprocess
import time
from dataclasses import dataclass, field

import numpy as np

from . import gaussian_exact as ge
from .diagnostics import check_trace_monotone, cover_curve, greedy_cover
from .sampler import run_batch
from .schedules import Schedule, make_two_phase, make_uniform
from .tables import write_csv, write_json
from .targets import ExactScoreOracle, forward_sample, target_from_config

__all__ = ["EXPERIMENTS", "ExperimentSpec", "ExperimentRecord", "run", "emit_plot_csv"]

SPEC_VERSION = 1

EXPERIMENTS = (
    "ksweep",
    "nsweep",
    "schedule-compare",
    "variant-compare",
    "score-error-sweep",
    "bound-check",
    "trace-curves",
    "covering",
)

_DEFAULTS = {
    "ksweep": {
        "target": None,
        "schedule": {"family": "two-phase", "delta": 0.01},
        "params": {"d": 64, "k_list": [2, 4, 8, 16], "eps2": 0.01, "c_T": 2.0,
                   "slope_window": [0.7, 1.3]},
        "n_samples": 0,
    },
    "nsweep": {
        "target": {"kind": "subspace-gaussian", "d": 64, "k": 2},
        "schedule": {"family": "two-phase", "T": 6.0, "delta": 0.01,
                     "N_list": [32, 64, 128, 256, 512, 1024]},
        "params": {"ratio_window": [1.6, 2.4], "init_fraction_max": 0.01},
        "n_samples": 0,
    },
    "schedule-compare": {
        "target": {"kind": "subspace-gaussian", "d": 64, "k": 2},
        "schedule": {"T": 6.0, "delta": 0.01, "N_list": [32, 64, 128, 256, 512]},
        "params": {"families": ["two-phase", "uniform"]},
        "n_samples": 0,
    },
    "variant-compare": {
        "target": {"kind": "subspace-gaussian", "d": 64, "k": 2},
        "schedule": {"family": "two-phase", "T": 6.0, "delta": 0.01, "N": 32},
        "params": {"variants": ["ddpm", "alt-noise", "alt-drift"], "min_ratio": 2.0},
        "n_samples": 0,
    },
    "score-error-sweep": {
        "target": None,
        "schedule": {"family": "two-phase"},
        "params": {"budgets": [1e-4, 1e-3, 1e-2], "grid_points": 25, "slack": 8.0},
        "n_samples": 0,
    },
    "bound-check": {
        "target": None,
        "schedule": {"family": "two-phase"},
        "params": {"grid_points": 200, "d_max": 128, "N_max": 4096,
                   "T_range": [2.0, 8.0], "delta_range": [1e-3, 0.5]},
        "n_samples": 0,
    },
    "trace-curves": {
        "target": None,  # defaults to the built-in battery below
        "schedule": {},
        "params": {"u_grid": list(np.geomspace(0.05, 5.0, 20)),
                   "targets": ["subspace-gaussian", "two-points", "circle",
                               "subspace-ball", "cube-skeleton"]},
        "n_samples": 100_000,
    },
    "covering": {
        "target": {"kind": "subspace-ball", "d": 64, "k": 2, "n_points": 10_000},
        "schedule": {},
        "params": {"eps_grid": [0.2, 0.1, 0.05], "k_declared": 2, "shape_const": 3.0},
        "n_samples": 10_000,
    },
}

_TRACE_BATTERY = {
    "subspace-gaussian": {"kind": "subspace-gaussian", "d": 16, "k": 2},
    "two-points": {"kind": "two-points", "d": 2},
    "circle": {"kind": "circle", "d": 16, "n_points": 4096},
    "subspace-ball": {"kind": "subspace-ball", "d": 16, "k": 2, "n_points": 4096},
    "cube-skeleton": {"kind": "cube-skeleton", "d": 8, "n_points": 4096},
}


@dataclass
class ExperimentSpec:
    name: str
    seed: int = 0
    workers: int = 1
    out_dir: str | None = None
    target: dict | None = None
    schedule: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    n_samples: int = 0
    spec_version: int = SPEC_VERSION

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.name!r}; choices: {EXPERIMENTS}")
        if self.spec_version != SPEC_VERSION:
            raise ValueError(f"unsupported spec_version {self.spec_version}")

    @classmethod
    def build(cls, name, config=None, **overrides):
        """Defaults <- config file payload <- explicit overrides."""
        if name not in _DEFAULTS:
            raise ValueError(f"unknown experiment {name!r}; choices: {EXPERIMENTS}")
        merged = json.loads(json.dumps(_DEFAULTS[name]))  # deep copy
        for layer in (config or {}, overrides):
            for key, value in layer.items():
                if key in ("schedule", "params") and isinstance(value, dict):
                    merged.setdefault(key, {}).update(value)
                elif value is not None:
                    merged[key] = value
        merged.pop("name", None)
        return cls(name=name, **merged)

    def to_dict(self):
        return {
            "name": self.name,
            "seed": self.seed,
            "workers": self.workers,
            "target": self.target,
            "schedule": self.schedule,
            "params": self.params,
            "n_samples": self.n_samples,
            "spec_version": self.spec_version,
        }

    def hash(self):
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _build_id():
    from . import __version__

    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5,
            cwd=os.path.dirname(__file__),
        ).stdout.strip()
    except Exception:
        rev = ""
    return f"ddpmlab-{__version__}" + (f"+{rev}" if rev else "")


@dataclass
class ExperimentRecord:
    spec: dict
    spec_hash: str
    build: str
    rows: list
    verdicts: dict
    metrics: dict
    hypothesis_flags: list
    schedules_used: list
    wall_clock: float

    def fieldnames(self):
        names = []
        for row in self.rows:
            for key in row:
                if key not in names:
                    names.append(key)
        return names

    def save(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, "results.csv")
        write_csv(csv_path, self.fieldnames(), self.rows)
        record_path = os.path.join(out_dir, "record.json")
        write_json(record_path, {
            "spec": self.spec,
            "spec_hash": self.spec_hash,
            "build": self.build,
            "verdicts": self.verdicts,
            "metrics": self.metrics,
            "hypothesis_flags": self.hypothesis_flags,
            "schedules_used": self.schedules_used,
            "wall_clock": self.wall_clock,
            "n_rows": len(self.rows),
        })
        return csv_path, record_path


def _hypothesis_flags(schedule: Schedule):
    flags = []
    if schedule.kappa_sampling > 0.9:
        flags.append(
            f"theorem-hypothesis-violated: kappa_sampling={schedule.kappa_sampling:.4g} > 0.9 (N={schedule.N})"
        )
    if not 0 < schedule.delta < 1:
        flags.append(f"theorem-hypothesis-violated: delta={schedule.delta:.4g} outside (0, 1)")
    if schedule.T <= 1:
        flags.append(f"theorem-hypothesis-violated: T={schedule.T:.4g} <= 1")
    return flags


def _fit_slope(xs, ys):
    xs, ys = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    return float(np.polyfit(xs, ys, 1)[0])


def _make_schedule(family, T, delta, N):
    maker = {"two-phase": make_two_phase, "uniform": make_uniform}[family]
    return maker(T, delta, N)


# --------------------------------------------------------------------------
# experiment bodies: each returns (rows, verdicts, metrics, schedules_used)

def _run_ksweep(spec):
    p = spec.params
    d, eps2 = p["d"], p["eps2"]
    delta = spec.schedule.get("delta", 0.01)
    family = spec.schedule.get("family", "two-phase")
    T = spec.schedule.get("T") or p["c_T"] * math.log(d / math.sqrt(eps2))
    rows, scheds = [], []
    for k in p["k_list"]:
        n_star = ge.find_min_N(k, d, eps2, T, delta, family=family)
        init = ge.init_terms(T, d, k).exact
        # certified step count from the constant-free error chain, reported
        # alongside the output-divergence one
        n_star_bound = None
        for n in ge.graded_even_grid():
            sched = _make_schedule(family, T, delta, n)
            if ge.discretization_integral(sched, k, d).total + init <= eps2:
                n_star_bound = n
                break
        rows.append({
            "k": k,
            "N_star": -1 if n_star is None else n_star,
            "N_star_bound": -1 if n_star_bound is None else n_star_bound,
            "T": T, "delta": delta, "d": d, "eps2": eps2,
            "saturated": n_star is None,
        })
        if n_star is not None:
            scheds.append(_make_schedule(family, T, delta, n_star))
    ks = [r["k"] for r in rows if r["N_star"] > 0]
    slope = _fit_slope(ks, [r["N_star"] for r in rows if r["N_star"] > 0])
    slope_bound = _fit_slope(ks, [r["N_star_bound"] for r in rows if r["N_star_bound"] > 0])
    lo, hi = p["slope_window"]
    verdicts = {"slope_in_window": lo <= slope <= hi,
                "bound_slope_in_window": lo <= slope_bound <= hi}
    metrics = {"slope": slope, "bound_slope": slope_bound, "T": T}
    return rows, verdicts, metrics, scheds


def _run_nsweep(spec):
    p = spec.params
    tgt = spec.target
    k, d = tgt["k"], tgt["d"]
    family = spec.schedule.get("family", "two-phase")
    T, delta = spec.schedule["T"], spec.schedule["delta"]
    rows, scheds = [], []
    for N in spec.schedule["N_list"]:
        sched = _make_schedule(family, T, delta, N)
        scheds.append(sched)
        rep = ge.bound_report(sched, k, d)
        rows.append({
            "N": N, "kappa": sched.kappa, "kappa_sampling": sched.kappa_sampling,
            "exact_kl": rep.exact_kl,
            "discretization_integral": rep.discretization_integral,
            "init_kl": rep.init_kl, "chain_holds": rep.chain_holds(),
        })
    lo, hi = p["ratio_window"]
    ratios, bound_ratios = [], []
    for a, b in zip(rows, rows[1:]):
        if b["N"] == 2 * a["N"]:
            dominated = a["init_kl"] <= p["init_fraction_max"] * (
                a["exact_kl"] + a["init_kl"]
            )
            if dominated:
                ratios.append(a["exact_kl"] / b["exact_kl"])
                bound_ratios.append(
                    a["discretization_integral"] / b["discretization_integral"]
                )
    verdicts = {
        "exact_kl_halves": bool(ratios) and all(lo <= r <= hi for r in ratios),
        "integral_halves": bool(bound_ratios) and all(lo <= r <= hi for r in bound_ratios),
        "chain_holds_everywhere": all(r["chain_holds"] for r in rows),
    }
    metrics = {"exact_kl_ratios": ratios, "integral_ratios": bound_ratios}
    return rows, verdicts, metrics, scheds


def _run_schedule_compare(spec):
    tgt = spec.target
    k, d = tgt["k"], tgt["d"]
    T, delta = spec.schedule["T"], spec.schedule["delta"]
    rows, scheds = [], []
    for family in spec.params["families"]:
        for N in spec.schedule["N_list"]:
            sched = _make_schedule(family, T, delta, N)
            scheds.append(sched)
            state = ge.propagate_covariance(sched, k, d)
            rows.append({
                "N": N, "schedule_family": family,
                "kappa": sched.kappa, "kappa_sampling": sched.kappa_sampling,
                "exact_kl": ge.exact_kl(state, delta),
            })
    # at matched N the adaptive family should not lose to the uniform one
    by_n = {}
    for row in rows:
        by_n.setdefault(row["N"], {})[row["schedule_family"]] = row["exact_kl"]
    comparable = [v for v in by_n.values() if len(v) == 2]
    verdicts = {
        "two_phase_never_worse": all(
            v["two-phase"] <= v["uniform"] * 1.05 for v in comparable
        ) if comparable else True,
    }
    return rows, verdicts, {}, scheds


def _run_variant_compare(spec):
    tgt = spec.target
    k, d = tgt["k"], tgt["d"]
    sched = _make_schedule(
        spec.schedule.get("family", "two-phase"),
        spec.schedule["T"], spec.schedule["delta"], spec.schedule["N"],
    )
    kls = {}
    rows = []
    for variant in spec.params["variants"]:
        state = ge.propagate_covariance(sched, k, d, variant=variant)
        kls[variant] = ge.exact_kl(state, sched.delta)
    for variant in spec.params["variants"]:
        rows.append({
            "variant": variant, "N": sched.N, "exact_kl": kls[variant],
            "ratio_vs_ddpm": kls[variant] / kls["ddpm"],
        })
    min_ratio = spec.params["min_ratio"]
    verdicts = {
        f"{v}_degrades": kls[v] >= min_ratio * kls["ddpm"]
        for v in spec.params["variants"] if v != "ddpm"
    }
    metrics = {"ratios": {v: kls[v] / kls["ddpm"] for v in kls}}
    return rows, verdicts, metrics, [sched]


def _random_grid_point(rng, p):
    d = int(rng.integers(2, p["d_max"] + 1))
    k = int(rng.integers(0, d + 1))
    N = int(2 * rng.integers(1, p["N_max"] // 2 + 1))
    T = float(rng.uniform(*p["T_range"]))
    lo, hi = p["delta_range"]
    delta = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    return d, k, N, T, delta


def _run_bound_check(spec):
    p = spec.params
    rng = np.random.default_rng(spec.seed)
    rows, scheds = [], []
    for _ in range(p["grid_points"]):
        d, k, N, T, delta = _random_grid_point(rng, p)
        sched = make_two_phase(T, delta, N)
        scheds.append(sched)
        rep = ge.bound_report(sched, k, d)
        rhs = rep.discretization_integral + rep.init_kl
        rows.append({
            "d": d, "k": k, "N": N, "T": T, "delta": delta,
            "exact_kl": rep.exact_kl, "discretization_integral": rep.discretization_integral,
            "init_kl": rep.init_kl, "rhs": rhs, "holds": rep.exact_kl <= rhs,
            "init_slack": rep.init_slack,
        })
    verdicts = {
        "chain_holds_everywhere": all(r["holds"] for r in rows),
        "init_inside_bound": all(r["init_slack"] <= 1.0 for r in rows),
    }
    return rows, verdicts, {"violations": sum(not r["holds"] for r in rows)}, scheds


def _run_score_error_sweep(spec):
    p = spec.params
    rng = np.random.default_rng(spec.seed)
    grid_cfg = {"d_max": 128, "N_max": 1024, "T_range": [2.0, 8.0],
                "delta_range": [1e-3, 0.5]}
    rows, scheds = [], []
    for _ in range(p["grid_points"]):
        d, k, N, T, delta = _random_grid_point(rng, grid_cfg)
        sched = make_two_phase(T, delta, N)
        scheds.append(sched)
        base = ge.exact_kl(ge.propagate_covariance(sched, k, d), delta)
        for budget in p["budgets"]:
            bias = ge.linear_bias_steps(budget, sched, k, d)
            kl = ge.exact_kl(ge.propagate_covariance(sched, k, d, bias=bias), delta)
            rows.append({
                "d": d, "k": k, "N": N, "T": T, "delta": delta, "budget": budget,
                "exact_kl": kl, "inflation": kl - base,
                "allowance": p["slack"] * budget,
                "within": kl - base <= p["slack"] * budget,
            })
    verdicts = {"inflation_within_slack": all(r["within"] for r in rows)}
    worst = max((r["inflation"] / r["budget"] for r in rows), default=0.0)
    return rows, verdicts, {"worst_inflation_over_budget": worst}, scheds


def _run_trace_curves(spec):
    p = spec.params
    grid = np.asarray(p["u_grid"], dtype=float)
    rows = []
    verdicts = {}
    for idx, name in enumerate(p["targets"]):
        cfg = dict(_TRACE_BATTERY[name])
        if cfg["kind"] not in ("subspace-gaussian", "two-points"):
            cfg.setdefault("seed", spec.seed)
        target = target_from_config(cfg)
        report = check_trace_monotone(target, grid, spec.n_samples, seed=(spec.seed, idx))
        verdicts[f"{name}_monotone"] = report.passed
        for row in report.curve.rows():
            row["target"] = name
            rows.append(row)
    return rows, verdicts, {}, []


def _run_covering(spec):
    p = spec.params
    target = target_from_config(dict(spec.target, seed=spec.seed))
    points = forward_sample(target, 0.0, spec.n_samples, seed=spec.seed).data
    rows = []
    for row in cover_curve(points, p["eps_grid"], n=spec.n_samples, seed=spec.seed):
        count = row["estimate"]
        bound = p["shape_const"] * p["k_declared"] * math.log(1.0 / row["eps0"])
        rows.append({
            "eps0": row["eps0"], "count": count, "log_count": math.log(count),
            "entropy_bound": bound, "within": math.log(count) <= bound,
            "n": row["n"], "seed": row["seed"],
        })
    verdicts = {"entropy_shape": all(r["within"] for r in rows)}
    return rows, verdicts, {}, []


_RUNNERS = {
    "ksweep": _run_ksweep,
    "nsweep": _run_nsweep,
    "schedule-compare": _run_schedule_compare,
    "variant-compare": _run_variant_compare,
    "score-error-sweep": _run_score_error_sweep,
    "bound-check": _run_bound_check,
    "trace-curves": _run_trace_curves,
    "covering": _run_covering,
}


def run(spec: ExperimentSpec) -> ExperimentRecord:
    start = time.perf_counter()
    rows, verdicts, metrics, scheds = _RUNNERS[spec.name](spec)
    flags = []
    for sched in scheds:
        for flag in _hypothesis_flags(sched):
            if flag not in flags:
                flags.append(flag)
    record = ExperimentRecord(
        spec=spec.to_dict(),
        spec_hash=spec.hash(),
        build=_build_id(),
        rows=rows,
        verdicts=verdicts,
        metrics=metrics,
        hypothesis_flags=flags,
        schedules_used=[s.to_dict() for s in scheds],
        wall_clock=time.perf_counter() - start,
    )
    if spec.out_dir:
        record.save(spec.out_dir)
    return record


_PLOT_PROJECTIONS = {
    "ksweep": ("k", "N_star", lambda r: "exact-kl"),
    "nsweep": ("N", "exact_kl", lambda r: "exact-kl"),
    "schedule-compare": ("N", "exact_kl", lambda r: r["schedule_family"]),
    "variant-compare": ("N", "exact_kl", lambda r: r["variant"]),
    "score-error-sweep": ("budget", "inflation", lambda r: "inflation"),
    "bound-check": ("exact_kl", "rhs", lambda r: "chain"),
    "trace-curves": ("u", "estimate", lambda r: r["target"]),
    "covering": ("eps0", "count", lambda r: "cover"),
}


def emit_plot_csv(record: ExperimentRecord, out_dir):
    """Long-format (x, y, series, stderr) projection of a record."""
    name = record.spec["name"]
    x_key, y_key, series_fn = _PLOT_PROJECTIONS[name]
    rows = [
        {"x": r[x_key], "y": r[y_key], "series": series_fn(r),
         "stderr": r.get("stderr", 0.0)}
        for r in record.rows
    ]
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{name}_plot.csv")
    write_csv(path, ["x", "y", "series", "stderr"], rows)
    return path
