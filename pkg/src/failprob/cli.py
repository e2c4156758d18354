"""Pipeline orchestration and command-line interface.

Subcommands:

* ``run``       -- resolve a config, run sampler -> mixture fit -> importance
                   sampling, write artifacts (ensemble CSV, mixture file,
                   report file).
* ``sweep``     -- repeat the pipeline along one config axis (J, delta, R, K,
                   M_is) over several seeds, append rows to a sweep CSV.
* ``validate``  -- run the property-test batteries at desk scale and report
                   pass/fail per property.
* ``reference`` -- compute and print oracle reference probabilities.

Configs are JSON trees; every default the code fills in appears in the echoed
config, and identical config + seed reproduce byte-identical outputs.

Exit codes: 0 success, 1 validation failure, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import aldi, estimators, gmm, problems, smoothing
from .core import GaussianPrior, RareEventProblem, SmoothingConfig, derive_stream

__all__ = [
    "ConfigError",
    "PipelineError",
    "PipelineResult",
    "SweepSpec",
    "CheckResult",
    "DEFAULT_CONFIGS",
    "load_config",
    "resolve_config",
    "build_problem",
    "reference_probability",
    "run_pipeline",
    "run_sweep",
    "validate_properties",
    "main",
]


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class PipelineError(RuntimeError):
    """A pipeline stage failed; carries the stage name and prior artifacts."""

    def __init__(self, stage: str, diagnostic: str, artifacts=()):
        self.stage = stage
        self.diagnostic = diagnostic
        self.artifacts = tuple(artifacts)
        partial = f" (partial artifacts: {', '.join(self.artifacts)})" if self.artifacts else ""
        super().__init__(f"pipeline stage {stage!r} failed: {diagnostic}{partial}")


DEFAULT_CONFIGS: dict[str, dict] = {
    "convex": {
        "problem": {"name": "convex"},
        "aldi": {
            "variant": "gradient",
            "ensemble_size": 1000,
            "step_size": 0.001,
            "horizon": 10.0,
            "record_every": None,
            "r_schedule": [],
        },
        "smoothing": {"delta": 0.001, "noise_variance": 0.01},
        "estimator": {
            "method": "mixture_is",
            "components": 8,
            "is_samples": 100000,
            "fit_samples": None,
        },
        "seed": 0,
    },
    "convex_rare": {
        "problem": {"name": "convex_rare"},
        "aldi": {
            "variant": "gradient",
            "ensemble_size": 1000,
            "step_size": 0.0005,
            "horizon": 20.0,
            "record_every": None,
            "r_schedule": [],
        },
        "smoothing": {"delta": 0.001, "noise_variance": 0.01},
        "estimator": {
            "method": "mixture_is",
            "components": 2,
            "is_samples": 100000,
            "fit_samples": None,
        },
        "seed": 0,
    },
    "saddle": {
        "problem": {
            "name": "saddle",
            "decay_rate": 1.0,
            "growth_rate": 1.0,
            "horizon": 1.0,
            "threshold": 0.5,
            "prior_mean": [-2.0, -2.0],
            "prior_variance": 0.5,
        },
        "aldi": {
            "variant": "gradient",
            "ensemble_size": 1000,
            "step_size": 0.00025,
            "horizon": 5.0,
            "record_every": None,
            "r_schedule": [],
        },
        "smoothing": {"delta": 0.001, "noise_variance": 0.01},
        "estimator": {
            "method": "mixture_is",
            "components": 1,
            "is_samples": 100000,
            "fit_samples": None,
        },
        "seed": 0,
    },
    "vortex": {
        "problem": {
            "name": "vortex",
            "circulations": [1.0, 1.0, -2.0],
            "energy": 1.0,
            "threshold": 0.25,
            "noise_sigma": 0.1,
            "forward_step": 0.02,
            "forward_horizon": 0.5,
            "prior_scale": 0.25,
        },
        "aldi": {
            "variant": "gradient_free",
            "ensemble_size": 1000,
            "step_size": 0.0005,
            "horizon": 2.5,
            "record_every": None,
            "r_schedule": [],
        },
        "smoothing": {"delta": 0.001, "noise_variance": 0.01},
        "estimator": {
            "method": "mixture_is",
            "components": 1,
            "is_samples": 10000,
            "fit_samples": None,
        },
        "seed": 0,
    },
    "gaussian_tail": {
        "problem": {"name": "gaussian_tail", "threshold": 3.0},
        "aldi": {
            "variant": "gradient",
            "ensemble_size": 500,
            "step_size": 0.001,
            "horizon": 10.0,
            "record_every": None,
            "r_schedule": [],
        },
        "smoothing": {"delta": 0.001, "noise_variance": 0.01},
        "estimator": {
            "method": "mixture_is",
            "components": 1,
            "is_samples": 100000,
            "fit_samples": None,
        },
        "seed": 0,
    },
}

_ESTIMATOR_METHODS = ("mixture_is", "product", "crude_mc")


def load_config(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _merge(defaults: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            out[key] = _merge(defaults[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(config: dict) -> dict:
    """Merge a user config over the named problem's defaults and validate it.

    The result is echo-complete: every default the code would fill in is
    materialized in the returned tree.
    """
    if "problem" not in config or "name" not in config.get("problem", {}):
        raise ConfigError("config must specify problem.name")
    name = config["problem"]["name"]
    if name not in DEFAULT_CONFIGS:
        raise ConfigError(
            f"unknown problem {name!r}; expected one of {sorted(DEFAULT_CONFIGS)}"
        )
    allowed_top = set(DEFAULT_CONFIGS[name]) | {"sweep"}
    for key in config:
        if key not in allowed_top:
            raise ConfigError(f"unknown config key {key!r}")
    resolved = _merge(DEFAULT_CONFIGS[name], {k: v for k, v in config.items() if k != "sweep"})
    if "sweep" in config:
        resolved["sweep"] = copy.deepcopy(config["sweep"])
    _validate_resolved(resolved)
    return resolved


def _validate_resolved(cfg: dict) -> None:
    est = cfg["estimator"]
    al = cfg["aldi"]
    if est["method"] not in _ESTIMATOR_METHODS:
        raise ConfigError(
            f"estimator.method must be one of {_ESTIMATOR_METHODS}, got {est['method']!r}"
        )
    if est["components"] < 1:
        raise ConfigError("estimator.components must be >= 1")
    if est["is_samples"] < 1:
        raise ConfigError("estimator.is_samples must be >= 1")
    if al["variant"] not in aldi.VARIANTS:
        raise ConfigError(f"aldi.variant must be one of {aldi.VARIANTS}")
    if cfg["problem"]["name"] == "vortex" and al["variant"] == "gradient":
        raise ConfigError("the vortex problem has no gradient; use variant gradient_free")
    if not al["step_size"] > 0:
        raise ConfigError("aldi.step_size must be positive")
    if al["horizon"] < al["step_size"]:
        raise ConfigError("aldi.horizon must cover at least one step")
    if al["ensemble_size"] < 2:
        raise ConfigError("aldi.ensemble_size must be >= 2")
    if not cfg["smoothing"]["delta"] > 0:
        raise ConfigError("smoothing.delta must be positive")
    if not cfg["smoothing"]["noise_variance"] > 0:
        raise ConfigError("smoothing.noise_variance must be positive")
    problem = build_problem(cfg)
    d = problem.dimension
    fit_n = est["fit_samples"] if est["fit_samples"] is not None else al["ensemble_size"]
    if fit_n > al["ensemble_size"]:
        raise ConfigError("estimator.fit_samples cannot exceed aldi.ensemble_size")
    if est["method"] == "mixture_is" and fit_n < est["components"] * (d + 1):
        raise ConfigError(
            f"fitting {est['components']} components in dimension {d} needs at least "
            f"{est['components'] * (d + 1)} samples"
        )


def build_problem(cfg: dict) -> RareEventProblem:
    block = cfg["problem"]
    name = block["name"]
    if name == "convex":
        return problems.make_convex_problem("standard")
    if name == "convex_rare":
        return problems.make_convex_problem("rare")
    if name == "saddle":
        params = problems.SaddleParams(
            decay_rate=block["decay_rate"],
            growth_rate=block["growth_rate"],
            horizon=block["horizon"],
            threshold=block["threshold"],
        )
        prior = GaussianPrior(
            np.asarray(block["prior_mean"], dtype=float),
            block["prior_variance"] * np.eye(2),
        )
        return problems.make_saddle_problem(params, prior)
    if name == "vortex":
        params = problems.VortexParams(
            circulations=tuple(block["circulations"]),
            energy=block["energy"],
            threshold=block["threshold"],
            sigma=block["noise_sigma"],
            forward_step=block["forward_step"],
            forward_horizon=block["forward_horizon"],
        )
        center = problems.equilateral_configuration(params.energy, params.circulations)
        prior = GaussianPrior(center, block["prior_scale"] * np.eye(6))
        return problems.make_vortex_problem(params, prior)
    if name == "gaussian_tail":
        return problems.make_gaussian_tail_problem(block["threshold"])
    raise ConfigError(f"unknown problem {name!r}")


def reference_probability(cfg: dict) -> float | None:
    """High-accuracy reference failure probability, where one exists.

    convex/convex_rare use the exact 1-D reduction of the rotated quadratic
    limit state, saddle uses ellipse quadrature, gaussian_tail is analytic.
    The vortex problem has no quantitative reference (returns None).
    """
    from scipy import integrate
    from scipy.stats import norm

    name = cfg["problem"]["name"]
    if name in ("convex", "convex_rare"):
        problem = build_problem(cfg)
        mean = problem.prior.mean
        var = float(problem.prior.covariance[0, 0])
        sd = np.sqrt(var)
        mu_u = float((mean[0] + mean[1]) / np.sqrt(2.0))
        mu_v = float((mean[0] - mean[1]) / np.sqrt(2.0))
        # in rotated coordinates u=(x1+x2)/sqrt2, v=(x1-x2)/sqrt2 the limit
        # state is 0.2 v^2 - u + 2.5, and u, v are independent N(mu, var)
        f = lambda v: norm.pdf(v, mu_v, sd) * norm.sf((0.2 * v * v + 2.5 - mu_u) / sd)
        value, _ = integrate.quad(f, mu_v - 12 * sd, mu_v + 12 * sd, epsabs=1e-18, limit=400)
        return float(value)
    if name == "saddle":
        problem = build_problem(cfg)
        block = cfg["problem"]
        params = problems.SaddleParams(
            decay_rate=block["decay_rate"],
            growth_rate=block["growth_rate"],
            horizon=block["horizon"],
            threshold=block["threshold"],
        )
        return problems.saddle_reference_probability(params, problem.prior)
    if name == "gaussian_tail":
        return float(norm.sf(cfg["problem"]["threshold"]))
    return None


@dataclass
class PipelineResult:
    report: estimators.EstimateReport
    aldi_run: aldi.AldiRun | None = None
    mixture: gmm.GaussianMixture | None = None
    paths: dict = field(default_factory=dict)


def _smoothing_config(cfg: dict) -> SmoothingConfig:
    return SmoothingConfig(
        delta=cfg["smoothing"]["delta"],
        noise_variance=cfg["smoothing"]["noise_variance"],
    )


def _aldi_config(cfg: dict) -> aldi.AldiConfig:
    block = cfg["aldi"]
    return aldi.AldiConfig(
        variant=block["variant"],
        step_size=block["step_size"],
        horizon=block["horizon"],
        ensemble_size=block["ensemble_size"],
        seed=cfg["seed"],
        record_every=block["record_every"],
        r_schedule=tuple(tuple(pair) for pair in block["r_schedule"]),
    )


def _cache_key(cfg: dict, *parts) -> str:
    base = {k: cfg[k] for k in ("problem", "aldi", "smoothing", "seed")}
    return json.dumps([base, list(parts)], sort_keys=True)


def run_pipeline(config: dict, out_dir=None, _cache: dict | None = None) -> PipelineResult:
    """Execute one full estimation pipeline and optionally write artifacts.

    Stages: resolve config -> ALDI run -> mixture fit -> importance sampling
    -> artifact writing.  Any stage failure raises PipelineError naming the
    stage; artifacts written before the failure are listed in the error.
    """
    try:
        cfg = resolve_config(config)
    except ConfigError as exc:
        raise PipelineError("config", str(exc)) from exc
    problem = build_problem(cfg)
    smoothing_cfg = _smoothing_config(cfg)
    seed = cfg["seed"]
    method = cfg["estimator"]["method"]
    artifacts: dict[str, str] = {}
    cache = _cache if _cache is not None else {}

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    aldi_run = None
    mixture = None
    if method in ("mixture_is", "product"):
        try:
            key = _cache_key(cfg, "aldi")
            aldi_run = cache.get(key)
            if aldi_run is None:
                aldi_run = aldi.run(problem, smoothing_cfg, _aldi_config(cfg))
                cache[key] = aldi_run
        except Exception as exc:
            raise PipelineError("aldi", str(exc), artifacts.values()) from exc
        if out_dir is not None:
            path = os.path.join(out_dir, "ensemble.csv")
            aldi.write_snapshots_csv(aldi_run, path)
            artifacts["ensemble"] = path

    if method == "mixture_is":
        try:
            fit_n = cfg["estimator"]["fit_samples"] or cfg["aldi"]["ensemble_size"]
            key = _cache_key(cfg, "fit", cfg["estimator"]["components"], fit_n)
            mixture = cache.get(key)
            if mixture is None:
                fit_xs = aldi_run.final_ensemble.xs[:fit_n]
                em_cfg = gmm.EmConfig(
                    components=cfg["estimator"]["components"], init_seed=seed
                )
                mixture = gmm.fit_em(fit_xs, em_cfg)
                cache[key] = mixture
        except Exception as exc:
            raise PipelineError("fit", str(exc), artifacts.values()) from exc
        if out_dir is not None:
            path = os.path.join(out_dir, "mixture.json")
            gmm.save_mixture(mixture, path)
            artifacts["mixture"] = path

    try:
        if method == "mixture_is":
            report = estimators.mixture_is_estimator(
                mixture,
                problem,
                cfg["estimator"]["is_samples"],
                derive_stream(seed, ["is"]),
                seed=seed,
                config=cfg,
            )
        elif method == "product":
            report = estimators.product_estimator(
                aldi_run.final_ensemble.xs,
                problem,
                smoothing_cfg,
                rng=derive_stream(seed, ["product"]) if problem.stochastic_forward else None,
                seed=seed,
                config=cfg,
            )
        else:
            report = estimators.crude_monte_carlo(
                problem,
                cfg["estimator"]["is_samples"],
                derive_stream(seed, ["crude"]),
                seed=seed,
                config=cfg,
            )
    except Exception as exc:
        raise PipelineError("estimate", str(exc), artifacts.values()) from exc

    if out_dir is not None:
        path = os.path.join(out_dir, "report.json")
        estimators.write_report(report, path)
        artifacts["report"] = path

    return PipelineResult(report=report, aldi_run=aldi_run, mixture=mixture, paths=artifacts)


@dataclass(frozen=True)
class SweepSpec:
    """One swept config axis, its values, and the number of seeds per value."""

    axis: str
    values: tuple
    repetitions: int = 10

    def __post_init__(self):
        if self.axis not in _SWEEP_AXES:
            raise ConfigError(f"sweep axis must be one of {sorted(_SWEEP_AXES)}")
        if len(self.values) == 0:
            raise ConfigError("sweep values must be nonempty")
        if self.repetitions < 1:
            raise ConfigError("sweep repetitions must be >= 1")


_SWEEP_AXES = {
    "J": ("aldi", "ensemble_size"),
    "delta": ("smoothing", "delta"),
    "R": ("smoothing", "noise_variance"),
    "K": ("estimator", "components"),
    "M_is": ("estimator", "is_samples"),
}


def _apply_axis(cfg: dict, axis: str, value) -> dict:
    out = copy.deepcopy(cfg)
    section, key = _SWEEP_AXES[axis]
    out[section][key] = value
    return out


def _sweep_worker(args) -> list[dict]:
    base_cfg, axis, values, seeds = args
    cache: dict = {}
    rows = []
    for seed in seeds:
        for value in values:
            cfg = _apply_axis(base_cfg, axis, value)
            cfg["seed"] = seed
            row = {"axis_value": value, "seed": seed}
            try:
                result = run_pipeline(cfg, out_dir=None, _cache=cache)
                rep = result.report
                row.update(
                    method=rep.method,
                    p_hat=rep.p_hat,
                    ess=rep.ess,
                    failure_count=rep.failure_count,
                    error="",
                    config=result.report.config,
                )
            except (PipelineError, RuntimeError, ValueError) as exc:
                row.update(method=base_cfg["estimator"]["method"], p_hat=None,
                           ess=None, failure_count=None, error=str(exc), config=cfg)
            rows.append(row)
    return rows


def run_sweep(config: dict, sweep: SweepSpec, out_dir, jobs: int = 1) -> dict:
    """Run the pipeline once per (axis value, seed) pair and append a CSV row each.

    Individual run failures are recorded in the CSV error column and the sweep
    continues.  Returns a summary with the per-value median absolute error
    against the problem's reference probability (when one exists).
    """
    base = resolve_config(config)
    base.pop("sweep", None)
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "sweep.csv")

    seeds = [base["seed"] + i for i in range(sweep.repetitions)]
    jobs = max(1, min(jobs, len(seeds)))
    if jobs == 1:
        all_rows = _sweep_worker((base, sweep.axis, tuple(sweep.values), seeds))
    else:
        chunks = [seeds[i::jobs] for i in range(jobs)]
        tasks = [(base, sweep.axis, tuple(sweep.values), chunk) for chunk in chunks]
        all_rows = []
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for rows in pool.map(_sweep_worker, tasks):
                all_rows.extend(rows)
    order = {v: i for i, v in enumerate(sweep.values)}
    all_rows.sort(key=lambda r: (order[r["axis_value"]], r["seed"]))

    for row in all_rows:
        cfg = row["config"]
        estimators.append_sweep_row(
            csv_path,
            method=row["method"],
            J=cfg["aldi"]["ensemble_size"],
            delta=cfg["smoothing"]["delta"],
            R=cfg["smoothing"]["noise_variance"],
            M=cfg["estimator"]["is_samples"],
            K=cfg["estimator"]["components"],
            seed=row["seed"],
            p_hat=row["p_hat"],
            ess=row["ess"],
            failure_count=row["failure_count"],
            error=row["error"],
        )

    p_ref = reference_probability(base)
    per_value = {}
    for value in sweep.values:
        errs = [
            abs(row["p_hat"] - p_ref)
            for row in all_rows
            if row["axis_value"] == value and row["p_hat"] is not None and p_ref is not None
        ]
        estimates = [
            row["p_hat"] for row in all_rows
            if row["axis_value"] == value and row["p_hat"] is not None
        ]
        per_value[value] = {
            "median_abs_error": float(np.median(errs)) if errs else None,
            "median_p_hat": float(np.median(estimates)) if estimates else None,
            "runs": len(estimates),
        }
    summary = {
        "axis": sweep.axis,
        "values": list(sweep.values),
        "reference": p_ref,
        "per_value": per_value,
        "csv": csv_path,
    }
    with open(os.path.join(out_dir, "sweep_summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return summary


# ---------------------------------------------------------------------------
# validation battery
# ---------------------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    threshold: float
    comparison: str = "<="

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"[{status}] {self.name}: measured {self.measured:.3e} "
            f"{self.comparison} threshold {self.threshold:.3e}"
        )


def _check(name, measured, threshold, comparison="<="):
    if comparison == "<=":
        ok = measured <= threshold
    elif comparison == ">=":
        ok = measured >= threshold
    else:
        raise ValueError(comparison)
    return CheckResult(name, bool(ok), float(measured), float(threshold), comparison)


def _affine_pair(problem, rng, cond_max=10.0):
    """Random invertible map (A, b) with condition number <= cond_max, and the
    transformed problem (prior pushforward, limit state pullback)."""
    d = problem.dimension
    q1, _ = np.linalg.qr(rng.standard_normal((d, d)))
    q2, _ = np.linalg.qr(rng.standard_normal((d, d)))
    svals = np.exp(rng.uniform(0.0, np.log(cond_max), size=d))
    a = q1 @ np.diag(svals) @ q2
    b = rng.standard_normal(d)
    a_inv = np.linalg.inv(a)

    def pullback(y, rng_inner=None):
        x = (np.asarray(y, dtype=float) - b) @ a_inv.T
        return problem.evaluate_limit_state(x, rng_inner)

    grad = None
    if problem.has_gradient:
        def grad(y):
            x = (np.asarray(y, dtype=float) - b) @ a_inv.T
            return problem.evaluate_gradient(x) @ a_inv

    transformed = RareEventProblem(
        dimension=d,
        limit_state=pullback,
        limit_state_gradient=grad,
        prior=GaussianPrior(a @ problem.prior.mean + b, a @ problem.prior.covariance @ a.T),
        stochastic_forward=problem.stochastic_forward,
        name=problem.name + "_affine",
    )
    return a, b, transformed


def _affine_path_error(variant: str, n_steps: int = 1000, seed: int = 123) -> float:
    """Max relative path deviation between transformed-run and pushed-forward run."""
    problem = problems.make_convex_problem("standard")
    cfg = SmoothingConfig(delta=0.001, noise_variance=0.01)
    rng = derive_stream(seed, ["affine", variant])
    a, b, transformed = _affine_pair(problem, rng)
    J = 8
    x0 = problem.prior.sample(J, derive_stream(seed, ["affine-init"]))
    acfg = dict(
        variant=variant, step_size=0.001, ensemble_size=J,
        horizon=n_steps * 0.001, seed=seed, record_every=1,
    )
    run_plain = aldi.run(problem, cfg, aldi.AldiConfig(**acfg), initial_ensemble=x0)
    run_mapped = aldi.run(
        transformed, cfg, aldi.AldiConfig(**acfg), initial_ensemble=x0 @ a.T + b
    )
    worst = 0.0
    for (_, ens_p), (_, ens_m) in zip(run_plain.snapshots, run_mapped.snapshots):
        mapped = ens_p.xs @ a.T + b
        scale = max(1.0, float(np.max(np.abs(mapped))))
        worst = max(worst, float(np.max(np.abs(mapped - ens_m.xs))) / scale)
    return worst


def validate_properties(seed: int = 0, heavy: bool = False) -> list[CheckResult]:
    """Desk-scale battery of the package's invariants; returns one result per check."""
    from . import core

    checks: list[CheckResult] = []
    rng = derive_stream(seed, ["validate"])

    # ensemble square root factorization and affine equivariance of statistics
    worst_fact = 0.0
    worst_affine = 0.0
    for d, J in [(1, 5), (2, 40), (3, 10), (6, 200), (10, 1000)]:
        xs = rng.standard_normal((J, d)) @ rng.standard_normal((d, d))
        s = core.ensemble_sqrt(xs)
        c = core.ensemble_covariance(xs)
        worst_fact = max(worst_fact, float(np.max(np.abs(s @ s.T - c))))
        a = rng.standard_normal((d, d)) + 2 * np.eye(d)
        b = rng.standard_normal(d)
        ys = xs @ a.T + b
        scale = max(1.0, float(np.max(np.abs(a @ c @ a.T))))
        worst_affine = max(
            worst_affine,
            float(np.max(np.abs(core.ensemble_mean(ys) - (a @ core.ensemble_mean(xs) + b)))),
            float(np.max(np.abs(core.ensemble_covariance(ys) - a @ c @ a.T))) / scale,
            float(np.max(np.abs(core.ensemble_sqrt(ys) - a @ s))) / scale,
        )
    checks.append(_check("ensemble_sqrt_factorization", worst_fact, 1e-12))
    checks.append(_check("ensemble_statistics_affine_equivariance", worst_affine, 1e-10))

    # cross-correlation identity on a linear forward map
    xs = rng.standard_normal((500, 3))
    avec = rng.standard_normal(3)
    d_direct = core.cross_correlation(xs, xs @ avec)
    d_linear = core.ensemble_covariance(xs) @ avec
    rel = float(np.max(np.abs(d_direct - d_linear)) / max(1e-30, np.max(np.abs(d_linear))))
    checks.append(_check("cross_correlation_linear_identity", rel, 1e-10))

    # prior gradient versus finite differences
    prior = GaussianPrior(np.array([0.3, -1.2]), np.array([[2.0, 0.4], [0.4, 1.0]]))
    worst = 0.0
    for _ in range(20):
        x = rng.standard_normal(2) * 2
        g = prior.grad_log_density(x)
        h = 1e-6
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            fd = (prior.log_density(x + e) - prior.log_density(x - e)) / (2 * h)
            worst = max(worst, abs((g[i] - fd) / max(1e-12, abs(fd))))
    checks.append(_check("prior_gradient_finite_difference", worst, 1e-6))

    # smoothing invariants on a dense grid
    delta = 0.001
    grid = np.linspace(-2 * delta, 3 * delta, 4001)
    sm = np.asarray(smoothing.smooth_g(grid, delta))
    hinge = np.maximum(0.0, grid)
    checks.append(_check("smooth_g_uniform_bound", float(np.max(np.abs(sm - hinge))), delta))
    zero_ok = np.all((sm == 0) == (grid <= 0))
    checks.append(_check("smooth_g_zero_set", 0.0 if zero_ok else 1.0, 0.5))
    checks.append(_check("smooth_g_monotone", float(np.max(np.diff(sm) < -1e-15)), 0.5))
    inner = np.linspace(1e-5 * delta, delta * (1 - 1e-5), 2001)
    comp = np.asarray(smoothing.ramp(delta - inner, delta)) + np.asarray(
        smoothing.ramp(inner, delta)
    )
    checks.append(_check("ramp_complement_identity", float(np.max(np.abs(comp - 1))), 1e-12))

    # potential gradient versus finite differences away from the kink
    worst = 0.0
    for problem in [problems.make_convex_problem(), problems.make_saddle_problem()]:
        cfg = SmoothingConfig(delta=0.001, noise_variance=0.01)
        count = 0
        while count < 20:
            x = problem.prior.sample(1, rng)[0]
            if abs(float(problem.evaluate_limit_state(x))) <= 10 * cfg.delta:
                continue
            count += 1
            g = smoothing.grad_potential(x, problem, cfg)
            h = 1e-6
            for i in range(2):
                e = np.zeros(2)
                e[i] = h
                fd = (
                    float(smoothing.potential(x + e, problem, cfg))
                    - float(smoothing.potential(x - e, problem, cfg))
                ) / (2 * h)
                worst = max(worst, abs((g[i] - fd) / max(1e-9, abs(fd))))
    checks.append(_check("grad_potential_finite_difference", worst, 1e-5))

    # path-wise affine invariance of both sampler variants
    for variant in aldi.VARIANTS:
        err = _affine_path_error(variant, n_steps=1000, seed=seed + 17)
        checks.append(_check(f"aldi_affine_invariance_{variant}", err, 1e-8))

    # gradient and gradient-free drifts agree on a linear limit state
    lin_prior = GaussianPrior(np.zeros(2), np.eye(2))
    avec = np.array([0.8, -0.5])
    lin_problem = RareEventProblem(
        dimension=2,
        limit_state=lambda x: np.asarray(x, dtype=float) @ avec + 5.0,
        limit_state_gradient=lambda x: np.broadcast_to(
            avec, np.asarray(x, dtype=float).shape
        ).copy(),
        prior=lin_prior,
        name="linear",
    )
    xs = lin_prior.sample(50, rng)
    cfg = SmoothingConfig(delta=0.001, noise_variance=0.5)
    d_grad = aldi.drift_gradient(xs, lin_problem, cfg)
    d_free = aldi.drift_gradient_free(xs, lin_problem, cfg)
    rel = float(np.max(np.abs(d_grad - d_free)) / max(1e-30, np.max(np.abs(d_grad))))
    checks.append(_check("drift_gradient_free_linear_agreement", rel, 1e-10))

    # determinism of short runs
    problem = problems.make_convex_problem()
    cfg = SmoothingConfig(delta=0.001, noise_variance=0.01)
    acfg = aldi.AldiConfig(variant="gradient", step_size=0.001, horizon=0.05,
                           ensemble_size=20, seed=seed + 5)
    r1 = aldi.run(problem, cfg, acfg)
    r2 = aldi.run(problem, cfg, acfg)
    same = np.array_equal(r1.final_ensemble.xs, r2.final_ensemble.xs)
    checks.append(_check("run_determinism_bitwise", 0.0 if same else 1.0, 0.5))

    # EM closed form (K=1) and log-likelihood monotonicity
    data = rng.standard_normal((300, 2)) @ np.array([[1.5, 0.3], [0.0, 0.7]])
    mixture, history = gmm.fit_em(
        data, gmm.EmConfig(components=1, covariance_floor=1e-9, init_seed=seed),
        return_history=True,
    )
    mu_err = float(np.max(np.abs(mixture.means[0] - data.mean(axis=0))))
    dev = data - data.mean(axis=0)
    cov_oracle = dev.T @ dev / len(data) + 1e-9 * np.eye(2)
    cov_err = float(np.max(np.abs(mixture.covariances[0] - cov_oracle)))
    checks.append(_check("em_k1_closed_form", max(mu_err, cov_err), 1e-12))
    mixture3, history3 = gmm.fit_em(
        data, gmm.EmConfig(components=3, init_seed=seed), return_history=True
    )
    drop = float(np.max(np.maximum(0.0, -np.diff(history3)))) if len(history3) > 1 else 0.0
    checks.append(_check("em_loglik_monotone", drop, 1e-9))

    # self-normalized weights: scale invariance and ESS bounds
    lw = rng.standard_normal(200)
    ind = rng.random(200) < 0.3
    p1, e1, _ = estimators.self_normalized_is(ind, lw)
    p2, e2, _ = estimators.self_normalized_is(ind, lw + 123.4)
    checks.append(
        _check("snis_scale_invariance", max(abs(p1 - p2), abs(e1 - e2) / e1), 1e-12)
    )
    checks.append(_check("snis_ess_bounds", 0.0 if 1.0 <= e1 <= 200.0 else 1.0, 0.5))

    # proposal-equals-prior reduces to crude Monte Carlo bit for bit
    problem = problems.make_convex_problem()
    q0 = gmm.GaussianMixture.from_gaussian(problem.prior)
    rep_is = estimators.mixture_is_estimator(q0, problem, 4000, derive_stream(seed, ["same"]))
    rep_mc = estimators.crude_monte_carlo(problem, 4000, derive_stream(seed, ["same"]))
    identical = rep_is.p_hat == rep_mc.p_hat
    checks.append(_check("prior_proposal_equals_crude_mc", 0.0 if identical else 1.0, 0.5))

    # smoothed-posterior TV distance decreasing in R (coarse grid)
    cfg_grid = estimators.GridSpec(points_per_axis=200, span_std=6.0)
    tvs = [
        estimators.posterior_tv_distance(
            problem, SmoothingConfig(delta=0.001, noise_variance=r), cfg_grid
        )
        for r in (1e-1, 1e-2, 1e-3, 1e-4)
    ]
    monotone = all(b < a for a, b in zip(tvs, tvs[1:]))
    checks.append(_check("tv_decreasing_in_R", 0.0 if monotone else 1.0, 0.5))

    # vortex conservation, observable zero, instability probe
    vp = problems.VortexParams(sigma=0.0, forward_step=1e-4, forward_horizon=0.5)
    x0 = problems.equilateral_configuration(vp.energy)
    traj = problems.simulate_vortex_sde(x0, vp, derive_stream(seed, ["vortex"]))
    h0 = problems.vortex_hamiltonian(traj.states[0], vp.circulations)
    h1 = problems.vortex_hamiltonian(traj.states[-1], vp.circulations)
    checks.append(_check("vortex_energy_conservation", abs((h1 - h0) / h0), 1e-3))
    a0 = float(problems.vortex_observable(x0, vp.energy))
    checks.append(_check("vortex_observable_zero_at_equilateral", a0, 1e-12))
    pert = x0 + 1e-3 * derive_stream(seed, ["vortex-pert"]).standard_normal(6)
    traj_p = problems.simulate_vortex_sde(pert, vp, derive_stream(seed, ["vortex2"]))
    a_start = float(problems.vortex_observable(traj_p.states[0], vp.energy))
    a_end = float(problems.vortex_observable(traj_p.states[-1], vp.energy))
    checks.append(_check("vortex_instability_growth", a_end / a_start, 10.0, ">="))

    # product estimator noisier than the mixture route across seeds (desk scale)
    alg1, alg2 = [], []
    cache: dict = {}
    for s in range(4):
        cfg_run = copy.deepcopy(DEFAULT_CONFIGS["convex"])
        cfg_run["aldi"]["ensemble_size"] = 250
        cfg_run["aldi"]["horizon"] = 5.0
        cfg_run["estimator"]["is_samples"] = 250
        cfg_run["estimator"]["components"] = 4
        cfg_run["seed"] = seed + 100 + s
        res2 = run_pipeline(cfg_run, _cache=cache)
        cfg1 = copy.deepcopy(cfg_run)
        cfg1["estimator"]["method"] = "product"
        res1 = run_pipeline(cfg1, _cache=cache)
        alg1.append(res1.report.p_hat)
        alg2.append(res2.report.p_hat)
    ratio = float(np.std(alg1) / max(1e-300, np.std(alg2)))
    checks.append(_check("product_estimator_less_stable", ratio, 1.0, ">="))

    return checks


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="failprob",
        description="Rare-event failure-probability estimation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in [
        ("run", "run one estimation pipeline"),
        ("sweep", "run a config-axis sweep"),
        ("validate", "run the invariant battery"),
        ("reference", "print oracle reference probabilities"),
    ]:
        p = sub.add_parser(name, help=desc)
        p.add_argument("--config", type=str, default=None, help="JSON config path")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", type=str, default="failprob_out", help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="parallel sweep workers")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            checks = validate_properties(seed=args.seed or 0)
            os.makedirs(args.out, exist_ok=True)
            report_path = os.path.join(args.out, "validation_report.txt")
            with open(report_path, "w") as fh:
                for check in checks:
                    print(check.line())
                    fh.write(check.line() + "\n")
            failed = [c for c in checks if not c.passed]
            print(f"{len(checks) - len(failed)}/{len(checks)} properties passed")
            return 1 if failed else 0

        if args.command == "reference":
            names = (
                [load_config(args.config)["problem"]["name"]]
                if args.config
                else sorted(DEFAULT_CONFIGS)
            )
            for name in names:
                cfg = resolve_config(
                    load_config(args.config) if args.config else {"problem": {"name": name}}
                )
                ref = reference_probability(cfg)
                if ref is None:
                    print(f"{name}: no quantitative reference available")
                else:
                    print(f"{name}: P_ref = {ref!r}")
            return 0

        if args.config is None:
            print("error: --config is required for this command", file=sys.stderr)
            return 1
        config = load_config(args.config)
        if args.seed is not None:
            config["seed"] = args.seed

        if args.command == "run":
            result = run_pipeline(config, out_dir=args.out)
            rep = result.report
            print(
                f"p_hat = {rep.p_hat:.6e} method={rep.method} "
                f"failures={rep.failure_count}/{rep.sample_count}"
                + (f" ess={rep.ess:.1f}" if rep.ess is not None else "")
            )
            for kind, path in result.paths.items():
                print(f"wrote {kind}: {path}")
            return 0

        if args.command == "sweep":
            if "sweep" not in config:
                print("error: config must contain a 'sweep' block", file=sys.stderr)
                return 1
            spec = SweepSpec(
                axis=config["sweep"]["axis"],
                values=tuple(config["sweep"]["values"]),
                repetitions=config["sweep"].get("repetitions", 10),
            )
            summary = run_sweep(config, spec, out_dir=args.out, jobs=args.jobs)
            for value in summary["values"]:
                stats = summary["per_value"][value]
                print(
                    f"{summary['axis']}={value}: median p_hat "
                    f"{stats['median_p_hat']} median |err| {stats['median_abs_error']} "
                    f"({stats['runs']} runs)"
                )
            print(f"wrote {summary['csv']}")
            return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - last-resort runtime guard
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
