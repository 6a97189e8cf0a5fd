"""Experiment runner.

Usage::

    blockpd run <config> [--seed-override S ...] [--max-iter-override N] [--output-dir DIR]
    blockpd compare <config> <config> ... [--output-dir DIR]
    blockpd check <config> [--output-dir DIR]
    blockpd presets

A config is a YAML file, or the name of a shipped preset (see
``blockpd presets``). Outputs go to ``--output-dir``, else the config's
``output_dir``, else ``$BLOCKPD_OUTPUT_ROOT/<config name>``, else
``./blockpd_runs/<config name>``.

Exit status is 0 on success, 1 when a run diverged and 2 for an invalid
configuration.
"""

from __future__ import annotations

import argparse
import copy
import csv
import datetime
import hashlib
import inspect
import io
import json
import logging
import os
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .diagnostics import (
    check_metric_lower_bound,
    descent_monitor,
    fit_rate_records,
    sigma_test_instance,
)
from .problem import check_adjoint, check_jacobian_fd
from .sampling import SAMPLING_MODES, SamplingPlan, effective_probabilities
from .solvers import ALGORITHMS, DivergenceError, SolverRun, run
from .stepper import (
    REGIMES,
    ConfigurationError,
    TrailingNormEstimator,
    gamma_bar_fstar,
    init_dual_steps_from_weights,
    init_step_state,
    kappa_margin,
)

log = logging.getLogger("blockpd")

OUTPUT_ROOT_ENV = "BLOCKPD_OUTPUT_ROOT"
PRESET_DIR = Path(__file__).parent / "presets"

CSV_COLUMNS = (
    "iter",
    "objective",
    "dist2_plain",
    "dist2_weighted",
    "kappa_margin",
    "omega_bar",
    "min_tau",
    "max_tau",
    "min_sigma",
    "max_sigma",
    "n_sampled_primal",
    "n_sampled_dual",
)
SUMMARY_FIELDS = ("objective", "dist2_plain", "dist2_weighted", "kappa_margin")

_TOP_KEYS = {
    "name",
    "problem",
    "algorithm",
    "regime",
    "constants",
    "sampling",
    "max_iter",
    "log_every",
    "seeds",
    "output_dir",
    "reference",
    "norm_tracking",
}
_CONSTANT_KEYS = {"kappa", "delta", "tau0", "sigma0", "gamma_tilde_G", "gamma_F", "acc_fraction", "alpha_y", "zeta", "p"}
_SAMPLING_KEYS = {"mode", "probabilities", "count", "stream_id"}
_REFERENCE_KEYS = {"mode", "long_run_iters"}
_NORM_TRACKING_KEYS = {"window", "inflation", "reinit"}


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Validated experiment description."""

    name: str
    problem: str
    parameters: dict
    algorithm: str = "full_dual_v1"
    regime: str = "fixed"
    constants: dict = field(default_factory=dict)
    sampling: dict = field(default_factory=lambda: {"mode": "full"})
    max_iter: int = 1000
    log_every: int = 1
    seeds: list = field(default_factory=lambda: [0])
    output_dir: Optional[str] = None
    reference: dict = field(default_factory=lambda: {"mode": "auto"})
    norm_tracking: Optional[dict] = None
    source: Optional[Path] = None

    @property
    def family(self) -> str:
        return "full_primal" if self.algorithm == "full_primal" else "full_dual"

    def content_hash(self, *extra) -> str:
        payload = json.dumps(
            {"problem": self.problem, "parameters": self.parameters, "extra": list(extra)},
            sort_keys=True,
            default=str,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _reject_unknown(section: str, data: dict, allowed: set):
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigurationError(f"{section}: unknown key(s) {', '.join(unknown)}")


def _as_dict(section, value):
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigurationError(f"{section}: expected a mapping")
    return dict(value)


def parse_config(data: dict, source: Optional[Path] = None) -> ExperimentConfig:
    """Validate a raw mapping into an :class:`ExperimentConfig`.

    Raises
    ------
    ConfigurationError
        With a message naming the offending field.
    """
    if not isinstance(data, dict):
        raise ConfigurationError("config: expected a mapping at the top level")
    _reject_unknown("config", data, _TOP_KEYS)
    prob = _as_dict("problem", data.get("problem"))
    _reject_unknown("problem", prob, {"name", "parameters"})
    pname = prob.get("name")
    if pname not in PROBLEMS:
        raise ConfigurationError(f"problem.name: must be one of {sorted(PROBLEMS)}, got {pname!r}")
    params = _as_dict("problem.parameters", prob.get("parameters"))
    allowed = set(inspect.signature(PROBLEMS[pname]).parameters)
    _reject_unknown("problem.parameters", params, allowed)

    algorithm = data.get("algorithm", "full_dual_v1")
    if algorithm not in ALGORITHMS:
        raise ConfigurationError(f"algorithm: must be one of {ALGORITHMS}, got {algorithm!r}")
    regime = data.get("regime", "fixed")
    if regime not in REGIMES:
        raise ConfigurationError(f"regime: must be one of {REGIMES}, got {regime!r}")

    constants = _as_dict("constants", data.get("constants"))
    _reject_unknown("constants", constants, _CONSTANT_KEYS)
    kappa = constants.setdefault("kappa", 0.05)
    delta = constants.setdefault("delta", min(0.05, kappa) if isinstance(kappa, (int, float)) else 0.05)
    for key in ("kappa", "delta"):
        if not isinstance(constants[key], (int, float)):
            raise ConfigurationError(f"constants.{key}: must be a number")
    if not (0.0 <= delta <= kappa < 1.0):
        raise ConfigurationError(
            f"constants.kappa/delta: need 0 <= delta <= kappa < 1, got delta={delta}, kappa={kappa}"
        )
    frac = constants.setdefault("acc_fraction", 0.5)
    if not (isinstance(frac, (int, float)) and 0.0 < frac < 1.0):
        raise ConfigurationError("constants.acc_fraction: must lie in (0, 1)")

    sampling = _as_dict("sampling", data.get("sampling")) or {"mode": "full"}
    _reject_unknown("sampling", sampling, _SAMPLING_KEYS)
    mode = sampling.setdefault("mode", "full")
    if mode not in SAMPLING_MODES:
        raise ConfigurationError(f"sampling.mode: must be one of {SAMPLING_MODES}, got {mode!r}")

    reference = _as_dict("reference", data.get("reference")) or {"mode": "auto"}
    _reject_unknown("reference", reference, _REFERENCE_KEYS)
    if reference.setdefault("mode", "auto") not in ("auto", "none", "closed_form", "long_run"):
        raise ConfigurationError("reference.mode: must be one of auto, none, closed_form, long_run")

    tracking = data.get("norm_tracking")
    if tracking is not None:
        tracking = dict(_as_dict("norm_tracking", tracking))
        _reject_unknown("norm_tracking", tracking, _NORM_TRACKING_KEYS)
        window = tracking.setdefault("window", 100)
        inflation = tracking.setdefault("inflation", 1.05)
        reinit = tracking.setdefault("reinit", False)
        if not isinstance(window, int) or window < 1:
            raise ConfigurationError("norm_tracking.window: must be a positive integer")
        if not isinstance(inflation, (int, float)) or inflation < 1:
            raise ConfigurationError("norm_tracking.inflation: must be a number >= 1")
        if not isinstance(reinit, bool):
            raise ConfigurationError("norm_tracking.reinit: must be true or false")
        if reinit and regime != "fixed":
            raise ConfigurationError("norm_tracking.reinit: only available with the fixed regime")

    max_iter = data.get("max_iter", 1000)
    log_every = data.get("log_every", 1)
    if not isinstance(max_iter, int) or max_iter < 0:
        raise ConfigurationError("max_iter: must be a non-negative integer")
    if not isinstance(log_every, int) or log_every < 1:
        raise ConfigurationError("log_every: must be a positive integer")
    seeds = data.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigurationError("seeds: must be a non-empty list of non-negative integers")
    name = data.get("name") or (source.stem if source is not None else pname)
    return ExperimentConfig(
        name=str(name),
        problem=pname,
        parameters=params,
        algorithm=algorithm,
        regime=regime,
        constants=constants,
        sampling=sampling,
        max_iter=max_iter,
        log_every=log_every,
        seeds=seeds,
        output_dir=data.get("output_dir"),
        reference=reference,
        norm_tracking=tracking,
        source=source,
    )


def available_presets() -> list:
    return sorted(p.stem for p in PRESET_DIR.glob("*.yaml"))


def load_config(path_or_preset: str) -> ExperimentConfig:
    """Read a YAML config file or a shipped preset by name."""
    path = Path(path_or_preset)
    if not path.exists():
        candidate = PRESET_DIR / f"{path_or_preset}.yaml"
        if not candidate.exists():
            raise ConfigurationError(
                f"config {path_or_preset!r} not found (presets: {', '.join(available_presets())})"
            )
        path = candidate
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: invalid YAML ({exc})") from exc
    return parse_config(data, path)


# --------------------------------------------------------------------------
# Problem construction
# --------------------------------------------------------------------------


@dataclass
class BuiltProblem:
    problem: object
    x0: np.ndarray
    y0: np.ndarray
    tau0: np.ndarray
    graph: object
    x_star: Optional[np.ndarray] = None
    y_star: Optional[np.ndarray] = None


def _build_baseline(factory, **kw):
    b = factory(**kw)
    p = b.problem
    rows = p.norm_estimates
    total = float(np.sqrt(np.sum(rows**2))) if rows is not None else float(np.sqrt(p.lipschitz_L) or 1.0)
    return BuiltProblem(p, b.x0, b.y0, np.full(p.n_primal_blocks, 1.0 / max(total, 1e-12)), p.connections, b.x_star, b.y_star)


def _problem_quadratic(primal_sizes=(5, 5, 5, 5), dual_sizes=(4, 4, 4, 4), g=1.0, c=1.0, density=0.6, seed=0):
    from .models.baselines import quadratic_saddle

    return _build_baseline(
        quadratic_saddle, primal_sizes=tuple(primal_sizes), dual_sizes=tuple(dual_sizes), g=g, c=c, density=density, seed=seed
    )


def _problem_tv1d(n_points=64, block_size=8, alpha=0.5, gamma=0.1, noise=0.1, seed=0):
    from .models.baselines import tv1d_denoising

    return _build_baseline(
        tv1d_denoising, n_points=n_points, block_size=block_size, alpha=alpha, gamma=gamma, noise=noise, seed=seed
    )


def _problem_composite_single(dim=12, rows=20, block_sizes=(4, 4, 4), mu=0.1, lam=0.05, seed=0):
    from .models.baselines import composite_single_dual

    b = composite_single_dual(dim=dim, rows=rows, block_sizes=tuple(block_sizes), mu=mu, lam=lam, seed=seed)
    L = b.problem.info["L"]
    return BuiltProblem(b.problem, b.x0, b.y0, np.full(b.problem.n_primal_blocks, 1.0 / (L + mu)), None, b.x_star, b.y_star)


def _problem_composite_sum(dim=10, n_terms=4, rows_per_term=5, mu=0.5, seed=0):
    from .models.baselines import composite_sum

    b = composite_sum(dim=dim, n_terms=n_terms, rows_per_term=rows_per_term, mu=mu, seed=seed)
    L = b.problem.info["L"]
    return BuiltProblem(b.problem, b.x0, b.y0, np.array([1.0 / (L + mu)]), None, b.x_star, b.y_star)


def _problem_dti(dims=(8, 8, 8), alpha=0.005, noise_fraction=0.3, block_setup="d1", seed=0):
    from .models.dti import make_dti_problem

    inst = make_dti_problem(dims=tuple(dims), alpha=alpha, noise_fraction=noise_fraction, seed=seed, block_setup=block_setup)
    return BuiltProblem(inst.problem, inst.x0, inst.y0, inst.step_state.tau.copy(), inst.graph)


PROBLEMS = {
    "quadratic_saddle": _problem_quadratic,
    "tv1d": _problem_tv1d,
    "composite_single_dual": _problem_composite_single,
    "composite_sum": _problem_composite_sum,
    "dti": _problem_dti,
}


def build_problem(cfg: ExperimentConfig, seed: int) -> BuiltProblem:
    params = dict(cfg.parameters)
    params.setdefault("seed", seed)
    try:
        return PROBLEMS[cfg.problem](**params)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"problem.parameters: {exc}") from exc


def _per_block(key, value, size):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(size, float(arr))
    if arr.shape != (size,):
        raise ConfigurationError(f"constants.{key}: needs {size} entries")
    return arr


def make_plans(cfg: ExperimentConfig, problem, seed: int):
    """Sampling plans for the primal and dual sides."""
    m, n = problem.n_primal_blocks, problem.n_dual_blocks
    s = cfg.sampling
    size = m if cfg.family == "full_dual" else n
    stream = int(s.get("stream_id", 0))
    try:
        if s["mode"] == "full":
            rand = SamplingPlan.full(size, seed, stream)
        elif s["mode"] == "bernoulli_independent":
            probs = _per_block("probabilities", s.get("probabilities", 0.5), size)
            rand = SamplingPlan.bernoulli(tuple(probs), seed, stream)
        else:
            rand = SamplingPlan.fixed_count(size, int(s.get("count", 1)), seed, stream)
    except ValueError as exc:
        raise ConfigurationError(f"sampling: {exc}") from exc
    if cfg.family == "full_dual":
        return rand, SamplingPlan.full(n)
    return SamplingPlan.full(m), rand


def make_step_state(cfg: ExperimentConfig, built: BuiltProblem, plan: SamplingPlan, regime=None):
    """Initial step state from the config constants and the problem structure."""
    regime = regime or cfg.regime
    p = built.problem
    c = cfg.constants
    m, n = p.n_primal_blocks, p.n_dual_blocks
    probs = effective_probabilities(plan)
    tau0 = _per_block("tau0", c["tau0"], m) if "tau0" in c else built.tau0
    if "sigma0" in c:
        sigma0 = _per_block("sigma0", c["sigma0"], n)
    elif built.graph is not None and p.norm_estimates is not None:
        sigma0 = init_dual_steps_from_weights(
            tau0, built.graph, p.norm_estimates, c["kappa"], probs, cfg.family, p.sub_norm_estimates
        )
    else:
        sigma0 = np.ones(n)
    primal_p = probs if cfg.family == "full_dual" else np.ones(m)
    gamma_GK = p.gamma_G + p.gamma_K
    gbar = gamma_bar_fstar(p.gamma_Fstar, p.nl_mask, cfg.family, c.get("zeta"), c.get("alpha_y"), c.get("p", 1.0))
    frac = c["acc_fraction"]

    def resolve(key, auto):
        value = c.get(key, "auto")
        if regime == "fixed":
            return 0.0
        if value == "auto":
            return auto
        return _per_block(key, value, auto.size)

    gG = resolve("gamma_tilde_G", frac * primal_p * gamma_GK)
    if cfg.family == "full_dual":
        gF = resolve("gamma_F", gbar if regime in ("acc2", "lin") else np.zeros(n))
    else:
        gF = resolve("gamma_F", frac * probs * gbar if regime in ("acc2", "lin") else np.zeros(n))
    return init_step_state(
        cfg.family,
        regime,
        tau0,
        sigma0,
        probs,
        gG,
        gF,
        kappa=c["kappa"],
        delta=c["delta"],
        gamma_GK=gamma_GK if regime != "fixed" else None,
        gamma_bar_F=gbar if cfg.family == "full_primal" and regime != "fixed" else None,
    )


# --------------------------------------------------------------------------
# References
# --------------------------------------------------------------------------


def resolve_reference(cfg: ExperimentConfig, built: BuiltProblem, seed: int, cache_dir: Path):
    """``(x_star, y_star)`` or ``None`` following ``reference.mode``.

    Long-run references use the fixed regime with full sampling for
    ``long_run_iters`` iterations (default ``100 * max_iter``) and are cached
    under ``cache_dir`` by a hash of the problem, seed and run length.
    """
    mode = cfg.reference.get("mode", "auto")
    if mode == "none":
        return None
    if mode in ("auto", "closed_form"):
        if built.x_star is not None:
            return built.x_star, built.y_star
        if mode == "closed_form":
            raise ConfigurationError(f"reference.mode: problem {cfg.problem!r} has no closed-form solution")
        return None
    iters = int(cfg.reference.get("long_run_iters", 100 * cfg.max_iter))
    key = cfg.content_hash(seed, iters, cfg.algorithm)
    path = cache_dir / f".reference-{cfg.problem}-{key}.npz"
    if path.exists():
        data = np.load(path)
        return data["x"], data["y"]
    plans = make_plans(replace_sampling(cfg), built.problem, seed)
    state = make_step_state(cfg, built, plans[0] if cfg.family == "full_dual" else plans[1], regime="fixed")
    res = run(SolverRun(built.problem, state, built.x0, built.y0, cfg.algorithm, *plans, max_iter=iters, log_every=max(iters, 1)))
    cache_dir.mkdir(parents=True, exist_ok=True)
    np.savez(path, x=res.x, y=res.y)
    return res.x, res.y


def replace_sampling(cfg: ExperimentConfig) -> ExperimentConfig:
    out = copy.copy(cfg)
    out.sampling = {"mode": "full"}
    return out


# --------------------------------------------------------------------------
# Output
# --------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def record_row(rec) -> list:
    return [
        _fmt(rec.iteration),
        _fmt(rec.objective),
        _fmt(rec.dist2_plain),
        _fmt(rec.dist2_weighted),
        _fmt(rec.kappa_margin),
        _fmt(rec.omega_bar),
        _fmt(rec.min_tau),
        _fmt(rec.max_tau),
        _fmt(rec.min_sigma),
        _fmt(rec.max_sigma),
        _fmt(rec.n_sampled_primal),
        _fmt(rec.n_sampled_dual),
    ]


def _header(cfg: ExperimentConfig, extra=()) -> str:
    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    lines = [f"# blockpd {__version__} experiment={cfg.name} written={stamp}"]
    lines += [f"# {line}" for line in extra]
    return "\n".join(lines) + "\n"


def write_csv(path: Path, cfg: ExperimentConfig, columns, rows, extra=()):
    buf = io.StringIO()
    buf.write(_header(cfg, extra))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def read_csv(path: Path):
    """Rows of a run CSV as a dict of float arrays, skipping comment lines."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    data = [list(map(float, row)) for row in reader]
    arr = np.array(data, dtype=float).reshape(-1, len(header))
    return {h: arr[:, i] for i, h in enumerate(header)}


def summarize(per_seed: dict) -> tuple:
    """Mean and standard error across seeds at each logged iteration."""
    iters = sorted({int(i) for d in per_seed.values() for i in d["iter"]})
    cols = ["iter", "n_seeds"]
    for f in SUMMARY_FIELDS:
        cols += [f"{f}_mean", f"{f}_stderr"]
    rows = []
    for it in iters:
        vals = {f: [] for f in SUMMARY_FIELDS}
        count = 0
        for d in per_seed.values():
            idx = np.flatnonzero(d["iter"] == it)
            if idx.size:
                count += 1
                for f in SUMMARY_FIELDS:
                    vals[f].append(d[f][idx[0]])
        row = [str(it), str(count)]
        for f in SUMMARY_FIELDS:
            v = np.array(vals[f])
            mean = float(np.mean(v)) if v.size else float("nan")
            se = float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")
            row += [_fmt(mean), _fmt(se)]
        rows.append(row)
    return cols, rows


def resolve_output_dir(cfg: ExperimentConfig, override: Optional[str]) -> Path:
    if override:
        return Path(override)
    if cfg.output_dir:
        base = Path(cfg.output_dir)
        if not base.is_absolute() and cfg.source is not None and cfg.source.parent != PRESET_DIR:
            base = cfg.source.parent / base
        return base
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(root) / cfg.name if root else Path("blockpd_runs") / cfg.name


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


@dataclass
class SeedOutcome:
    seed: int
    records: list
    diverged: bool
    message: str
    result: object = None


def _metric_report(cfg, built, state, plan) -> list:
    p = built.problem
    N, M = p.primal_partition.total_dim, p.dual_partition.total_dim
    if N + M > 200:
        return ["[metric_check] skipped: dense check limited to 200 dimensions"]
    lin = p.linearize(built.x0)
    J = np.column_stack([lin.apply(e) for e in np.eye(N)])
    probs = effective_probabilities(plan)
    phi, psi, C = sigma_test_instance(J, p.primal_partition, p.dual_partition, state.tau0, state.sigma0, probs, cfg.family)
    lam_min = check_metric_lower_bound(phi, psi, C, state.delta, state.kappa)
    verdict = "pass" if lam_min >= -1e-10 else "FAIL"
    return [f"[metric_check] lambda_min={_fmt(lam_min)} verdict={verdict}"]


def run_single(cfg: ExperimentConfig, seed: int, out_dir: Path, diag: list) -> SeedOutcome:
    built = build_problem(cfg, seed)
    primal_plan, dual_plan = make_plans(cfg, built.problem, seed)
    rand_plan = primal_plan if cfg.family == "full_dual" else dual_plan
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        state = make_step_state(cfg, built, rand_plan)
    for w in caught:
        diag.append(f"[warning seed={seed}] {w.message}")
    ref = resolve_reference(cfg, built, seed, (cfg.source.parent if cfg.source and cfg.source.parent != PRESET_DIR else out_dir))
    solver = SolverRun(
        built.problem,
        state,
        built.x0,
        built.y0,
        cfg.algorithm,
        primal_plan,
        dual_plan,
        max_iter=cfg.max_iter,
        log_every=cfg.log_every,
        reference_solution=ref,
        graph=built.graph,
    )
    if cfg.norm_tracking:
        nt = cfg.norm_tracking
        solver.norm_tracker = TrailingNormEstimator(built.problem.n_dual_blocks, nt["window"], nt["inflation"])
        solver.reinit_every = nt["window"] if nt["reinit"] else 0
        if solver.reinit_every and solver.graph is None:
            raise ConfigurationError("norm_tracking.reinit: the problem declares no connection graph")
    extra = [f"seed={seed} problem={cfg.problem} algorithm={cfg.algorithm} regime={cfg.regime}"]
    try:
        res = run(solver)
        outcome = SeedOutcome(seed, res.records, False, "", res)
    except DivergenceError as exc:
        res = exc.result
        outcome = SeedOutcome(seed, res.records, True, str(exc), res)
        diag.append(f"[divergence seed={seed}] {exc}")
    rows = [record_row(res.initial)] + [record_row(r) for r in res.records]
    write_csv(out_dir / f"run_{seed}.csv", cfg, CSV_COLUMNS, rows, extra)
    if seed == cfg.seeds[0]:
        try:
            diag.extend(_metric_report(cfg, built, state, rand_plan))
        except Exception as exc:  # report, do not abort the experiment
            diag.append(f"[metric_check] error: {exc}")
    if ref is not None and not outcome.diverged and res.records:
        model = "exponential" if cfg.regime == "lin" else "power"
        lo = max(1, cfg.max_iter // 50)
        try:
            fit = fit_rate_records(res.records, model, (lo, cfg.max_iter))
            diag.append(
                f"[rate_fit seed={seed}] model={fit.model} window={fit.window[0]}-{fit.window[1]} "
                f"slope={_fmt(fit.slope)} r_squared={_fmt(fit.r_squared)}"
            )
        except ValueError as exc:
            diag.append(f"[rate_fit seed={seed}] skipped: {exc}")
        try:
            viol = descent_monitor(res)
            kind = "deterministic" if cfg.sampling["mode"] == "full" else "single realization"
            diag.append(f"[descent seed={seed}] max_relative_increase={_fmt(viol)} ({kind})")
        except ValueError as exc:
            diag.append(f"[descent seed={seed}] skipped: {exc}")
    return outcome


def run_experiment(cfg: ExperimentConfig, out_dir: Path) -> tuple:
    """Run every seed of ``cfg``; write CSVs, ``summary.csv`` and ``diagnostics.txt``.

    Returns
    -------
    (exit_status, outcomes)
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    diag = [f"[experiment] name={cfg.name} problem={cfg.problem} algorithm={cfg.algorithm} regime={cfg.regime}"]
    outcomes = []
    for seed in cfg.seeds:
        log.info("running %s seed %d", cfg.name, seed)
        outcomes.append(run_single(cfg, seed, out_dir, diag))
    per_seed = {o.seed: read_csv(out_dir / f"run_{o.seed}.csv") for o in outcomes}
    cols, rows = summarize(per_seed)
    write_csv(out_dir / "summary.csv", cfg, cols, rows, [f"seeds={','.join(map(str, cfg.seeds))}"])
    (out_dir / "diagnostics.txt").write_text("\n".join(diag) + "\n")
    status = 1 if any(o.diverged for o in outcomes) else 0
    return status, outcomes


def iterations_to_target(iters, objectives, target):
    hit = np.flatnonzero(np.asarray(objectives) <= target)
    return int(np.asarray(iters)[hit[0]]) if hit.size else None


def compare_variants(results: dict) -> tuple:
    """Iterations-to-target table.

    Parameters
    ----------
    results : dict
        ``{variant: {seed: (iters, objectives, diverged)}}``.

    Returns
    -------
    (targets, table) with ``targets[seed]`` the minimum objective over all
    variants times ``1 + 1e-3`` and ``table[variant][seed]`` the first
    logged iteration at or below it, ``None`` when not reached or diverged.
    """
    seeds = sorted({s for v in results.values() for s in v})
    targets = {}
    for s in seeds:
        best = min(
            (float(np.min(obj)) for v in results.values() if s in v for (_, obj, div) in [v[s]] if len(obj) and not div),
            default=float("nan"),
        )
        targets[s] = best * (1.0 + 1e-3) if best >= 0 else best * (1.0 - 1e-3)
    table = {}
    for name, v in results.items():
        table[name] = {}
        for s in seeds:
            if s not in v or v[s][2]:
                table[name][s] = None
            else:
                table[name][s] = iterations_to_target(v[s][0], v[s][1], targets[s])
    return targets, table


def _rank_key(row):
    vals = [np.inf if x is None else x for x in row.values()]
    return (sum(x == np.inf for x in vals), float(np.median(vals)) if vals else np.inf)


def format_compare_table(targets, table) -> str:
    seeds = sorted(targets)
    lines = ["rank,variant," + ",".join(f"seed_{s}" for s in seeds)]
    order = sorted(table, key=lambda k: _rank_key(table[k]))
    for rank, name in enumerate(order, 1):
        cells = ["DNF" if table[name][s] is None else str(table[name][s]) for s in seeds]
        lines.append(f"{rank},{name}," + ",".join(cells))
    return "\n".join(lines) + "\n"


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    apply_overrides(cfg, args)
    out = resolve_output_dir(cfg, args.output_dir)
    status, outcomes = run_experiment(cfg, out)
    for o in outcomes:
        final = o.records[-1].objective if o.records else float("nan")
        print(f"{cfg.name} seed={o.seed} {'DIVERGED' if o.diverged else 'ok'} final_objective={_fmt(final)}")
    print(f"outputs written to {out}")
    return status


def cmd_compare(args) -> int:
    cfgs = [load_config(c) for c in args.configs]
    for c in cfgs:
        apply_overrides(c, args)
    seed_sets = {tuple(c.seeds) for c in cfgs}
    if len(seed_sets) != 1:
        raise ConfigurationError("compare: all configs must share the same seed list")
    names = [c.name for c in cfgs]
    if len(set(names)) != len(names):
        raise ConfigurationError("compare: config names must be distinct")
    root = Path(args.output_dir) if args.output_dir else resolve_output_dir(cfgs[0], None).parent / "compare"
    results = {}
    for c in cfgs:
        _, outcomes = run_experiment(c, root / c.name)
        results[c.name] = {
            o.seed: ([r.iteration for r in o.records], [r.objective for r in o.records], o.diverged) for o in outcomes
        }
    targets, table = compare_variants(results)
    text = format_compare_table(targets, table)
    header = "# targets " + " ".join(f"seed_{s}={_fmt(t)}" for s, t in sorted(targets.items())) + "\n"
    (root / "compare.csv").write_text(header + text)
    print(text, end="")
    return 0


def cmd_check(args) -> int:
    cfg = load_config(args.config)
    apply_overrides(cfg, args)
    seed = cfg.seeds[0]
    built = build_problem(cfg, seed)
    p = built.problem
    lines = [f"[check] name={cfg.name} problem={cfg.problem}"]
    ok = True
    x = built.x0 + 0.01 * np.random.default_rng(seed).standard_normal(built.x0.size)
    fd = check_jacobian_fd(p, x, seed=seed)
    adj = check_adjoint(p, x, seed=seed)
    ok &= fd <= 1e-6 and adj <= 1e-10
    lines.append(f"[jacobian_fd] max_relative_error={_fmt(fd)} verdict={'pass' if fd <= 1e-6 else 'FAIL'}")
    lines.append(f"[adjoint] max_error={_fmt(adj)} verdict={'pass' if adj <= 1e-10 else 'FAIL'}")
    primal_plan, dual_plan = make_plans(cfg, p, seed)
    plan = primal_plan if cfg.family == "full_dual" else dual_plan
    state = make_step_state(cfg, built, plan)
    if built.graph is not None and p.norm_estimates is not None:
        rows, sub = p.current_norms(built.x0) if p.current_norms else (p.norm_estimates, p.sub_norm_estimates)
        margin = kappa_margin(state, built.graph, rows, sub)
        ok &= margin >= -1e-12
        lines.append(f"[kappa_margin] value={_fmt(margin)} verdict={'pass' if margin >= -1e-12 else 'FAIL'}")
    metric = _metric_report(cfg, built, state, plan)
    ok &= not any("FAIL" in m for m in metric)
    lines.extend(metric)
    out = resolve_output_dir(cfg, args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "diagnostics.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0 if ok else 1


def cmd_presets(args) -> int:
    for name in available_presets():
        print(name)
    return 0


def apply_overrides(cfg: ExperimentConfig, args):
    if getattr(args, "seed_override", None):
        cfg.seeds = list(args.seed_override)
    if getattr(args, "max_iter_override", None) is not None:
        if args.max_iter_override < 0:
            raise ConfigurationError("--max-iter-override: must be non-negative")
        cfg.max_iter = args.max_iter_override


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blockpd", description="Block-adapted primal-dual experiment runner")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed-override", type=int, nargs="+", help="replace the config's seed list")
        p.add_argument("--max-iter-override", type=int, help="replace the config's max_iter")
        p.add_argument("--output-dir", help="output directory")

    p_run = sub.add_parser("run", help="run one experiment")
    p_run.add_argument("config")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="run several variants and rank iterations to a target objective")
    p_cmp.add_argument("configs", nargs="+")
    common(p_cmp)
    p_cmp.set_defaults(func=cmd_compare)

    p_chk = sub.add_parser("check", help="run the diagnostics only")
    p_chk.add_argument("config")
    common(p_chk)
    p_chk.set_defaults(func=cmd_check)

    p_pre = sub.add_parser("presets", help="list shipped presets")
    p_pre.set_defaults(func=cmd_presets)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
