"""Block-adapted primal-dual iterations with telemetry.

Three iteration schemes are provided:

``full_dual_v1``
    Random primal blocks are updated by a proximal step, over-relaxed, and
    the non-linear operator is evaluated at the over-relaxed point for a
    full dual update.
``full_dual_v2``
    Same primal step, but the dual update linearizes the over-relaxation
    around the current point, so ``K`` is evaluated only at the current
    point.
``full_primal``
    Random dual blocks are updated first; the primal update uses only the
    sampled dual blocks, over-relaxed by ``omega_bar / nu_l``.

With one block on each side, linear ``K`` and fixed steps, ``full_dual_v1``
is the classical primal-dual hybrid gradient method with over-relaxation
parameter one.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .blocks import ConnectionGraph
from .problem import ProblemSpec
from .sampling import SamplingPlan, draw_blocks
from .stepper import (
    ConfigurationError,
    StepState,
    TrailingNormEstimator,
    advance,
    init_dual_steps_from_weights,
    kappa_margin,
)

__all__ = [
    "ALGORITHMS",
    "DivergenceError",
    "SolverRun",
    "IterationRecord",
    "RunResult",
    "StepOutcome",
    "step_full_dual_v1",
    "step_full_dual_v2",
    "step_full_primal",
    "weighted_distance",
    "reinitialize_dual_steps",
    "run",
]

ALGORITHMS = ("full_dual_v1", "full_dual_v2", "full_primal")


class DivergenceError(RuntimeError):
    """Raised when iterates become non-finite or the objective explodes.

    Attributes
    ----------
    result : RunResult
        Records logged before the failure and the last finite iterate.
    """

    def __init__(self, message, result):
        super().__init__(message)
        self.result = result

    @property
    def records(self):
        return self.result.records


@dataclass
class SolverRun:
    """Everything needed to execute one solver run.

    Parameters
    ----------
    problem : ProblemSpec
    step_state : StepState
        Initial step parameters; its family must match ``algorithm``.
    x0, y0 : ndarray
        Initial primal and dual iterates.
    algorithm : {"full_dual_v1", "full_dual_v2", "full_primal"}
    primal_plan, dual_plan : SamplingPlan, optional
        Default to full sampling. The non-random side must use full sampling.
    max_iter : int
    log_every : int
    reference_solution : tuple of ndarray, optional
        ``(x_star, y_star)``; enables distance logging.
    graph : ConnectionGraph, optional
        Enables the sigma-test margin in the records.
    norm_tracker : TrailingNormEstimator, optional
        When given, current row norms are observed at each logged iteration
        and the trailing estimate feeds the margin.
    divergence_factor : float
        Abort when the objective exceeds this multiple of the initial value.
    reinit_every : int
        When positive, recompute the dual steps from the trailing norm
        estimate every this many iterations (see
        :func:`reinitialize_dual_steps`). Needs ``norm_tracker``, ``graph``
        and the fixed regime. Off by default.
    """

    problem: ProblemSpec
    step_state: StepState
    x0: np.ndarray
    y0: np.ndarray
    algorithm: str = "full_dual_v1"
    primal_plan: Optional[SamplingPlan] = None
    dual_plan: Optional[SamplingPlan] = None
    max_iter: int = 100
    log_every: int = 1
    reference_solution: Optional[tuple] = None
    graph: Optional[ConnectionGraph] = None
    norm_tracker: Optional[TrailingNormEstimator] = None
    divergence_factor: float = 1e12
    reinit_every: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"unknown algorithm {self.algorithm!r}")
        m, n = self.problem.n_primal_blocks, self.problem.n_dual_blocks
        if self.primal_plan is None:
            self.primal_plan = SamplingPlan.full(m)
        if self.dual_plan is None:
            self.dual_plan = SamplingPlan.full(n)
        if self.primal_plan.n_blocks != m or self.dual_plan.n_blocks != n:
            raise ConfigurationError("sampling plans must match the block counts of the problem")
        family = "full_primal" if self.algorithm == "full_primal" else "full_dual"
        if self.step_state.family != family:
            raise ConfigurationError(f"{self.algorithm} needs a {family} step state")
        if family == "full_dual" and self.dual_plan.mode != "full":
            raise ConfigurationError("full-dual algorithms update every dual block; use full dual sampling")
        if family == "full_primal" and self.primal_plan.mode != "full":
            raise ConfigurationError("the full-primal algorithm updates every primal block; use full primal sampling")
        if self.step_state.m != m or self.step_state.n != n:
            raise ConfigurationError("step state block counts do not match the problem")
        if self.max_iter < 0 or self.log_every < 1:
            raise ConfigurationError("need max_iter >= 0 and log_every >= 1")
        if self.reinit_every < 0:
            raise ConfigurationError("reinit_every must be non-negative")
        if self.reinit_every and (self.norm_tracker is None or self.graph is None):
            raise ConfigurationError("dual step re-initialization needs a norm tracker and a connection graph")
        if self.reinit_every and self.step_state.regime != "fixed":
            raise ConfigurationError("dual step re-initialization is only defined for the fixed regime")
        self.x0 = np.asarray(self.x0, dtype=float).copy()
        self.y0 = np.asarray(self.y0, dtype=float).copy()
        if self.x0.shape != (self.problem.primal_partition.total_dim,):
            raise ConfigurationError("x0 does not match the primal dimension")
        if self.y0.shape != (self.problem.dual_partition.total_dim,):
            raise ConfigurationError("y0 does not match the dual dimension")


@dataclass
class IterationRecord:
    """Telemetry of one logged iteration.

    ``dist2_plain`` is ``||x - x*||^2 + ||y - y*||^2``; ``dist2_primal`` is its
    primal part; ``dist2_weighted`` is the distance in the local metric
    built from the testing weights and the Jacobian at the current point.
    """

    iteration: int
    objective: float
    dist2_plain: float = float("nan")
    dist2_primal: float = float("nan")
    dist2_weighted: float = float("nan")
    kappa_margin: float = float("nan")
    omega_bar: float = 1.0
    min_tau: float = float("nan")
    max_tau: float = float("nan")
    min_sigma: float = float("nan")
    max_sigma: float = float("nan")
    sampled_primal: tuple = ()
    sampled_dual: tuple = ()

    @property
    def n_sampled_primal(self) -> int:
        return len(self.sampled_primal)

    @property
    def n_sampled_dual(self) -> int:
        return len(self.sampled_dual)


@dataclass
class RunResult:
    """Output of :func:`run`: logged records plus final iterates and state."""

    records: list
    x: np.ndarray
    y: np.ndarray
    state: StepState
    initial: IterationRecord
    diverged: bool = False
    message: str = ""
    extra: dict = field(default_factory=dict)


@dataclass
class StepOutcome:
    x: np.ndarray
    y: np.ndarray
    state: StepState
    sampled_primal: np.ndarray
    sampled_dual: np.ndarray


def _primal_update(problem, lin, state, x, y_dir, S):
    P = problem.primal_partition
    tau_c = P.expand(state.tau)
    cand = problem.prox_G(tau_c, x - tau_c * lin.adjoint(y_dir))
    if S.size == P.n_blocks:
        return cand
    return np.where(P.mask(S), cand, x)


def step_full_dual_v1(run: SolverRun, i: int, x, y, state: StepState, S=None) -> StepOutcome:
    """One iteration of the full-dual scheme with over-relaxed ``K`` evaluation.

    ``S`` overrides the sampled primal blocks (used in tests).
    """
    problem = run.problem
    P, Q = problem.primal_partition, problem.dual_partition
    if S is None:
        S = draw_blocks(run.primal_plan, i)
    S = np.asarray(S, dtype=np.int64)
    lin = problem.linearize(x)
    x_new = _primal_update(problem, lin, state, x, y, S)
    nxt = advance(state)
    pi_c = P.expand(state.probs)
    x_bar = x_new + (nxt.omega_bar / pi_c) * (x_new - x)
    sigma_c = Q.expand(nxt.sigma)
    y_new = problem.prox_Fstar(sigma_c, y + sigma_c * problem.K_eval(x_bar))
    return StepOutcome(x_new, y_new, nxt, S, np.arange(Q.n_blocks))


def step_full_dual_v2(run: SolverRun, i: int, x, y, state: StepState, S=None) -> StepOutcome:
    """One iteration of the full-dual scheme with a linearized over-relaxation."""
    problem = run.problem
    P, Q = problem.primal_partition, problem.dual_partition
    if S is None:
        S = draw_blocks(run.primal_plan, i)
    S = np.asarray(S, dtype=np.int64)
    lin = problem.linearize(x)
    x_new = _primal_update(problem, lin, state, x, y, S)
    nxt = advance(state)
    pi_c = P.expand(state.probs)
    sigma_c = Q.expand(nxt.sigma)
    arg = y + sigma_c * problem.K_eval(x)
    if S.size:
        d = (nxt.omega_bar / pi_c + 1.0) * (x_new - x)
        arg = arg + sigma_c * lin.apply(d)
    y_new = problem.prox_Fstar(sigma_c, arg)
    return StepOutcome(x_new, y_new, nxt, S, np.arange(Q.n_blocks))


def step_full_primal(run: SolverRun, i: int, x, y, state: StepState, V=None) -> StepOutcome:
    """One iteration of the full-primal scheme.

    Only the sampled dual blocks of ``K(x)`` are requested from the problem,
    and only they enter the primal update.
    """
    problem = run.problem
    P, Q = problem.primal_partition, problem.dual_partition
    if V is None:
        V = draw_blocks(run.dual_plan, i)
    V = np.asarray(V, dtype=np.int64)
    lin = problem.linearize(x)
    full = V.size == Q.n_blocks
    Kx = problem.K_eval(x) if full else problem.eval_K_on(x, V)
    sigma_c = Q.expand(state.sigma)
    cand = problem.prox_Fstar(sigma_c, y + sigma_c * Kx)
    nu_c = Q.expand(state.probs)
    if full:
        y_new = cand
        z = y_new + (state.omega_bar / nu_c) * (y_new - y)
    else:
        mask = Q.mask(V)
        y_new = np.where(mask, cand, y)
        z = np.where(mask, y_new + (state.omega_bar / nu_c) * (y_new - y), 0.0)
    x_new = _primal_update(problem, lin, state, x, z, np.arange(P.n_blocks))
    return StepOutcome(x_new, y_new, advance(state), np.arange(P.n_blocks), V)


_STEPS = {
    "full_dual_v1": step_full_dual_v1,
    "full_dual_v2": step_full_dual_v2,
    "full_primal": step_full_primal,
}


def metric_weights(state: StepState):
    """Testing weights ``(phi, psi, lambda_scale)`` of the local metric at ``state``.

    The coupling block is ``-lambda_scale * grad K(x)``, the mean over the
    sampling of the blockwise coefficients: ``phi tau pi = eta`` for the
    full-dual family and ``-nu sigma psi`` for the full-primal family.
    """
    if state.family == "full_dual":
        nxt = advance(state)
        return state.phi, nxt.psi, state.eta
    return state.phi, state.psi, -state.omega_bar * state.eta


def weighted_distance(problem: ProblemSpec, state: StepState, x, y, x_star, y_star) -> float:
    """``||u - u*||^2`` in the local metric ``[[Phi, -Lam^*], [-Lam, Psi]]``."""
    phi, psi, lam = metric_weights(state)
    dx = x - x_star
    dy = y - y_star
    P, Q = problem.primal_partition, problem.dual_partition
    val = float(np.sum(phi * P.block_sq_norms(dx)) + np.sum(psi * Q.block_sq_norms(dy)))
    lin = problem.linearize(x)
    val -= 2.0 * lam * float(lin.apply(dx) @ dy)
    return val


def reinitialize_dual_steps(run: SolverRun, x, state: StepState) -> StepState:
    """Fixed-regime dual steps recomputed from the trailing norm estimate at ``x``.

    The current row norms are fed to the tracker and the dual steps are
    reset with :func:`~blockpd.stepper.init_dual_steps_from_weights` for the
    current primal steps. The testing weights follow so the coupling
    identities still hold, and the new steps become the reference of the
    sigma-test margin.
    """
    problem = run.problem
    if problem.current_norms is not None:
        rows, _ = problem.current_norms(x)
    else:
        rows = problem.norm_estimates
    run.norm_tracker.observe(rows)
    # Sub-block bounds are not tracked, so only the row bound is used.
    sigma = init_dual_steps_from_weights(
        state.tau, run.graph, run.norm_tracker.estimate(), state.kappa, state.probs, state.family
    )
    if state.family == "full_dual":
        return replace(state, sigma=sigma, psi=state.eta / sigma, sigma0=sigma, tau0=state.tau.copy())
    psi = state.omega_bar * state.eta / (state.probs * sigma)
    return replace(
        state, sigma=sigma, psi=psi, sigma_next=sigma.copy(), psi_next=psi.copy(), sigma0=sigma, tau0=state.tau.copy()
    )


def _record(run: SolverRun, it, x, y, state, S, V) -> IterationRecord:
    problem = run.problem
    rec = IterationRecord(
        iteration=int(it),
        objective=float(problem.objective(x)),
        omega_bar=float(state.omega_bar),
        min_tau=float(np.min(state.tau)),
        max_tau=float(np.max(state.tau)),
        min_sigma=float(np.min(state.sigma)),
        max_sigma=float(np.max(state.sigma)),
        sampled_primal=tuple(int(s) for s in S),
        sampled_dual=tuple(int(v) for v in V),
    )
    if run.reference_solution is not None:
        xs, ys = run.reference_solution
        dxp = float(np.sum((x - xs) ** 2))
        rec.dist2_primal = dxp
        rec.dist2_plain = dxp + float(np.sum((y - ys) ** 2))
        if np.all(np.isfinite(state.phi)) and np.all(np.isfinite(state.psi)) and np.isfinite(state.eta):
            rec.dist2_weighted = weighted_distance(problem, state, x, y, xs, ys)
    if run.graph is not None:
        if problem.current_norms is not None:
            rows, sub = problem.current_norms(x)
        else:
            rows, sub = problem.norm_estimates, problem.sub_norm_estimates
        if rows is not None:
            if run.norm_tracker is not None:
                run.norm_tracker.observe(rows)
                rows = run.norm_tracker.estimate()
            rec.kappa_margin = kappa_margin(state, run.graph, rows, sub)
    return rec


def run(config: SolverRun) -> RunResult:
    """Execute ``config.max_iter`` iterations and return logged telemetry.

    The step rule is advanced inside every step. Iterations whose index is a
    multiple of ``log_every`` are recorded; the state before the first step
    is returned separately as ``initial``.

    Raises
    ------
    DivergenceError
        On non-finite iterates or an objective above
        ``divergence_factor * max(|initial objective|, 1)``. The exception
        carries the partial result.
    """
    step = _STEPS[config.algorithm]
    x = config.x0.copy()
    y = config.y0.copy()
    state = config.step_state
    empty = np.zeros(0, dtype=np.int64)
    initial = _record(config, 0, x, y, state, empty, empty)
    threshold = config.divergence_factor * max(abs(initial.objective), 1.0)
    records = []
    for i in range(config.max_iter):
        out = step(config, i, x, y, state)
        if not (np.all(np.isfinite(out.x)) and np.all(np.isfinite(out.y))):
            res = RunResult(records, x, y, state, initial, True, f"non-finite iterate at iteration {i + 1}")
            raise DivergenceError(res.message, res)
        x, y, state = out.x, out.y, out.state
        if config.reinit_every and (i + 1) % config.reinit_every == 0:
            state = reinitialize_dual_steps(config, x, state)
        if (i + 1) % config.log_every == 0:
            rec = _record(config, i + 1, x, y, state, out.sampled_primal, out.sampled_dual)
            if not np.isfinite(rec.objective) or rec.objective > threshold:
                res = RunResult(records, x, y, state, initial, True, f"objective blew up at iteration {i + 1}")
                raise DivergenceError(res.message, res)
            records.append(rec)
    return RunResult(records, x, y, state, initial)
