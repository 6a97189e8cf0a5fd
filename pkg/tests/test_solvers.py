import numpy as np
import pytest

from blockpd.models import composite_single_dual, composite_sum, quadratic_saddle
from blockpd.sampling import SamplingPlan, draw_blocks
from blockpd.solvers import (
    DivergenceError,
    SolverRun,
    run,
    step_full_dual_v1,
    step_full_dual_v2,
    step_full_primal,
    weighted_distance,
)
from blockpd.stepper import ConfigurationError, init_dual_steps_from_weights, init_step_state

from oracles import chambolle_pock, proximal_gradient


def _iterates(cfg, step, n_iter):
    x, y, state = cfg.x0.copy(), cfg.y0.copy(), cfg.step_state
    xs, ys = [], []
    for i in range(n_iter):
        out = step(cfg, i, x, y, state)
        x, y, state = out.x, out.y, out.state
        xs.append(x)
        ys.append(y)
    return xs, ys


def _single_block_quadratic(seed=0):
    return quadratic_saddle(primal_sizes=(12,), dual_sizes=(9,), seed=seed)


def _fixed_state(b, tau=0.4, family="full_dual", probs=None):
    p = b.problem
    m, n = p.n_primal_blocks, p.n_dual_blocks
    probs = np.ones(m if family == "full_dual" else n) if probs is None else probs
    tau0 = np.full(m, tau)
    sigma0 = init_dual_steps_from_weights(tau0, p.connections, p.norm_estimates, 0.05, probs, family, p.sub_norm_estimates)
    return init_step_state(family, "fixed", tau0, sigma0, probs)


def test_single_block_linear_fixed_steps_is_chambolle_pock():
    b = _single_block_quadratic()
    state = _fixed_state(b)
    cfg = SolverRun(b.problem, state, b.x0, b.y0, algorithm="full_dual_v1")
    xs, ys = _iterates(cfg, step_full_dual_v1, 200)
    A, a, bb = b.problem.info["A"], b.problem.info["a"], b.problem.info["b"]
    ref_x, ref_y = chambolle_pock(
        A,
        lambda t, v: (v + t * a) / (1 + t),
        lambda s, v: (v - s * bb) / (1 + s),
        state.tau[0],
        state.sigma[0],
        b.x0,
        b.y0,
        200,
    )
    for k in range(200):
        assert np.max(np.abs(xs[k] - ref_x[k])) <= 1e-12 * max(1.0, np.max(np.abs(ref_x[k])))
        assert np.max(np.abs(ys[k] - ref_y[k])) <= 1e-12 * max(1.0, np.max(np.abs(ref_y[k])))


def test_linear_operator_makes_both_full_dual_variants_agree(quad):
    state = _fixed_state(quad, probs=np.full(4, 0.5))
    plan = SamplingPlan.bernoulli([0.5] * 4, seed=3)
    cfg = SolverRun(quad.problem, state, quad.x0, quad.y0, algorithm="full_dual_v1", primal_plan=plan)
    x1, y1 = _iterates(cfg, step_full_dual_v1, 100)
    x2, y2 = _iterates(cfg, step_full_dual_v2, 100)
    assert np.allclose(x1[-1], x2[-1], rtol=0, atol=1e-10)
    assert np.allclose(y1[-1], y2[-1], rtol=0, atol=1e-10)


def test_single_dual_block_reduces_to_block_proximal_gradient():
    b = composite_single_dual(seed=2)
    p = b.problem
    L, mu = p.info["L"], p.info["mu"]
    probs = np.full(3, 0.5)
    tau = 1.0 / (L + mu)
    state = init_step_state("full_dual", "fixed", np.full(3, tau), [1.0], probs)
    plan = SamplingPlan.bernoulli(probs, seed=5)
    cfg = SolverRun(p, state, b.x0, b.y0, algorithm="full_dual_v1", primal_plan=plan)
    xs, ys = _iterates(cfg, step_full_dual_v1, 300)
    masks = [p.primal_partition.mask(draw_blocks(plan, i)) for i in range(300)]
    A, bb = p.info["A"], p.info["b"]
    ref = proximal_gradient(
        lambda x: A.T @ (A @ x - bb),
        lambda t, v: np.sign(v) * np.maximum(np.abs(v) - t * p.info["lam"], 0) / (1 + t * mu),
        tau,
        b.x0,
        300,
        blocks=masks,
    )
    for k in range(300):
        assert np.max(np.abs(xs[k] - ref[k])) <= 1e-12
        assert ys[k][0] == 1.0


def test_full_primal_full_sampling_reduces_to_forward_backward(comp_sum):
    p = comp_sum.problem
    L, mu = p.info["L"], p.info["mu"]
    tau = 1.0 / (L + mu)
    state = init_step_state("full_primal", "fixed", [tau], np.ones(4), np.ones(4))
    cfg = SolverRun(p, state, comp_sum.x0, comp_sum.y0, algorithm="full_primal")
    xs, _ = _iterates(cfg, step_full_primal, 300)
    As, bs = p.info["As"], p.info["bs"]
    ref = proximal_gradient(
        lambda x: sum(Al.T @ (Al @ x - bl) for Al, bl in zip(As, bs)),
        lambda t, v: v / (1 + t * mu),
        tau,
        comp_sum.x0,
        300,
    )
    for k in range(300):
        assert np.max(np.abs(xs[k] - ref[k])) <= 1e-12 * max(1.0, np.max(np.abs(ref[k])))


def test_unsampled_primal_blocks_are_unchanged(quad):
    state = _fixed_state(quad, probs=np.full(4, 0.5))
    cfg = SolverRun(quad.problem, state, quad.x0 + 1.0, quad.y0, primal_plan=SamplingPlan.bernoulli([0.5] * 4))
    out = step_full_dual_v1(cfg, 0, cfg.x0, cfg.y0, state, S=[1, 3])
    keep = quad.problem.primal_partition.mask([0, 2])
    assert np.array_equal(out.x[keep], cfg.x0[keep])
    assert not np.array_equal(out.x[~keep], cfg.x0[~keep])


def test_unsampled_dual_blocks_are_unchanged(quad):
    state = _fixed_state(quad, family="full_primal", probs=np.full(4, 0.5))
    y0 = np.ones(quad.y0.size)
    cfg = SolverRun(
        quad.problem, state, quad.x0, y0, algorithm="full_primal", dual_plan=SamplingPlan.bernoulli([0.5] * 4)
    )
    out = step_full_primal(cfg, 0, cfg.x0, y0, state, V=[2])
    keep = ~quad.problem.dual_partition.mask([2])
    assert np.array_equal(out.y[keep], y0[keep])


@pytest.mark.parametrize("algorithm", ["full_dual_v1", "full_dual_v2", "full_primal"])
def test_converges_on_quadratic(quad, algorithm):
    family = "full_primal" if algorithm == "full_primal" else "full_dual"
    state = _fixed_state(quad, family=family)
    cfg = SolverRun(
        quad.problem, state, quad.x0, quad.y0, algorithm=algorithm, max_iter=3000, log_every=100,
        reference_solution=(quad.x_star, quad.y_star),
    )
    res = run(cfg)
    assert res.records[-1].dist2_plain < 1e-12 * res.initial.dist2_plain
    assert res.records[-1].dist2_weighted <= res.initial.dist2_weighted


def test_weighted_distance_is_zero_at_solution(quad):
    state = _fixed_state(quad)
    assert weighted_distance(quad.problem, state, quad.x_star, quad.y_star, quad.x_star, quad.y_star) == 0.0


def test_divergence_is_reported_with_partial_records(quad):
    tau0 = np.full(4, 50.0)
    state = init_step_state("full_dual", "fixed", tau0, np.full(4, 50.0), np.ones(4))
    cfg = SolverRun(quad.problem, state, quad.x0, quad.y0, max_iter=2000, divergence_factor=1e6)
    with pytest.raises(DivergenceError) as err:
        run(cfg)
    assert err.value.result.diverged
    assert len(err.value.records) < 2000


def test_logging_cadence_and_initial_record(quad):
    state = _fixed_state(quad)
    res = run(SolverRun(quad.problem, state, quad.x0, quad.y0, max_iter=50, log_every=10))
    assert [r.iteration for r in res.records] == [10, 20, 30, 40, 50]
    assert res.initial.iteration == 0
    assert res.state.iteration == 50


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(algorithm="nope"),
        dict(algorithm="full_primal"),
        dict(dual_plan=SamplingPlan.bernoulli([0.5] * 4)),
        dict(log_every=0),
        dict(primal_plan=SamplingPlan.full(3)),
    ],
)
def test_run_configuration_errors(quad, kwargs):
    state = _fixed_state(quad)
    with pytest.raises(ConfigurationError):
        SolverRun(quad.problem, state, quad.x0, quad.y0, **kwargs)


def test_dual_step_reinitialization_keeps_coupling():
    from blockpd.models.dti import make_dti_problem
    from blockpd.stepper import TrailingNormEstimator, coupling_residual

    inst = make_dti_problem(dims=(3, 3, 3), seed=0, block_setup="d2")
    tracker = TrailingNormEstimator(inst.problem.n_dual_blocks, window=5, inflation=1.05)
    cfg = SolverRun(
        inst.problem, inst.step_state, inst.x0, inst.y0, max_iter=20, log_every=5,
        graph=inst.graph, norm_tracker=tracker, reinit_every=5,
    )
    res = run(cfg)
    assert coupling_residual(res.state) <= 1e-12
    assert not np.allclose(res.state.sigma, inst.step_state.sigma)
    assert np.array_equal(res.state.sigma0, res.state.sigma)
    assert all(r.kappa_margin >= -1e-12 for r in res.records)


def test_reinitialization_requires_fixed_regime_and_tracker(quad):
    from blockpd.stepper import TrailingNormEstimator

    state = _fixed_state(quad)
    with pytest.raises(ConfigurationError):
        SolverRun(quad.problem, state, quad.x0, quad.y0, reinit_every=5)
    acc = init_step_state("full_dual", "acc2", state.tau, state.sigma, np.ones(4), gamma_tilde_G=0.1)
    with pytest.raises(ConfigurationError):
        SolverRun(quad.problem, acc, quad.x0, quad.y0, reinit_every=5, graph=quad.problem.connections,
                  norm_tracker=TrailingNormEstimator(4))
