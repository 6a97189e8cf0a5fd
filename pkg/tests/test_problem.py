import numpy as np
import pytest

from blockpd.models.dti import make_dti_problem
from blockpd.problem import (
    DiagnosticError,
    ProblemSpec,
    check_adjoint,
    check_jacobian_fd,
    estimate_norms_static,
    power_iteration,
    prox_ball_indicator,
    prox_l2_squared,
)

from oracles import residual_ball


def test_prox_l2_squared_closed_form():
    assert prox_l2_squared(0.5, 2.0, np.array([4.0]))[0] == pytest.approx(2.0)


def test_prox_ball_projects_and_shrinks():
    p = prox_ball_indicator(1.0, 1.0, 0.0, np.array([[3.0, 4.0], [0.3, 0.4]]))
    assert np.allclose(p, [[0.6, 0.8], [0.3, 0.4]])
    q = prox_ball_indicator(1.0, 2.0, 1.0, np.array([[0.4, 0.0]]))
    assert np.allclose(q, [[0.2, 0.0]])  # shrink by 1/(1 + 2*1*1/2)


def test_prox_ball_optimality(rng):
    v = 3 * rng.standard_normal((1000, 27))
    sigma = rng.uniform(0.1, 10, (1000, 1))
    p = prox_ball_indicator(sigma, 0.7, 1e-3, v)
    res = residual_ball(v, p, sigma[:, 0], 0.7, 1e-3)
    assert np.max(res) <= 1e-12


def test_power_iteration_matches_svd(rng):
    A = rng.standard_normal((7, 5))
    est, ok = power_iteration(lambda v: A @ v, lambda w: A.T @ w, 5, n_iter=2000, tol=1e-14)
    assert ok
    assert est == pytest.approx(np.linalg.norm(A, 2), rel=1e-6)


def test_static_norms_power_iteration_bounds_blocks(quad):
    from dataclasses import replace

    p = replace(quad.problem, norm_estimates=None)
    est = estimate_norms_static(p, quad.x0, n_iter=5000, tol=1e-15)
    assert np.all(est.per_block >= quad.problem.norm_estimates * (1 - 1e-6))
    assert np.allclose(est.per_block, quad.problem.norm_estimates, rtol=1e-5)


@pytest.mark.parametrize("name", ["quad", "tv", "comp1", "comp_sum"])
def test_baselines_pass_derivative_checks(name, request):
    b = request.getfixturevalue(name)
    x = b.x0 + np.random.default_rng(1).standard_normal(b.x0.size)
    assert check_jacobian_fd(b.problem, x) <= 1e-6
    assert check_adjoint(b.problem, x) <= 1e-10


@pytest.mark.parametrize("setup", ["d1", "d2", "d3", "d4"])
def test_dti_passes_derivative_checks(setup):
    inst = make_dti_problem(dims=(3, 3, 3), seed=0, block_setup=setup)
    x = inst.grid.x_true.ravel() + 0.01 * np.random.default_rng(0).standard_normal(inst.x0.size)
    assert check_jacobian_fd(inst.problem, x) <= 1e-6
    assert check_adjoint(inst.problem, x) <= 1e-10


def test_fd_probe_reports_non_finite(quad):
    from dataclasses import replace

    bad = replace(quad.problem, K_eval=lambda x: np.full(quad.y0.size, np.nan))
    with pytest.raises(DiagnosticError):
        check_jacobian_fd(bad, quad.x0)


def test_problem_spec_validates_constants(quad):
    from dataclasses import replace

    with pytest.raises(ValueError):
        replace(quad.problem, gamma_G=-np.ones(quad.problem.n_primal_blocks))
    with pytest.raises(ValueError):
        replace(quad.problem, norm_estimates=np.ones(2))


def test_block_prox_touches_one_block(quad):
    p = quad.problem
    x = np.ones(quad.x0.size)
    out = p.prox_G_block(1, 0.3, x)
    mask = p.primal_partition.mask([1])
    assert np.array_equal(out[~mask], x[~mask])
    assert not np.allclose(out[mask], x[mask])
