import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockpd.blocks import ConnectionGraph
from blockpd.models.dti import make_dti_problem
from blockpd.stepper import (
    ConfigurationError,
    TrailingNormEstimator,
    advance,
    coupling_residual,
    gamma_bar_fstar,
    init_dual_steps_from_weights,
    init_step_state,
    kappa_margin,
    relaxed_product_gap,
    sigma_test_bounds,
    tau_bound_check,
)


def _state(family, regime, m=3, n=2, seed=0, **kw):
    r = np.random.default_rng(seed)
    probs = r.uniform(0.2, 1.0, m if family == "full_dual" else n)
    gG = kw.pop("gG", r.uniform(0.1, 2.0, m))
    gF = kw.pop("gF", r.uniform(0.1, 2.0, n))
    return init_step_state(
        family, regime, r.uniform(0.01, 1.0, m), r.uniform(0.01, 1.0, n), probs,
        gamma_tilde_G=gG, gamma_F=gF, **kw,
    )


def test_single_block_sigma_closed_form():
    g = ConnectionGraph(1, 1, [{0}])
    sigma = init_dual_steps_from_weights(np.array([0.5]), g, np.array([2.0]), 0.05, np.ones(1), "full_dual")
    assert sigma[0] == pytest.approx(0.475, rel=1e-15)


def test_full_primal_sigma_picks_up_probability():
    g = ConnectionGraph(1, 2, [{0, 1}])
    nu = np.array([0.5, 0.25])
    sigma = init_dual_steps_from_weights(np.array([0.5]), g, np.array([2.0, 2.0]), 0.05, nu, "full_primal")
    # Both dual blocks are simultaneous so each carries w_{0,l} = 2.
    assert np.allclose(sigma, 0.95 / (0.5 * 2 * 4) * nu)


def test_sigma_bounds_take_smaller_of_row_and_column_forms():
    g = ConnectionGraph(2, 1, [{0}, {0}])
    tau = np.array([1.0, 1.0])
    row = sigma_test_bounds(g, tau, np.ones(2), "full_dual", np.array([3.0]))
    both = sigma_test_bounds(g, tau, np.ones(2), "full_dual", np.array([3.0]), np.array([[1.0, 2.0]]))
    assert row[0] == pytest.approx(9.0)
    assert both[0] == pytest.approx(5.0)


@pytest.mark.parametrize("family", ["full_dual", "full_primal"])
@pytest.mark.parametrize("regime", ["fixed", "acc2", "acc", "lin"])
@given(seed=st.integers(0, 10**6), steps=st.integers(1, 300))
@settings(max_examples=25, deadline=None)
def test_coupling_identities_survive_updates(family, regime, seed, steps):
    s = _state(family, regime, seed=seed, **({"gG": 0.0, "gF": 0.0} if regime == "fixed" else {}))
    for _ in range(steps):
        s = advance(s)
        assert coupling_residual(s) <= 1e-12


@pytest.mark.parametrize("family", ["full_dual", "full_primal"])
@pytest.mark.parametrize("regime", ["acc2", "acc", "lin"])
def test_relaxed_product_rule(family, regime):
    s = _state(family, regime, seed=3)
    for _ in range(500):
        nxt = advance(s)
        assert relaxed_product_gap(s, nxt) <= 1e-12
        s = nxt


def test_acc2_update_formulas():
    s = init_step_state("full_dual", "acc2", [0.5], [0.4], [1.0], gamma_tilde_G=1.0, gamma_F=2.0)
    s1 = advance(s)
    assert s1.tau[0] == pytest.approx(0.5 / 2.0)
    assert s1.sigma[0] == pytest.approx(0.4 / 2.6)
    assert s1.omega_bar == 1.0


def test_acc_update_formulas():
    s = init_step_state("full_dual", "acc", [0.5, 0.25], [0.4], [1.0, 1.0], gamma_tilde_G=1.0)
    s1 = advance(s)
    omega = max(1 / np.sqrt(2.0), 1 / np.sqrt(1.5))
    assert s1.omega_bar == pytest.approx(omega)
    assert np.allclose(s1.tau, [0.5 / (2.0 * omega), 0.25 / (1.5 * omega)])
    assert s1.sigma[0] == pytest.approx(0.4 / omega)


def test_lin_factor_is_frozen():
    s = init_step_state("full_dual", "lin", [0.05], [0.1], [1.0], gamma_tilde_G=0.5, gamma_F=0.5)
    expected = max(1 / (1 + 2 * 0.05 * 0.5), 1 / (1 + 2 * 0.1 * 0.5))
    assert s.lin_omega == pytest.approx(expected)
    for _ in range(50):
        s = advance(s)
        assert s.omega_bar == pytest.approx(expected)


def test_fixed_regime_keeps_steps():
    s = init_step_state("full_primal", "fixed", [0.3], [0.2, 0.1], [0.5, 1.0])
    t = s
    for _ in range(10):
        t = advance(t)
    assert np.array_equal(t.tau, s.tau) and np.array_equal(t.sigma, s.sigma)
    assert t.iteration == 10


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(family="bogus", regime="acc"),
        dict(family="full_dual", regime="bogus"),
        dict(family="full_dual", regime="acc2", kappa=1.2),
        dict(family="full_dual", regime="acc2", kappa=0.1, delta=0.2),
        dict(family="full_dual", regime="acc", gamma_tilde_G=0.0),
        dict(family="full_dual", regime="lin", gamma_tilde_G=0.5, gamma_F=0.0),
        dict(family="full_dual", regime="acc2", gamma_tilde_G=1.0, gamma_GK=[1.0, 1.0]),
        dict(family="full_dual", regime="acc2", gamma_tilde_G=-1.0),
    ],
)
def test_inadmissible_constants_raise(kwargs):
    family = kwargs.pop("family")
    regime = kwargs.pop("regime")
    with pytest.raises(ConfigurationError):
        init_step_state(family, regime, [0.5, 0.5], [0.5], [1.0, 1.0], **kwargs)


def test_full_primal_dual_constant_must_respect_probability():
    with pytest.raises(ConfigurationError):
        init_step_state("full_primal", "acc2", [0.5], [0.5], [0.5], gamma_F=0.6, gamma_bar_F=[1.0])
    init_step_state("full_primal", "acc2", [0.5], [0.5], [0.5], gamma_F=0.4, gamma_bar_F=[1.0])


def test_gamma_bar_fstar_keeps_linear_blocks():
    out = gamma_bar_fstar([1.0, 2.0], [True, False], "full_dual")
    assert list(out) == [0.0, 2.0]
    out = gamma_bar_fstar([1.0, 2.0], [True, False], "full_dual", zeta=0.5, alpha_y=0.1, p=1.5)
    assert np.allclose(out, [1.0 - 0.25 - 0.1, 2.0])


def test_tau_bound_warns_when_violated():
    s = init_step_state("full_dual", "fixed", [10.0], [0.1], [1.0])
    with pytest.warns(RuntimeWarning):
        assert tau_bound_check(s, L=1.0, L3=1.0, rho=[1.0]) < 0
    assert tau_bound_check(s, L=0.0) == pytest.approx(s.delta)


def test_trailing_norm_estimator():
    est = TrailingNormEstimator(2, window=3, inflation=1.1)
    with pytest.raises(RuntimeError):
        est.estimate()
    for v in ([5.0, 1.0], [1.0, 1.0], [1.0, 2.0], [1.0, 1.0]):
        est.observe(v)
    assert np.allclose(est.estimate(), [1.1, 2.2])  # 5.0 has left the window


@pytest.mark.parametrize("setup", ["d1", "d2", "d3", "d4"])
def test_dti_initial_margin_is_nonnegative(setup):
    inst = make_dti_problem(dims=(4, 4, 4), seed=0, block_setup=setup)
    norms = inst.problem.norm_estimates
    sub = inst.info.get("sub_norms")
    assert kappa_margin(inst.step_state, inst.graph, norms, sub) >= -1e-12


def test_dti_d2_dual_steps_closed_form():
    inst = make_dti_problem(dims=(4, 4, 4), seed=0, block_setup="d2")
    d1 = make_dti_problem(dims=(4, 4, 4), seed=0, block_setup="d1", grid=inst.grid)
    R = d1.problem.norm_estimates[0]
    R_E, R_T = inst.problem.norm_estimates
    tau = inst.step_state.tau0[0]
    sig_mu, sig_lam = inst.step_state.sigma0
    assert sig_mu * R_E == pytest.approx(d1.step_state.sigma0[0] * R, rel=1e-12)
    # w(lam, mu) = R_E/(R - R_E) so the mu row sums to R/R_E and the lam row to R/(R - R_E).
    kappa = inst.step_state.kappa
    assert sig_mu * tau * (R / R_E) * R_E**2 == pytest.approx(1 - kappa, rel=1e-12)
    assert sig_lam * tau * (R / (R - R_E)) * R_T**2 == pytest.approx(1 - kappa, rel=1e-12)
