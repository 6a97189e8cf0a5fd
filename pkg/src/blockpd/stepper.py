"""Step-length and testing-parameter state machines.

Two algorithm families share the same parameters but index them
differently.

Full-dual family (random primal blocks, all dual blocks updated)
    A state with counter ``i`` holds ``tau^i``, ``sigma^i``, ``phi^i``,
    ``psi^i`` and ``eta^i`` with the coupling
    ``pi_j phi_j tau_j = eta = psi_l sigma_l``. One call of :func:`advance`
    produces the state ``i+1``; its ``omega_bar`` is the over-relaxation
    factor ``eta^i / eta^{i+1}`` that iteration ``i`` uses, and its ``sigma``
    is the dual step iteration ``i`` uses.

Full-primal family (all primal blocks updated, random dual blocks)
    A state with counter ``i`` holds ``tau^i``, ``phi^i``, the dual step
    ``sigma^{i+1}`` used in iteration ``i`` together with ``psi^{i+1}``, a
    second pipeline slot ``sigma^{i+2}``, ``psi^{i+2}``, the over-relaxation
    factor ``omega_bar^i`` and ``eta = eta^{i+1}``. The coupling reads
    ``phi_j tau_j = eta = nu_l psi_next_l sigma_next_l`` and
    ``nu_l psi_l sigma_l = omega_bar * eta``. :func:`advance` is called after
    iteration ``i`` completes.

Regimes: ``fixed`` keeps everything constant, ``acc2`` gives O(1/N) rates on
blocks with second-order growth, ``acc`` gives O(1/N^2) rates on all primal
blocks, and ``lin`` gives linear rates.
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .blocks import ConnectionGraph

__all__ = [
    "FAMILIES",
    "REGIMES",
    "ConfigurationError",
    "StepState",
    "TrailingNormEstimator",
    "gamma_bar_fstar",
    "init_step_state",
    "init_dual_steps_from_weights",
    "advance",
    "update_fixed",
    "update_acc2_full_dual",
    "update_acc_full_dual",
    "update_lin_full_dual",
    "update_acc2_full_primal",
    "update_acc_full_primal",
    "update_lin_full_primal",
    "coupling_residual",
    "relaxed_product_gap",
    "kappa_margin",
    "sigma_test_bounds",
    "tau_bound_check",
]

FAMILIES = ("full_dual", "full_primal")
REGIMES = ("fixed", "acc2", "acc", "lin")


class ConfigurationError(ValueError):
    """Raised for inadmissible step-rule constants or inconsistent setups."""


@dataclass(frozen=True)
class StepState:
    """Per-iteration step and testing parameters.

    Attributes
    ----------
    family : {"full_dual", "full_primal"}
    regime : {"fixed", "acc2", "acc", "lin"}
    tau, phi : ndarray, shape (m,)
        Primal step lengths and testing weights.
    sigma, psi : ndarray, shape (n,)
        Dual step lengths and testing weights (see the module docstring for
        their iteration index in each family).
    eta : float
        Common scale of the coupling identities.
    omega_bar : float
        Over-relaxation factor in ``(0, 1]``.
    iteration : int
    probs : ndarray
        Inclusion probabilities of the randomized side: ``pi_j`` for the
        full-dual family (length m), ``nu_l`` for the full-primal family
        (length n).
    gamma_tilde_G : ndarray, shape (m,)
        Primal acceleration constants.
    gamma_F : ndarray, shape (n,)
        Dual acceleration constants: ``gamma_bar_F*`` for the full-dual
        family and ``gamma_tilde_F*`` for the full-primal family.
    kappa, delta : float
    tau0, sigma0 : ndarray
        Initial steps entering the sigma-test (``sigma0`` is ``sigma^1`` in
        the full-primal family).
    sigma_next, psi_next : ndarray or None
        Second pipeline slot of the full-primal family.
    lin_omega : float
        Frozen factor of the ``lin`` regime (1 otherwise).
    """

    family: str
    regime: str
    tau: np.ndarray
    sigma: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    eta: float
    omega_bar: float
    iteration: int
    probs: np.ndarray
    gamma_tilde_G: np.ndarray
    gamma_F: np.ndarray
    kappa: float
    delta: float
    tau0: np.ndarray
    sigma0: np.ndarray
    sigma_next: Optional[np.ndarray] = None
    psi_next: Optional[np.ndarray] = None
    lin_omega: float = 1.0

    @property
    def m(self) -> int:
        return self.tau.size

    @property
    def n(self) -> int:
        return self.sigma.size

    def primal_probs(self) -> np.ndarray:
        return self.probs if self.family == "full_dual" else np.ones(self.m)

    def dual_probs(self) -> np.ndarray:
        return self.probs if self.family == "full_primal" else np.ones(self.n)


def gamma_bar_fstar(gamma_Fstar, nl_mask, family, zeta=None, alpha_y=None, p=1.0):
    """Effective dual strong-monotonicity constants ``gamma_bar_F*``.

    Dual blocks that see the non-linear range of ``K`` lose
    ``(p - 1) zeta_l`` and, in the full-dual family, ``alpha_y``. Without
    ``zeta`` and ``alpha_y`` those blocks get ``gamma_bar_F* = 0``; blocks
    outside the non-linear range keep ``gamma_F*``.
    """
    gamma_Fstar = np.asarray(gamma_Fstar, dtype=float)
    nl_mask = np.asarray(nl_mask, dtype=bool)
    if zeta is None or (family == "full_dual" and alpha_y is None):
        return np.where(nl_mask, 0.0, gamma_Fstar)
    zeta = np.broadcast_to(np.asarray(zeta, dtype=float), gamma_Fstar.shape)
    loss = (p - 1.0) * zeta
    if family == "full_dual":
        loss = loss + float(alpha_y)
    return np.where(nl_mask, gamma_Fstar - loss, gamma_Fstar)


def _vec(value, size, label):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full(size, float(arr))
    if arr.shape != (size,):
        raise ConfigurationError(f"{label} needs {size} entries, got shape {arr.shape}")
    return arr.copy()


def _check_admissible(family, regime, probs, gG, gF, gamma_GK, gamma_bar_F):
    if regime == "fixed":
        if np.any(gG > 0) or np.any(gF > 0):
            warnings.warn("fixed regime ignores the configured acceleration constants", UserWarning)
        return
    if np.any(gG < 0) or np.any(gF < 0):
        raise ConfigurationError("acceleration constants must be non-negative")
    primal_p = probs if family == "full_dual" else np.ones_like(gG)
    if regime in ("acc", "lin") and np.any(gG <= 0):
        raise ConfigurationError(f"the {regime} regime needs gamma_tilde_G > 0 on every primal block")
    if regime == "lin" and np.any(gF <= 0):
        raise ConfigurationError("the lin regime needs positive dual acceleration constants on every dual block")
    if gamma_GK is not None:
        gk = np.asarray(gamma_GK, dtype=float)
        limit = primal_p * gk
        ok = (gG < limit) | ((gG == 0) & (gk == 0) & (regime == "acc2"))
        if not np.all(ok):
            bad = int(np.flatnonzero(~ok)[0])
            raise ConfigurationError(
                f"gamma_tilde_G[{bad}]={gG[bad]} is outside [0, {limit[bad]}) for the {regime} regime"
            )
    if family == "full_primal" and gamma_bar_F is not None:
        gb = np.asarray(gamma_bar_F, dtype=float)
        ok = (gF < probs * gb) | ((gF == 0) & (gb == 0) & (regime != "lin"))
        if not np.all(ok):
            bad = int(np.flatnonzero(~ok)[0])
            raise ConfigurationError(
                f"gamma_tilde_F*[{bad}]={gF[bad]} is outside [0, nu*gamma_bar) = [0, {probs[bad] * gb[bad]})"
            )


def init_step_state(
    family,
    regime,
    tau0,
    sigma0,
    probs,
    gamma_tilde_G=0.0,
    gamma_F=0.0,
    kappa=0.05,
    delta=0.05,
    eta0=1.0,
    gamma_GK=None,
    gamma_bar_F=None,
) -> StepState:
    """Initial state satisfying the coupling identities.

    Parameters
    ----------
    family : {"full_dual", "full_primal"}
    regime : {"fixed", "acc2", "acc", "lin"}
    tau0 : array_like, shape (m,)
        Initial primal steps.
    sigma0 : array_like, shape (n,)
        Initial dual steps (``sigma^0`` for full-dual, ``sigma^1`` for
        full-primal).
    probs : array_like
        ``pi_j`` (full-dual) or ``nu_l`` (full-primal) inclusion probabilities.
    gamma_tilde_G : array_like
        Primal acceleration constants.
    gamma_F : array_like
        ``gamma_bar_F*`` (full-dual) or ``gamma_tilde_F*`` (full-primal).
    kappa, delta : float
        Step-test constants with ``0 <= delta <= kappa < 1``.
    eta0 : float
        Scale of the coupling (``eta^0`` for full-dual, ``eta^1`` for
        full-primal); the iterates do not depend on it.
    gamma_GK : array_like, optional
        ``gamma_G + gamma_K`` per primal block, used to validate the
        acceleration constants.
    gamma_bar_F : array_like, optional
        ``gamma_bar_F*`` per dual block for validating full-primal
        ``gamma_tilde_F*``.

    Raises
    ------
    ConfigurationError
        For inadmissible constants.
    """
    if family not in FAMILIES:
        raise ConfigurationError(f"unknown family {family!r}")
    if regime not in REGIMES:
        raise ConfigurationError(f"unknown regime {regime!r}")
    if not (0.0 <= delta <= kappa < 1.0):
        raise ConfigurationError(f"need 0 <= delta <= kappa < 1, got delta={delta}, kappa={kappa}")
    tau0 = np.atleast_1d(np.asarray(tau0, dtype=float)).copy()
    sigma0 = np.atleast_1d(np.asarray(sigma0, dtype=float)).copy()
    m, n = tau0.size, sigma0.size
    if np.any(tau0 <= 0) or np.any(sigma0 <= 0) or not np.all(np.isfinite(tau0)) or not np.all(np.isfinite(sigma0)):
        raise ConfigurationError("initial steps must be positive and finite")
    if eta0 <= 0:
        raise ConfigurationError("eta0 must be positive")
    probs = _vec(probs, m if family == "full_dual" else n, "probabilities")
    if np.any(probs <= 0) or np.any(probs > 1):
        raise ConfigurationError("probabilities must lie in (0, 1]")
    gG = _vec(gamma_tilde_G, m, "gamma_tilde_G")
    gF = _vec(gamma_F, n, "dual acceleration constants")
    _check_admissible(family, regime, probs, gG, gF, gamma_GK, gamma_bar_F)

    lin_omega = 1.0
    if regime == "lin":
        # Same formula in both families; sigma0 is sigma^1 for full-primal.
        lin_omega = max(np.max(1.0 / (1.0 + 2.0 * tau0 * gG)), np.max(1.0 / (1.0 + 2.0 * sigma0 * gF)))

    if family == "full_dual":
        return StepState(
            family=family,
            regime=regime,
            tau=tau0.copy(),
            sigma=sigma0.copy(),
            phi=eta0 / (probs * tau0),
            psi=eta0 / sigma0,
            eta=float(eta0),
            omega_bar=1.0,
            iteration=0,
            probs=probs,
            gamma_tilde_G=gG,
            gamma_F=gF,
            kappa=float(kappa),
            delta=float(delta),
            tau0=tau0,
            sigma0=sigma0,
            lin_omega=float(lin_omega),
        )

    # Full-primal: omega_bar^0 is 1 except in the lin regime where it is frozen.
    omega0 = lin_omega if regime == "lin" else 1.0
    psi1 = omega0 * eta0 / (probs * sigma0)
    sigma2, psi2 = _fp_next_dual(regime, sigma0, psi1, gF, omega0, lin_omega)
    return StepState(
        family=family,
        regime=regime,
        tau=tau0.copy(),
        sigma=sigma0.copy(),
        phi=eta0 / tau0,
        psi=psi1,
        eta=float(eta0),
        omega_bar=float(omega0),
        iteration=0,
        probs=probs,
        gamma_tilde_G=gG,
        gamma_F=gF,
        kappa=float(kappa),
        delta=float(delta),
        tau0=tau0,
        sigma0=sigma0,
        sigma_next=sigma2,
        psi_next=psi2,
        lin_omega=float(lin_omega),
    )


def _fp_next_dual(regime, sigma, psi, gF, omega_cur, lin_omega):
    """Full-primal dual pipeline: ``(sigma^{k+1}, psi^{k+1})`` from slot ``k``.

    ``omega_cur`` is the over-relaxation factor paired with slot ``k`` in the
    acc regime (``sigma^{i+2} = sigma^{i+1} / omega^i``).
    """
    if regime == "fixed":
        return sigma.copy(), psi.copy()
    if regime == "acc2":
        f = 1.0 + 2.0 * sigma * gF
        return sigma / f, psi * f
    if regime == "acc":
        return sigma / omega_cur, psi.copy()
    f = 1.0 + 2.0 * sigma * gF
    return sigma / (f * lin_omega), psi * f


def update_fixed(state: StepState) -> StepState:
    """Keep every parameter; only the iteration counter advances."""
    if state.regime != "fixed":
        raise ConfigurationError("update_fixed needs the fixed regime")
    return replace(state, iteration=state.iteration + 1, omega_bar=1.0)


def _require(state, family, regime):
    if state.family != family or state.regime != regime:
        raise ConfigurationError(
            f"state is {state.family}/{state.regime}, update expects {family}/{regime}"
        )


def update_acc2_full_dual(state: StepState) -> StepState:
    """O(1/N) rule: ``tau <- tau/(1+2 tau gamma_tilde_G)``, ``sigma <- sigma/(1+2 sigma gamma_bar_F*)``."""
    _require(state, "full_dual", "acc2")
    ft = 1.0 + 2.0 * state.tau * state.gamma_tilde_G
    fs = 1.0 + 2.0 * state.sigma * state.gamma_F
    return replace(
        state,
        tau=state.tau / ft,
        phi=state.phi * ft,
        sigma=state.sigma / fs,
        psi=state.psi * fs,
        omega_bar=1.0,
        iteration=state.iteration + 1,
    )


def update_acc_full_dual(state: StepState) -> StepState:
    """O(1/N^2) rule with ``omega_bar = max_j (1 + 2 tau_j gamma_tilde_G,j)^(-1/2)``."""
    _require(state, "full_dual", "acc")
    ft = 1.0 + 2.0 * state.tau * state.gamma_tilde_G
    omega = float(np.max(1.0 / np.sqrt(ft)))
    return replace(
        state,
        tau=state.tau / (ft * omega),
        phi=state.phi * ft,
        sigma=state.sigma / omega,
        eta=state.eta / omega,
        omega_bar=omega,
        iteration=state.iteration + 1,
    )


def update_lin_full_dual(state: StepState) -> StepState:
    """Linear-rate rule with the frozen factor ``omega_bar``."""
    _require(state, "full_dual", "lin")
    omega = state.lin_omega
    ft = 1.0 + 2.0 * state.tau * state.gamma_tilde_G
    fs = 1.0 + 2.0 * state.sigma * state.gamma_F
    return replace(
        state,
        tau=state.tau / (ft * omega),
        phi=state.phi * ft,
        sigma=state.sigma / (fs * omega),
        psi=state.psi * fs,
        eta=state.eta / omega,
        omega_bar=omega,
        iteration=state.iteration + 1,
    )


def update_acc2_full_primal(state: StepState) -> StepState:
    """O(1/N) rule of the full-primal family; ``omega_bar = 1``."""
    _require(state, "full_primal", "acc2")
    ft = 1.0 + 2.0 * state.tau * state.gamma_tilde_G
    sigma_new, psi_new = _fp_next_dual("acc2", state.sigma_next, state.psi_next, state.gamma_F, 1.0, 1.0)
    return replace(
        state,
        tau=state.tau / ft,
        phi=state.phi * ft,
        sigma=state.sigma_next,
        psi=state.psi_next,
        sigma_next=sigma_new,
        psi_next=psi_new,
        omega_bar=1.0,
        iteration=state.iteration + 1,
    )


def update_acc_full_primal(state: StepState) -> StepState:
    """O(1/N^2) rule of the full-primal family.

    ``omega_bar^{i+1}`` is computed from ``tau^i`` and divides both the next
    primal step and, one slot later, the dual step.
    """
    _require(state, "full_primal", "acc")
    ft = 1.0 + 2.0 * state.tau * state.gamma_tilde_G
    omega = float(np.max(1.0 / np.sqrt(ft)))
    sigma_new, psi_new = _fp_next_dual("acc", state.sigma_next, state.psi_next, state.gamma_F, omega, 1.0)
    return replace(
        state,
        tau=state.tau / (ft * omega),
        phi=state.phi * ft,
        sigma=state.sigma_next,
        psi=state.psi_next,
        sigma_next=sigma_new,
        psi_next=psi_new,
        eta=state.eta / omega,
        omega_bar=omega,
        iteration=state.iteration + 1,
    )


def update_lin_full_primal(state: StepState) -> StepState:
    """Linear-rate rule of the full-primal family with the frozen factor."""
    _require(state, "full_primal", "lin")
    omega = state.lin_omega
    ft = 1.0 + 2.0 * state.tau * state.gamma_tilde_G
    sigma_new, psi_new = _fp_next_dual("lin", state.sigma_next, state.psi_next, state.gamma_F, omega, omega)
    return replace(
        state,
        tau=state.tau / (ft * omega),
        phi=state.phi * ft,
        sigma=state.sigma_next,
        psi=state.psi_next,
        sigma_next=sigma_new,
        psi_next=psi_new,
        eta=state.eta / omega,
        omega_bar=omega,
        iteration=state.iteration + 1,
    )


_UPDATES = {
    ("full_dual", "acc2"): update_acc2_full_dual,
    ("full_dual", "acc"): update_acc_full_dual,
    ("full_dual", "lin"): update_lin_full_dual,
    ("full_primal", "acc2"): update_acc2_full_primal,
    ("full_primal", "acc"): update_acc_full_primal,
    ("full_primal", "lin"): update_lin_full_primal,
}


def advance(state: StepState) -> StepState:
    """Apply the update rule of the state's family and regime."""
    if state.regime == "fixed":
        return update_fixed(state)
    return _UPDATES[(state.family, state.regime)](state)


def coupling_residual(state: StepState) -> float:
    """Largest relative defect of the coupling identities of the state's family."""
    eta = state.eta
    if state.family == "full_dual":
        r1 = np.max(np.abs(state.probs * state.phi * state.tau - eta))
        r2 = np.max(np.abs(state.psi * state.sigma - eta))
        return float(max(r1, r2) / eta)
    r1 = np.max(np.abs(state.phi * state.tau - eta))
    r2 = np.max(np.abs(state.probs * state.psi_next * state.sigma_next - eta))
    r3 = np.max(np.abs(state.probs * state.psi * state.sigma - state.omega_bar * eta))
    return float(max(r1, r2, r3) / eta)


def relaxed_product_gap(prev: StepState, nxt: StepState) -> float:
    """Largest relative excess of the step products over their initial values.

    Full-dual: ``omega^i sigma^{i+1}_l tau^i_j <= sigma^0_l tau^0_j`` with
    ``prev`` the state ``i`` and ``nxt`` the state ``i+1``. Full-primal:
    ``sigma^{i+1}_l tau^i_j <= sigma^1_l tau^0_j`` evaluated on ``prev``.
    A non-positive return value means the rule holds.
    """
    if prev.family == "full_dual":
        lhs = nxt.omega_bar * np.outer(nxt.sigma, prev.tau)
    else:
        lhs = np.outer(prev.sigma, prev.tau)
    rhs = np.outer(prev.sigma0, prev.tau0)
    return float(np.max(lhs / rhs - 1.0))


def sigma_test_bounds(graph: ConnectionGraph, tau0, probs, family, row_norms, sub_norms=None, sigma=None):
    """Upper bounds ``B_l`` with ``||sum_j sqrt(w_jl sigma_l tau_j / p) Q_l grad K P_j||^2 <= sigma_l B_l``.

    Two bounds are combined: with sub-block norms ``r_lj`` the column blocks
    give ``sum_j w_jl tau_j r_lj^2 / p``; with a row bound ``R_l`` the
    diagonal scaling gives ``max_j w_jl tau_j / p * R_l^2``. The smaller one
    is returned. If ``sigma`` is given the bounds are multiplied by it.

    Parameters
    ----------
    graph : ConnectionGraph
    tau0 : ndarray, shape (m,)
    probs : ndarray
        ``pi_j`` (full-dual) or ``nu_l`` (full-primal).
    family : str
    row_norms : ndarray, shape (n,)
    sub_norms : ndarray or sparse matrix, shape (n, m), optional
    sigma : ndarray, shape (n,), optional
    """
    W = graph.weight_matrix().tocoo()
    rows, cols = W.row, W.col
    tau0 = np.asarray(tau0, dtype=float)
    probs = np.asarray(probs, dtype=float)
    row_norms = np.asarray(row_norms, dtype=float)
    if family == "full_dual":
        coeff = W.data * tau0[cols] / probs[cols]
    else:
        coeff = W.data * tau0[cols] / probs[rows]
    n = graph.n_dual
    row_max = np.zeros(n)
    np.maximum.at(row_max, rows, coeff)
    bound = row_max * row_norms**2
    if sub_norms is not None:
        if hasattr(sub_norms, "tocsr"):
            sub_vals = np.asarray(sub_norms.tocsr()[rows, cols]).ravel()
        else:
            sub_vals = np.asarray(sub_norms, dtype=float)[rows, cols]
        col_sum = np.bincount(rows, weights=coeff * sub_vals**2, minlength=n)
        bound = np.minimum(bound, col_sum)
    connected = np.bincount(rows, minlength=n) > 0
    bound[~connected] = 0.0
    if sigma is not None:
        bound = bound * np.asarray(sigma, dtype=float)
    return bound


def init_dual_steps_from_weights(
    tau0, graph: ConnectionGraph, row_norms, kappa, probs, family, sub_norms=None
) -> np.ndarray:
    """Largest dual steps passing the sigma-test for given primal steps.

    ``sigma_l = (1 - kappa) / B_l`` with ``B_l`` from :func:`sigma_test_bounds`.
    For one primal block and the full-dual family this is
    ``(1 - kappa) / (tau0 * w_l * R_l^2)``; the full-primal family picks up a
    factor ``nu_l``.

    Raises
    ------
    ConfigurationError
        If a connected dual block has a zero norm bound.
    """
    if not 0 <= kappa < 1:
        raise ConfigurationError("kappa must lie in [0, 1)")
    B = sigma_test_bounds(graph, tau0, probs, family, row_norms, sub_norms)
    W = graph.weight_matrix()
    connected = np.asarray((W != 0).sum(axis=1)).ravel() > 0
    if np.any(connected & (B <= 0)):
        bad = int(np.flatnonzero(connected & (B <= 0))[0])
        raise ConfigurationError(f"dual block {bad} is connected but has a zero norm bound")
    sigma = np.empty(graph.n_dual)
    sigma[connected] = (1.0 - kappa) / B[connected]
    if np.any(~connected):
        # Disconnected blocks are unconstrained by the test; reuse the smallest scale.
        fill = float(np.min(sigma[connected])) if np.any(connected) else 1.0
        sigma[~connected] = fill
    return sigma


def kappa_margin(state: StepState, graph: ConnectionGraph, row_norms, sub_norms=None) -> float:
    """``(1 - kappa) - max_l ||sum_j sqrt(w_jl sigma0_l tau0_j / p) Q_l grad K P_j||^2``.

    The norm is replaced by the upper bound of :func:`sigma_test_bounds`
    computed from the supplied current Jacobian norm estimates, so a
    non-negative margin certifies the sigma-test. Negative values flag a
    violation at the current iterate.
    """
    B = sigma_test_bounds(graph, state.tau0, state.probs, state.family, row_norms, sub_norms, state.sigma0)
    return float((1.0 - state.kappa) - np.max(B))


def tau_bound_check(state: StepState, L, L3=0.0, rho=None, rho_x=0.0, alpha_y=None, gamma_GK=None) -> float:
    """Margin of the initial primal step bound that involves ``L`` and ``rho``.

    Returns ``delta - max_j tau0_j * C_j``; a negative value triggers a
    :class:`RuntimeWarning`. The bound is not enforced, matching the usual
    practice of simply taking small enough primal steps.
    """
    m, n = state.m, state.n
    rho = np.zeros(n) if rho is None else np.broadcast_to(np.asarray(rho, dtype=float), (n,))
    gk = np.zeros(m) if gamma_GK is None else np.asarray(gamma_GK, dtype=float)
    if state.family == "full_dual":
        pi = state.probs
        nl_term = 0.0
        if alpha_y is not None and alpha_y > 0:
            nl_term = n * L / (2.0 * alpha_y) * rho_x**2
        Lbar = L3 + L / state.omega_bar * (np.max((1.0 / pi + 1.0) ** 2) * np.sum(rho) + nl_term)
        extra = np.zeros(m)
        pos = gk > 0
        if np.any(pos):
            g, gt = gk[pos], state.gamma_tilde_G[pos]
            extra[pos] = 2.0 * (1.0 - pi[pos]) * g * (g - gt) / (pi[pos] * g - gt)
        C = Lbar + extra
    else:
        gap = gk - state.gamma_tilde_G
        mingap = np.min(gap) if m else 0.0
        quad = m * L**2 / (2.0 * mingap) * np.sum(rho**2) if mingap > 0 and L > 0 else 0.0
        C = np.full(m, L3 + quad)
    margin = float(state.delta - np.max(state.tau0 * C))
    if margin < 0:
        warnings.warn(f"initial primal steps violate the L/rho step bound by {-margin:.3g}", RuntimeWarning)
    return margin


class TrailingNormEstimator:
    """Dynamic per-block norm estimate from a trailing window.

    ``estimate()`` returns ``inflation`` times the blockwise maximum of the
    last ``window`` observations.
    """

    def __init__(self, n_blocks: int, window: int = 100, inflation: float = 1.05):
        if window < 1:
            raise ValueError("window must be at least 1")
        if inflation < 1:
            raise ValueError("inflation must be at least 1")
        self.n_blocks = int(n_blocks)
        self.window = int(window)
        self.inflation = float(inflation)
        self.history: deque = deque(maxlen=self.window)

    def observe(self, norms) -> None:
        norms = np.asarray(norms, dtype=float)
        if norms.shape != (self.n_blocks,):
            raise ValueError(f"expected {self.n_blocks} norms")
        self.history.append(norms.copy())

    def estimate(self) -> np.ndarray:
        if not self.history:
            raise RuntimeError("no norm observations yet")
        return self.inflation * np.max(np.stack(self.history), axis=0)
