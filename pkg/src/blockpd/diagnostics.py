"""Numerical checks of the structural conditions behind the convergence theory.

All checks here are meant for desk-scale instances: the metric check
assembles dense matrices and the three-point probe samples point pairs.
None of them is used on production solver paths.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .blocks import BlockPartition
from .stepper import ConfigurationError

__all__ = [
    "RateFit",
    "ProbeReport",
    "SplitConstants",
    "ZbarResult",
    "check_metric_lower_bound",
    "metric_matrix",
    "sigma_test_instance",
    "fit_rate",
    "fit_rate_records",
    "probe_three_point",
    "split_constants",
    "scan_split_constants",
    "check_zbar_recursion",
    "descent_monitor",
    "stochastic_descent_check",
]


def metric_matrix(phi, psi, coupling) -> np.ndarray:
    """Dense ``[[Phi, -C^T], [-C, Psi]]`` from per-coordinate weights.

    Parameters
    ----------
    phi : array_like, shape (N,)
    psi : array_like, shape (M,)
    coupling : array_like, shape (M, N)
        The coupling operator ``Lambda`` as a dense matrix.
    """
    phi = np.asarray(phi, dtype=float)
    psi = np.asarray(psi, dtype=float)
    C = np.asarray(coupling, dtype=float)
    if C.shape != (psi.size, phi.size):
        raise ValueError(f"coupling must have shape ({psi.size}, {phi.size}), got {C.shape}")
    return np.block([[np.diag(phi), -C.T], [-C, np.diag(psi)]])


def check_metric_lower_bound(phi, psi, coupling, delta, kappa) -> float:
    """Smallest eigenvalue of the local metric minus its required lower bound.

    Computes ``lambda_min(Z M - diag(delta Phi, (kappa - delta)/(1 - delta) Psi))``
    with ``Z M = [[Phi, -Lambda^*], [-Lambda, Psi]]``. A value of at least
    ``-1e-10`` certifies the bound.

    Parameters
    ----------
    phi, psi : array_like
        Per-coordinate primal and dual testing weights.
    coupling : array_like, shape (M, N)
        ``Lambda`` as a dense matrix.
    delta, kappa : float
        ``0 <= delta <= kappa < 1``.
    """
    if not (0.0 <= delta <= kappa < 1.0):
        raise ConfigurationError("need 0 <= delta <= kappa < 1")
    phi = np.asarray(phi, dtype=float)
    psi = np.asarray(psi, dtype=float)
    Z = metric_matrix(phi, psi, coupling)
    if Z.shape[0] > 2000:
        raise ValueError("dense metric check is meant for small instances")
    bound = np.concatenate([delta * phi, (kappa - delta) / (1.0 - delta) * psi])
    D = Z - np.diag(bound)
    if not np.array_equal(D, D.T):
        raise RuntimeError("assembled metric is not symmetric")
    return float(np.linalg.eigvalsh(D)[0])


def sigma_test_instance(jacobian, primal: BlockPartition, dual: BlockPartition, tau, sigma, probs, family, eta=1.0):
    """Per-coordinate ``(phi, psi, Lambda)`` of the worst-case realization.

    Every random block is taken as sampled, which maximizes the coupling.
    For the full-dual family ``phi_j = eta/(pi_j tau_j)``, ``psi = eta/sigma`` and
    ``lambda_{l,j} = phi_j tau_j``. For the full-primal family
    ``phi_j = eta/tau_j``, ``psi_l = eta/(nu_l sigma_l)`` and
    ``lambda_{l,j} = psi_l sigma_l``.
    """
    J = np.asarray(jacobian, dtype=float)
    tau = np.asarray(tau, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    probs = np.asarray(probs, dtype=float)
    if family == "full_dual":
        phi = eta / (probs * tau)
        psi = eta / sigma
        lam = np.broadcast_to((phi * tau)[None, :], (dual.n_blocks, primal.n_blocks))
    elif family == "full_primal":
        phi = eta / tau
        psi = eta / (probs * sigma)
        lam = np.broadcast_to((psi * sigma)[:, None], (dual.n_blocks, primal.n_blocks))
    else:
        raise ConfigurationError(f"unknown family {family!r}")
    scale = lam[dual.block_of][:, primal.block_of]
    return primal.expand(phi), dual.expand(psi), scale * J


@dataclass
class RateFit:
    """Least-squares fit of a convergence rate.

    Attributes
    ----------
    window : tuple of int
        First and last iteration used.
    slope : float
        ``d log e / d log N`` for the power model, ``d log e / d N`` for the
        exponential model.
    model : {"power", "exponential"}
    r_squared : float
    n_points : int
    """

    window: tuple
    slope: float
    model: str
    r_squared: float
    n_points: int = 0

    @property
    def factor(self) -> float:
        """Per-iteration contraction factor of an exponential fit."""
        return float(np.exp(self.slope))


def fit_rate(iterations, errors, model="power", window=None) -> RateFit:
    """Fit ``e_N ~ C N^slope`` or ``e_N ~ C exp(slope N)``.

    Parameters
    ----------
    iterations, errors : array_like
    model : {"power", "exponential"}
    window : (int, int), optional
        Inclusive iteration range.

    Raises
    ------
    ValueError
        If fewer than 10 usable points remain.
    """
    if model not in ("power", "exponential"):
        raise ValueError(f"unknown rate model {model!r}")
    it = np.asarray(iterations, dtype=float)
    e = np.asarray(errors, dtype=float)
    keep = np.isfinite(e) & np.isfinite(it)
    if window is not None:
        keep &= (it >= window[0]) & (it <= window[1])
    if model == "power":
        keep &= it > 0
    bad = keep & (e <= 0)
    if np.any(bad):
        warnings.warn(f"dropping {int(bad.sum())} non-positive errors from the rate fit", RuntimeWarning)
        keep &= ~bad
    if keep.sum() < 10:
        raise ValueError(f"rate fit needs at least 10 positive points, got {int(keep.sum())}")
    t = np.log(it[keep]) if model == "power" else it[keep]
    z = np.log(e[keep])
    slope, intercept = np.polyfit(t, z, 1)
    resid = z - (slope * t + intercept)
    ss_tot = float(np.sum((z - z.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else max(0.0, 1.0 - float(np.sum(resid**2)) / ss_tot)
    used = it[keep]
    return RateFit((int(used[0]), int(used[-1])), float(slope), model, min(r2, 1.0), int(keep.sum()))


def fit_rate_records(records, model="power", window=None, quantity="dist2_primal") -> RateFit:
    """:func:`fit_rate` on a list of iteration records."""
    its = [r.iteration for r in records]
    errs = [getattr(r, quantity) for r in records]
    return fit_rate(its, errs, model, window)


@dataclass
class SplitConstants:
    """Sufficient constants for the three-point condition from a strong-convexity split."""

    beta1: float
    beta2: float
    theta_max: float
    L3_min: float


def split_constants(gamma_x, L, y_nl_norm, a, beta1, beta2, theta=None) -> SplitConstants:
    """Constants making the three-point condition hold with ``p = 1``.

    Assumes ``<[grad K(x') - grad K(x*)]^* y*, x' - x*>`` dominates
    ``||x' - x*||^2_{Gamma_K} + gamma_x ||x' - x*||^2`` and the blockwise
    analogue with ``gamma_K,j``. For block scaling ``a`` with minimum ``a_min``,

    ``theta_max = (a_min (gamma_x - beta1) - beta2 max_j(a_j - a_min)) / L``

    and ``L3 >= L^2 |y|^2 (1/beta1 + sum_j (a_j - a_min)/(beta2 a_min)) / 2 + 2 L theta``,
    where ``|y|`` is the norm of ``y*`` on the non-linear subspace. ``theta``
    defaults to ``theta_max``.
    """
    a = np.atleast_1d(np.asarray(a, dtype=float))
    if beta1 <= 0 or beta2 <= 0 or np.any(a < 0):
        raise ConfigurationError("need beta1, beta2 > 0 and a non-negative scaling")
    amin = float(np.min(a))
    if amin <= 0:
        raise ConfigurationError("the block scaling must be positive")
    numer = amin * (gamma_x - beta1) - beta2 * float(np.max(a - amin))
    theta_max = numer / L if L > 0 else (np.inf if numer >= 0 else -np.inf)
    th = theta_max if theta is None else float(theta)
    if not np.isfinite(th):
        th = 0.0
    spread = float(np.sum(a - amin))
    L3 = L**2 * y_nl_norm**2 * (1.0 / beta1 + spread / (beta2 * amin)) / 2.0 + 2.0 * L * max(th, 0.0)
    return SplitConstants(float(beta1), float(beta2), float(theta_max), float(L3))


def scan_split_constants(gamma_x, L, y_nl_norm, a, theta=0.0, n_grid=60) -> Optional[SplitConstants]:
    """Grid search over ``(beta1, beta2)`` for the smallest admissible ``L3``.

    Only pairs with ``theta_max >= theta`` are admissible. Returns ``None``
    when no grid pair qualifies.
    """
    if gamma_x <= 0:
        return None
    best = None
    for b1 in gamma_x * np.linspace(0.02, 0.98, n_grid):
        for b2 in np.geomspace(1e-3, 1e3, n_grid) * gamma_x:
            c = split_constants(gamma_x, L, y_nl_norm, a, b1, b2, theta)
            if c.theta_max >= theta and (best is None or c.L3_min < best.L3_min):
                best = c
    return best


@dataclass
class ProbeReport:
    """Outcome of :func:`probe_three_point`.

    ``verdict`` is ``"consistent"`` when no sampled pair violates the
    inequality and ``"violated"`` otherwise; a clean probe is evidence, not a
    proof.
    """

    n_samples: int
    n_violations: int
    worst_margin: float
    verdict: str
    split: Optional[SplitConstants] = None
    violators: list = field(default_factory=list)


def probe_three_point(
    problem,
    x_star,
    y_star,
    gamma_K,
    L3,
    p,
    theta_A,
    A=None,
    n_samples=1000,
    radius=0.1,
    seed=0,
    split_inputs=None,
    tol=1e-12,
) -> ProbeReport:
    """Sample the three-point inequality around a critical point.

    For random pairs ``(x, x')`` in a ball of the given radius around
    ``x_star`` evaluates

    ``<[grad K(x) - grad K(x*)]^* y*, x' - x*>_A - ||x' - x*||^2_{A Gamma_K}
    - theta_A ||K(x*) - K(x) - grad K(x)(x* - x)||^p + L3/2 ||x' - x||_A^2``

    and counts negative values.

    Parameters
    ----------
    problem : ProblemSpec
    x_star, y_star : ndarray
    gamma_K : array_like
        Per-primal-block constants.
    L3 : float
    p : float
        Exponent in ``[1, 2]``.
    theta_A : float
    A : array_like, optional
        Per-primal-block non-negative scaling; defaults to ones.
    split_inputs : dict, optional
        ``{"gamma_x": ..., "L": ...}`` to also report the sufficient
        constants of the strong-convexity split via :func:`scan_split_constants`.
    """
    if not (1.0 <= p <= 2.0):
        raise ConfigurationError(f"the exponent p must lie in [1, 2], got {p}")
    P = problem.primal_partition
    m = P.n_blocks
    a = np.ones(m) if A is None else np.broadcast_to(np.asarray(A, dtype=float), (m,))
    if np.any(a < 0):
        raise ConfigurationError("the block scaling A must be non-negative")
    gK = np.broadcast_to(np.asarray(gamma_K, dtype=float), (m,))
    a_c = P.expand(a)
    ag_c = P.expand(a * gK)
    x_star = np.asarray(x_star, dtype=float)
    y_star = np.asarray(y_star, dtype=float)
    rng = np.random.default_rng(seed)
    dim = x_star.size
    K_star = problem.K_eval(x_star)
    g_star = problem.linearize(x_star).adjoint(y_star)

    def ball():
        d = rng.standard_normal(dim)
        d *= radius * rng.random() ** (1.0 / dim) / max(np.linalg.norm(d), 1e-300)
        return x_star + d

    worst = np.inf
    violators = []
    for s in range(n_samples):
        x, xp = ball(), ball()
        lin = problem.linearize(x)
        lhs = float(np.sum(a_c * (lin.adjoint(y_star) - g_star) * (xp - x_star)))
        rem = K_star - problem.K_eval(x) - lin.apply(x_star - x)
        rhs = (
            float(np.sum(ag_c * (xp - x_star) ** 2))
            + theta_A * float(np.linalg.norm(rem)) ** p
            - 0.5 * L3 * float(np.sum(a_c * (xp - x) ** 2))
        )
        margin = lhs - rhs
        worst = min(worst, margin)
        if margin < -tol:
            violators.append((s, margin))
    split = None
    if split_inputs is not None:
        nl = problem.dual_partition.mask(np.flatnonzero(problem.nl_mask))
        split = scan_split_constants(
            split_inputs["gamma_x"], split_inputs["L"], float(np.linalg.norm(y_star[nl])), a, theta_A
        )
    verdict = "consistent" if not violators else "violated"
    return ProbeReport(n_samples, len(violators), float(worst), verdict, split, violators)


@dataclass
class ZbarResult:
    ok: bool
    trajectory: np.ndarray
    max_recursion_error: float


def check_zbar_recursion(z0, N: int) -> ZbarResult:
    """Iterate ``z_j <- (1 + z_j) / sqrt(1 + 1/zbar)`` with ``zbar = max_j z_j``.

    Checks at every step that ``zbar_i <= zbar_0 + i/2`` and that the maximum
    follows the scalar recursion ``zbar <- sqrt(zbar^2 + zbar)``.

    Returns
    -------
    ZbarResult
        ``trajectory`` holds ``zbar_0, ..., zbar_N``.
    """
    z = np.atleast_1d(np.asarray(z0, dtype=float)).copy()
    if np.any(z <= 0):
        raise ValueError("the recursion needs positive starting values")
    traj = np.empty(N + 1)
    zb = float(np.max(z))
    traj[0] = zb
    ok = True
    err = 0.0
    for i in range(N):
        z = (1.0 + z) / np.sqrt(1.0 + 1.0 / zb)
        new = float(np.max(z))
        scalar = np.sqrt(zb * zb + zb)
        err = max(err, abs(new - scalar) / scalar)
        zb = new
        traj[i + 1] = zb
        if zb > traj[0] + 0.5 * (i + 1):
            ok = False
    return ZbarResult(ok and err <= 1e-12, traj, float(err))


def descent_monitor(result) -> float:
    """Largest relative increase of the weighted distance over its initial value.

    Uses ``dist2_weighted`` of the initial record and every logged record of
    a :class:`~blockpd.solvers.RunResult` run with a reference solution.
    Values at most zero mean the distance never exceeded its start.
    """
    v0 = result.initial.dist2_weighted
    vals = np.array([r.dist2_weighted for r in result.records], dtype=float)
    if not np.isfinite(v0) or v0 <= 0:
        raise ValueError("the run carries no positive initial weighted distance")
    if vals.size == 0:
        return 0.0
    return float(np.max((vals - v0) / v0))


def stochastic_descent_check(finals, initial):
    """Expectation version of the descent check over independent seeds.

    Returns ``(passed, mean, stderr)`` where ``passed`` means the mean final
    weighted distance is at most ``initial + 2 stderr``.
    """
    finals = np.asarray(finals, dtype=float)
    mean = float(np.mean(finals))
    se = float(np.std(finals, ddof=1) / np.sqrt(finals.size)) if finals.size > 1 else 0.0
    return mean <= initial + 2.0 * se, mean, se
