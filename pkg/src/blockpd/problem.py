"""Problem definition contract and generic building blocks.

A :class:`ProblemSpec` bundles everything an algorithm instance consumes:

* blockwise proximal maps of the primal term ``G`` and of the conjugate
  ``F*`` of the dual term,
* the non-linear operator ``K`` with forward and adjoint Jacobian actions,
* the declared strong-monotonicity constants and Lipschitz factor,
* static norm bounds of the Jacobian blocks.

The proximal callables are vectorized: they receive a per-coordinate step
array (constant within each block) and the whole vector. Because ``G`` and
``F*`` are separable over their blocks, applying the vectorized map and
keeping only some blocks is the same as applying the blockwise maps one at a
time. :meth:`ProblemSpec.prox_G_block` and :meth:`ProblemSpec.prox_Fstar_block`
give the one-block view.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .blocks import BlockPartition, ConnectionGraph

__all__ = [
    "DiagnosticError",
    "Linearization",
    "ProblemSpec",
    "NormEstimate",
    "prox_l2_squared",
    "prox_ball_indicator",
    "power_iteration",
    "check_jacobian_fd",
    "check_adjoint",
    "estimate_norms_static",
]


class DiagnosticError(RuntimeError):
    """Raised when a numerical check cannot be carried out (e.g. non-finite K)."""


@dataclass
class Linearization:
    """Jacobian of ``K`` frozen at one point.

    ``apply(dx)`` computes ``grad K(x) dx`` and ``adjoint(dy)`` computes
    ``grad K(x)^* dy``.
    """

    apply: Callable[[np.ndarray], np.ndarray]
    adjoint: Callable[[np.ndarray], np.ndarray]


@dataclass
class ProblemSpec:
    """Callable bundle describing ``min_x G(x) + F(K(x))``.

    Parameters
    ----------
    primal_partition, dual_partition : BlockPartition
        Primal blocks ``P_j`` and dual blocks ``Q_l``.
    prox_G : callable
        ``prox_G(tau, x)`` with ``tau`` a per-coordinate step array; returns
        the resolvent of ``tau * dG`` at ``x``.
    prox_Fstar : callable
        ``prox_Fstar(sigma, y)``, same convention for ``F*``.
    K_eval : callable
        ``K_eval(x)`` returns a dual-space vector.
    K_jac_apply, K_jac_adjoint : callable
        ``(x, dx) -> dy`` and ``(x, dy) -> dx``.
    gamma_G, gamma_Fstar, gamma_K : array_like
        Per-block strong-monotonicity constants. ``gamma_K`` may be negative.
    lipschitz_L : float
        Lipschitz factor of the Jacobian.
    nl_mask : array_like of bool
        True for dual blocks that see the non-linear part of ``K``.
    norm_estimates : array_like
        Static per-dual-block bounds ``R_l >= ||Q_l grad K(x)||``.
    sub_norm_estimates : ndarray, optional
        Per-(dual, primal) block bounds, shape ``(n, m)``.
    objective : callable
        ``objective(x)`` returns ``G(x) + F(K(x))`` for reporting.
    K_eval_blocks : callable, optional
        ``K_eval_blocks(x, blocks)`` returns a dual-space vector whose
        entries are only guaranteed on the listed dual blocks. Problems that
        can evaluate ``K`` partially should supply it.
    linearize_fn : callable, optional
        ``linearize_fn(x)`` returning a :class:`Linearization` that caches
        per-point work.
    connections : ConnectionGraph, optional
        Declared coupling structure.
    current_norms : callable, optional
        ``current_norms(x)`` returning ``(row_bounds, sub_bounds)`` for the
        Jacobian at ``x``; used by the step-condition monitor.
    name : str
    """

    primal_partition: BlockPartition
    dual_partition: BlockPartition
    prox_G: Callable
    prox_Fstar: Callable
    K_eval: Callable
    K_jac_apply: Callable
    K_jac_adjoint: Callable
    objective: Callable
    gamma_G: np.ndarray = None
    gamma_Fstar: np.ndarray = None
    gamma_K: np.ndarray = None
    lipschitz_L: float = 0.0
    nl_mask: np.ndarray = None
    norm_estimates: np.ndarray = None
    sub_norm_estimates: Optional[np.ndarray] = None
    K_eval_blocks: Optional[Callable] = None
    linearize_fn: Optional[Callable] = None
    connections: Optional[ConnectionGraph] = None
    current_norms: Optional[Callable] = None
    name: str = "problem"
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        m, n = self.primal_partition.n_blocks, self.dual_partition.n_blocks
        self.gamma_G = _per_block(self.gamma_G, m, 0.0, "gamma_G")
        self.gamma_K = _per_block(self.gamma_K, m, 0.0, "gamma_K")
        self.gamma_Fstar = _per_block(self.gamma_Fstar, n, 0.0, "gamma_Fstar")
        if np.any(self.gamma_G < 0) or np.any(self.gamma_Fstar < 0):
            raise ValueError("gamma_G and gamma_Fstar must be non-negative")
        if self.nl_mask is None:
            self.nl_mask = np.ones(n, dtype=bool)
        self.nl_mask = np.asarray(self.nl_mask, dtype=bool).reshape(n)
        if self.norm_estimates is not None:
            self.norm_estimates = _per_block(self.norm_estimates, n, 0.0, "norm_estimates")
        if self.sub_norm_estimates is not None:
            self.sub_norm_estimates = np.asarray(self.sub_norm_estimates, dtype=float)
            if self.sub_norm_estimates.shape != (n, m):
                raise ValueError(f"sub_norm_estimates must have shape ({n}, {m})")
        if self.lipschitz_L < 0:
            raise ValueError("lipschitz_L must be non-negative")

    @property
    def n_primal_blocks(self) -> int:
        return self.primal_partition.n_blocks

    @property
    def n_dual_blocks(self) -> int:
        return self.dual_partition.n_blocks

    def linearize(self, x: np.ndarray) -> Linearization:
        """Jacobian of ``K`` at ``x``, evaluated once and reusable."""
        if self.linearize_fn is not None:
            return self.linearize_fn(x)
        x = np.array(x, copy=True)
        return Linearization(
            apply=lambda dx: self.K_jac_apply(x, dx),
            adjoint=lambda dy: self.K_jac_adjoint(x, dy),
        )

    def eval_K_on(self, x: np.ndarray, blocks) -> np.ndarray:
        """``K(x)`` restricted to the given dual blocks (other entries arbitrary)."""
        if self.K_eval_blocks is not None:
            return self.K_eval_blocks(x, blocks)
        return self.K_eval(x)

    def prox_G_block(self, j: int, tau: float, x: np.ndarray) -> np.ndarray:
        """Apply the proximal map of ``G_j`` to block ``j`` of ``x`` only."""
        P = self.primal_partition
        steps = np.ones(P.total_dim)
        steps[P.blocks[j]] = tau
        full = self.prox_G(steps, x)
        out = np.array(x, dtype=float, copy=True)
        out[P.blocks[j]] = full[P.blocks[j]]
        return out

    def prox_Fstar_block(self, l: int, sigma: float, y: np.ndarray) -> np.ndarray:
        """Apply the proximal map of ``F*_l`` to block ``l`` of ``y`` only."""
        Q = self.dual_partition
        steps = np.ones(Q.total_dim)
        steps[Q.blocks[l]] = sigma
        full = self.prox_Fstar(steps, y)
        out = np.array(y, dtype=float, copy=True)
        out[Q.blocks[l]] = full[Q.blocks[l]]
        return out


def _per_block(value, count, default, label):
    if value is None:
        return np.full(count, float(default))
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(count, float(arr))
    if arr.shape != (count,):
        raise ValueError(f"{label} needs {count} entries, got shape {arr.shape}")
    return arr.copy()


def prox_l2_squared(sigma, scale, point):
    """Proximal map of ``(scale/2) ||.||^2`` with step ``sigma``.

    Parameters
    ----------
    sigma : float or ndarray
        Positive step, scalar or per coordinate.
    scale : float
        Positive weight of the squared norm.
    point : ndarray

    Returns
    -------
    ndarray
        ``point / (1 + sigma * scale)``.
    """
    return np.asarray(point, dtype=float) / (1.0 + np.asarray(sigma) * scale)


def prox_ball_indicator(sigma, radius, moreau_yosida, point, axis=-1):
    """Proximal map of ``delta_{radius B} + (gamma/radius) ||.||^2`` per sub-vector.

    Each sub-vector along ``axis`` is shrunk by ``1/(1 + 2 sigma gamma / radius)``
    and then projected onto the Euclidean ball of the given radius. With
    ``moreau_yosida=0`` this is the plain projection.

    Parameters
    ----------
    sigma : float or ndarray
        Step length; an array must broadcast against ``point`` with the
        sub-vector axis reduced (or against ``point`` itself if constant along
        that axis).
    radius : float
        Ball radius ``alpha > 0``.
    moreau_yosida : float
        Regularization ``gamma >= 0``.
    point : ndarray
    axis : int
        Axis indexing the sub-vector components.
    """
    p = np.asarray(point, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if moreau_yosida > 0:
        p = p / (1.0 + 2.0 * sigma * moreau_yosida / radius)
    norms = np.sqrt(np.sum(p * p, axis=axis, keepdims=True))
    factor = np.minimum(1.0, radius / np.maximum(norms, np.finfo(float).tiny))
    return p * factor


def power_iteration(apply, adjoint, dim, n_iter=500, tol=1e-10, seed=0):
    """Estimate ``||A||`` by power iteration on ``A^* A``.

    Returns
    -------
    norm : float
    converged : bool
        False when the relative change did not drop below ``tol`` within
        ``n_iter`` steps.
    """
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(n_iter):
        w = adjoint(apply(v))
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return 0.0, True
        new = np.sqrt(nw)
        v = w / nw
        if abs(new - est) <= tol * new:
            return new, True
        est = new
    return est, False


def check_jacobian_fd(problem: ProblemSpec, x, n_probes=10, h=None, seed=0) -> float:
    """Max relative error of central finite differences of ``K`` against ``grad K``.

    Parameters
    ----------
    problem : ProblemSpec
    x : ndarray
        Base point.
    n_probes : int
        Number of random unit directions.
    h : float, optional
        Difference step; defaults to ``1e-6 * (1 + ||x||_inf)``.
    seed : int
    """
    x = np.asarray(x, dtype=float)
    if h is None:
        h = 1e-6 * (1.0 + float(np.max(np.abs(x))))
    rng = np.random.default_rng(seed)
    lin = problem.linearize(x)
    worst = 0.0
    for _ in range(n_probes):
        d = rng.standard_normal(x.size)
        d /= np.linalg.norm(d)
        kp = problem.K_eval(x + h * d)
        km = problem.K_eval(x - h * d)
        if not (np.all(np.isfinite(kp)) and np.all(np.isfinite(km))):
            raise DiagnosticError("K produced non-finite values during the finite-difference probe")
        fd = (kp - km) / (2.0 * h)
        jd = lin.apply(d)
        denom = max(float(np.linalg.norm(jd)), float(np.linalg.norm(fd)), 1e-300)
        worst = max(worst, float(np.linalg.norm(fd - jd)) / denom)
    return worst


def check_adjoint(problem: ProblemSpec, x, n_probes=100, seed=0) -> float:
    """Max of ``|<J dx, dy> - <dx, J^* dy>| / (1 + |<J dx, dy>|)`` over unit probes."""
    x = np.asarray(x, dtype=float)
    rng = np.random.default_rng(seed)
    lin = problem.linearize(x)
    n_x = problem.primal_partition.total_dim
    n_y = problem.dual_partition.total_dim
    worst = 0.0
    for _ in range(n_probes):
        dx = rng.standard_normal(n_x)
        dx /= np.linalg.norm(dx)
        dy = rng.standard_normal(n_y)
        dy /= np.linalg.norm(dy)
        a = float(lin.apply(dx) @ dy)
        b = float(dx @ lin.adjoint(dy))
        worst = max(worst, abs(a - b) / (1.0 + abs(a)))
    return worst


@dataclass
class NormEstimate:
    """Per-dual-block Jacobian norm bounds and their orthogonal composition."""

    per_block: np.ndarray
    total: float
    converged: bool


def estimate_norms_static(problem: ProblemSpec, x0, n_iter=500, tol=1e-10, seed=0) -> NormEstimate:
    """Static norm bounds ``R_l`` at ``x0`` and the composed bound ``R``.

    Declared analytic bounds take precedence. Otherwise each dual block's
    Jacobian rows are measured by power iteration, inflated by a relative
    ``1e-8`` so the estimate is an upper bound once converged. The composed
    bound is ``sqrt(sum_l R_l^2)``, valid because the dual blocks are
    orthogonal.
    """
    x0 = np.asarray(x0, dtype=float)
    if problem.norm_estimates is not None:
        per = np.asarray(problem.norm_estimates, dtype=float)
        return NormEstimate(per.copy(), float(np.sqrt(np.sum(per**2))), True)
    Q = problem.dual_partition
    lin = problem.linearize(x0)
    per = np.zeros(Q.n_blocks)
    all_converged = True
    for l in range(Q.n_blocks):
        mask = Q.mask([l])

        def fwd(v, mask=mask):
            return np.where(mask, lin.apply(v), 0.0)

        def adj(w, mask=mask):
            return lin.adjoint(np.where(mask, w, 0.0))

        est, ok = power_iteration(fwd, adj, problem.primal_partition.total_dim, n_iter, tol, seed + l)
        per[l] = est * (1.0 + 1e-8)
        all_converged &= ok
    if not all_converged:
        warnings.warn("power iteration did not converge; norm bounds may be too small", RuntimeWarning)
    return NormEstimate(per, float(np.sqrt(np.sum(per**2))), bool(all_converged))
