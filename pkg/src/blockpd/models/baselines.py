"""Convex problems with known solutions, used as oracles.

Every builder returns a :class:`Baseline` bundling the problem with its
saddle point ``(x_star, y_star)`` and a default starting point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from ..blocks import ConnectionGraph, partition_from_sizes
from ..problem import Linearization, ProblemSpec

__all__ = [
    "Baseline",
    "quadratic_saddle",
    "tv1d_denoising",
    "solve_tv1d_dual",
    "composite_single_dual",
    "composite_sum",
    "make_convex_baselines",
]


@dataclass
class Baseline:
    """A problem with its reference saddle point."""

    name: str
    problem: ProblemSpec
    x_star: np.ndarray
    y_star: np.ndarray
    x0: np.ndarray
    y0: np.ndarray
    info: dict = field(default_factory=dict)


def _linear_problem(primal, dual, A, prox_G, prox_Fstar, objective, **kw):
    def K_eval(x):
        return A @ x

    def linearize(x):
        return Linearization(lambda dx: A @ dx, lambda dy: A.T @ dy)

    return ProblemSpec(
        primal_partition=primal,
        dual_partition=dual,
        prox_G=prox_G,
        prox_Fstar=prox_Fstar,
        K_eval=K_eval,
        K_jac_apply=lambda x, dx: A @ dx,
        K_jac_adjoint=lambda x, dy: A.T @ dy,
        objective=objective,
        nl_mask=np.zeros(dual.n_blocks, dtype=bool),
        linearize_fn=linearize,
        **kw,
    )


def _block_norms(A, primal, dual):
    """Exact row-block norms and (dual, primal) sub-block norms of ``A``."""
    n, m = dual.n_blocks, primal.n_blocks
    rows = np.array([np.linalg.norm(A[dual.blocks[l], :], 2) for l in range(n)])
    sub = np.array(
        [[np.linalg.norm(A[dual.blocks[l], :][:, primal.blocks[j]], 2) for j in range(m)] for l in range(n)]
    )
    return rows, sub


def _graph_from_matrix(A, primal, dual):
    """Declared coupling structure of a block-sparse matrix."""
    m, n = primal.n_blocks, dual.n_blocks
    nz = np.array(
        [[np.any(A[dual.blocks[l], :][:, primal.blocks[j]] != 0) for l in range(n)] for j in range(m)]
    )
    neighbors = [set(np.flatnonzero(nz[j]).tolist()) for j in range(m)]
    sim = {}
    for j in range(m):
        for l in neighbors[j]:
            Al = A[dual.blocks[l], :][:, primal.blocks[j]]
            sim[(j, l)] = {
                k for k in neighbors[j] if np.any(Al @ A[dual.blocks[k], :][:, primal.blocks[j]].T != 0)
            }
    return ConnectionGraph(m, n, neighbors, sim)


def quadratic_saddle(
    primal_sizes=(5, 5, 5, 5),
    dual_sizes=(4, 4, 4, 4),
    g=1.0,
    c=1.0,
    density=0.6,
    seed=0,
) -> Baseline:
    """Strongly convex-concave quadratic saddle problem with a linear operator.

    ``G(x) = sum_j g_j/2 ||x_j - a_j||^2``, ``F*(y) = c/2 ||y||^2 + <b, y>`` and
    ``K = A`` with a random block-sparse matrix. The saddle point solves the
    linear optimality system ``g (x - a) + A^T y = 0``, ``A x - c y - b = 0``.

    Parameters
    ----------
    primal_sizes, dual_sizes : sequence of int
    g : float or array_like
        Per-primal-block strong convexity of ``G``.
    c : float or array_like
        Per-dual-block strong convexity of ``F*``.
    density : float
        Probability that a (dual, primal) block of ``A`` is non-zero.
    seed : int
    """
    rng = np.random.default_rng(seed)
    primal = partition_from_sizes(primal_sizes)
    dual = partition_from_sizes(dual_sizes)
    m, n = primal.n_blocks, dual.n_blocks
    N, M = primal.total_dim, dual.total_dim
    A = rng.standard_normal((M, N)) / np.sqrt(N)
    keep = rng.random((n, m)) < density
    # Every block row and column keeps at least one non-zero block.
    keep[np.arange(n), rng.integers(0, m, n)] = True
    keep[rng.integers(0, n, m), np.arange(m)] = True
    A *= keep[dual.block_of][:, primal.block_of]
    g_blocks = np.broadcast_to(np.asarray(g, dtype=float), (m,)).copy()
    c_blocks = np.broadcast_to(np.asarray(c, dtype=float), (n,)).copy()
    gc = primal.expand(g_blocks)
    cc = dual.expand(c_blocks)
    a = rng.standard_normal(N)
    b = rng.standard_normal(M)

    system = np.block([[np.diag(gc), A.T], [A, -np.diag(cc)]])
    sol = np.linalg.solve(system, np.concatenate([gc * a, b]))
    x_star, y_star = sol[:N], sol[N:]

    def prox_G(tau, v):
        return (v + tau * gc * a) / (1.0 + tau * gc)

    def prox_Fstar(sigma, v):
        return (v - sigma * b) / (1.0 + sigma * cc)

    def objective(x):
        r = A @ x - b
        return float(0.5 * np.sum(gc * (x - a) ** 2) + 0.5 * np.sum(r * r / cc))

    rows, sub = _block_norms(A, primal, dual)
    problem = _linear_problem(
        primal,
        dual,
        A,
        prox_G,
        prox_Fstar,
        objective,
        gamma_G=g_blocks,
        gamma_Fstar=c_blocks,
        norm_estimates=rows,
        sub_norm_estimates=sub,
        connections=_graph_from_matrix(A, primal, dual),
        name="quadratic_saddle",
        info={"A": A, "a": a, "b": b},
    )
    return Baseline("quadratic_saddle", problem, x_star, y_star, np.zeros(N), np.zeros(M), {"A": A})


def solve_tv1d_dual(f, alpha, gamma, max_polish=50):
    """Exact solution of smoothed 1-D TV denoising through its dual box QP.

    Minimizes ``1/2 y^T (D D^T + gamma I) y - (D f)^T y`` over
    ``|y| <= alpha`` with a bound-constrained quasi-Newton method, then
    refines by solving the equality-constrained system on the free set until
    the active set is stable and the optimality conditions hold.

    Returns
    -------
    x, y : ndarray
        Primal solution ``f - D^T y`` and dual solution.
    """
    f = np.asarray(f, dtype=float)
    n = f.size
    D = np.diff(np.eye(n), axis=0)
    H = D @ D.T + gamma * np.eye(n - 1)
    q = D @ f

    def fun(y):
        Hy = H @ y
        return 0.5 * y @ Hy - q @ y, Hy - q

    res = optimize.minimize(
        fun,
        np.zeros(n - 1),
        jac=True,
        method="L-BFGS-B",
        bounds=[(-alpha, alpha)] * (n - 1),
        options={"ftol": 1e-16, "gtol": 1e-14, "maxiter": 10000},
    )
    y = np.clip(res.x, -alpha, alpha)
    prev = None
    for _ in range(max_polish):
        grad = H @ y - q
        upper = (y >= alpha - 1e-9) & (grad <= 0)
        lower = (y <= -alpha + 1e-9) & (grad >= 0)
        fixed = upper | lower
        y = np.where(upper, alpha, np.where(lower, -alpha, y))
        free = ~fixed
        if np.any(free):
            rhs = q[free] - H[np.ix_(free, fixed)] @ y[fixed]
            y[free] = np.linalg.solve(H[np.ix_(free, free)], rhs)
        y = np.clip(y, -alpha, alpha)
        if prev is not None and np.array_equal(prev, fixed):
            break
        prev = fixed
    return f - D.T @ y, y


def tv1d_denoising(n_points=64, block_size=8, alpha=0.5, gamma=0.1, noise=0.1, seed=0, signal=None) -> Baseline:
    """Smoothed 1-D total-variation denoising.

    ``G(x) = 1/2 ||x - f||^2``, ``K = D`` (forward differences) and
    ``F*(y) = indicator(|y| <= alpha) + gamma/2 ||y||^2``.
    The default signal is a noisy step.
    """
    rng = np.random.default_rng(seed)
    if signal is None:
        clean = np.where(np.arange(n_points) < n_points // 2, 0.0, 1.0)
        f = clean + noise * rng.standard_normal(n_points)
    else:
        f = np.asarray(signal, dtype=float)
        n_points = f.size
    D = np.diff(np.eye(n_points), axis=0)
    sizes = [block_size] * (n_points // block_size) + ([n_points % block_size] if n_points % block_size else [])
    dual_sizes = [block_size] * ((n_points - 1) // block_size) + (
        [(n_points - 1) % block_size] if (n_points - 1) % block_size else []
    )
    primal = partition_from_sizes(sizes)
    dual = partition_from_sizes(dual_sizes)
    x_star, y_star = solve_tv1d_dual(f, alpha, gamma)

    def prox_G(tau, v):
        return (v + tau * f) / (1.0 + tau)

    def prox_Fstar(sigma, v):
        return np.clip(v / (1.0 + sigma * gamma), -alpha, alpha)

    def objective(x):
        d = D @ x
        # F(z) is the Huber function, the conjugate of the smoothed box indicator.
        small = np.abs(d) <= alpha * gamma
        hub = np.where(small, d * d / (2.0 * gamma), alpha * np.abs(d) - 0.5 * gamma * alpha**2)
        return float(0.5 * np.sum((x - f) ** 2) + np.sum(hub))

    rows, sub = _block_norms(D, primal, dual)
    problem = _linear_problem(
        primal,
        dual,
        D,
        prox_G,
        prox_Fstar,
        objective,
        gamma_G=np.ones(primal.n_blocks),
        gamma_Fstar=np.full(dual.n_blocks, gamma),
        norm_estimates=rows,
        sub_norm_estimates=sub,
        connections=_graph_from_matrix(D, primal, dual),
        name="tv1d",
        info={"f": f, "alpha": alpha, "gamma": gamma},
    )
    return Baseline("tv1d", problem, x_star, y_star, np.zeros(n_points), np.zeros(n_points - 1), {"f": f})


def _soft(v, t):
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def composite_single_dual(dim=12, rows=20, block_sizes=(4, 4, 4), mu=0.1, lam=0.05, seed=0) -> Baseline:
    """``min_x mu/2 ||x||^2 + lam ||x||_1 + 1/2 ||A x - b||^2`` with one scalar dual.

    Written as ``K(x) = J(x) = 1/2 ||A x - b||^2`` and ``F* = indicator({1})`` so
    the dual iterate stays at one and the primal update is a proximal
    gradient step on the sampled blocks. The reference minimizer comes from
    a long proximal gradient run.
    """
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((rows, dim)) / np.sqrt(rows)
    b = rng.standard_normal(rows)
    primal = partition_from_sizes(block_sizes)
    if primal.total_dim != dim:
        raise ValueError("block sizes must add up to dim")
    dual = partition_from_sizes([1])

    def J(x):
        r = A @ x - b
        return 0.5 * float(r @ r)

    def grad_J(x):
        return A.T @ (A @ x - b)

    def prox_G(tau, v):
        return _soft(v, tau * lam) / (1.0 + tau * mu)

    def prox_Fstar(sigma, v):
        return np.ones_like(v)

    def linearize(x):
        gx = grad_J(x)
        return Linearization(lambda dx: np.array([gx @ dx]), lambda dy: gx * dy[0])

    def objective(x):
        return float(0.5 * mu * x @ x + lam * np.sum(np.abs(x)) + J(x))

    L = float(np.linalg.norm(A, 2) ** 2)
    x = np.zeros(dim)
    step = 1.0 / (L + mu)
    for _ in range(20000):
        x_new = prox_G(step, x - step * grad_J(x))
        if np.max(np.abs(x_new - x)) < 1e-15:
            x = x_new
            break
        x = x_new
    problem = ProblemSpec(
        primal_partition=primal,
        dual_partition=dual,
        prox_G=prox_G,
        prox_Fstar=prox_Fstar,
        K_eval=lambda x: np.array([J(x)]),
        K_jac_apply=lambda x, dx: np.array([grad_J(x) @ dx]),
        K_jac_adjoint=lambda x, dy: grad_J(x) * dy[0],
        objective=objective,
        gamma_G=np.full(primal.n_blocks, mu),
        lipschitz_L=L,
        linearize_fn=linearize,
        name="composite_single_dual",
        info={"A": A, "b": b, "mu": mu, "lam": lam, "L": L},
    )
    return Baseline("composite_single_dual", problem, x, np.ones(1), np.zeros(dim), np.ones(1), {"A": A, "b": b})


def composite_sum(dim=10, n_terms=4, rows_per_term=5, mu=0.5, seed=0) -> Baseline:
    """``min_x mu/2 ||x||^2 + sum_l 1/2 ||A_l x - b_l||^2`` with one dual per term.

    ``K(x) = (J_l(x))_l`` with ``J_l(x) = 1/2 ||A_l x - b_l||^2`` and
    ``F* = indicator({(1, ..., 1)})``. Sampling dual blocks then sums the
    gradients of the sampled terms. The minimizer solves the normal
    equations ``(sum_l A_l^T A_l + mu I) x = sum_l A_l^T b_l``.
    """
    rng = np.random.default_rng(seed)
    As = [rng.standard_normal((rows_per_term, dim)) / np.sqrt(rows_per_term) for _ in range(n_terms)]
    bs = [rng.standard_normal(rows_per_term) for _ in range(n_terms)]
    primal = partition_from_sizes([dim])
    dual = partition_from_sizes([1] * n_terms)

    def residuals(x):
        return [Al @ x - bl for Al, bl in zip(As, bs)]

    def K_eval(x):
        return np.array([0.5 * float(r @ r) for r in residuals(x)])

    def K_eval_blocks(x, blocks):
        out = np.zeros(n_terms)
        for l in np.asarray(blocks):
            r = As[l] @ x - bs[l]
            out[l] = 0.5 * float(r @ r)
        return out

    def linearize(x):
        grads = np.stack([Al.T @ r for Al, r in zip(As, residuals(x))])
        return Linearization(lambda dx: grads @ dx, lambda dy: grads.T @ dy)

    def prox_G(tau, v):
        return v / (1.0 + tau * mu)

    def prox_Fstar(sigma, v):
        return np.ones_like(v)

    def objective(x):
        return float(0.5 * mu * x @ x + np.sum(K_eval(x)))

    H = sum(Al.T @ Al for Al in As) + mu * np.eye(dim)
    x_star = np.linalg.solve(H, sum(Al.T @ bl for Al, bl in zip(As, bs)))
    L = float(sum(np.linalg.norm(Al, 2) ** 2 for Al in As))
    problem = ProblemSpec(
        primal_partition=primal,
        dual_partition=dual,
        prox_G=prox_G,
        prox_Fstar=prox_Fstar,
        K_eval=K_eval,
        K_jac_apply=lambda x, dx: linearize(x).apply(dx),
        K_jac_adjoint=lambda x, dy: linearize(x).adjoint(dy),
        objective=objective,
        gamma_G=np.array([mu]),
        lipschitz_L=L,
        K_eval_blocks=K_eval_blocks,
        linearize_fn=linearize,
        name="composite_sum",
        info={"As": As, "bs": bs, "mu": mu, "L": L},
    )
    return Baseline("composite_sum", problem, x_star, np.ones(n_terms), np.zeros(dim), np.ones(n_terms), {"H": H})


def make_convex_baselines(seed: int = 0) -> dict:
    """Catalog of the oracle problems keyed by name."""
    items = [
        quadratic_saddle(seed=seed),
        tv1d_denoising(seed=seed),
        composite_single_dual(seed=seed),
        composite_sum(seed=seed),
    ]
    return {b.name: b for b in items}
