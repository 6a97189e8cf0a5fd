"""Independent reference implementations used as test oracles.

Nothing here imports solver internals: each routine is written directly
from the textbook update so agreement with the package is meaningful.
"""

import numpy as np

from blockpd.models.dti import MOREAU_YOSIDA_GAMMA


def chambolle_pock(A, prox_g, prox_fstar, tau, sigma, x0, y0, n_iter):
    """Plain primal-dual hybrid gradient with over-relaxation one."""
    x, y = x0.copy(), y0.copy()
    xs, ys = [], []
    for _ in range(n_iter):
        x_new = prox_g(tau, x - tau * (A.T @ y))
        x_bar = 2.0 * x_new - x
        y = prox_fstar(sigma, y + sigma * (A @ x_bar))
        x = x_new
        xs.append(x.copy())
        ys.append(y.copy())
    return xs, ys


def proximal_gradient(grad, prox, tau, x0, n_iter, blocks=None):
    """Forward-backward splitting; ``blocks`` optionally lists index masks per iteration."""
    x = x0.copy()
    out = []
    for i in range(n_iter):
        cand = prox(tau, x - tau * grad(x))
        if blocks is not None:
            cand = np.where(blocks[i], cand, x)
        x = cand
        out.append(x.copy())
    return out


def soft_threshold(v, t):
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


# Prox optimality residuals: each returns the componentwise size of the
# inclusion defect  v - p - t * subgradient  at the computed point p.


def residual_quadratic(v, p, t, g, a):
    """Resolvent of ``g/2 ||x - a||^2``."""
    return np.abs(v - p - t * g * (p - a))


def residual_linear_quadratic(v, p, t, c, b):
    """Resolvent of ``c/2 ||y||^2 + <b, y>``."""
    return np.abs(v - p - t * (c * p + b))


def residual_box_quadratic(v, p, t, alpha, gamma):
    """Resolvent of ``indicator(|y| <= alpha) + gamma/2 ||y||^2`` (componentwise)."""
    r = v - p - t * gamma * p  # must lie in the normal cone of the box at p
    out = np.abs(r).copy()
    upper = np.isclose(p, alpha, rtol=0, atol=1e-15)
    lower = np.isclose(p, -alpha, rtol=0, atol=1e-15)
    out[upper] = np.maximum(-r[upper], 0.0)
    out[lower] = np.maximum(r[lower], 0.0)
    out[np.abs(p) > alpha + 1e-15] = np.inf
    return out


def residual_soft(v, p, t, mu, lam):
    """Resolvent of ``mu/2 ||x||^2 + lam ||x||_1``."""
    r = v - p - t * mu * p
    out = np.abs(r - t * lam * np.sign(p))
    zero = p == 0
    out[zero] = np.maximum(np.abs(r[zero]) - t * lam, 0.0)
    return out


def residual_ball(v, p, t, alpha, gamma=MOREAU_YOSIDA_GAMMA):
    """Resolvent of ``indicator(||mu|| <= alpha) + gamma/alpha ||mu||^2`` per row."""
    t = np.reshape(t, (-1, 1)) if np.ndim(t) else t
    r = v - p - t * (2.0 * gamma / alpha) * p
    norms = np.linalg.norm(p, axis=1)
    out = np.linalg.norm(r, axis=1)
    on = np.abs(norms - alpha) <= 1e-12 * alpha
    # On the sphere the defect must be a non-negative multiple of p.
    coef = np.einsum("ij,ij->i", r[on], p[on]) / alpha**2
    perp = np.linalg.norm(r[on] - coef[:, None] * p[on], axis=1)
    out[on] = perp + np.maximum(-coef, 0.0) * alpha
    out[norms > alpha * (1 + 1e-12)] = np.inf
    return out


def random_metric_instance(rng, max_blocks=4, max_dim=50):
    """Random block-sparse coupling with dual steps from the sigma-test.

    Returns ``(phi, psi, coupling, kappa, delta)`` of the worst-case
    realization, ready for ``check_metric_lower_bound``.
    """
    from blockpd.diagnostics import sigma_test_instance
    from blockpd.models import quadratic_saddle
    from blockpd.stepper import init_dual_steps_from_weights

    m = int(rng.integers(1, max_blocks + 1))
    n = int(rng.integers(1, max_blocks + 1))
    psz = _random_sizes(rng, m, max_dim)
    dsz = _random_sizes(rng, n, max_dim)
    b = quadratic_saddle(psz, dsz, density=rng.uniform(0.3, 1.0), seed=int(rng.integers(2**31)))
    p = b.problem
    graph = p.connections
    for j in range(m):
        for l in graph.neighbors[j]:
            for k in graph.simultaneous(j, l):
                if k > l:
                    graph.set_weight(j, l, k, float(np.exp(rng.uniform(-2, 2))))
    family = "full_dual" if rng.random() < 0.5 else "full_primal"
    probs = rng.uniform(0.1, 1.0, m if family == "full_dual" else n)
    tau = np.exp(rng.uniform(-3, 1, m))
    kappa = float(rng.uniform(0.0, 0.9))
    delta = float(rng.uniform(0.0, kappa))
    sub = p.sub_norm_estimates if rng.random() < 0.5 else None
    sigma = init_dual_steps_from_weights(tau, graph, p.norm_estimates, kappa, probs, family, sub)
    phi, psi, C = sigma_test_instance(
        b.info["A"], p.primal_partition, p.dual_partition, tau, sigma, probs, family
    )
    return phi, psi, C, kappa, delta


def _random_sizes(rng, count, max_dim):
    total = int(rng.integers(count, max_dim + 1))
    cuts = np.sort(rng.choice(np.arange(1, total), size=count - 1, replace=False)) if count > 1 else []
    return tuple(int(s) for s in np.diff(np.concatenate([[0], cuts, [total]])))
