"""Diffusion tensor reconstruction with total deformation regularization.

The unknown is a field of symmetric 3x3 tensors ``x(xi)`` on a voxel grid.
Measurements follow the Stejskal--Tanner decay
``s_k(xi) = s_0(xi) exp(-<x(xi) b_k, b_k>)`` for diffusion gradients ``b_k``.
The reconstruction solves

    min_x  1/2 ||T(x)||^2 + alpha ||E x||_{F,1},

with residual ``[T(x)]_k(xi) = s_k(xi) - s_0(xi) exp(-<x(xi) b_k, b_k>)`` and
``E`` the forward-difference symmetrized gradient. In saddle form ``G = 0``,
``K(x) = (E x, T(x))`` and the conjugate splits into a ball indicator on the
``mu`` part (slightly smoothed) and ``1/2 ||.||^2`` on the ``lambda`` part.

Tensors are stored as six components ``(xx, yy, zz, sqrt2 xy, sqrt2 xz,
sqrt2 yz)`` so the Euclidean inner product of the storage equals the
Frobenius inner product of the tensors. The dual ``mu`` field keeps all 27
components of the third-order symmetric tensor per voxel.

Four block setups are provided:

``d1``
    one primal and one dual block, the unblocked reference;
``d2``
    one primal block, dual split into the regularizer and data parts;
``d3``
    like ``d2`` with every scalar data residual its own dual block;
``d4``
    like ``d3`` with every voxel its own primal block.
"""

from __future__ import annotations

import itertools
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from ..blocks import BlockPartition, ConnectionGraph, partition_from_sizes
from ..problem import Linearization, ProblemSpec, prox_ball_indicator
from ..stepper import StepState, init_dual_steps_from_weights, init_step_state

__all__ = [
    "GRADIENTS",
    "BLOCK_SETUPS",
    "DtiGrid",
    "DtiInstance",
    "sym6_to_matrix",
    "matrix_to_sym6",
    "gradient_weights",
    "symmetrized_gradient",
    "symmetrized_gradient_adjoint",
    "dti_forward",
    "dti_jacobian_apply",
    "dti_jacobian_adjoint",
    "make_helix_tensors",
    "make_dti_grid",
    "make_dti_problem",
    "export_flat_binary",
    "read_flat_binary",
]

_S2 = np.sqrt(2.0)

GRADIENTS = np.array(
    [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [_S2, _S2, 0.0],
        [_S2, 0.0, _S2],
        [0.0, _S2, _S2],
    ]
)

BLOCK_SETUPS = ("d1", "d2", "d3", "d4")

MOREAU_YOSIDA_GAMMA = 1e-9
EXP_CLAMP = 700.0
_PERMS = list(itertools.permutations(range(3)))


def sym6_to_matrix(x6: np.ndarray) -> np.ndarray:
    """Six-component storage ``(..., 6)`` to symmetric matrices ``(..., 3, 3)``."""
    x6 = np.asarray(x6, dtype=float)
    out = np.empty(x6.shape[:-1] + (3, 3))
    out[..., 0, 0] = x6[..., 0]
    out[..., 1, 1] = x6[..., 1]
    out[..., 2, 2] = x6[..., 2]
    out[..., 0, 1] = out[..., 1, 0] = x6[..., 3] / _S2
    out[..., 0, 2] = out[..., 2, 0] = x6[..., 4] / _S2
    out[..., 1, 2] = out[..., 2, 1] = x6[..., 5] / _S2
    return out


def matrix_to_sym6(X: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`sym6_to_matrix`; its inverse on symmetric matrices."""
    X = np.asarray(X, dtype=float)
    out = np.empty(X.shape[:-2] + (6,))
    out[..., 0] = X[..., 0, 0]
    out[..., 1] = X[..., 1, 1]
    out[..., 2] = X[..., 2, 2]
    out[..., 3] = (X[..., 0, 1] + X[..., 1, 0]) / _S2
    out[..., 4] = (X[..., 0, 2] + X[..., 2, 0]) / _S2
    out[..., 5] = (X[..., 1, 2] + X[..., 2, 1]) / _S2
    return out


def gradient_weights(b: np.ndarray) -> np.ndarray:
    """Rows ``g_k`` with ``<x b_k, b_k> = g_k . x6`` in six-component storage."""
    b = np.atleast_2d(np.asarray(b, dtype=float))
    return np.stack(
        [
            b[:, 0] ** 2,
            b[:, 1] ** 2,
            b[:, 2] ** 2,
            _S2 * b[:, 0] * b[:, 1],
            _S2 * b[:, 0] * b[:, 2],
            _S2 * b[:, 1] * b[:, 2],
        ],
        axis=1,
    )


def _forward_diff(u, axis):
    """Forward difference with a zero difference at the far face."""
    out = np.zeros_like(u)
    n = u.shape[axis]
    if n > 1:
        hi = [slice(None)] * u.ndim
        lo = [slice(None)] * u.ndim
        dst = [slice(None)] * u.ndim
        hi[axis] = slice(1, n)
        lo[axis] = slice(0, n - 1)
        dst[axis] = slice(0, n - 1)
        out[tuple(dst)] = u[tuple(hi)] - u[tuple(lo)]
    return out


def _forward_diff_adjoint(v, axis):
    n = v.shape[axis]
    w = np.array(v, copy=True)
    last = [slice(None)] * v.ndim
    last[axis] = n - 1
    w[tuple(last)] = 0.0
    out = -w
    if n > 1:
        src = [slice(None)] * v.ndim
        dst = [slice(None)] * v.ndim
        src[axis] = slice(0, n - 1)
        dst[axis] = slice(1, n)
        out[tuple(dst)] += w[tuple(src)]
    return out


def _symmetrize3(T):
    acc = np.zeros_like(T)
    base = T.ndim - 3
    for p in _PERMS:
        axes = list(range(base)) + [base + q for q in p]
        acc += np.transpose(T, axes)
    return acc / 6.0


def symmetrized_gradient(x6: np.ndarray) -> np.ndarray:
    """Symmetrized forward-difference gradient of a tensor field.

    Parameters
    ----------
    x6 : ndarray, shape (n1, n2, n3, 6)

    Returns
    -------
    ndarray, shape (n1, n2, n3, 3, 3, 3)
        Fully symmetric third-order tensors ``sym(d_c X_ab)``.
    """
    X = sym6_to_matrix(x6)
    T = np.stack([_forward_diff(X, axis=c) for c in range(3)], axis=-1)
    return _symmetrize3(T)


def symmetrized_gradient_adjoint(mu: np.ndarray) -> np.ndarray:
    """Exact transpose of :func:`symmetrized_gradient`."""
    S = _symmetrize3(np.asarray(mu, dtype=float))
    X = np.zeros(S.shape[:-1])
    for c in range(3):
        X += _forward_diff_adjoint(S[..., c], axis=c)
    return matrix_to_sym6(X)


@dataclass
class DtiGrid:
    """Synthetic diffusion-weighted measurements on a voxel grid.

    Attributes
    ----------
    dims : tuple of int
    x_true : ndarray, shape (n1, n2, n3, 6)
        Ground-truth tensors in six-component storage.
    s0 : ndarray, shape (n1, n2, n3)
        Unweighted signal.
    s : ndarray, shape (n1, n2, n3, N)
        Diffusion-weighted signals.
    b : ndarray, shape (N, 3)
        Diffusion gradients.
    alpha : float
        Regularization parameter.
    noise_sigma_fraction : float
        Noise standard deviation relative to the mean of ``|s0|``.
    """

    dims: tuple
    x_true: np.ndarray
    s0: np.ndarray
    s: np.ndarray
    b: np.ndarray
    alpha: float
    noise_sigma_fraction: float = 0.0
    gamma: float = MOREAU_YOSIDA_GAMMA

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.g = gradient_weights(self.b)

    @property
    def n_vox(self) -> int:
        return int(np.prod(self.dims))

    @property
    def n_grad(self) -> int:
        return self.b.shape[0]

    @property
    def primal_dim(self) -> int:
        return 6 * self.n_vox

    @property
    def mu_dim(self) -> int:
        return 27 * self.n_vox

    @property
    def dual_dim(self) -> int:
        return self.mu_dim + self.n_grad * self.n_vox

    def field(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float).reshape(self.dims + (6,))

    def residual_bounds(self) -> np.ndarray:
        """``r_{k,xi} = |s0(xi)| ||b_k||^2`` with shape (n_vox, N)."""
        bn2 = np.sum(self.b**2, axis=1)
        return np.abs(self.s0.reshape(-1))[:, None] * bn2[None, :]


def _decay(grid: DtiGrid, x6: np.ndarray) -> np.ndarray:
    """``exp(-<x b_k, b_k>)`` per voxel and gradient, shape (n1, n2, n3, N)."""
    q = x6 @ grid.g.T
    if np.any(q < -EXP_CLAMP):
        warnings.warn("quadratic form below -700; clamping the exponent", RuntimeWarning)
        q = np.maximum(q, -EXP_CLAMP)
    return np.exp(-q)


def dti_forward(grid: DtiGrid, x) -> np.ndarray:
    """Residuals ``T(x)`` with shape (n1, n2, n3, N)."""
    x6 = grid.field(x)
    return grid.s - grid.s0[..., None] * _decay(grid, x6)


def dti_jacobian_apply(grid: DtiGrid, x, dx) -> np.ndarray:
    """Action of ``grad T(x)`` on a primal direction; shape (n1, n2, n3, N)."""
    w = grid.s0[..., None] * _decay(grid, grid.field(x))
    return w * (grid.field(dx) @ grid.g.T)


def dti_jacobian_adjoint(grid: DtiGrid, x, lam) -> np.ndarray:
    """Adjoint action ``grad T(x)^* lam``; returns shape (n1, n2, n3, 6)."""
    w = grid.s0[..., None] * _decay(grid, grid.field(x))
    lam = np.asarray(lam, dtype=float).reshape(grid.dims + (grid.n_grad,))
    return (w * lam) @ grid.g


def make_helix_tensors(dims, turns=1.0, radius=0.55, width=0.25, scale=1.0, minor=0.25, background=0.1):
    """Analytic helix-like tube of anisotropic tensors in an isotropic background.

    Inside a cylindrical shell around the z-axis the principal eigenvector
    follows the tangent of a helix with the given number of turns; the
    principal eigenvalue is ``scale`` and the other two are ``minor * scale``.
    Outside, tensors are ``background * scale * I``.

    Returns
    -------
    ndarray, shape dims + (6,)
    """
    n1, n2, n3 = dims
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in dims]
    px, py, pz = np.meshgrid(*axes, indexing="ij")
    r = np.hypot(px, py)
    theta = np.arctan2(py, px)
    pitch = 2.0 / (2.0 * np.pi * turns) if turns else np.inf
    t = np.stack([-np.sin(theta) * radius, np.cos(theta) * radius, np.full_like(theta, pitch)], axis=-1)
    t /= np.linalg.norm(t, axis=-1, keepdims=True)
    inside = np.abs(r - radius) < width
    outer = t[..., :, None] * t[..., None, :]
    eye = np.eye(3)
    tube = scale * (outer + minor * (eye - outer))
    bg = background * scale * np.broadcast_to(eye, tube.shape)
    X = np.where(inside[..., None, None], tube, bg)
    return matrix_to_sym6(X)


def make_dti_grid(dims=(8, 8, 8), alpha=0.005, noise_fraction=0.3, seed=0, b=None, **helix) -> DtiGrid:
    """Synthetic measurements: ``s0 = ||x_true||_F`` and noisy ``s_k``.

    Gaussian noise of standard deviation ``noise_fraction * mean(|s0|)`` is
    added to the diffusion-weighted signals only.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 2:
        raise ValueError("dims must be three integers >= 2")
    b = GRADIENTS if b is None else np.asarray(b, dtype=float)
    x_true = make_helix_tensors(dims, **helix)
    s0 = np.linalg.norm(x_true, axis=-1)
    g = gradient_weights(b)
    clean = s0[..., None] * np.exp(-(x_true @ g.T))
    rng = np.random.default_rng(seed)
    noise = noise_fraction * float(np.mean(np.abs(s0))) * rng.standard_normal(clean.shape)
    return DtiGrid(dims, x_true, s0, clean + noise, b, float(alpha), float(noise_fraction))


@dataclass
class DtiInstance:
    """A DTI problem with its recommended starting point and steps."""

    grid: DtiGrid
    setup: str
    problem: ProblemSpec
    graph: ConnectionGraph
    step_state: StepState
    x0: np.ndarray
    y0: np.ndarray
    info: dict = field(default_factory=dict)


def _objective(grid: DtiGrid, x) -> float:
    Ex = symmetrized_gradient(grid.field(x))
    reg = np.sum(np.sqrt(np.sum(Ex.reshape(grid.n_vox, 27) ** 2, axis=1)))
    res = dti_forward(grid, x)
    return float(grid.alpha * reg + 0.5 * np.sum(res * res))


def _build_problem(grid: DtiGrid, primal: BlockPartition, dual: BlockPartition, rows, graph, name, current_rows):
    n_mu = grid.mu_dim
    dims = grid.dims

    def K_eval(x):
        x6 = grid.field(x)
        return np.concatenate([symmetrized_gradient(x6).ravel(), dti_forward(grid, x6).ravel()])

    def K_eval_blocks(x, blocks):
        x6 = grid.field(x)
        blocks = np.asarray(blocks)
        out = np.zeros(grid.dual_dim)
        mu_blocks = np.unique(dual.block_of[:n_mu])
        if np.any(np.isin(mu_blocks, blocks)):
            out[:n_mu] = symmetrized_gradient(x6).ravel()
        lam_blocks = dual.block_of[n_mu:]
        if np.any(np.isin(lam_blocks, blocks)):
            out[n_mu:] = dti_forward(grid, x6).ravel()
        return out

    def linearize(x):
        x6 = grid.field(x)
        w = grid.s0[..., None] * _decay(grid, x6)

        def apply(dx):
            d6 = grid.field(dx)
            return np.concatenate([symmetrized_gradient(d6).ravel(), (w * (d6 @ grid.g.T)).ravel()])

        def adjoint(dy):
            mu = dy[:n_mu].reshape(dims + (3, 3, 3))
            lam = dy[n_mu:].reshape(dims + (grid.n_grad,))
            return (symmetrized_gradient_adjoint(mu) + (w * lam) @ grid.g).ravel()

        return Linearization(apply, adjoint)

    def K_jac_apply(x, dx):
        return linearize(x).apply(dx)

    def K_jac_adjoint(x, dy):
        return linearize(x).adjoint(dy)

    def prox_G(tau, x):
        return np.array(x, dtype=float, copy=True)

    def prox_Fstar(sigma, y):
        y = np.asarray(y, dtype=float)
        sigma = np.broadcast_to(np.asarray(sigma, dtype=float), y.shape)
        mu = y[:n_mu].reshape(grid.n_vox, 27)
        s_mu = sigma[:n_mu].reshape(grid.n_vox, 27)[:, :1]
        mu_new = prox_ball_indicator(s_mu, grid.alpha, grid.gamma, mu, axis=-1)
        lam_new = y[n_mu:] / (1.0 + sigma[n_mu:])
        return np.concatenate([mu_new.ravel(), lam_new])

    nl_mask = np.zeros(dual.n_blocks, dtype=bool)
    nl_mask[np.unique(dual.block_of[n_mu:])] = True
    # Data blocks are 1-strongly convex; the smoothed regularizer only gamma/alpha.
    gamma_F = np.ones(dual.n_blocks)
    gamma_F[np.unique(dual.block_of[:n_mu])] = min(grid.gamma / grid.alpha, 1.0)

    return ProblemSpec(
        primal_partition=primal,
        dual_partition=dual,
        prox_G=prox_G,
        prox_Fstar=prox_Fstar,
        K_eval=K_eval,
        K_jac_apply=K_jac_apply,
        K_jac_adjoint=K_jac_adjoint,
        objective=lambda x: _objective(grid, x),
        gamma_G=np.zeros(primal.n_blocks),
        gamma_Fstar=gamma_F,
        gamma_K=np.zeros(primal.n_blocks),
        lipschitz_L=float(np.max(grid.residual_bounds())),
        nl_mask=nl_mask,
        norm_estimates=rows,
        K_eval_blocks=K_eval_blocks,
        linearize_fn=linearize,
        connections=graph,
        current_norms=current_rows,
        name=name,
    )


def make_dti_problem(
    dims=(8, 8, 8),
    alpha=0.005,
    noise_fraction=0.3,
    seed=0,
    block_setup="d1",
    kappa=0.05,
    grid: DtiGrid | None = None,
    **helix,
) -> DtiInstance:
    """Build the DTI problem for one of the block setups ``d1``..``d4``.

    Step lengths use ``tau = 1/R`` with ``R = sqrt(R_E^2 + R_T^2)``,
    ``R_E = sqrt(12)`` and ``R_T^2 = sum r_{k,xi}^2``, and dual steps from the
    block weights so that the sigma-test holds with margin ``kappa`` at
    positive semi-definite iterates. Steps stay fixed during the run.

    Parameters
    ----------
    dims : tuple of int
    alpha : float
    noise_fraction : float
    seed : int
        Seed of the measurement noise.
    block_setup : {"d1", "d2", "d3", "d4"}
    kappa : float
    grid : DtiGrid, optional
        Reuse existing measurements instead of generating new ones.
    """
    if block_setup not in BLOCK_SETUPS:
        raise ValueError(f"unknown block setup {block_setup!r}; expected one of {BLOCK_SETUPS}")
    if grid is None:
        grid = make_dti_grid(dims, alpha, noise_fraction, seed, **helix)
    nv, N = grid.n_vox, grid.n_grad
    r = grid.residual_bounds()
    if np.any(r <= 0):
        raise ValueError("every voxel needs a positive unweighted signal")
    R_E = np.sqrt(12.0)
    R_T = float(np.sqrt(np.sum(r**2)))
    R = float(np.hypot(R_E, R_T))
    tau = 1.0 / R
    bn2 = np.sum(grid.b**2, axis=1)
    mu_dim, lam_dim = grid.mu_dim, N * nv

    def current_r(x):
        dec = _decay(grid, grid.field(x)).reshape(nv, N)
        return np.abs(grid.s0.reshape(-1))[:, None] * bn2[None, :] * dec

    if block_setup == "d1":
        primal = partition_from_sizes([grid.primal_dim])
        dual = partition_from_sizes([grid.dual_dim])
        graph = ConnectionGraph(1, 1, [{0}])
        rows = np.array([R])
        taus = np.array([tau])

        def current_rows(x):
            return np.array([np.hypot(R_E, np.sqrt(np.sum(current_r(x) ** 2)))]), None

    elif block_setup == "d2":
        primal = partition_from_sizes([grid.primal_dim])
        dual = partition_from_sizes([mu_dim, lam_dim])
        w = R_E / (R - R_E)
        graph = ConnectionGraph(1, 2, [{0, 1}], {(0, 0): {0, 1}, (0, 1): {0, 1}})
        graph.set_weight(0, 1, 0, w)
        rows = np.array([R_E, R_T])
        taus = np.array([tau])

        def current_rows(x):
            return np.array([R_E, np.sqrt(np.sum(current_r(x) ** 2))]), None

    else:
        dual = partition_from_sizes([mu_dim] + [1] * lam_dim)
        lam_id = 1 + np.arange(nv * N).reshape(nv, N)
        rows = np.concatenate([[R_E], r.ravel()])

        def current_rows(x):
            return np.concatenate([[R_E], current_r(x).ravel()]), None

        if block_setup == "d3":
            primal = partition_from_sizes([grid.primal_dim])
            sim = {(0, 0): set(range(1 + nv * N))}
            wts = {}
            coef = float(np.sum(r)) * R_E / (R - R_E)
            for v in range(nv):
                group = {0} | set(lam_id[v].tolist())
                for k in range(N):
                    sim[(0, int(lam_id[v, k]))] = group
                    wts[(0, int(lam_id[v, k]), 0)] = coef / r[v, k]
            graph = ConnectionGraph(1, 1 + nv * N, [set(range(1 + nv * N))], sim, wts)
            taus = np.array([tau])
        else:
            primal = partition_from_sizes([6] * nv)
            neighbors, sim, wts = [], {}, {}
            for v in range(nv):
                group = {0} | set(lam_id[v].tolist())
                neighbors.append(group)
                sim[(v, 0)] = group
                for k in range(N):
                    sim[(v, int(lam_id[v, k]))] = group
                    # Weight of the regularizer block against the data block (k, v).
                    wts[(v, 0, int(lam_id[v, k]))] = r[v, k]
            graph = ConnectionGraph(nv, 1 + nv * N, neighbors, sim, wts)
            taus = R * tau / (1.0 + N * np.max(r, axis=1))

    probs = np.ones(primal.n_blocks)
    sigma = init_dual_steps_from_weights(taus, graph, rows, kappa, probs, "full_dual")
    state = init_step_state("full_dual", "fixed", taus, sigma, probs, kappa=kappa, delta=kappa)
    problem = _build_problem(grid, primal, dual, rows, graph, f"dti-{block_setup}", current_rows)
    x0 = np.zeros(grid.primal_dim)
    y0 = np.zeros(grid.dual_dim)
    info = {"R_E": R_E, "R_T": R_T, "R": R, "tau": tau}
    return DtiInstance(grid, block_setup, problem, graph, state, x0, y0, info)


_MAGIC = b"DTIF"


def export_flat_binary(grid: DtiGrid, path) -> None:
    """Write the dataset as a flat little-endian binary file.

    Layout: the 4-byte tag ``DTIF``, then ``n1, n2, n3, N`` as little-endian
    int64, then ``alpha`` and ``noise_sigma_fraction`` as float64, followed
    by the row-major float64 arrays ``b`` (N x 3), ``s0`` (n1 n2 n3),
    ``s`` (n1 n2 n3 x N) and ``x_true`` (n1 n2 n3 x 6).
    """
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<4q", *grid.dims, grid.n_grad))
        fh.write(struct.pack("<2d", grid.alpha, grid.noise_sigma_fraction))
        for arr in (grid.b, grid.s0, grid.s, grid.x_true):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_flat_binary(path) -> DtiGrid:
    """Inverse of :func:`export_flat_binary`."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("not a DTI flat binary file")
        n1, n2, n3, N = struct.unpack("<4q", fh.read(32))
        alpha, frac = struct.unpack("<2d", fh.read(16))
        dims = (n1, n2, n3)
        nv = n1 * n2 * n3

        def take(count, shape):
            return np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape).astype(float)

        b = take(3 * N, (N, 3))
        s0 = take(nv, dims)
        s = take(nv * N, dims + (N,))
        x_true = take(nv * 6, dims + (6,))
    return DtiGrid(dims, x_true, s0, s, b, alpha, frac)
