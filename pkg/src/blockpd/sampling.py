"""Reproducible random block selection.

Draws are pure functions of ``(seed, stream_id, iteration)``: each call
builds a Philox counter-based generator keyed by ``(seed, stream_id)`` with
its counter positioned at the iteration number, and block ``j`` consumes the
``j``-th uniform of that stream. Runs are therefore reproducible bit for bit
and independent of call order.

Empty Bernoulli draws are redrawn from the same stream. The step rules must
then use the conditional inclusion probabilities returned by
:func:`effective_probabilities`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["SAMPLING_MODES", "SamplingPlan", "draw_blocks", "effective_probabilities"]

SAMPLING_MODES = ("full", "bernoulli_independent", "fixed_count_uniform")

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class SamplingPlan:
    """Sampling law for one side (primal or dual) of the block structure.

    Parameters
    ----------
    mode : {"full", "bernoulli_independent", "fixed_count_uniform"}
    probabilities : tuple of float
        Per-block inclusion probabilities for Bernoulli sampling. For the
        other modes it is filled in automatically.
    seed : int
    stream_id : int
        Separates independent streams drawn with the same seed.
    count : int
        Subset size for ``fixed_count_uniform``.
    """

    mode: str
    probabilities: tuple
    seed: int = 0
    stream_id: int = 0
    count: int = 0

    def __post_init__(self):
        if self.mode not in SAMPLING_MODES:
            raise ValueError(f"unknown sampling mode {self.mode!r}; expected one of {SAMPLING_MODES}")
        probs = tuple(float(p) for p in np.atleast_1d(self.probabilities))
        if len(probs) == 0:
            raise ValueError("a sampling plan needs at least one block")
        if any(not (0.0 < p <= 1.0) for p in probs):
            raise ValueError("sampling probabilities must lie in (0, 1]")
        if self.mode == "full" and any(p != 1.0 for p in probs):
            raise ValueError("full sampling requires all probabilities equal to one")
        if self.mode == "fixed_count_uniform":
            n = len(probs)
            if not 1 <= self.count <= n:
                raise ValueError("fixed_count_uniform needs 1 <= count <= number of blocks")
            probs = (self.count / n,) * n
        object.__setattr__(self, "probabilities", probs)

    @property
    def n_blocks(self) -> int:
        return len(self.probabilities)

    @classmethod
    def full(cls, n_blocks: int, seed: int = 0, stream_id: int = 0) -> "SamplingPlan":
        return cls("full", (1.0,) * n_blocks, seed, stream_id)

    @classmethod
    def bernoulli(cls, probabilities, seed: int = 0, stream_id: int = 0) -> "SamplingPlan":
        return cls("bernoulli_independent", tuple(probabilities), seed, stream_id)

    @classmethod
    def fixed_count(cls, n_blocks: int, count: int, seed: int = 0, stream_id: int = 0) -> "SamplingPlan":
        return cls("fixed_count_uniform", (1.0,) * n_blocks, seed, stream_id, count)


def _generator(plan: SamplingPlan, iteration: int) -> np.random.Generator:
    key = np.array([plan.seed & _MASK64, plan.stream_id & _MASK64], dtype=np.uint64)
    counter = np.array([0, iteration & _MASK64, 0, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def draw_blocks(plan: SamplingPlan, iteration: int, n_blocks: int | None = None) -> np.ndarray:
    """Sorted indices of the blocks selected at ``iteration``.

    Parameters
    ----------
    plan : SamplingPlan
    iteration : int
        Non-negative iteration counter.
    n_blocks : int, optional
        Must match the plan when given.

    Returns
    -------
    ndarray of int64
        Never empty.
    """
    if n_blocks is not None and n_blocks != plan.n_blocks:
        raise ValueError(f"plan covers {plan.n_blocks} blocks, asked for {n_blocks}")
    n = plan.n_blocks
    if plan.mode == "full":
        return np.arange(n, dtype=np.int64)
    rng = _generator(plan, int(iteration))
    if plan.mode == "fixed_count_uniform":
        u = rng.random(n)
        return np.sort(np.argsort(u, kind="stable")[: plan.count]).astype(np.int64)
    probs = np.asarray(plan.probabilities)
    while True:
        u = rng.random(n)
        picked = np.flatnonzero(u < probs)
        if picked.size:
            return picked.astype(np.int64)


def effective_probabilities(plan: SamplingPlan) -> np.ndarray:
    """Inclusion probabilities of :func:`draw_blocks`, including the empty-draw redraw.

    For independent Bernoulli sampling conditioned on a non-empty draw the
    probability of block ``j`` is ``p_j / (1 - prod_k (1 - p_k))``. Fixed-count
    sampling never produces an empty set and gives ``count / n``.
    """
    probs = np.asarray(plan.probabilities, dtype=float)
    if plan.mode == "bernoulli_independent":
        p_empty = float(np.prod(1.0 - probs))
        return probs / (1.0 - p_empty)
    return probs.copy()
