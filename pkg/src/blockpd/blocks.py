"""Block partitions of flat coordinate vectors.

A :class:`BlockPartition` splits ``0..total_dim`` into disjoint index sets.
Each set is the range of one orthogonal coordinate projection, so a flat
array together with a partition is all that is needed to talk about the
block components ``x_j`` of a primal point or ``y_l`` of a dual point.
Projections are never materialized; blocks are slices (contiguous case) or
integer index arrays.

The :class:`ConnectionGraph` records which dual blocks a primal block is
coupled to through the Jacobian of the non-linear operator, which pairs of
dual blocks are coupled simultaneously through a primal block, and the
reciprocal weights used to split the coupling between them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

__all__ = [
    "StructureError",
    "BlockPartition",
    "BlockVector",
    "ConnectionGraph",
    "make_partition",
    "partition_from_sizes",
    "block_weight_sum",
    "build_connection_graph",
]


class StructureError(ValueError):
    """Raised when a block layout is inconsistent (overlap, gap, empty block)."""


def _as_index_set(spec, total_dim):
    """Normalize one block specification to a slice or a sorted index array."""
    if isinstance(spec, range):
        if spec.step != 1:
            return np.asarray(spec, dtype=np.int64)
        return slice(spec.start, spec.stop)
    if isinstance(spec, slice):
        start, stop, step = spec.indices(total_dim)
        if step != 1:
            return np.arange(start, stop, step, dtype=np.int64)
        return slice(start, stop)
    if isinstance(spec, tuple) and len(spec) == 2 and all(
        isinstance(v, (int, np.integer)) for v in spec
    ):
        return slice(int(spec[0]), int(spec[1]))
    idx = np.asarray(spec, dtype=np.int64).ravel()
    if idx.size and np.all(np.diff(idx) == 1):
        return slice(int(idx[0]), int(idx[-1]) + 1)
    return idx


class BlockPartition:
    """Disjoint cover of ``0..total_dim`` by ordered blocks.

    Parameters
    ----------
    total_dim : int
        Length of the flat vectors being partitioned.
    blocks : sequence of slice or ndarray
        Block index sets. Use :func:`make_partition` to build from ranges
        with validation.

    Attributes
    ----------
    block_of : ndarray of int
        ``block_of[i]`` is the block containing coordinate ``i``.
    sizes : ndarray of int
        Number of coordinates in each block.
    """

    def __init__(self, total_dim: int, blocks: Sequence):
        total_dim = int(total_dim)
        if total_dim < 1:
            raise StructureError("total_dim must be positive")
        if len(blocks) < 1:
            raise StructureError("a partition needs at least one block")
        self.total_dim = total_dim
        self.blocks = [_as_index_set(b, total_dim) for b in blocks]
        owner = np.full(total_dim, -1, dtype=np.int64)
        sizes = np.zeros(len(self.blocks), dtype=np.int64)
        for j, b in enumerate(self.blocks):
            if isinstance(b, slice):
                if b.start < 0 or b.stop > total_dim or b.stop <= b.start:
                    raise StructureError(f"block {j} range [{b.start}, {b.stop}) is empty or out of bounds")
                covered = owner[b]
            else:
                if b.size == 0:
                    raise StructureError(f"block {j} is empty")
                if b.min() < 0 or b.max() >= total_dim:
                    raise StructureError(f"block {j} has indices out of bounds")
                if np.unique(b).size != b.size:
                    raise StructureError(f"block {j} repeats an index")
                covered = owner[b]
            if np.any(covered >= 0):
                other = int(covered[covered >= 0][0])
                raise StructureError(f"block {j} overlaps block {other}")
            owner[b] = j
            sizes[j] = covered.size
        if np.any(owner < 0):
            first = int(np.flatnonzero(owner < 0)[0])
            raise StructureError(f"coordinate {first} is not covered by any block")
        self.block_of = owner
        self.block_of.setflags(write=False)
        self.sizes = sizes
        self.sizes.setflags(write=False)

    def __len__(self):
        return len(self.blocks)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def __repr__(self):
        return f"BlockPartition(total_dim={self.total_dim}, n_blocks={self.n_blocks})"

    def __eq__(self, other):
        if not isinstance(other, BlockPartition):
            return NotImplemented
        return self.total_dim == other.total_dim and np.array_equal(self.block_of, other.block_of)

    def __hash__(self):
        return hash((self.total_dim, self.block_of.tobytes()))

    def view(self, v: np.ndarray, j: int) -> np.ndarray:
        """Block ``j`` of ``v``; a view for contiguous blocks, a copy otherwise."""
        return v[self.blocks[j]]

    def set_block(self, v: np.ndarray, j: int, values) -> None:
        v[self.blocks[j]] = values

    def expand(self, per_block) -> np.ndarray:
        """Broadcast one value per block to one value per coordinate."""
        per_block = np.asarray(per_block, dtype=float)
        if per_block.ndim == 0:
            return np.full(self.total_dim, float(per_block))
        if per_block.shape != (self.n_blocks,):
            raise ValueError(f"expected {self.n_blocks} block values, got shape {per_block.shape}")
        return per_block[self.block_of]

    def mask(self, block_ids: Iterable[int]) -> np.ndarray:
        """Boolean coordinate mask of the union of the given blocks."""
        sel = np.zeros(self.n_blocks, dtype=bool)
        ids = np.fromiter(block_ids, dtype=np.int64)
        sel[ids] = True
        return sel[self.block_of]

    def block_sq_norms(self, v: np.ndarray) -> np.ndarray:
        """Squared Euclidean norm of each block of ``v``."""
        v = np.asarray(v, dtype=float)
        return np.bincount(self.block_of, weights=v * v, minlength=self.n_blocks)

    def split(self, v: np.ndarray) -> list:
        return [np.array(v[b], copy=True) for b in self.blocks]

    def assemble(self, parts: Sequence[np.ndarray]) -> np.ndarray:
        """Inverse of :meth:`split`."""
        if len(parts) != self.n_blocks:
            raise ValueError("one part per block is required")
        out = np.empty(self.total_dim, dtype=np.result_type(*parts) if parts else float)
        for b, p in zip(self.blocks, parts):
            out[b] = p
        return out


def make_partition(total_dim: int, block_spec: Sequence) -> BlockPartition:
    """Build a validated partition from ranges, ``(start, stop)`` pairs or index lists.

    Raises
    ------
    StructureError
        If the ranges overlap, leave a gap, or contain an empty block.

    Examples
    --------
    >>> make_partition(6, [range(0, 3), range(3, 6)]).n_blocks
    2
    """
    return BlockPartition(total_dim, list(block_spec))


def partition_from_sizes(sizes: Sequence[int]) -> BlockPartition:
    """Contiguous partition with consecutive blocks of the given sizes."""
    sizes = [int(s) for s in sizes]
    edges = np.concatenate([[0], np.cumsum(sizes)])
    return BlockPartition(int(edges[-1]), [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])])


@dataclass
class BlockVector:
    """A flat array paired with the partition that splits it into blocks."""

    data: np.ndarray
    partition: BlockPartition

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.shape != (self.partition.total_dim,):
            raise ValueError(
                f"data length {self.data.shape} does not match partition dimension {self.partition.total_dim}"
            )

    def __getitem__(self, j: int) -> np.ndarray:
        return self.partition.view(self.data, j)

    def __setitem__(self, j: int, values) -> None:
        self.partition.set_block(self.data, j, values)

    def copy(self) -> "BlockVector":
        return BlockVector(self.data.copy(), self.partition)

    def norm_sq(self) -> float:
        return float(self.data @ self.data)

    def block_sq_norms(self) -> np.ndarray:
        return self.partition.block_sq_norms(self.data)


@dataclass
class ConnectionGraph:
    """Coupling structure between primal and dual blocks.

    Attributes
    ----------
    n_primal, n_dual : int
        Number of primal blocks ``m`` and dual blocks ``n``.
    neighbors : list of frozenset
        ``neighbors[j]`` holds the dual blocks coupled to primal block ``j``.
    sim_connected : dict
        Maps ``(j, l)`` to the frozenset of dual blocks ``k`` coupled to
        ``l`` through primal block ``j``. Missing entries default to
        ``neighbors[j]`` when ``l`` is a neighbor of ``j``.
    weights : dict
        Maps ``(j, l, k)`` to ``w_{j,l,k} > 0``. Only one orientation needs
        to be stored; the other is its reciprocal. Missing pairs weigh 1.
    """

    n_primal: int
    n_dual: int
    neighbors: list
    sim_connected: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    def __post_init__(self):
        self.neighbors = [frozenset(int(l) for l in nb) for nb in self.neighbors]
        if len(self.neighbors) != self.n_primal:
            raise StructureError("one neighbor set per primal block is required")
        for j, nb in enumerate(self.neighbors):
            for l in nb:
                if not 0 <= l < self.n_dual:
                    raise StructureError(f"primal block {j} lists unknown dual block {l}")
        self.sim_connected = {
            (int(j), int(l)): frozenset(int(k) for k in ks) for (j, l), ks in self.sim_connected.items()
        }
        for (j, l), ks in self.sim_connected.items():
            if l not in self.neighbors[j] and ks:
                raise StructureError(f"simultaneous set given for unconnected pair ({j}, {l})")
            if not ks <= self.neighbors[j]:
                raise StructureError(f"simultaneous set of ({j}, {l}) leaves the neighbors of block {j}")
        stored = dict(self.weights)
        self.weights = {}
        for (j, l, k), w in stored.items():
            self.set_weight(j, l, k, w)

    def set_weight(self, j: int, l: int, k: int, w: float) -> None:
        """Store ``w_{j,l,k} = w`` and ``w_{j,k,l} = 1/w``."""
        w = float(w)
        if not w > 0 or not np.isfinite(w):
            raise StructureError("connection weights must be positive and finite")
        if l == k and w != 1.0:
            raise StructureError("a self weight w_{j,l,l} must equal 1")
        self.weights[(int(j), int(l), int(k))] = w
        self.weights[(int(j), int(k), int(l))] = 1.0 / w

    def weight(self, j: int, l: int, k: int) -> float:
        return self.weights.get((j, l, k), 1.0)

    def simultaneous(self, j: int, l: int) -> frozenset:
        """The set of dual blocks coupled to ``l`` through primal block ``j``."""
        if l not in self.neighbors[j]:
            return frozenset()
        return self.sim_connected.get((j, l), self.neighbors[j])

    def weight_table(self) -> dict:
        """All nonzero ``w_{j,l}`` as a dict keyed by ``(l, j)``."""
        out = {}
        for j in range(self.n_primal):
            for l in self.neighbors[j]:
                out[(l, j)] = block_weight_sum(self, j, l)
        return out

    def weight_matrix(self):
        """Sparse ``(n, m)`` matrix holding ``w_{j,l}`` at position ``(l, j)``.

        The result is cached; the graph is treated as immutable once it is
        in use by a solver.
        """
        cached = getattr(self, "_weight_matrix", None)
        if cached is not None:
            return cached
        rows, cols, vals = [], [], []
        for j in range(self.n_primal):
            for l in sorted(self.neighbors[j]):
                w = block_weight_sum(self, j, l)
                if w > 0:
                    rows.append(l)
                    cols.append(j)
                    vals.append(w)
        mat = sparse.csr_matrix((vals, (rows, cols)), shape=(self.n_dual, self.n_primal))
        object.__setattr__(self, "_weight_matrix", mat)
        return mat

    def reciprocal_defect(self) -> float:
        """Largest ``|w_{j,l,k} w_{j,k,l} - 1|`` over stored pairs (zero by construction)."""
        worst = 0.0
        for (j, l, k), w in self.weights.items():
            worst = max(worst, abs(w * self.weights[(j, k, l)] - 1.0))
        return worst


def block_weight_sum(graph: ConnectionGraph, j: int, l: int) -> float:
    """Aggregate weight ``w_{j,l}`` of dual block ``l`` seen from primal block ``j``.

    Returns the sum of ``w_{j,l,k}`` over the dual blocks ``k`` that are
    simultaneously connected to ``l`` through ``j``, or 0 when ``l`` is not
    a neighbor of ``j``. With all weights equal to one this counts the
    connected dual blocks.
    """
    if not 0 <= j < graph.n_primal or not 0 <= l < graph.n_dual:
        raise IndexError(f"block pair ({j}, {l}) out of range")
    if l not in graph.neighbors[j]:
        return 0.0
    return float(sum(graph.weight(j, l, k) for k in graph.simultaneous(j, l)))


def _dense_jacobian(problem, x):
    n_x = problem.primal_partition.total_dim
    lin = problem.linearize(x)
    cols = []
    for i in range(n_x):
        e = np.zeros(n_x)
        e[i] = 1.0
        cols.append(lin.apply(e))
    return np.column_stack(cols)


def build_connection_graph(problem, x, lambda_filter=None, tol: float = 1e-14) -> ConnectionGraph:
    """Connection graph of ``problem`` at ``x``.

    A declared graph (``problem.connections``) is preferred. Otherwise the
    dense Jacobian is probed column by column, which is only meant for
    desk-scale problems, and sub-blocks whose norm is below ``tol`` (relative
    to the whole Jacobian, floored at one) count as disconnected.

    Parameters
    ----------
    problem : ProblemSpec
    x : ndarray or BlockVector
        Point at which the Jacobian is probed.
    lambda_filter : array_like of bool, shape (n, m), optional
        ``lambda_filter[k, j]`` is False when the coupling coefficient of dual
        block ``k`` and primal block ``j`` vanishes; such ``k`` are dropped
        from the simultaneous sets of ``j``.
    tol : float
        Probing threshold.
    """
    if isinstance(x, BlockVector):
        x = x.data
    P, Q = problem.primal_partition, problem.dual_partition
    m, n = P.n_blocks, Q.n_blocks
    if lambda_filter is not None:
        lambda_filter = np.asarray(lambda_filter, dtype=bool)
        if lambda_filter.shape != (n, m):
            raise ValueError(f"lambda_filter must have shape ({n}, {m})")

    if problem.connections is not None:
        base = problem.connections
        if lambda_filter is None:
            return base
        sim = {}
        for j in range(m):
            for l in base.neighbors[j]:
                sim[(j, l)] = frozenset(k for k in base.simultaneous(j, l) if lambda_filter[k, j])
        return ConnectionGraph(m, n, list(base.neighbors), sim, dict(base.weights))

    J = _dense_jacobian(problem, x)
    scale = max(1.0, float(np.linalg.norm(J)))
    sub = [[J[Q.blocks[l]][:, P.blocks[j]] for j in range(m)] for l in range(n)]
    neighbors = []
    for j in range(m):
        neighbors.append({l for l in range(n) if np.linalg.norm(sub[l][j]) > tol * scale})
    sim = {}
    for j in range(m):
        for l in neighbors[j]:
            ks = set()
            for k in neighbors[j]:
                if lambda_filter is not None and not lambda_filter[k, j]:
                    continue
                if np.linalg.norm(sub[l][j] @ sub[k][j].T) > tol * scale * scale:
                    ks.add(k)
            sim[(j, l)] = frozenset(ks)
    return ConnectionGraph(m, n, neighbors, sim)
