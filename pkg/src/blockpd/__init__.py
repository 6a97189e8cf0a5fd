"""Block-adapted non-linear primal-dual proximal splitting.

Solvers for ``min_x G(x) + F(K(x))`` with a possibly non-linear ``K``,
block-wise step lengths and randomized block updates.
"""

from .blocks import BlockPartition, BlockVector, ConnectionGraph, StructureError, build_connection_graph
from .problem import DiagnosticError, Linearization, ProblemSpec
from .sampling import SamplingPlan, draw_blocks, effective_probabilities
from .solvers import DivergenceError, IterationRecord, RunResult, SolverRun, run
from .stepper import (
    ConfigurationError,
    StepState,
    advance,
    init_dual_steps_from_weights,
    init_step_state,
)

__version__ = "0.1.0"

__all__ = [
    "BlockPartition",
    "BlockVector",
    "ConnectionGraph",
    "StructureError",
    "build_connection_graph",
    "DiagnosticError",
    "Linearization",
    "ProblemSpec",
    "SamplingPlan",
    "draw_blocks",
    "effective_probabilities",
    "DivergenceError",
    "IterationRecord",
    "RunResult",
    "SolverRun",
    "run",
    "ConfigurationError",
    "StepState",
    "advance",
    "init_dual_steps_from_weights",
    "init_step_state",
]
