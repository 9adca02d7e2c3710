"""Differentiable optimal control: SQP forward pass, Schur/PCG core, implicit-function backward pass."""

from pcgmpc.backward import FD_PCG, BackwardResult, backward_vjp, fd_check
from pcgmpc.batch import (
    ModelEnv,
    QuadraticReward,
    WarmStartCache,
    backward_stacked,
    batch_solve,
    rollout,
    rollout_backward,
    solve_stacked,
)
from pcgmpc.errors import (
    ContractError,
    DivergenceError,
    EvaluationError,
    NumericalError,
    PcgBreakdown,
    RolloutTruncated,
    SolverError,
)
from pcgmpc.pcg import PcgConfig, PcgOutcome, pcg_solve
from pcgmpc.problem import (
    OcpDefinition,
    ParameterLayout,
    ParameterVector,
    QpData,
    Trajectory,
    affine_quadratic_ocp,
    linearize,
    pack_affine_theta,
)
from pcgmpc.schur import SchurSystem, assemble_gamma, assemble_schur, recover_primal
from pcgmpc.sqp import SolveResult, SqpConfig, line_search, merit, policy_first_control, sqp_solve

__version__ = "0.1.0"
