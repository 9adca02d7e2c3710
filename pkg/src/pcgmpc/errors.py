"""Exception hierarchy shared by the solver modules."""


class SolverError(RuntimeError):
    """Base class for every failure raised by the solver stack."""


class EvaluationError(SolverError):
    """A cost or dynamics callback produced non-finite values."""

    def __init__(self, message, stage=None):
        super().__init__(message if stage is None else f"{message} (stage {stage})")
        self.stage = stage


class NumericalError(SolverError):
    """A factorization or decomposition failed."""

    def __init__(self, message, stage=None):
        super().__init__(message if stage is None else f"{message} (stage {stage})")
        self.stage = stage


class PcgBreakdown(SolverError):
    """Curvature p'Sp <= 0 was encountered inside conjugate gradient."""

    def __init__(self, iteration, curvature):
        super().__init__(f"PCG breakdown at iteration {iteration}: p'Sp = {curvature!r}")
        self.iteration = iteration
        self.curvature = curvature


class DivergenceError(SolverError):
    """SQP produced non-finite iterates; carries the last finite iterate."""

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class RolloutTruncated(SolverError):
    """A closed-loop rollout stopped because the policy solve failed."""

    def __init__(self, step, cause):
        super().__init__(f"rollout truncated at step {step}: {cause}")
        self.step = step
        self.cause = cause


class ContractError(SolverError):
    """Inputs violate a documented precondition (shapes, missing caches)."""
