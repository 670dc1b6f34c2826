"""Exception types shared across the package."""


class GraphonInvestError(Exception):
    """Base class; the CLI maps every subclass to a machine-readable error."""

    kind = "error"


class DomainError(GraphonInvestError, ValueError):
    kind = "domain"


class ParameterError(GraphonInvestError, ValueError):
    kind = "parameter"


class ConstraintViolation(GraphonInvestError, ValueError):
    """Interaction weights break the row-sum condition."""

    kind = "constraint"

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class CapabilityError(GraphonInvestError, NotImplementedError):
    kind = "capability"


class InfeasibleError(GraphonInvestError, RuntimeError):
    kind = "infeasible"


class ConvergenceError(GraphonInvestError, RuntimeError):
    kind = "convergence"

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class RefinementRequired(GraphonInvestError, RuntimeError):
    kind = "refinement"


class ExperimentError(GraphonInvestError, RuntimeError):
    kind = "experiment"


class ConsistencyError(GraphonInvestError, RuntimeError):
    """Two computations of the same quantity disagree."""

    kind = "consistency"
