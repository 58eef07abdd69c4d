"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain of the operation."""


class PreconditionError(ValueError):
    """Input data violate an assumption the algorithm relies on."""


class NumericalError(FloatingPointError):
    """A quadrature or linear-algebra step produced non-finite numbers."""


class SimulationBlowupError(FloatingPointError):
    def __init__(self, path_index: int, step: int):
        super().__init__(f"non-finite state on path {path_index} at step {step}")
        self.path_index = path_index
        self.step = step


class IllConditionedBasisError(ArithmeticError):
    def __init__(self, step: int, condition: float):
        super().__init__(
            f"regression basis at step {step} is ill-conditioned "
            f"(condition number {condition:.3e}); lower basis_degree"
        )
        self.step = step
        self.condition = condition


class NonContractiveStepError(ValueError):
    def __init__(self, factor: float, required_steps: int):
        super().__init__(
            f"implicit step is not a contraction (estimate {factor:.3f} >= 1); "
            f"refine the time grid to at least n_steps={required_steps}"
        )
        self.factor = factor
        self.required_steps = required_steps


class SolverInconsistencyError(RuntimeError):
    """A solver output violates a property it is guaranteed to satisfy."""


class RefineGridError(ValueError):
    def __init__(self, message: str, suggested_n_t: int):
        super().__init__(f"{message}; suggested n_t={suggested_n_t}")
        self.suggested_n_t = suggested_n_t


class UsageError(ValueError):
    """Arguments are individually valid but inconsistent with each other."""
