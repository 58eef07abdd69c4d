"""Quadratic BSDEs with square-integrable terminal data, solved through an explicit transform."""
from .bsde import (
    BsdeSolution,
    Driver,
    ExtremalPair,
    TerminalCondition,
    solve_dominated,
    solve_linear_growth,
    solve_qbsde_abc,
    solve_qbsde_pure,
    solve_zero_generator,
    terminal,
    transformed_driver,
)
from .errors import (
    DomainError,
    IllConditionedBasisError,
    NonContractiveStepError,
    NumericalError,
    PreconditionError,
    RefineGridError,
    SimulationBlowupError,
    SolverInconsistencyError,
    UsageError,
)
from .generator import DominatingParams, GeneratorSpec, Piece, antiderivative, builtin, l1_norm
from .qpde import PdeProblem, PdeSolution, cole_hopf_check, mc_fd_check, solve_linear_fd, solve_quadratic_fd
from .stochastic import (
    Coefficient,
    PathEnsemble,
    TimeGrid,
    euler_forward,
    gh_expectation,
    local_time,
    sample_brownian,
)
from .transform import SecondTransform, TransformPair, build_second, build_u, eval_du, eval_u, eval_u_inv, isometry_bounds
from .verify import CheckReport, TestFunction

__version__ = "0.1.0"
