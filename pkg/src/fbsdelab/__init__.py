"""Forward-backward SDE solvers with small-noise diagnostics."""
__version__ = "0.1.0"

from .errors import DomainError, RegressionError, SimulationError, TransformRangeError  # noqa: E402
from .grid import TimeGrid, PathEnsemble, make_grid, sample_ensemble  # noqa: E402
from .forward import ForwardModel, brownian_model, ou_model, simulate_forward  # noqa: E402
from .drivers import Driver, TerminalCondition, make_driver, make_terminal  # noqa: E402
from .regression import RegressionBasis  # noqa: E402
from .bsde import solve_bsde, solve_by_transform, solve_gradient  # noqa: E402

__all__ = [
    "DomainError", "RegressionError", "SimulationError", "TransformRangeError",
    "TimeGrid", "PathEnsemble", "make_grid", "sample_ensemble",
    "ForwardModel", "brownian_model", "ou_model", "simulate_forward",
    "Driver", "TerminalCondition", "make_driver", "make_terminal",
    "RegressionBasis", "solve_bsde", "solve_by_transform", "solve_gradient",
]
