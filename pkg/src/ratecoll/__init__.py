"""Direct-collocation optimal control with on-mesh rate constraints."""
from .collocation import Mesh, Scheme
from .ocp import OcpSpec, RateMode, augment_add_path, augment_add_state, validate
from .problems import get_problem, problem_names
from .refine import Tolerances, interpolate, solve_with_refinement
from .solver import SolverOptions, solve
from .transcription import count_constraints, transcribe

__version__ = "0.1.0"
__all__ = [
    "Mesh", "Scheme", "OcpSpec", "RateMode", "validate", "augment_add_state", "augment_add_path",
    "get_problem", "problem_names", "transcribe", "count_constraints", "solve", "SolverOptions",
    "interpolate", "solve_with_refinement", "Tolerances", "__version__",
]
