"""Multi-task vehicle routing with attribute composition."""
from .core import (VARIANTS, AttributeSet, Instance, Solution, build_distance_matrix, solution_cost,
                   validate_solution)

__version__ = "0.1.0"

__all__ = ["VARIANTS", "AttributeSet", "Instance", "Solution", "build_distance_matrix", "solution_cost",
           "validate_solution", "__version__"]
