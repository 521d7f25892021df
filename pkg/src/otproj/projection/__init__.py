from .entropic import project_entropic, project_penalized
from .integrands import ConvexIntegrand
from .interval import project_k1_1d
from .jko import jko_step, optimality_residual, penalized_optimality_residual
from .lp import project_lp
from .result import ProjectionResult

__all__ = [
    "ConvexIntegrand",
    "ProjectionResult",
    "jko_step",
    "optimality_residual",
    "penalized_optimality_residual",
    "project_entropic",
    "project_k1_1d",
    "project_lp",
    "project_penalized",
]
