"""Numerical laboratory for sequential Pomeau-Manneville interval maps:
transfer operators on graded grids, martingale-coboundary decompositions,
and Monte Carlo ensembles for variance growth and distributional limits.
"""

from .grid import GradedGrid, GridDensity
from .maps import (
    ConstantSchedule,
    ExplicitSchedule,
    IIDSchedule,
    MapParameter,
    NearbySchedule,
    apply_map,
    inverse_left,
    inverse_right,
    map_derivative,
)
from .martingale import Decomposition
from .observables import Affine, Identity, PiecewiseLinear
from .transfer import OperatorFactory, UlamOperator, build_ulam, check_cone

__version__ = "0.1.0"

__all__ = [
    "GradedGrid",
    "GridDensity",
    "MapParameter",
    "apply_map",
    "map_derivative",
    "inverse_left",
    "inverse_right",
    "ConstantSchedule",
    "ExplicitSchedule",
    "NearbySchedule",
    "IIDSchedule",
    "Decomposition",
    "Identity",
    "Affine",
    "PiecewiseLinear",
    "UlamOperator",
    "OperatorFactory",
    "build_ulam",
    "check_cone",
    "__version__",
]
