"""Receding-horizon multi-robot trajectory replanning with separating-hyperplane corridors."""
from .geometry import (
    BezierPiece,
    ConvexPolytope,
    ConvexShape,
    Hyperplane,
    PiecewiseTrajectory,
    SeparationError,
    bezier_derivative,
    bezier_eval,
    box_separate,
    buffer_hyperplane,
    svm_separate,
    svm_separate_many,
)
from .qp import QpProblem, QpSolution, QpStatus, solve
from .planner import (
    DesiredTrajectory,
    DiscretePlan,
    OccupancyGrid,
    SearchError,
    discrete_search,
    select_goal,
)
from .corridor import CorridorError, ObstacleSet, SafeCorridor, build_corridor
from .replan import (
    IterationResult,
    PlanState,
    RobotConfig,
    Strategy,
    build_constraints,
    build_objective,
    plan_iteration,
    temporal_rescale,
    validity_check,
)

__version__ = "0.1.0"
