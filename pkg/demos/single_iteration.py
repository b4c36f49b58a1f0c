"""
One planning iteration, stage by stage
======================================

A box robot in a 2D grid with a wall in the way. We run a single
replanning step and look at what each stage produced.
"""

import numpy as np

from rlss.geometry import ConvexPolytope, ConvexShape
from rlss.planner import DesiredTrajectory, OccupancyGrid
from rlss.replan import PlanState, RobotConfig, plan_iteration

# 10 m x 5 m grid with 0.5 m cells and a wall at x = 4 that leaves a gap at the top
occ = np.zeros((20, 10), bool)
occ[8, :7] = True
grid = OccupancyGrid(occ, 0.5)

shape = ConvexShape.box([0.2, 0.2])
cfg = RobotConfig(shape=shape, workspace=ConvexPolytope.box([0, 0], [10, 5]))

# the desired path goes straight through the wall
desired = DesiredTrajectory.from_waypoints([0, 5], [[1, 1], [9, 1]])
start = np.array([1.0, 1.0])

res = plan_iteration(start, desired, grid, [], cfg, PlanState.at_rest(start), now=0.0)

# goal selection picks the latest free point of the desired path within the horizon
print("goal", res.goal, "horizon", round(res.horizon, 3))

# the discrete search detours through the gap; its waypoints seed the corridor
print("waypoints\n", np.round(res.plan.waypoints, 3))

# one polytope per piece, built from separating planes against nearby cells
for j, prov in enumerate(res.corridor.provenance):
    kinds = [k for k, _ in prov]
    print(f"piece {j}: {kinds.count('obstacle')} obstacle planes, {kinds.count('workspace')} workspace planes")

# the optimised trajectory starts at rest at the robot and stays inside the corridor
traj = res.trajectory
print("ok", res.ok, "rescales", res.rescales, "duration", round(traj.total_duration, 3))
for t in np.linspace(0, traj.total_duration, 6):
    print(f"  t={t:5.2f}  p={np.round(traj.eval(t), 3)}  |v|={np.linalg.norm(traj.eval(t, order=1)):.3f}")
