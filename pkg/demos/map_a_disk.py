"""Recover a hidden disk from the observation counts of a swarm sweeping a lawnmower path."""

import numpy as np

from ensemble_pde.grid import build_grid, disk_indicator, gaussian_density
from ensemble_pde.macroscopic import PhysicalParams, solve_mapping_model
from ensemble_pde.mapping import MappingProblem, SnapshotBasis, misclassified_area, solve_inverse
from ensemble_pde.scenario import make_lawnmower

grid = build_grid((0, 100, 0, 100), 50, 50)
H_true = disk_indicator(grid, (50, 50), 20)

# 25 lanes at 2 m/s, starting in the middle of the first lane
sched = make_lawnmower(grid.extent, 25, 2.0, 1300.0, start=(0.0, 2.0))
print(f"path {sched.T * sched.speed:.0f} m, speed {sched.speed:.2f} m/s")

params = PhysicalParams(D=1e-4, k_o=100.0)
y0 = gaussian_density(grid, sched.start, 0.02)
traj, obs = solve_mapping_model(H_true, sched.to_control(), params, grid, y0, sched.T,
                                snapshot_times=np.linspace(0, sched.T, 251))
print(f"observations per agent by the end: {obs.g[-1]:.1f}")

# Fit the observation rate, default regularisation
problem = MappingProblem.from_series(SnapshotBasis.from_trajectory(traj), obs, params.k_o)
result = solve_inverse(problem)
print(f"lambda {problem.lam:.3g}, {result.iterations} iterations, J {result.history[0]:.3g} -> {result.history[-1]:.3g}")
print(f"misclassified area: {misclassified_area(result.H_hat, H_true, grid) / grid.area:.1%}")

# coarse picture of the thresholded map
for row in result.H_thresh[::-5][:, ::3]:
    print("".join("#" if v else "." for v in row))
