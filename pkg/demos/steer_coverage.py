"""Optimise piecewise-constant velocity and stopping-rate controls so activity lands on a disk."""

import numpy as np

from ensemble_pde.coverage import objective_vs_time, optimize_coverage
from ensemble_pde.scenario import bundled_config_text, coverage_problem, parse_config

cfg = parse_config(bundled_config_text("desk")).replace("coverage", M=40)
H = cfg.region_indicator()
prob, part = coverage_problem(cfg, H)
print(f"{cfg.grid.nx}x{cfg.grid.ny} grid, T={prob.T:g} s, M={prob.M} intervals")
print(f"partition targets range {part.targets.min():g} .. {part.targets.max():g}")

def show(it, u, J):
    print(f"  iter {it:2d}  J={J:.4e}")

res = optimize_coverage(prob.zero_control(), prob, max_iters=10, callback=show)
print(f"J fell to {res.J_history[-1] / res.J_history[0]:.0%} of its starting value")

t, J = objective_vs_time(res.control, prob)
print("J(t) at quarter marks:", np.round(np.interp(prob.T * np.array([0.25, 0.5, 0.75, 1]), t, J), 4))
print("first intervals (vx, vy, k):")
print(np.round(res.control.values[:5], 3))
