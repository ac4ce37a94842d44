"""Adjoint-based projected gradient descent for the coverage controls.

Controls are piecewise constant on ``M`` intervals.  Gradients are reported as
the L2(0, T) representative, i.e. per-interval averages of the adjoint
integrand plus ``lam * u``; the pairing with a direction ``h`` is therefore
``sum_m dt_m * grad[m] . h[m]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .grid import Grid
from .macroscopic import (SOLVER_DT_MAX, ControlSignal, DensityTrajectory, NumericalFailure, PhysicalParams,
                          _face_values, iter_adjoint, solve_coverage_model, solver_dt)

log = logging.getLogger(__name__)

DEFAULT_LOWER = (-2.0, -2.0, 0.0)
DEFAULT_UPPER = (2.0, 2.0, 10.0)


@dataclass
class CoverageProblem:
    grid: Grid
    H: np.ndarray
    params: PhysicalParams
    y0: np.ndarray
    T: float
    y_target: np.ndarray
    weights: tuple = (0.0, 0.0, 1.0)
    lam: float = 0.0
    lower: tuple = DEFAULT_LOWER
    upper: tuple = DEFAULT_UPPER
    M: int = 40
    dt_max: float = SOLVER_DT_MAX
    stride: int = 1
    dt: float | None = None
    limiter: str = "vanleer"

    def __post_init__(self):
        self.H = self.grid.check_field(self.H, "H")
        self.y0 = self.grid.check_field(self.y0, "y0")
        self.y_target = np.asarray(self.y_target, dtype=float)
        if self.y_target.shape == self.grid.shape:
            # activity-only target; the other components are weighted out
            self.y_target = np.stack([np.zeros(self.grid.shape), np.zeros(self.grid.shape), self.y_target])
        if self.y_target.shape != (3,) + self.grid.shape:
            raise ValueError("y_target must be one field or a stack of three")
        self.weights = tuple(float(w) for w in self.weights)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not (np.isfinite(self.lower).all() and np.isfinite(self.upper).all()):
            raise ValueError("control bounds must be finite")
        if np.any(self.lower > self.upper) or self.lower[2] < 0:
            raise ValueError("need lower <= upper and a nonnegative rate bound")
        if self.dt is None:
            self.dt = solver_dt(self.zero_control(), self.params, self.grid, self.dt_max)

    def control(self, values) -> ControlSignal:
        return ControlSignal(np.linspace(0.0, self.T, self.M + 1), values, self.lower, self.upper)

    def zero_control(self) -> ControlSignal:
        return self.control(project_values(np.zeros((self.M, 3)), self.lower, self.upper))


@dataclass
class GradientReport:
    """Per-interval gradient and the cross-check between the two assembly forms."""

    grad: np.ndarray
    grad_boundary_form: np.ndarray
    discrepancy: float
    J: float
    trajectory: DensityTrajectory = field(repr=False)


def project_values(values, lower, upper) -> np.ndarray:
    return np.clip(np.asarray(values, dtype=float), lower, upper)


def project_controls(u: ControlSignal, lower=None, upper=None) -> ControlSignal:
    lower = u.lower if lower is None else lower
    upper = u.upper if upper is None else upper
    return u.with_values(project_values(u.values, lower, upper))


def _terminal_misfit(prob: CoverageProblem, y_T) -> float:
    w = np.asarray(prob.weights)[:, None, None]
    return 0.5 * prob.grid.integrate(np.sum((w * y_T - prob.y_target) ** 2, axis=0))


def reduced_objective(u: ControlSignal, prob: CoverageProblem):
    """``J(u) = 1/2 ||W y(T) - y_target||^2 + lam/2 ||u||^2``; returns ``(J, trajectory)``."""
    traj = solve_coverage_model(prob.H, u, prob.params, prob.grid, prob.y0, prob.T,
                                dt=prob.dt, stride=prob.stride, limiter=prob.limiter)
    J = _terminal_misfit(prob, traj.final) + 0.5 * prob.lam * u.l2_norm_sq()
    return J, traj


def objective_vs_time(u: ControlSignal, prob: CoverageProblem, times=None):
    """Terminal misfit evaluated on each partial horizon ``[0, t]``."""
    times = u.times if times is None else np.asarray(times)
    traj = solve_coverage_model(prob.H, u, prob.params, prob.grid, prob.y0, prob.T,
                                snapshot_times=times, dt=prob.dt, stride=0, limiter=prob.limiter)
    return traj.times, np.array([_terminal_misfit(prob, s) for s in traj.states])


def face_gradient_pairing(y1, p1, c, h, h_perp, limiter="vanleer"):
    """Interior-face form of ``int y1 dp1/dx``: limited upwind face values of
    ``y1`` (as seen by the forward flux for velocity sign ``c``) times the face
    difference of ``p1``.  Boundary faces carry no flux and do not contribute."""
    yf = _face_values(y1, c, limiter)[..., 1:-1]
    return h_perp * float(np.sum(yf * np.diff(p1, axis=-1)))


def boundary_form_pairing(y1, p1, c, h, h_perp, limiter="vanleer"):
    """Cell-interior ``-int p1 dy1/dx`` plus the boundary trace ``int n_x p1 y1``."""
    yf = _face_values(y1, c, limiter)
    interior = -h_perp * float(np.sum(p1 * np.diff(yf, axis=-1)))
    trace = h_perp * float(np.sum(p1[..., -1] * yf[..., -1] - p1[..., 0] * yf[..., 0]))
    return interior + trace


def _integrands(grid: Grid, H, y1, p, v, lim):
    """Adjoint integrands at one time: both velocity forms and the rate channel."""
    p1, p2, p3 = p
    sx = 1.0 if v[0] >= 0 else -1.0
    sy = 1.0 if v[1] >= 0 else -1.0
    a = (face_gradient_pairing(y1, p1, sx, grid.hx, grid.hy, lim),
         face_gradient_pairing(y1.T, p1.T, sy, grid.hy, grid.hx, lim))
    b = (boundary_form_pairing(y1, p1, sx, grid.hx, grid.hy, lim),
         boundary_form_pairing(y1.T, p1.T, sy, grid.hy, grid.hx, lim))
    rate = grid.cell_area * float(np.sum(H * y1 * (p2 + p3 - p1)))
    return np.array([*a, rate]), np.array([*b, rate])


def coverage_gradient(u: ControlSignal, prob: CoverageProblem, trajectory=None) -> GradientReport:
    """Gradient of the reduced objective via one adjoint solve.

    The default assembly pairs ``y1`` with the gradient of ``p1``; the form with
    the interior ``-p1 dy1/dx_i`` term plus the boundary trace is computed
    alongside and their largest relative difference is reported.  Time
    integrals use the trapezoid rule on the forward step grid.
    """
    if trajectory is None:
        J, trajectory = reduced_objective(u, prob)
    else:
        J = _terminal_misfit(prob, trajectory.final) + 0.5 * prob.lam * u.l2_norm_sq()
    if trajectory.y1_history is None or len(trajectory.y1_times) < 2:
        raise ValueError("forward trajectory lacks the y1 checkpoints needed for the gradient")
    if not np.array_equal(trajectory.control.values, u.values):
        raise ValueError("trajectory was computed with a different control")

    steps = trajectory.step_times
    idx = u.interval_of(0.5 * (steps[:-1] + steps[1:]))
    acc_a = np.zeros((u.M, 3))
    acc_b = np.zeros((u.M, 3))
    grid, H, lim = prob.grid, prob.H, trajectory.limiter
    prev = None
    k = len(steps) - 1
    for t, p in iter_adjoint(trajectory, H, prob.params, prob.weights, prob.y_target):
        y1 = trajectory.y1_at(t)[0]
        if prev is not None:
            m = idx[k]
            v = u.values[m]
            ia, ib = _integrands(grid, H, y1, p, v, lim)
            pa, pb = prev[2] if prev[3] == m else _integrands(grid, H, prev[0], prev[1], v, lim)
            dt = steps[k + 1] - steps[k]
            acc_a[m] += 0.5 * dt * (ia + pa)
            acc_b[m] += 0.5 * dt * (ib + pb)
            prev = (y1, p, (ia, ib), m)
        else:
            m = idx[k - 1]
            prev = (y1, p, _integrands(grid, H, y1, p, u.values[m], lim), m)
        k -= 1
    dur = u.durations[:, None]
    grad = acc_a / dur + prob.lam * u.values
    grad_b = acc_b / dur + prob.lam * u.values
    scale = np.abs(grad[:, :2]).max()
    disc = float(np.abs(grad[:, :2] - grad_b[:, :2]).max() / scale) if scale > 0 else 0.0
    return GradientReport(grad, grad_b, disc, J, trajectory)


def pairing(u: ControlSignal, a, b) -> float:
    """L2(0, T) inner product of two piecewise-constant signals on ``u``'s intervals."""
    return float(np.sum(u.durations[:, None] * np.asarray(a) * np.asarray(b)))


@dataclass
class CoverageResult:
    control: ControlSignal
    J_history: list
    iterations: int
    trajectory: DensityTrajectory = field(repr=False)
    converged: bool = False


def optimize_coverage(u0: ControlSignal, prob: CoverageProblem, max_iters=50, c=1e-4,
                      backtrack=0.5, tol=1e-6, max_backtracks=40, callback=None) -> CoverageResult:
    """Projected gradient descent with Armijo backtracking on the reduced objective.

    The first trial step is ``1 / ||grad J(u0)||``; later iterations start from
    twice the last accepted step.
    """
    if not u0.feasible(tol=1e-12):
        raise ValueError("initial control violates the bounds")
    u = u0
    try:
        report = coverage_gradient(u, prob)
    except NumericalFailure as exc:
        raise NumericalFailure(f"initial gradient failed: {exc}") from exc
    J = report.J
    history = [J]
    traj = report.trajectory
    gnorm = np.sqrt(pairing(u, report.grad, report.grad))
    alpha = 1.0 / gnorm if gnorm > 0 else 1.0
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        g = report.grad
        accepted = False
        for _ in range(max_backtracks):
            trial = project_controls(u.with_values(u.values - alpha * g))
            if np.array_equal(trial.values, u.values):
                break
            try:
                J_new, traj_new = reduced_objective(trial, prob)
            except NumericalFailure as exc:
                raise NumericalFailure(f"iteration {it}: forward solve failed ({exc}); "
                                       f"last control {u.values.tolist()}") from exc
            if J_new <= J + c * pairing(u, g, trial.values - u.values):
                accepted = True
                break
            alpha *= backtrack
        if not accepted:
            history.append(J)
            converged = True
            break
        rel = (J - J_new) / max(abs(J), 1e-300)
        u, J, traj = trial, J_new, traj_new
        history.append(J)
        if callback is not None:
            callback(it, u, J)
        log.info("iter %d  J=%.6e  alpha=%.3e", it, J, alpha)
        if rel < tol:
            converged = True
            break
        report = coverage_gradient(u, prob, trajectory=traj)
        alpha *= 2.0
    return CoverageResult(u, history, it, traj, converged)


def finite_difference_check(u: ControlSignal, prob: CoverageProblem, directions, eps=1e-4):
    """Relative errors between central differences and the adjoint pairing per direction."""
    rep = coverage_gradient(u, prob)
    errs = []
    for h in directions:
        Jp, _ = reduced_objective(u.with_values(u.values + eps * h), prob)
        Jm, _ = reduced_objective(u.with_values(u.values - eps * h), prob)
        fd = (Jp - Jm) / (2 * eps)
        ad = pairing(u, rep.grad, h)
        errs.append(abs(fd - ad) / max(abs(fd), abs(ad), 1e-300))
    return np.array(errs), rep
