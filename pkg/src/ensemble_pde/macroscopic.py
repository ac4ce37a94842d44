"""Method-of-lines solvers for the ensemble density models.

Spatial operators are finite-volume on the cell-centred :class:`~ensemble_pde.grid.Grid`:
5-point diffusion and dimension-wise upwind advection with a van Leer limited
reconstruction.  Time stepping is explicit SSP-RK2 (Heun).

Three right-hand sides are provided:

``mapping``
    ``y1`` moves, ``y2`` accumulates observations at rate ``k_o H y1``.
``coverage``
    moving/stationary/activity densities with switching rates ``k(t) H`` and ``k_f``.
``adjoint_transformed``
    the time-reversed adjoint of the coverage model; advection sign flipped,
    homogeneous Neumann boundary for ``p1``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from .grid import Grid

log = logging.getLogger(__name__)

MODELS = ("mapping", "coverage", "adjoint_transformed")
LIMITERS = ("vanleer", "upwind")
CLIP_TOL = 1e-10
# default step cap of the solvers; keeps the second-order reaction error small
SOLVER_DT_MAX = 0.5


class NumericalFailure(RuntimeError):
    """Non-finite values or a violated step-size bound inside a solve."""


@dataclass(frozen=True)
class PhysicalParams:
    D: float
    k_o: float = 0.0
    k_f: float = 0.0

    def __post_init__(self):
        for name in ("D", "k_o", "k_f"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class ControlSignal:
    """Piecewise-constant controls ``(vx, vy, k)`` on ``times[m] <= t < times[m+1]``."""

    times: np.ndarray
    values: np.ndarray
    lower: np.ndarray = field(default_factory=lambda: np.full(3, -np.inf))
    upper: np.ndarray = field(default_factory=lambda: np.full(3, np.inf))

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.array(self.values, dtype=float).reshape(-1, 3)
        self.lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (3,)).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, dtype=float), (3,)).copy()
        if self.times.ndim != 1 or len(self.times) != len(self.values) + 1:
            raise ValueError("need len(times) == len(values) + 1")
        if self.times[0] != 0.0 or np.any(np.diff(self.times) <= 0):
            raise ValueError("control times must start at 0 and increase strictly")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")
        if not np.isfinite(self.values).all():
            raise ValueError("control values must be finite")

    @classmethod
    def uniform(cls, T, M, value=(0.0, 0.0, 0.0), lower=-np.inf, upper=np.inf):
        values = np.tile(np.asarray(value, dtype=float), (M, 1))
        return cls(np.linspace(0.0, T, M + 1), values, lower, upper)

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def M(self) -> int:
        return len(self.values)

    @property
    def durations(self) -> np.ndarray:
        return np.diff(self.times)

    def with_values(self, values) -> "ControlSignal":
        return replace(self, values=np.array(values, dtype=float).reshape(self.values.shape))

    def interval_of(self, t) -> np.ndarray:
        idx = np.searchsorted(self.times, t, side="right") - 1
        return np.clip(idx, 0, self.M - 1)

    def feasible(self, tol=0.0) -> bool:
        return bool(np.all(self.values >= self.lower - tol) and np.all(self.values <= self.upper + tol))

    def channel_max(self) -> np.ndarray:
        """Largest magnitude each channel can take; uses the bounds when finite."""
        bound = np.maximum(np.abs(self.lower), np.abs(self.upper))
        actual = np.abs(self.values).max(axis=0)
        return np.where(np.isfinite(bound), np.maximum(bound, actual), actual)

    def l2_norm_sq(self) -> float:
        return float(np.sum(self.durations[:, None] * self.values**2))


@dataclass
class DensityTrajectory:
    """Forward solution: full states at ``times`` plus a strided ``y1`` history.

    ``states`` has shape ``(S, ncomp, ny, nx)``.  ``step_times`` is the full
    integration time grid; ``y1_times``/``y1_history`` is ``y1`` recorded every
    ``stride`` steps and at every control-interval boundary.
    """

    grid: Grid
    model: str
    control: ControlSignal
    times: np.ndarray
    states: np.ndarray
    step_times: np.ndarray
    y1_times: np.ndarray
    y1_history: np.ndarray
    clipped: int = 0
    limiter: str = "vanleer"

    @property
    def y1(self):
        return self.states[:, 0]

    @property
    def y2(self):
        return self.states[:, 1]

    @property
    def y3(self):
        return self.states[:, 2]

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def y1_at(self, t) -> np.ndarray:
        """``y1`` linearly interpolated in time from the strided history."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        k = np.clip(np.searchsorted(self.y1_times, t, side="right") - 1, 0, len(self.y1_times) - 2)
        t0, t1 = self.y1_times[k], self.y1_times[k + 1]
        w = ((t - t0) / (t1 - t0))[:, None, None]
        return (1 - w) * self.y1_history[k] + w * self.y1_history[k + 1]


@dataclass
class AdjointTrajectory:
    """Adjoint fields ``(p1, p2, p3)`` at increasing forward times."""

    times: np.ndarray
    p: np.ndarray

    @property
    def p1(self):
        return self.p[:, 0]

    @property
    def p2(self):
        return self.p[:, 1]

    @property
    def p3(self):
        return self.p[:, 2]


# -- spatial operators ------------------------------------------------------

def _van_leer_slope(a, b):
    ab = np.abs(a)
    bb = np.abs(b)
    denom = ab + bb
    denom[denom == 0] = 1.0
    return (a * bb + ab * b) / denom


def _face_values(q, c, limiter="vanleer"):
    """Upwind reconstruction on the ``n+1`` faces along the last axis.

    ``limiter="upwind"`` gives the first-order donor-cell value.  Ghost cells
    copy the edge value, so boundary faces see the adjacent cell value
    (zero-gradient extrapolation).
    """
    n = q.shape[-1]
    lead = q.shape[:-1]
    if c >= 0:
        up = np.concatenate([q[..., :1], q], axis=-1)
    else:
        up = np.concatenate([q, q[..., -1:]], axis=-1)
    if limiter == "upwind" or n == 1:
        return up
    # differences of the ghost-padded array; ghost differences vanish
    dd = np.zeros(lead + (n + 3,))
    dd[..., 2:n + 1] = np.diff(q, axis=-1)
    if c >= 0:
        return up + 0.5 * _van_leer_slope(dd[..., 0:n + 1], dd[..., 1:n + 2])
    return up - 0.5 * _van_leer_slope(dd[..., 2:n + 3], dd[..., 1:n + 2])


def _axis_flux(q, c, D, h, noflux, limiter="vanleer"):
    """Total face flux ``c q_face - D dq/dx`` along the last axis."""
    if c != 0.0:
        flux = c * _face_values(q, c, limiter)
    else:
        flux = np.zeros(q.shape[:-1] + (q.shape[-1] + 1,))
    if D != 0.0:
        flux[..., 1:-1] -= (D / h) * np.diff(q, axis=-1)
    if noflux:
        flux[..., 0] = 0.0
        flux[..., -1] = 0.0
    return flux


def boundary_flux(q, vx, vy, D, grid: Grid, noflux=True) -> float:
    """Net outward flux through the domain boundary (zero for ``noflux``)."""
    fx = _axis_flux(q, vx, D, grid.hx, noflux)
    fy = _axis_flux(q.swapaxes(-1, -2), vy, D, grid.hy, noflux)
    return float((fx[..., -1].sum() - fx[..., 0].sum()) * grid.hy
                 + (fy[..., -1].sum() - fy[..., 0].sum()) * grid.hx)


def transport(q, vx, vy, D, grid: Grid, noflux=True, limiter="vanleer"):
    """``-div(v q - D grad q)`` with either zero total boundary flux
    (``noflux``) or zero-gradient boundary values (Neumann)."""
    fx = _axis_flux(q, vx, D, grid.hx, noflux, limiter)
    fy = _axis_flux(q.swapaxes(-1, -2), vy, D, grid.hy, noflux, limiter).swapaxes(-1, -2)
    return -np.diff(fx, axis=-1) / grid.hx - np.diff(fy, axis=-2) / grid.hy


def adr_rhs(y, u, H, params: PhysicalParams, grid: Grid, model="coverage", limiter="vanleer"):
    """Time derivative of the stacked fields ``y`` (shape ``(ncomp, ny, nx)``).

    ``u = (vx, vy, k)``; ``k`` is ignored by the mapping model, which uses
    ``params.k_o`` instead.
    """
    if model not in MODELS:
        raise ValueError(f"unknown model {model!r}")
    y = np.asarray(y, dtype=float)
    if not np.isfinite(y).all() or not np.isfinite(u).all():
        raise NumericalFailure("non-finite input to adr_rhs")
    vx, vy, k = (float(c) for c in u)
    H = grid.check_field(H, "H")
    return _rhs_factory(grid, H, params, model, limiter)(y, vx, vy, k)


def _rhs_factory(grid, H, params, model, limiter="vanleer"):
    if limiter not in LIMITERS:
        raise ValueError(f"unknown limiter {limiter!r}")
    D, k_o, k_f = params.D, params.k_o, params.k_f

    if model == "mapping":
        kH = k_o * H

        def rhs(y, vx, vy, k):
            return np.stack([transport(y[0], vx, vy, D, grid, True, limiter), kH * y[0]])

    elif model == "coverage":

        def rhs(y, vx, vy, k):
            act = k * H * y[0]
            back = k_f * y[1]
            dy1 = transport(y[0], vx, vy, D, grid, True, limiter) - act + back
            return np.stack([dy1, act - back, act])

    else:

        def rhs(p, vx, vy, k):
            dp1 = transport(p[0], -vx, -vy, D, grid, False, limiter) + k * H * (p[2] + p[1] - p[0])
            return np.stack([dp1, k_f * (p[0] - p[1]), np.zeros_like(p[2])])

    return rhs


# -- step size ----------------------------------------------------------------

def stable_dt(control: ControlSignal, params: PhysicalParams, grid: Grid, dt_max=1.0) -> float:
    """``0.5 * min(h_x/|vx|, h_y/|vy|, h^2/(4D), 1/k, 1/k_f)`` capped at ``dt_max``.

    Channel magnitudes come from the control bounds when finite, so the step is
    the same for every admissible control.  ``h`` in the diffusion term is
    ``min(h_x, h_y)``.
    """
    vx, vy, k = control.channel_max()
    h = min(grid.hx, grid.hy)
    terms = [grid.hx / vx if vx > 0 else math.inf,
             grid.hy / vy if vy > 0 else math.inf,
             h * h / (4 * params.D) if params.D > 0 else math.inf,
             1.0 / k if k > 0 else math.inf,
             1.0 / params.k_f if params.k_f > 0 else math.inf]
    return min(0.5 * min(terms), float(dt_max))


def positivity_dt(control: ControlSignal, params: PhysicalParams, grid: Grid, model="coverage") -> float:
    """Forward-Euler positivity bound of the full 2-D semi-discretisation.

    The limited reconstruction can double the upwind coefficient, hence the
    factor 2 on the advective terms.
    """
    vx, vy, k = control.channel_max()
    rate = 2 * vx / grid.hx + 2 * vy / grid.hy + 2 * params.D * (1 / grid.hx**2 + 1 / grid.hy**2)
    if model == "coverage":
        rate += k
        rate = max(rate, params.k_f)
    return 1.0 / rate if rate > 0 else math.inf


def solver_dt(control, params, grid, dt_max=SOLVER_DT_MAX, model="coverage") -> float:
    return min(stable_dt(control, params, grid, dt_max), positivity_dt(control, params, grid, model))


def _step_grid(breakpoints, dt):
    """All step times, subdividing each breakpoint segment into equal steps <= dt."""
    pieces = [np.array([breakpoints[0]])]
    for a, b in zip(breakpoints[:-1], breakpoints[1:]):
        n = max(1, math.ceil((b - a) / dt * (1 - 1e-12)))
        pieces.append(np.linspace(a, b, n + 1)[1:])
    return np.concatenate(pieces)


def _breakpoints(control, T, extra=()):
    pts = np.concatenate([control.times[control.times < T], [T], np.asarray(extra, dtype=float)])
    pts = np.unique(pts[(pts >= 0) & (pts <= T)])
    keep = np.concatenate([[True], np.diff(pts) > 1e-12 * max(T, 1.0)])
    return pts[keep]


# -- forward solves -------------------------------------------------------------

def _ssprk2_step(rhs, y, dt, u):
    y_star = y + dt * rhs(y, *u)
    return 0.5 * (y + y_star + dt * rhs(y_star, *u))


def _forward(model, H, control, params, grid, y0, T, snapshot_times, dt, dt_max, stride, limiter):
    H = grid.check_field(H, "H")
    y0 = grid.check_field(y0, "y0")
    if np.any(H < 0) or np.any(H > 1):
        raise ValueError("indicator must lie in [0, 1]")
    if T <= 0 or T > control.T * (1 + 1e-12):
        raise ValueError(f"horizon T={T} must lie in (0, {control.T}]")
    if not np.isfinite(y0).all():
        raise NumericalFailure("non-finite initial density")
    if abs(grid.integrate(y0) - 1.0) > 1e-6:
        raise ValueError(f"initial density must integrate to 1, got {grid.integrate(y0)}")
    snap = np.asarray(sorted(set([0.0, T, *np.asarray(snapshot_times if snapshot_times is not None
                                                       else control.times[control.times <= T])])))
    if snap[0] < 0 or snap[-1] > T * (1 + 1e-12):
        raise ValueError("snapshot times must lie in [0, T]")

    bound = positivity_dt(control, params, grid, model)
    if dt is None:
        dt = solver_dt(control, params, grid, dt_max, model)
    elif dt > bound * (1 + 1e-9):
        raise NumericalFailure(f"requested dt={dt} exceeds positivity bound {bound}")
    bps = _breakpoints(control, T, snap)
    times = _step_grid(bps, dt)
    ctrl_idx = control.interval_of(0.5 * (times[:-1] + times[1:]))
    is_boundary = np.isin(times, bps)

    rhs = _rhs_factory(grid, H, params, model, limiter)
    ncomp = 2 if model == "mapping" else 3
    y = np.zeros((ncomp,) + grid.shape)
    y[0] = y0
    snap_steps = set(np.abs(times[None, :] - snap[:, None]).argmin(axis=1).tolist())
    states, state_times = [y.copy()], [0.0]
    hist, hist_t = [y0.copy()], [0.0]
    clipped = 0
    for k in range(len(times) - 1):
        y = _ssprk2_step(rhs, y, times[k + 1] - times[k], control.values[ctrl_idx[k]])
        if not np.isfinite(y).all():
            raise NumericalFailure(f"non-finite state at t={times[k + 1]:.6g} ({model} model)")
        low = y.min()
        if low < -CLIP_TOL:
            log.warning("clipping negative density %.3e at t=%.6g", low, times[k + 1])
            clipped += 1
            np.maximum(y, 0.0, out=y)
        if stride and ((k + 1) % stride == 0 or is_boundary[k + 1]):
            hist.append(y[0].copy())
            hist_t.append(times[k + 1])
        if k + 1 in snap_steps:
            states.append(y.copy())
            state_times.append(times[k + 1])
    return DensityTrajectory(grid, model, control, np.array(state_times), np.array(states),
                             times, np.array(hist_t), np.array(hist), clipped, limiter)


@dataclass
class ObservationSeries:
    """Cumulative observations per agent, ``g(t)``, at increasing times."""

    t: np.ndarray
    g: np.ndarray
    source: str = "macroscopic"
    rate: np.ndarray | None = None

    def at(self, times) -> np.ndarray:
        return np.interp(times, self.t, self.g)

    def rate_at(self, times) -> np.ndarray:
        """Observation rate ``dg/dt``: the stored exact rate when available,
        otherwise second-order differences of the cumulative counts."""
        r = self.rate if self.rate is not None else np.gradient(self.g, self.t)
        return np.interp(times, self.t, r)


def solve_mapping_model(H, v_schedule: ControlSignal, params: PhysicalParams, grid: Grid, y0, T,
                        snapshot_times=None, dt=None, dt_max=SOLVER_DT_MAX, stride=0, limiter="vanleer"):
    """Integrate the mapping model; returns ``(trajectory, ObservationSeries)``.

    ``g(t)`` is the domain integral of the observation density ``y2`` at each
    snapshot time; the series also carries the instantaneous rate
    ``k_o * int H y1``.
    """
    traj = _forward("mapping", H, v_schedule, params, grid, y0, T, snapshot_times, dt, dt_max, stride,
                    limiter)
    rate = params.k_o * grid.integrate(H * traj.y1)
    obs = ObservationSeries(traj.times.copy(), grid.integrate(traj.y2), rate=rate)
    return traj, obs


def solve_coverage_model(H, u: ControlSignal, params: PhysicalParams, grid: Grid, y0, T=None,
                         snapshot_times=None, dt=None, dt_max=SOLVER_DT_MAX, stride=1, limiter="vanleer"):
    """Integrate the coverage model over ``[0, T]`` (default: the control horizon).

    Full states are kept at the snapshot times (default: control-interval
    boundaries); ``y1`` is additionally recorded every ``stride`` steps for
    gradient assembly.
    """
    T = u.T if T is None else T
    return _forward("coverage", H, u, params, grid, y0, T, snapshot_times, dt, dt_max, stride, limiter)


# -- adjoint --------------------------------------------------------------------

def terminal_adjoint(y_T, weights, y_target) -> np.ndarray:
    """``W*(W y(T) - y_target)`` for diagonal component weights."""
    w = np.asarray(weights, dtype=float)[:, None, None]
    return w * (w * np.asarray(y_T) - np.asarray(y_target))


def iter_adjoint(forward: DensityTrajectory, H, params: PhysicalParams, weights, y_target
                 ) -> Iterator[tuple[float, np.ndarray]]:
    """Yield ``(t, p(t))`` backwards from ``t = T`` on the forward step grid.

    The transformed system ``p*(s) = p(T - s)`` is integrated forward in ``s``
    with the time-reversed control.
    """
    if forward.model != "coverage":
        raise ValueError("adjoint requires a coverage-model trajectory")
    grid = forward.grid
    H = grid.check_field(H, "H")
    control = forward.control
    times = forward.step_times
    ctrl_idx = control.interval_of(0.5 * (times[:-1] + times[1:]))
    rhs = _rhs_factory(grid, H, params, "adjoint_transformed", forward.limiter)
    p = terminal_adjoint(forward.final, weights, y_target)
    if p.shape != (3,) + grid.shape:
        raise ValueError("target/weights do not match the forward state")
    yield float(times[-1]), p
    for k in range(len(times) - 2, -1, -1):
        p = _ssprk2_step(rhs, p, times[k + 1] - times[k], control.values[ctrl_idx[k]])
        if not np.isfinite(p).all():
            raise NumericalFailure(f"non-finite adjoint at t={times[k]:.6g}")
        yield float(times[k]), p


def solve_adjoint(forward: DensityTrajectory, u: ControlSignal, H, params: PhysicalParams,
                  weights, y_target, record_times=None) -> AdjointTrajectory:
    """Adjoint fields at ``record_times`` (default: the forward snapshot times)."""
    if u.values.shape != forward.control.values.shape or not (
            np.array_equal(u.values, forward.control.values) and np.array_equal(u.times, forward.control.times)):
        raise ValueError("control differs from the one used in the forward solve")
    want = forward.times if record_times is None else np.asarray(record_times, dtype=float)
    tol = 1e-9 * max(forward.step_times[-1], 1.0)
    out = {}
    for t, p in iter_adjoint(forward, H, params, weights, y_target):
        hit = np.abs(want - t) <= tol
        if hit.any():
            out[float(want[hit][0])] = p.copy()
    missing = [t for t in want if float(t) not in out]
    if missing:
        raise ValueError(f"record times {missing[:3]} are not on the forward step grid")
    ts = np.sort(np.asarray(list(out)))
    return AdjointTrajectory(ts, np.array([out[t] for t in ts]))
