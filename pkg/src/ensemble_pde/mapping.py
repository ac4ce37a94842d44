"""Reconstruction of the region-of-interest indicator from observation counts.

The forward map sends a candidate indicator ``H`` to the expected observation
rate ``(K H)(t_j) = k_o * int H y1(t_j)``; data are the time derivative of the
cumulative count ``g``.  The estimate minimises
``1/2 ||K H - g||^2 + lam/2 ||H||^2`` over ``0 <= H <= 1`` by projected
gradient descent.  Time norms use trapezoid weights on the sample times and
space norms the midpoint rule, so ``K`` and its adjoint pair exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .grid import Grid
from .macroscopic import NumericalFailure, ObservationSeries

log = logging.getLogger(__name__)


def trapezoid_weights(t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    w = np.zeros_like(t)
    dt = np.diff(t)
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt
    return w


@dataclass
class SnapshotBasis:
    """``y1`` fields at sample times, with trapezoid weights for time integrals."""

    grid: Grid
    times: np.ndarray
    y1: np.ndarray
    weights: np.ndarray = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.y1 = np.asarray(self.y1, dtype=float)
        if len(self.times) < 2 or np.any(np.diff(self.times) <= 0):
            raise ValueError("need at least two strictly increasing sample times")
        if self.y1.shape != (len(self.times),) + self.grid.shape:
            raise ValueError("y1 snapshots do not match times/grid")
        if self.weights is None:
            self.weights = trapezoid_weights(self.times)
        if np.any(self.weights <= 0):
            raise ValueError("quadrature weights must be positive")

    @classmethod
    def from_trajectory(cls, traj):
        return cls(traj.grid, traj.times, traj.y1)

    @property
    def S(self) -> int:
        return len(self.times)


def _check(H, basis: SnapshotBasis):
    H = np.asarray(H, dtype=float)
    if H.shape != basis.grid.shape:
        raise ValueError(f"field shape {H.shape} does not match the snapshot grid {basis.grid.shape}")
    return H


def apply_K(H, basis: SnapshotBasis, k_o: float) -> np.ndarray:
    """``k_o * sum_cells H y1(t_j) * area`` for every sample ``j``."""
    H = _check(H, basis)
    return k_o * basis.grid.cell_area * np.tensordot(basis.y1, H, axes=([1, 2], [0, 1]))


def apply_K_adjoint(G, basis: SnapshotBasis, k_o: float) -> np.ndarray:
    """``k_o * sum_j w_j G_j y1(t_j)`` as a field."""
    G = np.asarray(G, dtype=float)
    if G.shape != (basis.S,):
        raise ValueError(f"expected {basis.S} time samples, got shape {G.shape}")
    return k_o * np.tensordot(basis.weights * G, basis.y1, axes=(0, 0))


def time_inner(a, b, basis: SnapshotBasis) -> float:
    return float(np.sum(basis.weights * a * b))


@dataclass
class MappingProblem:
    basis: SnapshotBasis
    g: np.ndarray
    k_o: float
    lam: float | None = None
    source: str = "macroscopic"

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=float)
        if self.g.shape != (self.basis.S,):
            raise ValueError("observation samples must match the snapshot times")
        if not np.isfinite(self.g).all():
            raise ValueError("observation data must be finite")
        if self.lam is None:
            self.lam = default_lambda(self.basis, self.g, self.k_o)
        if not self.lam > 0:
            raise ValueError("regularisation weight must be positive")

    @classmethod
    def from_series(cls, basis: SnapshotBasis, series: ObservationSeries, k_o, lam=None):
        """Fit to the observation rate ``dg/dt``, which is what ``K`` predicts."""
        return cls(basis, series.rate_at(basis.times), k_o, lam, series.source)


def operator_norm_sq(basis: SnapshotBasis, k_o, iters=10, seed=0) -> float:
    """Largest eigenvalue of ``K* K`` (field inner product) by power iteration."""
    grid = basis.grid
    x = np.random.default_rng(seed).random(grid.shape) + 0.5
    lam_max = 0.0
    for _ in range(iters):
        x = x / np.sqrt(grid.inner(x, x))
        y = apply_K_adjoint(apply_K(x, basis, k_o), basis, k_o)
        lam_max = grid.inner(x, y)
        x = y
    return float(lam_max)


def default_lambda(basis: SnapshotBasis, g, k_o) -> float:
    """``1e-3 * ||g||^2 / ||K||^2``, falling back to ``1e-8`` for empty data."""
    knorm = operator_norm_sq(basis, k_o)
    gnorm = time_inner(g, g, basis)
    if knorm <= 0 or gnorm <= 0:
        return 1e-8
    return 1e-3 * gnorm / knorm


def objective_and_gradient(H, problem: MappingProblem):
    """``(J_lam, grad J_lam)`` with ``grad = K*(K H - g) + lam H``."""
    b = problem.basis
    H = _check(H, b)
    r = apply_K(H, b, problem.k_o) - problem.g
    J = 0.5 * time_inner(r, r, b) + 0.5 * problem.lam * b.grid.inner(H, H)
    grad = apply_K_adjoint(r, b, problem.k_o) + problem.lam * H
    return J, grad


def objective(H, problem: MappingProblem) -> float:
    b = problem.basis
    r = apply_K(H, b, problem.k_o) - problem.g
    return 0.5 * time_inner(r, r, b) + 0.5 * problem.lam * b.grid.inner(H, H)


def project_box(H) -> np.ndarray:
    return np.clip(H, 0.0, 1.0)


def threshold(H, level: float = 0.5) -> np.ndarray:
    """Binary map: 1 where ``H >= level`` (the boundary value maps to 1)."""
    return (np.asarray(H) >= level).astype(float)


@dataclass
class MappingResult:
    H_hat: np.ndarray
    H_thresh: np.ndarray
    history: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    lam: float = 0.0
    source: str = "macroscopic"


def solve_inverse(problem: MappingProblem, H0=None, max_iters=5000, tol=1e-12, c=1e-4,
                  backtrack=0.5, power_iters=10) -> MappingResult:
    """Projected gradient descent with Armijo backtracking.

    The first trial step is the reciprocal of a power-iteration estimate of the
    largest eigenvalue of ``K*K + lam I``.  Later trial steps are the
    Barzilai-Borwein ratio ``<s, s> / <s, r>`` of the last accepted move ``s``
    and gradient change ``r``; backtracking keeps every accepted step monotone.
    Stops when the relative objective decrease drops below ``tol``, when the
    projected step vanishes, or after ``max_iters`` iterations.
    """
    grid = problem.basis.grid
    H = project_box(np.zeros(grid.shape) if H0 is None else grid.check_field(H0, "H0"))
    L = operator_norm_sq(problem.basis, problem.k_o, power_iters) + problem.lam
    alpha = 1.0 / L
    J, grad = objective_and_gradient(H, problem)
    history = [J]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        while True:
            H_new = project_box(H - alpha * grad)
            step = H_new - H
            J_new = objective(H_new, problem)
            if not np.isfinite(J_new):
                raise NumericalFailure(f"non-finite objective at iteration {it}")
            if J_new <= J + c * grid.inner(grad, step) or not np.any(step):
                break
            alpha *= backtrack
            if alpha < 1e-30 / L:
                break
        if not np.any(step) or J_new > J:
            converged = True
            break
        rel = (J - J_new) / max(abs(J), 1e-300)
        J, grad_new = objective_and_gradient(H_new, problem)
        curv = grid.inner(step, grad_new - grad)
        alpha = grid.inner(step, step) / curv if curv > 0 else 2.0 * alpha
        H, grad = H_new, grad_new
        history.append(J)
        if rel < tol:
            converged = True
            break
    log.info("inverse solve: %d iterations, J=%.6e", it, J)
    return MappingResult(H, threshold(H), history, it, converged, problem.lam, problem.source)


def misclassified_area(H_est, H_true, grid: Grid) -> float:
    return grid.integrate(np.abs(threshold(H_est) - threshold(H_true)))


def write_history_csv(path, history):
    from pathlib import Path
    lines = ["iter,J"] + [f"{i},{J!r}" for i, J in enumerate(history)]
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)
