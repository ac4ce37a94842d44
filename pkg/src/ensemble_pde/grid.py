"""Uniform rectangular mesh, cell-centred fields and quadrature.

Fields are plain ``numpy`` arrays of shape ``(ny, nx)``; row ``j`` holds the
cells at height ``y_lo + (j + 1/2) h_y`` so that a C-order flatten gives the
row-major, x-fastest ordering used for file I/O.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import erf


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centred mesh over ``[x_lo, x_hi] x [y_lo, y_hi]``."""

    x_lo: float
    x_hi: float
    y_lo: float
    y_hi: float
    nx: int
    ny: int

    def __post_init__(self):
        if int(self.nx) != self.nx or int(self.ny) != self.ny:
            raise ValueError("cell counts must be integers")
        if self.nx < 1 or self.ny < 1:
            raise ValueError(f"cell counts must be >= 1, got nx={self.nx}, ny={self.ny}")
        if not (np.isfinite([self.x_lo, self.x_hi, self.y_lo, self.y_hi]).all()):
            raise ValueError("extent must be finite")
        if not (self.x_hi > self.x_lo and self.y_hi > self.y_lo):
            raise ValueError("degenerate extent")
        object.__setattr__(self, "nx", int(self.nx))
        object.__setattr__(self, "ny", int(self.ny))

    @property
    def extent(self) -> tuple[float, float, float, float]:
        return (self.x_lo, self.x_hi, self.y_lo, self.y_hi)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def hx(self) -> float:
        return (self.x_hi - self.x_lo) / self.nx

    @property
    def hy(self) -> float:
        return (self.y_hi - self.y_lo) / self.ny

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    @property
    def area(self) -> float:
        return (self.x_hi - self.x_lo) * (self.y_hi - self.y_lo)

    @property
    def xc(self) -> np.ndarray:
        return self.x_lo + (np.arange(self.nx) + 0.5) * self.hx

    @property
    def yc(self) -> np.ndarray:
        return self.y_lo + (np.arange(self.ny) + 0.5) * self.hy

    def meshgrid(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell-centre coordinates ``(X, Y)``, each of shape ``(ny, nx)``."""
        return np.meshgrid(self.xc, self.yc)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape)

    def check_field(self, f, name="field") -> np.ndarray:
        f = np.asarray(f, dtype=float)
        if f.shape != self.shape:
            raise ValueError(f"{name} has shape {f.shape}, grid expects {self.shape}")
        return f

    def integrate(self, f) -> float:
        """Midpoint-rule integral of a cell-centred field over the domain."""
        s = np.sum(f, axis=(-2, -1)) * self.cell_area
        return float(s) if np.ndim(s) == 0 else s

    def inner(self, f, g) -> float:
        return self.integrate(np.asarray(f) * np.asarray(g))

    def cell_index(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """Indices ``(j, i)`` of the cells containing the points; points on the
        closed boundary are assigned to the adjacent cell."""
        i = np.floor((np.asarray(x) - self.x_lo) / self.hx).astype(int)
        j = np.floor((np.asarray(y) - self.y_lo) / self.hy).astype(int)
        return np.clip(j, 0, self.ny - 1), np.clip(i, 0, self.nx - 1)

    def sample(self, f, x, y) -> np.ndarray:
        """Piecewise-constant lookup of a field at arbitrary points."""
        j, i = self.cell_index(x, y)
        return np.asarray(f)[j, i]


def build_grid(extent, nx: int, ny: int) -> Grid:
    """Build a :class:`Grid` from ``extent = (x_lo, x_hi, y_lo, y_hi)``."""
    x_lo, x_hi, y_lo, y_hi = (float(v) for v in extent)
    return Grid(x_lo, x_hi, y_lo, y_hi, nx, ny)


def integrate_field(grid: Grid, f) -> float:
    return grid.integrate(grid.check_field(f))


def gaussian_density(grid: Grid, center, sigma) -> np.ndarray:
    """Cell-averaged Gaussian normalised to unit mass on the grid.

    Cell averages are taken with the error function so arbitrarily narrow
    Gaussians (narrower than a cell) still produce a valid density.
    """
    cx, cy = center
    sx, sy = np.broadcast_to(np.asarray(sigma, dtype=float), (2,))
    xe = grid.x_lo + np.arange(grid.nx + 1) * grid.hx
    ye = grid.y_lo + np.arange(grid.ny + 1) * grid.hy
    px = np.diff(0.5 * erf((xe - cx) / (np.sqrt(2.0) * sx)))
    py = np.diff(0.5 * erf((ye - cy) / (np.sqrt(2.0) * sy)))
    mass = np.outer(py, px)
    total = mass.sum()
    if not total > 0:
        raise ValueError("Gaussian has no mass inside the domain")
    return mass / total / grid.cell_area


def uniform_density(grid: Grid) -> np.ndarray:
    return np.full(grid.shape, 1.0 / grid.area)


def disk_indicator(grid: Grid, center, radius) -> np.ndarray:
    X, Y = grid.meshgrid()
    return ((X - center[0]) ** 2 + (Y - center[1]) ** 2 <= radius**2).astype(float)


def box_indicator(grid: Grid, x_range, y_range) -> np.ndarray:
    X, Y = grid.meshgrid()
    inside = (X >= x_range[0]) & (X <= x_range[1]) & (Y >= y_range[0]) & (Y <= y_range[1])
    return inside.astype(float)


@dataclass(frozen=True)
class CellPartition:
    """Coarse ``P x P`` partition of the domain with per-cell activity targets.

    ``targets[n, m]`` is the target count for the partition cell in row ``n``
    (y direction) and column ``m`` (x direction).
    """

    P: int
    targets: np.ndarray
    coverage_fraction: np.ndarray


def partition_targets(H_T, P: int, C: float, grid: Grid, mask=None, level=None):
    """Per-partition-cell activity targets and the target activity field.

    The partition cell target is ``C`` times the fraction of its grid cells
    flagged in ``H_T``.  The target field equals ``level`` (default ``C / 50``)
    where ``H_T`` is set and, if given, ``mask`` is true; zero elsewhere.

    Returns
    -------
    (CellPartition, ndarray)
    """
    H_T = grid.check_field(H_T, "H_T")
    if P < 1 or grid.nx % P or grid.ny % P:
        raise ValueError(f"P={P} must divide nx={grid.nx} and ny={grid.ny}")
    if not C > 0:
        raise ValueError("C must be positive")
    bx, by = grid.nx // P, grid.ny // P
    frac = H_T.reshape(P, by, P, bx).mean(axis=(1, 3))
    part = CellPartition(P=P, targets=C * frac, coverage_fraction=frac)
    level = C / 50.0 if level is None else float(level)
    keep = H_T >= 0.5
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool)
    return part, np.where(keep, level, 0.0)


# -- CSV I/O -----------------------------------------------------------------

def write_field_csv(path, grid: Grid, values) -> Path:
    """Header ``nx,ny,x_lo,x_hi,y_lo,y_hi`` then ``ny`` rows, bottom row first."""
    values = grid.check_field(values)
    if not np.isfinite(values).all():
        raise ValueError("field contains non-finite values")
    path = Path(path)
    lines = [f"{grid.nx},{grid.ny},{grid.x_lo!r},{grid.x_hi!r},{grid.y_lo!r},{grid.y_hi!r}"]
    lines += [",".join(repr(float(v)) for v in row) for row in values]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_field_csv(path) -> tuple[Grid, np.ndarray]:
    rows = Path(path).read_text().strip().splitlines()
    head = rows[0].split(",")
    nx, ny = int(head[0]), int(head[1])
    grid = Grid(*(float(v) for v in head[2:6]), nx, ny)
    values = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
    return grid, grid.check_field(values)
