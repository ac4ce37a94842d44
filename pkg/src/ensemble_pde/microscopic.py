"""Agent-level simulation: Langevin motion, rate-driven state switching and
specular reflection at the domain walls.

Every agent draws from its own counter-based stream (Philox keyed by
``(seed, agent_id)``), so results do not depend on agent ordering, chunking or
the number of worker threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import Grid
from .macroscopic import ControlSignal, ObservationSeries, PhysicalParams, stable_dt

OBSERVATION, ACTIVITY_START, ACTIVITY_END = 0, 1, 2
EVENT_KINDS = ("observation", "activity_start", "activity_end")
MAX_PROBABILITY = 0.1
CHUNK = 256
BLOCK = 2048


def langevin_step(x, v, D, dt, z):
    """Unreflected displacement ``x + v dt + sqrt(2 D dt) z``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return np.asarray(x, dtype=float) + np.asarray(v, dtype=float) * dt + math.sqrt(2.0 * D * dt) * np.asarray(z)


def _fold(x, lo, hi):
    x = np.array(x, dtype=float, copy=True)
    for _ in range(64):
        below, above = x < lo, x > hi
        if not (below.any() or above.any()):
            return x
        x = np.where(below, 2 * lo - x, x)
        x = np.where(above, 2 * hi - x, x)
    # only reachable for displacements many domain widths long
    width = hi - lo
    r = np.mod(x - lo, 2 * width)
    return lo + np.where(r > width, 2 * width - r, r)


def specular_reflect(pos, extent):
    """Mirror positions back into ``[x_lo, x_hi] x [y_lo, y_hi]``, axis by axis."""
    pos = np.asarray(pos, dtype=float)
    x_lo, x_hi, y_lo, y_hi = extent
    return np.stack([_fold(pos[..., 0], x_lo, x_hi), _fold(pos[..., 1], y_lo, y_hi)], axis=-1)


def switch_probability(rate, dt, exact=False):
    p = 1.0 - np.exp(-rate * dt) if exact else rate * dt
    if np.any(p > 1.0):
        raise ValueError(f"switching probability {np.max(p)} exceeds 1")
    return p


def transition_step(moving, k_t, k_f, H_at_x, dt, u, exact=False):
    """One switching step for arrays of agents.

    ``moving`` is boolean; a moving agent on ``H == 1`` stops with probability
    ``H k_t dt`` and a stationary one resumes with probability ``k_f dt``.
    Returns ``(new_moving, stopped, resumed)``.
    """
    moving = np.asarray(moving, dtype=bool)
    p_stop = switch_probability(np.asarray(H_at_x) * k_t, dt, exact)
    p_go = switch_probability(k_f, dt, exact)
    stopped = moving & (u < p_stop)
    resumed = ~moving & (u < p_go)
    return (moving & ~stopped) | resumed, stopped, resumed


def observation_step(moving, k_o, H_at_x, dt, u, exact=False):
    """Mapping-mode observation draw; the agent's state never changes."""
    return np.asarray(moving, dtype=bool) & (u < switch_probability(np.asarray(H_at_x) * k_o, dt, exact))


@dataclass
class SimConfig:
    grid: Grid
    N: int
    T: float
    mode: str
    params: PhysicalParams
    control: ControlSignal
    H: np.ndarray
    seed: int = 0
    dt: float | None = None
    start_center: tuple = (10.0, 10.0)
    start_sigma: float = 0.02
    y0: np.ndarray | None = None
    snapshot_times: tuple = ()
    trajectory_stride: int = 0
    exact_rates: bool = False

    def __post_init__(self):
        if self.mode not in ("mapping", "coverage"):
            raise ValueError(f"mode must be 'mapping' or 'coverage', got {self.mode!r}")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError("N must be a positive integer")
        self.N = int(self.N)
        if not self.T > 0 or self.T > self.control.T * (1 + 1e-12):
            raise ValueError("T must lie in (0, control horizon]")
        self.H = self.grid.check_field(self.H, "H")
        if self.y0 is not None:
            self.y0 = self.grid.check_field(self.y0, "y0")
        if self.dt is None:
            rate = max(self._max_rate(), 1e-300)
            self.dt = min(stable_dt(self.control, self.params, self.grid), MAX_PROBABILITY / rate)
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.exact_rates and self.dt * self._max_rate() > MAX_PROBABILITY * (1 + 1e-12):
            raise ValueError(f"dt*rate = {self.dt * self._max_rate():.3g} exceeds {MAX_PROBABILITY}")

    def _max_rate(self) -> float:
        if self.mode == "mapping":
            return self.params.k_o
        return max(float(np.abs(self.control.values[:, 2]).max()), self.params.k_f)

    @property
    def n_steps(self) -> int:
        return max(1, int(round(self.T / self.dt)))


@dataclass
class SimResult:
    """Merged event log (sorted by agent then time) and per-agent end states."""

    config: SimConfig
    agent_id: np.ndarray
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    kind: np.ndarray
    final_positions: np.ndarray
    final_moving: np.ndarray
    snapshot_times: np.ndarray
    snapshot_positions: np.ndarray
    snapshot_moving: np.ndarray
    trajectory: np.ndarray | None = field(default=None, repr=False)

    def g_hat(self, times=None) -> ObservationSeries:
        """Cumulative per-agent count of observations (mapping) or activity
        starts (coverage) up to each time."""
        kind = OBSERVATION if self.config.mode == "mapping" else ACTIVITY_START
        ev = np.sort(self.t[self.kind == kind])
        if times is None:
            times = np.linspace(0.0, self.config.T, self.config.n_steps + 1)
        times = np.asarray(times, dtype=float)
        counts = np.searchsorted(ev, times, side="right")
        return ObservationSeries(times, counts / self.config.N, source="microscopic")

    def events_of(self, kind: int):
        sel = self.kind == kind
        return self.t[sel], self.x[sel], self.y[sel]


def _agent_stream(seed: int, agent: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed, agent], dtype=np.uint64)))


def _initial_positions(cfg: SimConfig, streams):
    g = cfg.grid
    if cfg.y0 is not None:
        cdf = np.cumsum(cfg.y0.ravel())
        cdf /= cdf[-1]
    out = np.empty((len(streams), 2))
    for a, rng in enumerate(streams):
        if cfg.y0 is None:
            out[a] = np.asarray(cfg.start_center) + cfg.start_sigma * rng.standard_normal(2)
        else:
            r = rng.random(3)
            c = min(int(np.searchsorted(cdf, r[0], side="right")), cdf.size - 1)
            j, i = divmod(c, g.nx)
            out[a] = (g.x_lo + (i + r[1]) * g.hx, g.y_lo + (j + r[2]) * g.hy)
    return specular_reflect(out, g.extent)


def _run_chunk(cfg: SimConfig, agents: np.ndarray):
    g = cfg.grid
    n = len(agents)
    streams = [_agent_stream(cfg.seed, int(a)) for a in agents]
    pos = _initial_positions(cfg, streams)
    moving = np.ones(n, dtype=bool)
    dt, D = cfg.dt, cfg.params.D
    noise = math.sqrt(2.0 * D * dt)
    steps = cfg.n_steps
    snap_steps = {int(round(t / dt)): t for t in cfg.snapshot_times}
    snaps = {}
    if 0 in snap_steps:
        snaps[0] = (pos.copy(), moving.copy())
    traj = [pos.copy()] if cfg.trajectory_stride else None
    ev = []
    k = 0
    while k < steps:
        B = min(BLOCK, steps - k)
        z = np.stack([s.standard_normal((B, 2)) for s in streams], axis=1)
        uu = np.stack([s.random(B) for s in streams], axis=1)
        for b in range(B):
            t = k * dt
            m = cfg.control.interval_of(t)
            vx, vy, kt = cfg.control.values[m]
            H_at = g.sample(cfg.H, pos[:, 0], pos[:, 1])
            t_next = (k + 1) * dt
            if cfg.mode == "mapping":
                hit = observation_step(moving, cfg.params.k_o, H_at, dt, uu[b], cfg.exact_rates)
                if hit.any():
                    ev.append((agents[hit], np.full(hit.sum(), t_next), pos[hit, 0], pos[hit, 1],
                               np.full(hit.sum(), OBSERVATION)))
                new_moving = moving
            else:
                new_moving, stopped, resumed = transition_step(moving, kt, cfg.params.k_f, H_at, dt,
                                                               uu[b], cfg.exact_rates)
                for mask, code in ((stopped, ACTIVITY_START), (resumed, ACTIVITY_END)):
                    if mask.any():
                        ev.append((agents[mask], np.full(mask.sum(), t_next), pos[mask, 0], pos[mask, 1],
                                   np.full(mask.sum(), code)))
            step = np.where(moving[:, None], np.array([vx, vy]) * dt + noise * z[b], 0.0)
            pos = specular_reflect(pos + step, g.extent)
            moving = new_moving
            k += 1
            if k in snap_steps:
                snaps[k] = (pos.copy(), moving.copy())
            if traj is not None and k % cfg.trajectory_stride == 0:
                traj.append(pos.copy())
    return pos, moving, ev, snaps, traj


def simulate_ensemble(cfg: SimConfig, threads: int = 1) -> SimResult:
    """Run all ``N`` agents; deterministic for a fixed config and seed."""
    chunks = [np.arange(a, min(a + CHUNK, cfg.N)) for a in range(0, cfg.N, CHUNK)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: _run_chunk(cfg, c), chunks))
    else:
        parts = [_run_chunk(cfg, c) for c in chunks]

    fields = [[], [], [], [], []]
    for _, _, ev, _, _ in parts:
        for rec in ev:
            for f, arr in zip(fields, rec):
                f.append(arr)
    if fields[0]:
        aid, t, x, y, kind = (np.concatenate(f) for f in fields)
    else:
        aid, t, x, y, kind = (np.zeros(0, dtype=int), np.zeros(0), np.zeros(0), np.zeros(0),
                              np.zeros(0, dtype=int))
    order = np.lexsort((t, aid))
    snap_keys = sorted(parts[0][3])
    snap_pos = np.array([np.concatenate([p[3][s][0] for p in parts]) for s in snap_keys]).reshape(-1, cfg.N, 2)
    snap_mov = np.array([np.concatenate([p[3][s][1] for p in parts]) for s in snap_keys]).reshape(-1, cfg.N)
    traj = None
    if cfg.trajectory_stride:
        traj = np.concatenate([np.array(p[4]) for p in parts], axis=1)
    return SimResult(cfg, aid[order].astype(int), t[order], x[order], y[order], kind[order].astype(int),
                     np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]),
                     np.array([k * cfg.dt for k in snap_keys]), snap_pos, snap_mov, traj)


def empirical_density(points, grid: Grid, N: int) -> np.ndarray:
    """Histogram of points per cell divided by ``N`` times the cell area."""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    xe = grid.x_lo + np.arange(grid.nx + 1) * grid.hx
    ye = grid.y_lo + np.arange(grid.ny + 1) * grid.hy
    counts, _, _ = np.histogram2d(points[:, 1], points[:, 0], bins=[ye, xe])
    return counts / (N * grid.cell_area)


# -- CSV output -------------------------------------------------------------------

def write_event_log(path, res: SimResult) -> Path:
    path = Path(path)
    lines = ["agent_id,t,x,y,kind"]
    lines += [f"{a},{t!r},{x!r},{y!r},{EVENT_KINDS[k]}"
              for a, t, x, y, k in zip(res.agent_id.tolist(), res.t.tolist(), res.x.tolist(),
                                       res.y.tolist(), res.kind.tolist())]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_event_log(path):
    rows = Path(path).read_text().strip().splitlines()[1:]
    out = {"agent_id": [], "t": [], "x": [], "y": [], "kind": []}
    for r in rows:
        a, t, x, y, k = r.split(",")
        out["agent_id"].append(int(a))
        out["t"].append(float(t))
        out["x"].append(float(x))
        out["y"].append(float(y))
        out["kind"].append(k)
    return {k: np.array(v) for k, v in out.items()}


def write_g_hat(path, series: ObservationSeries) -> Path:
    path = Path(path)
    lines = ["t,g_hat"] + [f"{t!r},{g!r}" for t, g in zip(series.t.tolist(), series.g.tolist())]
    path.write_text("\n".join(lines) + "\n")
    return path


def write_trajectories(path, res: SimResult) -> Path:
    if res.trajectory is None:
        raise ValueError("simulation was run without trajectory recording")
    stride = res.config.trajectory_stride
    lines = ["agent_id,t,x,y"]
    for a in range(res.config.N):
        for s, p in enumerate(res.trajectory[:, a]):
            lines.append(f"{a},{s * stride * res.config.dt!r},{p[0]!r},{p[1]!r}")
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)
