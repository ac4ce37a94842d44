"""Scenario configuration, the lawnmower sweep and the end-to-end pipeline.

A scenario is a sectioned ``key = value`` text file.  Every key in
:data:`SCHEMA` must be present exactly once; unknown keys are rejected with
their line number.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import logging
import platform
import re
from dataclasses import dataclass
from datetime import datetime
from importlib import resources
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .coverage import CoverageProblem, objective_vs_time, optimize_coverage
from .grid import (Grid, box_indicator, build_grid, disk_indicator, gaussian_density,
                   partition_targets, write_field_csv)
from .macroscopic import ControlSignal, ObservationSeries, PhysicalParams, solve_mapping_model
from .mapping import MappingProblem, SnapshotBasis, solve_inverse, write_history_csv
from .microscopic import (SimConfig, empirical_density, simulate_ensemble, write_event_log,
                          write_g_hat, write_trajectories)

log = logging.getLogger(__name__)

BUNDLED = ("case1a", "case1b", "case2a", "case2b", "case3", "desk")


class ConfigError(ValueError):
    pass


# -- lawnmower ----------------------------------------------------------------

@dataclass(frozen=True)
class VelocitySchedule:
    """Constant-velocity segments ``(duration, vx, vy)`` starting from ``start``."""

    durations: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    start: tuple

    def __post_init__(self):
        if np.any(np.asarray(self.durations) <= 0):
            raise ValueError("segment durations must be positive")

    @property
    def T(self) -> float:
        return float(np.sum(self.durations))

    @property
    def speed(self) -> float:
        return float(np.hypot(self.vx, self.vy).max())

    def endpoint(self) -> np.ndarray:
        d = np.asarray(self.durations)
        return np.asarray(self.start, dtype=float) + np.array([d @ self.vx, d @ self.vy])

    def to_control(self) -> ControlSignal:
        """Control signal with the rate channel frozen at zero."""
        times = np.concatenate([[0.0], np.cumsum(self.durations)])
        values = np.column_stack([self.vx, self.vy, np.zeros(len(self.vx))])
        s = self.speed
        return ControlSignal(times, values, lower=(-s, -s, 0.0), upper=(s, s, 0.0))


def lawnmower_length(extent, lanes: int) -> float:
    x_lo, x_hi, y_lo, y_hi = extent
    return lanes * (x_hi - x_lo) + (lanes - 1) * (y_hi - y_lo) / lanes


def make_lawnmower(extent, lanes: int, speed: float, T: float, start=None) -> VelocitySchedule:
    """Boustrophedon sweep: full-width horizontal passes joined by vertical hops
    of ``height / lanes``, run at the constant speed that ends the path at ``T``."""
    if lanes < 1 or int(lanes) != lanes:
        raise ValueError("lanes must be a positive integer")
    if not speed > 0 or not T > 0:
        raise ValueError("speed and T must be positive")
    x_lo, x_hi, y_lo, y_hi = extent
    L = lawnmower_length(extent, lanes)
    if speed * T < L * (1 - 1e-12):
        raise ValueError(f"path of {L:g} m cannot be covered in T={T:g} s at {speed:g} m/s; "
                         f"need speed >= {L / T:.6g} m/s")
    s = L / T
    width, hop = x_hi - x_lo, (y_hi - y_lo) / lanes
    dur, vx, vy = [], [], []
    for i in range(lanes):
        dur.append(width / s)
        vx.append(s if i % 2 == 0 else -s)
        vy.append(0.0)
        if i < lanes - 1:
            dur.append(hop / s)
            vx.append(0.0)
            vy.append(s)
    start = (x_lo, y_lo) if start is None else tuple(float(v) for v in start)
    return VelocitySchedule(np.array(dur), np.array(vx), np.array(vy), start)


# -- configuration ------------------------------------------------------------

# section -> key -> type; "auto" is accepted wherever the type is "float|auto"
SCHEMA = {
    "domain": {"x_lo": "float", "x_hi": "float", "y_lo": "float", "y_hi": "float",
               "region": "region"},
    "grid": {"nx": "int", "ny": "int"},
    "physics": {"D": "float", "k_o": "float", "k_f": "float"},
    "mapping": {"enabled": "bool", "source": "choice:macroscopic,microscopic", "D": "float",
                "lambda": "float|auto", "max_iters": "int", "lanes": "int", "speed": "float",
                "T": "float", "snapshots": "int", "start_x": "float", "start_y": "float",
                "sigma": "float", "N": "int"},
    "coverage": {"enabled": "bool", "T": "float", "M": "int", "lambda": "float", "C": "float",
                 "P": "int", "vmax": "float", "kmax": "float", "max_iters": "int",
                 "mask_y_min": "float|none", "start_x": "float", "start_y": "float", "sigma": "float"},
    "micro": {"enabled": "bool", "N": "int", "dt": "float|auto", "seed": "int",
              "exact_rates": "bool"},
    "output": {"dir": "str", "dump_trajectories": "int"},
}


def _parse_region(text: str):
    """``disk cx cy r`` or ``box x0 x1 y0 y1`` shapes joined by ``;``."""
    shapes = []
    for part in text.split(";"):
        tok = part.split()
        if not tok:
            continue
        kind, nums = tok[0], tok[1:]
        try:
            vals = tuple(float(v) for v in nums)
        except ValueError:
            raise ConfigError(f"bad number in region shape {part.strip()!r}") from None
        if kind == "disk" and len(vals) == 3 and vals[2] > 0:
            shapes.append(("disk",) + vals)
        elif kind == "box" and len(vals) == 4 and vals[0] < vals[1] and vals[2] < vals[3]:
            shapes.append(("box",) + vals)
        else:
            raise ConfigError(f"unrecognised region shape {part.strip()!r}")
    if not shapes:
        raise ConfigError("region must contain at least one shape")
    return tuple(shapes)


def _render_region(shapes) -> str:
    return "; ".join(" ".join([s[0]] + [repr(v) for v in s[1:]]) for s in shapes)


def _convert(kind: str, raw: str, where: str):
    raw = raw.strip()
    try:
        if kind == "float":
            return float(raw)
        if kind == "int":
            return int(raw)
        if kind == "str":
            return raw
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if kind == "region":
            return _parse_region(raw)
        if kind.startswith("choice:"):
            options = kind.split(":", 1)[1].split(",")
            if raw not in options:
                raise ValueError(f"expected one of {options}")
            return raw
        if kind == "float|auto":
            return None if raw.lower() == "auto" else float(raw)
        if kind == "float|none":
            return None if raw.lower() == "none" else float(raw)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot read {raw!r} as {kind} ({exc})") from None
    raise AssertionError(kind)


def _render_value(kind: str, value) -> str:
    if kind == "region":
        return _render_region(value)
    if kind == "bool":
        return "true" if value else "false"
    if value is None:
        return "auto" if kind == "float|auto" else "none"
    return repr(value) if isinstance(value, float) else str(value)


def _line_of(lines, section: str, key: str):
    current = None
    for n, line in enumerate(lines, 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
        elif current == section and re.match(rf"\s*{re.escape(key)}\s*[=:]", line, re.IGNORECASE):
            return n
    return None


@dataclass(frozen=True)
class ScenarioConfig:
    """Parsed scenario: ``values[section][key]``, typed per :data:`SCHEMA`."""

    values: dict

    def __getitem__(self, section):
        return self.values[section]

    @property
    def grid(self) -> Grid:
        d, g = self["domain"], self["grid"]
        return build_grid((d["x_lo"], d["x_hi"], d["y_lo"], d["y_hi"]), g["nx"], g["ny"])

    def region_indicator(self) -> np.ndarray:
        grid = self.grid
        H = np.zeros(grid.shape)
        for s in self["domain"]["region"]:
            shape = disk_indicator(grid, s[1:3], s[3]) if s[0] == "disk" else box_indicator(grid, s[1:3], s[3:5])
            H = np.maximum(H, shape)
        return H

    def digest(self) -> str:
        return hashlib.sha256(render_config(self).encode()).hexdigest()

    def replace(self, section, **updates) -> "ScenarioConfig":
        values = {s: dict(v) for s, v in self.values.items()}
        for key, val in updates.items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            values[section][key] = val
        return ScenarioConfig(values)


def parse_config(text: str) -> ScenarioConfig:
    """Strict parse: every schema key exactly once, nothing else."""
    cp = configparser.ConfigParser(strict=True, interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"line {exc.lineno}: duplicate key {exc.option!r} in [{exc.section}]") from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"line {exc.lineno}: duplicate section [{exc.section}]") from None
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    lines = text.splitlines()
    problems = []
    unknown_sections = [s for s in cp.sections() if s not in SCHEMA]
    for s in unknown_sections:
        n = next((i for i, l in enumerate(lines, 1) if l.strip() == f"[{s}]"), None)
        problems.append(f"line {n}: unknown section [{s}]")
    missing_sections = [s for s in SCHEMA if s not in cp]
    if missing_sections:
        problems.append("missing sections: " + ", ".join(f"[{s}]" for s in missing_sections))
    values = {}
    for section, keys in SCHEMA.items():
        if section not in cp:
            continue
        for key in cp[section]:
            if key not in keys:
                problems.append(f"line {_line_of(lines, section, key)}: unknown key {key!r} in [{section}]")
        missing = [k for k in keys if k not in cp[section]]
        if missing:
            problems.append(f"[{section}] missing keys: " + ", ".join(missing))
        values[section] = {}
        for key, kind in keys.items():
            if key in cp[section]:
                where = f"line {_line_of(lines, section, key)} ({section}.{key})"
                values[section][key] = _convert(kind, cp[section][key], where)
    if problems:
        raise ConfigError("; ".join(problems))
    cfg = ScenarioConfig(values)
    _validate(cfg)
    return cfg


def _validate(cfg: ScenarioConfig):
    try:
        grid = cfg.grid
    except ValueError as exc:
        raise ConfigError(f"domain/grid: {exc}") from None
    cov, mp, mic = cfg["coverage"], cfg["mapping"], cfg["micro"]
    if grid.nx % cov["P"] or grid.ny % cov["P"]:
        raise ConfigError(f"coverage.P={cov['P']} must divide nx={grid.nx} and ny={grid.ny}")
    for name, value in (("coverage.T", cov["T"]), ("coverage.C", cov["C"]), ("coverage.vmax", cov["vmax"]),
                        ("coverage.kmax", cov["kmax"]), ("mapping.speed", mp["speed"]),
                        ("mapping.T", mp["T"]), ("mapping.sigma", mp["sigma"]), ("coverage.sigma", cov["sigma"])):
        if not value > 0:
            raise ConfigError(f"{name} must be positive")
    for name, value in (("coverage.M", cov["M"]), ("mapping.lanes", mp["lanes"]), ("mapping.N", mp["N"]),
                        ("micro.N", mic["N"]), ("mapping.snapshots", mp["snapshots"] - 1)):
        if value < 1:
            raise ConfigError(f"{name} is too small")
    if cov["lambda"] < 0 or (mp["lambda"] is not None and not mp["lambda"] > 0):
        raise ConfigError("regularisation weights must be positive (coverage.lambda may be 0)")
    try:
        PhysicalParams(cfg["physics"]["D"], cfg["physics"]["k_o"], cfg["physics"]["k_f"])
        PhysicalParams(mp["D"])
    except ValueError as exc:
        raise ConfigError(f"physics: {exc}") from None
    lawnmower_schedule(cfg)


def render_config(cfg: ScenarioConfig) -> str:
    out = []
    for section, keys in SCHEMA.items():
        out.append(f"[{section}]")
        out += [f"{key} = {_render_value(kind, cfg[section][key])}" for key, kind in keys.items()]
        out.append("")
    return "\n".join(out)


def bundled_config_text(name: str) -> str:
    if name not in BUNDLED:
        raise ConfigError(f"no bundled config {name!r}; choose from {', '.join(BUNDLED)}")
    return resources.files("ensemble_pde").joinpath("configs", f"{name}.ini").read_text()


def load_config(path) -> ScenarioConfig:
    return parse_config(Path(path).read_text())


# -- pipeline -------------------------------------------------------------------

def lawnmower_schedule(cfg: ScenarioConfig) -> VelocitySchedule:
    mp = cfg["mapping"]
    try:
        return make_lawnmower(cfg.grid.extent, mp["lanes"], mp["speed"], mp["T"],
                              start=(mp["start_x"], mp["start_y"]))
    except ValueError as exc:
        raise ConfigError(f"mapping: {exc}") from None


def write_controls_csv(path, u: ControlSignal) -> Path:
    lines = ["t_start,u1,u2,u3"] + [f"{t!r},{a!r},{b!r},{c!r}"
                                     for t, (a, b, c) in zip(u.times[:-1].tolist(), u.values.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def read_controls_csv(path, T, lower=-np.inf, upper=np.inf) -> ControlSignal:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return ControlSignal(np.append(data[:, 0], T), data[:, 1:4], lower, upper)


def write_series_csv(path, t, values, header) -> Path:
    lines = [header] + [f"{a!r},{b!r}" for a, b in zip(np.asarray(t).tolist(), np.asarray(values).tolist())]
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def write_trajectory_fields(directory, traj, names=("y1", "y2", "y3")) -> list[Path]:
    """One field CSV per component and snapshot, named ``<field>_t<seconds>.csv``."""
    paths = []
    for t, state in zip(traj.times, traj.states):
        for name, f in zip(names, state):
            paths.append(write_field_csv(Path(directory) / f"{name}_t{t:g}.csv", traj.grid, f))
    return paths


class StageError(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"stage '{stage}' failed: {type(exc).__name__}: {exc}")
        self.stage = stage


def run_mapping(cfg: ScenarioConfig, out: Path, seed: int, threads: int = 1):
    """Synthetic or agent-based observations, inverse solve and thresholding."""
    grid, mp, phys = cfg.grid, cfg["mapping"], cfg["physics"]
    H_true = cfg.region_indicator()
    sched = lawnmower_schedule(cfg)
    ctrl = sched.to_control()
    params = PhysicalParams(mp["D"], k_o=phys["k_o"])
    y0 = gaussian_density(grid, sched.start, mp["sigma"])
    samples = np.linspace(0.0, sched.T, mp["snapshots"])
    traj, obs = solve_mapping_model(H_true, ctrl, params, grid, y0, sched.T, snapshot_times=samples)
    basis = SnapshotBasis.from_trajectory(traj)
    if mp["source"] == "microscopic":
        sim = simulate_ensemble(SimConfig(grid, mp["N"], sched.T, "mapping", params, ctrl, H_true, seed=seed,
                                          dt=cfg["micro"]["dt"], start_center=sched.start,
                                          start_sigma=mp["sigma"], exact_rates=cfg["micro"]["exact_rates"]),
                                threads=threads)
        obs = sim.g_hat(basis.times)
        write_event_log(out / "mapping_events.csv", sim)
    problem = MappingProblem.from_series(basis, obs, phys["k_o"], mp["lambda"])
    result = solve_inverse(problem, max_iters=mp["max_iters"])
    write_series_csv(out / "g.csv", obs.t, obs.g, "t,g")
    write_field_csv(out / "H_true.csv", grid, H_true)
    write_field_csv(out / "H_hat.csv", grid, result.H_hat)
    write_field_csv(out / "H_thresh.csv", grid, result.H_thresh)
    write_history_csv(out / "objective_history.csv", result.history)
    return result


def coverage_problem(cfg: ScenarioConfig, H) -> tuple[CoverageProblem, object]:
    grid, cov, phys = cfg.grid, cfg["coverage"], cfg["physics"]
    mask = None
    if cov["mask_y_min"] is not None:
        mask = grid.meshgrid()[1] >= cov["mask_y_min"]
    part, y3_target = partition_targets(H, cov["P"], cov["C"], grid, mask=mask)
    prob = CoverageProblem(grid, H, PhysicalParams(phys["D"], k_f=phys["k_f"]),
                           gaussian_density(grid, (cov["start_x"], cov["start_y"]), cov["sigma"]),
                           cov["T"], y3_target, lam=cov["lambda"], M=cov["M"],
                           lower=(-cov["vmax"], -cov["vmax"], 0.0), upper=(cov["vmax"], cov["vmax"], cov["kmax"]))
    return prob, part


def run_coverage(cfg: ScenarioConfig, out: Path, H):
    cov = cfg["coverage"]
    prob, part = coverage_problem(cfg, H)
    res = optimize_coverage(prob.zero_control(), prob, max_iters=cov["max_iters"])
    write_controls_csv(out / "controls.csv", res.control)
    write_series_csv(out / "J_history.csv", np.arange(len(res.J_history)), res.J_history, "iter,J")
    times, Jt = objective_vs_time(res.control, prob)
    write_series_csv(out / "J_vs_t.csv", times, Jt, "t,J")
    grid = prob.grid
    np.savetxt(out / "partition_targets.csv", part.targets, delimiter=",", fmt="%r")
    write_field_csv(out / "y3_target.csv", grid, prob.y_target[2])
    for name, f in zip(("y1", "y2", "y3"), res.trajectory.final):
        write_field_csv(out / f"{name}_T.csv", grid, f)
    return res, prob


def run_micro_coverage(cfg: ScenarioConfig, out: Path, u: ControlSignal, H, seed: int, threads: int = 1):
    grid, cov, mic = cfg.grid, cfg["coverage"], cfg["micro"]
    params = PhysicalParams(cfg["physics"]["D"], k_f=cfg["physics"]["k_f"])
    sim_cfg = SimConfig(grid, mic["N"], cov["T"], "coverage", params, u, H, seed=seed, dt=mic["dt"],
                        start_center=(cov["start_x"], cov["start_y"]), start_sigma=cov["sigma"],
                        trajectory_stride=cfg["output"]["dump_trajectories"], exact_rates=mic["exact_rates"])
    sim = simulate_ensemble(sim_cfg, threads=threads)
    write_event_log(out / "coverage_events.csv", sim)
    write_g_hat(out / "g_hat.csv", sim.g_hat())
    t_ev, x_ev, y_ev = sim.events_of(1)
    write_field_csv(out / "activity_empirical.csv", grid,
                    empirical_density(np.column_stack([x_ev, y_ev]), grid, mic["N"]))
    if sim.trajectory is not None:
        write_trajectories(out / "trajectories.csv", sim)
    return sim


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _run_dir(base: Path, digest: str) -> Path:
    stamp = datetime.now().strftime("%Y%m%dT%H%M%S")
    path = base / f"{digest[:12]}-{stamp}"
    n = 1
    while path.exists():
        path = base / f"{digest[:12]}-{stamp}-{n}"
        n += 1
    path.mkdir(parents=True)
    return path


def run_pipeline(cfg: ScenarioConfig, out=None, seed=None, threads: int = 1,
                 stages=("mapping", "coverage", "micro"), H_map=None, controls=None) -> Path:
    """Run the enabled stages into a fresh directory and write ``manifest.json``.

    The manifest records the config digest, seed, library versions and a
    SHA-256 checksum for every file the stages wrote.  Times and thread counts
    are kept out of it so reruns can be compared byte for byte.
    """
    seed = cfg["micro"]["seed"] if seed is None else int(seed)
    run = _run_dir(Path(cfg["output"]["dir"] if out is None else out), cfg.digest())
    (run / "config.ini").write_text(render_config(cfg))
    H = cfg.region_indicator() if H_map is None else cfg.grid.check_field(H_map, "map")
    stage = "mapping"
    try:
        if "mapping" in stages and cfg["mapping"]["enabled"]:
            H = run_mapping(cfg, run, seed, threads).H_thresh
        stage = "coverage"
        if "coverage" in stages and cfg["coverage"]["enabled"]:
            controls = run_coverage(cfg, run, H)[0].control
        stage = "micro"
        if "micro" in stages and cfg["micro"]["enabled"]:
            if controls is None:
                raise ConfigError("the agent simulation needs optimised or supplied controls")
            run_micro_coverage(cfg, run, controls, H, seed, threads)
    except Exception as exc:
        log.error("stage %s failed: %s", stage, exc)
        raise StageError(stage, exc) from exc
    files = sorted(p for p in run.iterdir() if p.is_file() and p.name != "manifest.json")
    manifest = {
        "config_sha256": cfg.digest(),
        "seed": seed,
        "versions": {"ensemble_pde": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "files": {p.name: _sha256(p) for p in files},
    }
    (run / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return run
