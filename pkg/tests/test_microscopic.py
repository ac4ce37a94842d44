import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ensemble_pde.grid import build_grid, disk_indicator
from ensemble_pde.macroscopic import ControlSignal, PhysicalParams
from ensemble_pde.microscopic import (ACTIVITY_END, ACTIVITY_START, SimConfig, empirical_density, langevin_step,
                                      read_event_log, simulate_ensemble, specular_reflect, switch_probability,
                                      transition_step, write_event_log, write_g_hat, write_trajectories)

EXTENT = (0.0, 100.0, 0.0, 100.0)


def test_langevin_deterministic_drift():
    np.testing.assert_allclose(langevin_step([10, 10], [1, 0], 0.0, 2.0, [0.3, -1.2]), [12, 10])
    np.testing.assert_array_equal(langevin_step([10, 10], [0, 0], 0.7, 0.5, [0, 0]), [10, 10])
    with pytest.raises(ValueError):
        langevin_step([0, 0], [0, 0], 1.0, 0.0, [0, 0])


def test_langevin_variance(rng):
    D, dt, steps, n = 0.5, 0.1, 100, 10_000
    x = np.zeros((n, 2))
    for _ in range(steps):
        x = langevin_step(x, [0, 0], D, dt, rng.standard_normal((n, 2)))
    T = dt * steps
    var = x.var(axis=0)
    se = 2 * D * T * np.sqrt(2 / (n - 1))
    assert np.all(np.abs(var - 2 * D * T) <= 3 * se)


def test_reflection_examples():
    np.testing.assert_array_equal(specular_reflect([101, 50], EXTENT), [99, 50])
    np.testing.assert_array_equal(specular_reflect([-3, 50], EXTENT), [3, 50])
    np.testing.assert_array_equal(specular_reflect([42.5, 0.0], EXTENT), [42.5, 0.0])
    np.testing.assert_array_equal(specular_reflect([-1, 104], EXTENT), [1, 96])


@given(st.floats(-99.9, 199.9), st.floats(-99.9, 199.9))
def test_reflection_lands_inside_and_is_idempotent(x, y):
    p = specular_reflect([x, y], EXTENT)
    assert 0 <= p[0] <= 100 and 0 <= p[1] <= 100
    np.testing.assert_array_equal(specular_reflect(p, EXTENT), p)


def test_transition_rules(rng):
    n = 1000
    moving = np.ones(n, dtype=bool)
    new, stopped, _ = transition_step(moving, 1.0, 0.0, np.zeros(n), 0.1, rng.random(n))
    assert new.all() and not stopped.any()
    still = np.zeros(n, dtype=bool)
    new, _, resumed = transition_step(still, 1.0, 0.0, np.ones(n), 0.1, rng.random(n))
    assert not new.any() and not resumed.any()
    with pytest.raises(ValueError):
        switch_probability(20.0, 0.1)
    assert switch_probability(20.0, 0.1, exact=True) == pytest.approx(1 - np.exp(-2.0))


def test_switch_fraction_matches_binomial(rng):
    n, k, dt = 100_000, 0.1, 0.1
    _, stopped, _ = transition_step(np.ones(n, dtype=bool), k, 0.0, np.ones(n), dt, rng.random(n))
    p = k * dt
    assert abs(stopped.mean() - p) <= 3 * np.sqrt(p * (1 - p) / n)


def _cfg(grid, mode="coverage", N=50, T=20.0, value=(0.0, 0.0, 0.0), H=None, **kw):
    u = ControlSignal.uniform(T, 4, value)
    H = np.ones(grid.shape) if H is None else H
    kw.setdefault("params", PhysicalParams(D=0.5, k_o=1.0, k_f=0.2))
    return SimConfig(grid, N, T, mode, control=u, H=H, **kw)


def test_straight_line_with_reflections(square25):
    cfg = _cfg(square25, "mapping", N=1, T=150.0, value=(1.0, 0.0, 0.0), params=PhysicalParams(0.0, 0.0),
               start_center=(50.0, 50.0), start_sigma=0.0, dt=1.0, trajectory_stride=1)
    res = simulate_ensemble(cfg)
    path = res.trajectory[:, 0]
    assert np.all(path[:, 1] == 50.0)
    t = np.arange(151.0)
    # the drift is a field, not a heading: after reaching the wall the agent
    # is pushed back into it and alternates between 100 and 99
    expected = np.where(t <= 50, 50 + t, np.where((t - 50) % 2 == 0, 100.0, 99.0))
    np.testing.assert_allclose(path[:, 0], expected, atol=1e-9)
    assert res.t.size == 0


def test_mapping_counts_match_linear_growth(square25):
    k_o, T, N = 1.0, 50.0, 400
    res = simulate_ensemble(_cfg(square25, "mapping", N=N, T=T, params=PhysicalParams(0.5, k_o=k_o)))
    g_T = res.g_hat([T]).g[0]
    assert abs(g_T - k_o * T) <= 4 * np.sqrt(k_o * T / N)
    assert np.all(np.diff(res.g_hat().g) >= 0)
    assert res.final_moving.all()


def test_no_rate_no_events(square25):
    res = simulate_ensemble(_cfg(square25, "coverage", value=(0.3, 0.1, 0.0)))
    assert res.t.size == 0


def test_determinism_and_thread_independence(square25):
    H = disk_indicator(square25, (50, 50), 30)
    cfg = _cfg(square25, "coverage", N=600, T=10.0, value=(0.5, 0.2, 1.0), H=H,
               start_center=(50, 50), start_sigma=10.0, seed=9)
    a, b = simulate_ensemble(cfg), simulate_ensemble(cfg, threads=3)
    for name in ("agent_id", "t", "x", "y", "kind", "final_positions", "final_moving"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    c = simulate_ensemble(_cfg(square25, "coverage", N=600, T=10.0, value=(0.5, 0.2, 1.0), H=H,
                               start_center=(50, 50), start_sigma=10.0, seed=10))
    assert not np.array_equal(a.final_positions, c.final_positions)


def test_agent_streams_do_not_depend_on_population(square25):
    small = simulate_ensemble(_cfg(square25, N=5, seed=4, start_sigma=3.0))
    large = simulate_ensemble(_cfg(square25, N=300, seed=4, start_sigma=3.0))
    np.testing.assert_array_equal(small.final_positions, large.final_positions[:5])


def test_event_log_invariants(square25):
    H = disk_indicator(square25, (50, 50), 40)
    res = simulate_ensemble(_cfg(square25, "coverage", N=300, T=30.0, value=(0.8, -0.4, 2.0), H=H,
                                 start_center=(50, 50), start_sigma=15.0))
    assert res.t.size > 0
    assert np.all((res.x >= 0) & (res.x <= 100) & (res.y >= 0) & (res.y <= 100))
    for a in np.unique(res.agent_id):
        sel = res.agent_id == a
        assert np.all(np.diff(res.t[sel]) >= 0)
        kinds = res.kind[sel]
        assert kinds[0] == ACTIVITY_START
        assert np.all(kinds[::2] == ACTIVITY_START) and np.all(kinds[1::2] == ACTIVITY_END)
    # the last event of each agent matches its final state
    for a in range(300):
        k = res.kind[res.agent_id == a]
        assert res.final_moving[a] == (k.size == 0 or k[-1] == ACTIVITY_END)


def test_mean_square_displacement_slope():
    g = build_grid(EXTENT, 10, 10)
    D, N = 1.0, 10_000
    times = (2.0, 4.0, 6.0, 8.0, 10.0)
    cfg = SimConfig(g, N, 10.0, "coverage", PhysicalParams(D), ControlSignal.uniform(10.0, 1), np.zeros(g.shape),
                    seed=2, dt=0.1, start_center=(50, 50), start_sigma=0.0, snapshot_times=times)
    res = simulate_ensemble(cfg)
    msd = [np.mean(np.sum((p - 50.0) ** 2, axis=1)) for p in res.snapshot_positions]
    slope = np.polyfit(res.snapshot_times, msd, 1)[0]
    assert abs(slope - 4 * D) <= 0.1 * 4 * D


def test_config_rejects_large_probabilities(square25):
    with pytest.raises(ValueError):
        _cfg(square25, "mapping", params=PhysicalParams(0.1, k_o=100.0), dt=0.01)
    cfg = _cfg(square25, "mapping", params=PhysicalParams(0.1, k_o=100.0))
    assert cfg.dt * 100.0 <= 0.1 + 1e-12
    with pytest.raises(ValueError):
        _cfg(square25, "swarm")
    with pytest.raises(ValueError):
        _cfg(square25, N=0)


def test_empirical_density_normalisation(square25):
    pts = np.tile([[33.0, 71.0]], (40, 1))
    f = empirical_density(pts, square25, 40)
    assert square25.integrate(f) == pytest.approx(1.0)
    assert np.count_nonzero(f) == 1 and f[17, 8] > 0
    assert square25.integrate(empirical_density(pts[:10], square25, 40)) == pytest.approx(0.25)


def test_csv_outputs(tmp_path, square25):
    cfg = _cfg(square25, "coverage", N=20, T=10.0, value=(0.5, 0.0, 1.0), start_sigma=20.0, trajectory_stride=10)
    res = simulate_ensemble(cfg)
    log = read_event_log(write_event_log(tmp_path / "events.csv", res))
    assert (tmp_path / "events.csv").read_text().startswith("agent_id,t,x,y,kind\n")
    np.testing.assert_array_equal(log["t"], res.t)
    assert set(log["kind"]) <= {"activity_start", "activity_end"}
    text = write_g_hat(tmp_path / "g.csv", res.g_hat()).read_text().splitlines()
    assert text[0] == "t,g_hat" and len(text) == cfg.n_steps + 2
    rows = write_trajectories(tmp_path / "traj.csv", res).read_text().splitlines()
    assert rows[0] == "agent_id,t,x,y" and len(rows) == 1 + 20 * (cfg.n_steps // 10 + 1)
