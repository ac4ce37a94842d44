import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ensemble_pde.grid import build_grid, disk_indicator, gaussian_density, uniform_density
from ensemble_pde.macroscopic import (ControlSignal, NumericalFailure, PhysicalParams, adr_rhs, boundary_flux,
                                      positivity_dt, solve_adjoint, solve_coverage_model, solve_mapping_model,
                                      stable_dt, transport)


def vanleer_oracle(q, vx, vy, h):
    """Loop-based upwind flux with van Leer limited reconstruction, D = 0."""
    ny, nx = q.shape

    def at(j, i):
        return q[min(max(j, 0), ny - 1), min(max(i, 0), nx - 1)]

    def limited(a, b):
        return 0.0 if a * b <= 0 else 2 * a * b / (a + b)

    out = np.zeros_like(q)
    for j in range(ny):
        for i in range(nx):
            fluxes = []
            for di, dj, c, interior in ((1, 0, vx, i < nx - 1), (-1, 0, vx, i > 0),
                                        (0, 1, vy, j < ny - 1), (0, -1, vy, j > 0)):
                if not interior or c == 0:
                    fluxes.append(0.0)
                    continue
                # face between (j, i) and (j + dj, i + di)
                lo = (j, i) if di + dj > 0 else (j + dj, i + di)
                sj, si = abs(dj), abs(di)
                if c > 0:
                    u, back, fwd = at(*lo), at(lo[0] - sj, lo[1] - si), at(lo[0] + sj, lo[1] + si)
                    val = u + 0.5 * limited(u - back, fwd - u)
                else:
                    up = (lo[0] + sj, lo[1] + si)
                    u, fwd, back = at(*up), at(up[0] + sj, up[1] + si), at(*lo)
                    val = u - 0.5 * limited(fwd - u, u - back)
                fluxes.append(c * val * (1 if di + dj > 0 else -1))
            out[j, i] = -sum(fluxes) / h
    return out


@pytest.fixture
def params():
    return PhysicalParams(D=5e-4, k_o=100.0, k_f=0.1)


def test_uniform_state_is_equilibrium(square25, params):
    y = np.stack([uniform_density(square25), np.zeros(square25.shape), np.zeros(square25.shape)])
    rhs = adr_rhs(y, (0.0, 0.0, 0.0), np.ones(square25.shape), params, square25, "coverage")
    assert np.abs(rhs).max() < 1e-18


def test_coverage_rhs_conserves_moving_plus_stationary(square25, params, rng):
    y = rng.random((3,) + square25.shape)
    H = (rng.random(square25.shape) > 0.5).astype(float)
    rhs = adr_rhs(y, (0.7, -1.3, 2.5), H, params, square25, "coverage")
    total = square25.integrate(rhs[0] + rhs[1])
    assert abs(total) <= 1e-12 * square25.integrate(y[0])


def test_advection_matches_loop_oracle(square25):
    q = gaussian_density(square25, (40, 55), 12.0)
    for v in ((1.0, 0.0), (-0.6, 0.9), (0.0, -1.5)):
        ours = transport(q, *v, 0.0, square25)
        ref = vanleer_oracle(q, *v, square25.hx)
        np.testing.assert_allclose(ours, ref, rtol=0, atol=1e-15 * np.abs(ref).max())


def test_rhs_rejects_nonfinite(square25, params):
    y = np.zeros((3,) + square25.shape)
    y[0, 2, 2] = np.nan
    with pytest.raises(NumericalFailure):
        adr_rhs(y, (0.0, 0.0, 0.0), np.ones(square25.shape), params, square25)
    with pytest.raises(NumericalFailure):
        adr_rhs(np.zeros_like(y), (np.inf, 0.0, 0.0), np.ones(square25.shape), params, square25)


def test_boundary_flux_vanishes(square25, rng):
    q = rng.random(square25.shape)
    assert boundary_flux(q, 1.7, -0.4, 0.3, square25) == 0.0
    assert boundary_flux(q, 1.7, -0.4, 0.3, square25, noflux=False) != 0.0


# -- step size --------------------------------------------------------------------

def _bounded(vmax, kmax, T=10.0):
    return ControlSignal.uniform(T, 2, lower=(-vmax, -vmax, 0.0), upper=(vmax, vmax, kmax))


def test_stable_dt_examples():
    g = build_grid((0, 100, 0, 100), 50, 50)
    p = PhysicalParams(D=5e-4)
    assert stable_dt(_bounded(1.0, 0.0), p, g) == pytest.approx(1.0)
    assert stable_dt(_bounded(0.0, 0.0), p, g, dt_max=3.0) == 3.0   # diffusion bound 1000 s capped
    assert stable_dt(_bounded(0.0, 0.0), PhysicalParams(D=0.0), g, dt_max=0.7) == 0.7


def test_stable_dt_rate_terms():
    g = build_grid((0, 100, 0, 100), 50, 50)
    assert stable_dt(_bounded(0.0, 4.0), PhysicalParams(D=0.0, k_f=0.1), g) == pytest.approx(0.125)
    assert stable_dt(_bounded(0.0, 0.0), PhysicalParams(D=0.0, k_f=2.0), g) == pytest.approx(0.25)


def test_requested_step_above_positivity_bound_fails(square25, params):
    u = _bounded(2.0, 10.0)
    bound = positivity_dt(u, params, square25)
    with pytest.raises(NumericalFailure):
        solve_coverage_model(np.ones(square25.shape), u, params, square25, uniform_density(square25),
                             dt=1.5 * bound)


# -- mapping model ----------------------------------------------------------------

def test_mapping_full_indicator_grows_linearly(square25, params):
    u = ControlSignal.uniform(50.0, 5, (0.8, -0.5, 0.0), lower=(-1, -1, 0), upper=(1, 1, 0))
    y0 = gaussian_density(square25, (30, 60), 5.0)
    times = np.linspace(1.0, 50.0, 50)
    traj, obs = solve_mapping_model(np.ones(square25.shape), u, params, square25, y0, 50.0, times)
    sel = obs.t >= 1.0
    assert np.all(np.abs(obs.g[sel] - 100 * obs.t[sel]) <= 0.005 * 100 * obs.t[sel])
    np.testing.assert_allclose(obs.rate, 100.0, rtol=1e-12)


def test_mapping_empty_indicator(square25, params):
    u = ControlSignal.uniform(20.0, 2, (1.0, 0.0, 0.0))
    _, obs = solve_mapping_model(np.zeros(square25.shape), u, params, square25,
                                 gaussian_density(square25, (50, 50), 5.0), 20.0)
    assert np.all(obs.g == 0.0)


def test_mapping_disk_refinement():
    def g_T(n):
        g = build_grid((0, 100, 0, 100), n, n)
        u = ControlSignal.uniform(60.0, 2, (0.6, 0.4, 0.0), lower=(-1, -1, 0), upper=(1, 1, 0))
        y0 = gaussian_density(g, (25, 30), 6.0)
        _, obs = solve_mapping_model(disk_indicator(g, (50, 50), 20), u, PhysicalParams(1e-4, k_o=1.0), g,
                                     y0, 60.0)
        return obs.g[-1]

    coarse, fine = g_T(40), g_T(80)
    assert abs(coarse - fine) / fine < 0.02


def test_mapping_requires_normalised_start(square25, params):
    u = ControlSignal.uniform(10.0, 1)
    with pytest.raises(ValueError):
        solve_mapping_model(np.ones(square25.shape), u, params, square25, 2 * uniform_density(square25), 10.0)


# -- coverage model ----------------------------------------------------------------

def test_two_state_totals_follow_closed_form(square25):
    p = PhysicalParams(D=5e-4, k_f=0.1)
    u = ControlSignal.uniform(10.0, 1, (0.0, 0.0, 0.1))
    traj = solve_coverage_model(np.ones(square25.shape), u, p, square25, uniform_density(square25))
    Y1 = square25.integrate(traj.final[0])
    assert abs(Y1 - (1 + np.exp(-2.0)) / 2) <= 1e-3


def test_no_switching_means_no_activity(square25, params):
    u = ControlSignal.uniform(30.0, 3, (0.5, 0.5, 0.0))
    traj = solve_coverage_model(np.ones(square25.shape), u, params, square25,
                                gaussian_density(square25, (20, 20), 5.0))
    assert np.all(traj.y2 == 0) and np.all(traj.y3 == 0)


def _random_control(rng, T, M, vmax=2.0, kmax=10.0):
    vals = np.column_stack([rng.uniform(-vmax, vmax, (M, 2)), rng.uniform(0, kmax, M)])
    return ControlSignal(np.linspace(0, T, M + 1), vals, (-vmax, -vmax, 0), (vmax, vmax, kmax))


def test_conservation_and_positivity_under_random_controls(square25, params, rng):
    H = disk_indicator(square25, (50, 50), 25)
    u = _random_control(rng, 40.0, 8)
    traj = solve_coverage_model(H, u, params, square25, gaussian_density(square25, (10, 10), 0.02),
                                snapshot_times=np.linspace(0, 40, 41))
    mass = square25.integrate(traj.y1 + traj.y2)
    assert np.abs(mass - 1).max() <= 1e-8
    assert traj.states.min() >= -1e-12
    assert traj.clipped == 0
    act = square25.integrate(traj.y3)
    assert np.all(np.diff(act) >= -1e-15)


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_controls_keep_densities_nonnegative(seed):
    g = build_grid((0, 100, 0, 100), 12, 12)
    rng = np.random.default_rng(seed)
    u = _random_control(rng, 20.0, 4)
    H = (rng.random(g.shape) > 0.5).astype(float)
    traj = solve_coverage_model(H, u, PhysicalParams(D=rng.uniform(0, 2), k_f=0.1), g,
                                gaussian_density(g, rng.uniform(0, 100, 2), rng.uniform(1, 20)))
    assert traj.states.min() >= -1e-12
    assert np.abs(g.integrate(traj.y1 + traj.y2) - 1).max() <= 1e-10


def test_mapping_observations_nondecreasing(square25, params, rng):
    u = _random_control(rng, 30.0, 6)
    u = u.with_values(np.column_stack([u.values[:, :2], np.zeros(6)]))
    _, obs = solve_mapping_model(disk_indicator(square25, (60, 40), 20), u, params, square25,
                                 gaussian_density(square25, (50, 50), 8.0), 30.0, np.linspace(0, 30, 61))
    assert np.all(np.diff(obs.g) >= 0)
    assert np.abs(square25.integrate(_mass(u, params, square25)) - 1) <= 1e-8


def _mass(u, params, grid):
    traj, _ = solve_mapping_model(np.ones(grid.shape), u, params, grid, gaussian_density(grid, (50, 50), 8.0), u.T)
    return traj.final[0]


def test_neumann_diffusion_is_second_order():
    D, T = 0.05, 1.0
    decay = np.exp(-2 * D * np.pi**2 * T)

    def err(n):
        g = build_grid((0, 1, 0, 1), n, n)
        X, Y = g.meshgrid()
        mode = np.cos(np.pi * X) * np.cos(np.pi * Y)
        u = ControlSignal.uniform(T, 1)
        traj, _ = solve_mapping_model(np.zeros(g.shape), u, PhysicalParams(D), g, 1 + 0.5 * mode, T)
        return np.sqrt(g.integrate((traj.final[0] - (1 + 0.5 * decay * mode)) ** 2))

    e1, e2, e3 = err(8), err(16), err(32)
    assert 3.5 < e1 / e2 < 4.5 and 3.5 < e2 / e3 < 4.5


# -- adjoint ---------------------------------------------------------------------

@pytest.fixture
def forward(square25, params, rng):
    u = _random_control(rng, 20.0, 4, vmax=1.0, kmax=1.0)
    H = disk_indicator(square25, (40, 40), 20)
    traj = solve_coverage_model(H, u, params, square25, gaussian_density(square25, (30, 30), 8.0))
    return u, H, traj


def test_matched_target_gives_zero_adjoint(forward, params):
    u, H, traj = forward
    adj = solve_adjoint(traj, u, H, params, (1, 1, 1), traj.final)
    assert np.all(adj.p == 0)


def test_activity_adjoint_is_constant(forward, params, square25):
    u, H, traj = forward
    target = np.stack([np.zeros(square25.shape)] * 2 + [H])
    adj = solve_adjoint(traj, u, H, params, (0, 0, 1), target)
    assert np.array_equal(adj.p3, np.broadcast_to(adj.p3[-1], adj.p3.shape))
    assert np.abs(adj.p1).max() > 0


def test_pure_neumann_adjoint_conserves_integral(square25, rng):
    p = PhysicalParams(D=2.0)
    u = ControlSignal.uniform(10.0, 2)
    H = np.ones(square25.shape)
    traj = solve_coverage_model(H, u, p, square25, uniform_density(square25))
    target = np.stack([rng.random(square25.shape), np.zeros(square25.shape), np.zeros(square25.shape)])
    adj = solve_adjoint(traj, u, H, p, (1, 0, 0), target)
    ints = square25.integrate(adj.p1)
    assert np.abs(ints - ints[-1]).max() <= 1e-8 * abs(ints[-1])
    assert adj.p1[0].std() < adj.p1[-1].std()   # diffusion smooths towards t = 0


def test_adjoint_rejects_other_control(forward, params):
    u, H, traj = forward
    other = u.with_values(u.values + 0.1)
    with pytest.raises(ValueError):
        solve_adjoint(traj, other, H, params, (0, 0, 1), traj.final)


def test_control_signal_validation():
    with pytest.raises(ValueError):
        ControlSignal([0.0, 1.0, 1.0], np.zeros((2, 3)))
    with pytest.raises(ValueError):
        ControlSignal([0.5, 1.0], np.zeros((1, 3)))
    with pytest.raises(ValueError):
        ControlSignal([0.0, 1.0], [[np.nan, 0, 0]])
    u = ControlSignal([0.0, 1.0, 3.0], [[1, 2, 3], [4, 5, 6]])
    assert list(u.interval_of(np.array([0.0, 0.99, 1.0, 2.5, 3.0]))) == [0, 0, 1, 1, 1]
    assert u.l2_norm_sq() == pytest.approx(14 + 2 * 77)
