import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trajpoison.kinematics import (DEFAULT_DEV_BOUND, DEFAULT_LIMITS, ControlInput, KinematicState,
                                   check_soft_constraints, fit_controls, max_theta, project_feasible, rollout, step)
from trajpoison.scene import ChannelStat, DatasetStats, Trajectory

KMAX = DEFAULT_LIMITS.kappa_max
AMAX = DEFAULT_LIMITS.a_max

loose_stats = DatasetStats(*(ChannelStat(0.0, 1e3) for _ in range(5)))

controls_st = st.lists(st.tuples(st.floats(-AMAX, AMAX), st.floats(-KMAX, KMAX)), min_size=2, max_size=12)


def zigzag(v=2.0, dt=0.5, n=8, turn=0.8):
    heading, p, pts = 0.0, np.zeros(2), [np.zeros(2)]
    for i in range(n - 1):
        heading = turn if i % 2 == 0 else -turn
        p = p + v * dt * np.array([math.cos(heading), math.sin(heading)])
        pts.append(p)
    return Trajectory(np.array(pts), dt)


def test_step_examples():
    s = step(KinematicState(0, 0, 0, 2), ControlInput(0, 0), 1.0)
    assert (s.x, s.y, s.heading, s.v) == (2.0, 0.0, 0.0, 2.0)
    s = step(KinematicState(0, 0, 0, 0), ControlInput(1, 0.3), 0.5)
    assert (s.x, s.y, s.heading, s.v) == (0.0, 0.0, 0.0, 0.5)
    s = step(KinematicState(0, 0, 0, 2), ControlInput(0, 0.1), 0.5)
    assert s.heading == pytest.approx(0.1, abs=1e-15)


def test_step_rejects_out_of_bound_controls():
    with pytest.raises(ValueError):
        step(KinematicState(0, 0, 0, 2), ControlInput(0, 0.5), 0.5)


def test_state_invariants():
    with pytest.raises(ValueError):
        KinematicState(0, 0, 0, -1)
    assert KinematicState(0, 0, 3 * math.pi, 1).heading == pytest.approx(math.pi)
    assert KinematicState(0, 0, -math.pi, 1).heading == pytest.approx(math.pi)


def test_rollout_straight_line():
    t = rollout(KinematicState(0, 0, 0, 2), [ControlInput(0, 0)] * 4, 0.5)
    np.testing.assert_allclose(t.points, [[0, 0], [1, 0], [2, 0], [3, 0], [4, 0]], atol=1e-12)


def test_rollout_constant_curvature_segments():
    t = rollout(KinematicState(0, 0, 0, 2), [ControlInput(0, 0.1)] * 20, 0.5)
    seg = np.linalg.norm(np.diff(t.points, axis=0), axis=1)
    np.testing.assert_allclose(seg, 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(controls=controls_st, v=st.floats(0, 20), h=st.floats(-3, 3))
def test_rollout_equals_fold(controls, v, h):
    us = [ControlInput(a, k) for a, k in controls]
    s = KinematicState(1.0, -2.0, h, v)
    pts = [s.p]
    for u in us:
        # independent fold written out from the update equations
        x, y, hh, vv = s.x, s.y, s.heading, s.v
        s = KinematicState(x + vv * math.cos(hh) * 0.5, y + vv * math.sin(hh) * 0.5,
                           hh + vv * u.kappa * 0.5, max(0.0, vv + u.a * 0.5))
        pts.append(s.p)
    out = rollout(KinematicState(1.0, -2.0, h, v), us, 0.5)
    assert len(out) == len(us) + 1
    np.testing.assert_array_equal(out.points, np.array(pts))


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 30), v=st.floats(0, 30), h=st.floats(-3, 3))
def test_zero_controls_endpoint_distance(n, v, h):
    t = rollout(KinematicState(0, 0, h, v), [ControlInput(0, 0)] * n, 0.5)
    assert np.linalg.norm(t.points[-1] - t.points[0]) == pytest.approx(v * 0.5 * n, abs=1e-9)


def test_fit_controls_exact_on_rollout():
    rng = np.random.default_rng(0)
    us = [ControlInput(float(a), float(k)) for a, k in zip(rng.uniform(-2, 2, 10), rng.uniform(-0.1, 0.1, 10))]
    t = rollout(KinematicState(3, 4, 0.7, 8.0), us, 0.5)
    assert fit_controls(t).residual <= 1e-6


def test_fit_controls_straight():
    t = Trajectory(np.column_stack([np.arange(10) * 1.5, np.arange(10) * 0.5]), 0.5)
    fit = fit_controls(t)
    assert all(abs(u.a) < 1e-9 and abs(u.kappa) < 1e-9 for u in fit.controls)
    assert fit.residual < 1e-9


def test_fit_controls_degenerate():
    fit = fit_controls(Trajectory(np.ones((5, 2)), 0.5))
    assert fit.residual == 0 and fit.s0.v == 0
    assert all(u == ControlInput(0.0, 0.0) for u in fit.controls)


def test_zigzag_is_clamped():
    t = zigzag()
    # per-step heading change 1.6 rad against an allowed v * kappa_max * dt = 0.3 rad
    assert 1.6 > 2.0 * KMAX * 0.5
    fit = fit_controls(t)
    assert fit.residual > 0
    assert all(u.within() for u in fit.controls)
    assert max(abs(u.kappa) for u in fit.controls) == pytest.approx(KMAX)


def _turns_within_bound(points, dt):
    seg = np.diff(points, axis=0)
    speed = np.linalg.norm(seg, axis=1) / dt
    head = np.arctan2(seg[:, 1], seg[:, 0])
    turn = np.abs((np.diff(head) + np.pi) % (2 * np.pi) - np.pi)
    return np.all(turn <= speed[:-1] * KMAX * dt + 1e-9)


def test_projection_of_zigzag_respects_heading_bound():
    p = project_feasible(zigzag())
    assert _turns_within_bound(p.points, 0.5)


def test_projection_fixed_point_and_idempotence(scenes):
    for s in scenes[:20]:
        for ag in s.agents:
            track = Trajectory(np.vstack([ag.obs.points, ag.fut.points]), s.dt)
            p = project_feasible(track)
            assert np.max(np.linalg.norm(p.points - track.points, axis=1)) <= 1e-6
            assert np.max(np.abs(project_feasible(p).points - p.points)) <= 1e-6


@settings(max_examples=40, deadline=None)
@given(noise=st.lists(st.floats(-3, 3), min_size=16, max_size=16), v=st.floats(1, 20))
def test_projection_idempotent_property(noise, v):
    n = 8
    base = np.column_stack([np.arange(n) * v * 0.5, np.zeros(n)]) + np.array(noise).reshape(n, 2)
    p = project_feasible(Trajectory(base, 0.5))
    assert all(u.within() for u in fit_controls(p).controls)
    assert np.max(np.abs(project_feasible(p).points - p.points)) <= 1e-6
    assert _turns_within_bound(p.points, 0.5)


def test_soft_constraints_zero_perturbation(scenes, stats):
    ag = scenes[0].target
    t = Trajectory(np.vstack([ag.obs.points, ag.fut.points]), 0.5)
    rep = check_soft_constraints(t, stats, t)
    assert rep.feasible and rep.max_pointwise_deviation == 0.0
    assert DEFAULT_DEV_BOUND == 1.0 and rep.dev_bound == 1.0


def test_soft_constraints_deviation_violation():
    base = Trajectory(np.column_stack([np.arange(8) * 1.0, np.zeros(8)]), 0.5)
    moved = base.points.copy()
    moved[3, 1] += 1.5
    rep = check_soft_constraints(Trajectory(moved, 0.5), loose_stats, base)
    assert not rep.deviation_ok and not rep.feasible
    assert rep.max_pointwise_deviation == pytest.approx(1.5)


def test_soft_constraints_channel_flag(stats):
    base = Trajectory(np.column_stack([np.arange(8) * 10.0, np.zeros(8)]), 0.5)
    fast = Trajectory(np.column_stack([np.arange(8) * 29.0, np.zeros(8)]), 0.5)
    rep = check_soft_constraints(fast, stats, base, dev_bound=1e6)
    vel = rep.channel("velocity")
    assert not vel.passed and vel.worst == pytest.approx(58.0)
    assert vel.upper == pytest.approx(stats.velocity.mu + 3 * stats.velocity.sigma)


def test_max_theta_trivial():
    base = Trajectory(np.column_stack([np.arange(8) * 1.0, np.zeros(8)]), 0.5)
    assert max_theta(base, np.zeros((8, 2)), loose_stats).theta == 1.0


def test_max_theta_two_metre_shift():
    base = Trajectory(np.column_stack([np.arange(8) * 1.0, np.zeros(8)]), 0.5)
    pert = np.zeros((8, 2))
    pert[4, 1] = 2.0
    r = max_theta(base, pert, loose_stats).theta
    assert r == pytest.approx(0.5, abs=1e-3)
    grid = np.arange(10_001) / 10_000
    feas = [g for g in grid if check_soft_constraints(Trajectory(base.points + g * pert, 0.5), loose_stats,
                                                      base).feasible]
    assert r == pytest.approx(max(feas), abs=1e-3)


def test_max_theta_infeasible_base(stats):
    base = Trajectory(np.column_stack([np.arange(8) * 29.0, np.zeros(8)]), 0.5)
    res = max_theta(base, np.ones((8, 2)), stats)
    assert res == (0.0, False)


def random_instances(scenes, n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        s = scenes[rng.integers(len(scenes))]
        ag = s.agents[rng.integers(len(s.agents))]
        base = np.vstack([ag.obs.points, ag.fut.points])
        tau = np.linspace(0, 1, len(base))[:, None]
        # mix of smooth drift and point noise so every channel can bind
        pert = rng.normal(0, 1.5, (1, 2)) * tau**2 + rng.normal(0, 0.1, base.shape) * rng.uniform(0, 1)
        out.append((base, pert))
    return out


def grid_oracle(base, pert, stats, dt=0.5):
    """Largest 1e-3 grid value with every smaller grid value feasible."""
    best = 0.0
    for g in np.arange(1001) / 1000:
        if not check_soft_constraints(Trajectory(base + g * pert, dt), stats, Trajectory(base, dt)).feasible:
            break
        best = g
    return best


def test_max_theta_matches_grid_search(scenes, stats):
    for base, pert in random_instances(scenes, 50, seed=5):
        r = max_theta(base, pert, stats, dt=0.5).theta
        assert abs(r - grid_oracle(base, pert, stats)) <= 1e-3


def test_max_theta_boundary_property(scenes, stats):
    for base, pert in random_instances(scenes, 50, seed=6):
        r = max_theta(base, pert, stats, dt=0.5).theta
        b = Trajectory(base, 0.5)
        assert check_soft_constraints(Trajectory(base + r * pert, 0.5), stats, b).feasible
        if r < 1:
            nxt = min(1.0, r + 1e-3)
            assert not check_soft_constraints(Trajectory(base + nxt * pert, 0.5), stats, b).feasible
