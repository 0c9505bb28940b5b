from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from magloc.errors import EstimatorError, InvalidInputError, StepFailure
from magloc.estimator import (ControlSample, EstimatorConfig, State, batch_cost, draw_controls, estimate_step,
                              importance_weights, matching_cost, propagate, propagate_batch, run_sequence,
                              sensor_pose)
from magloc.mfmap import MagneticMap, map_from_function
from magloc.sim import (DEFAULT_BASE_FIELD, MeasurementFrame, NoiseModel, SensorRig, TrajectorySpec,
                        generate_trajectory, simulate_frames, synthesize_frame, world_field)
from magloc.so3 import exp_so3, log_so3

TUNED = EstimatorConfig(M=1024, lam=3.0, c_squared=25.0, damping=0.9)


def homogeneous(R, p):
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = p
    return T


def test_sensor_pose_examples():
    rig = SensorRig([np.eye(3)], [np.zeros(3)])
    R, p = sensor_pose(State(), rig, 0)
    assert np.array_equal(R, np.eye(3)) and np.array_equal(p, np.zeros(3))
    rig = SensorRig([np.eye(3)], [(0.0, 1.0, 0.0)])
    _, p = sensor_pose(State(p=(1, 0, 0)), rig, 0)
    assert np.array_equal(p, [1.0, 1.0, 0.0])


def test_sensor_pose_homogeneous_oracle(rng):
    for _ in range(50):
        x = State(p=rng.normal(size=3), phi=rng.normal(size=3))
        rig = SensorRig.from_axis_angle(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)))
        for i in range(4):
            T = homogeneous(x.R, x.p) @ homogeneous(rig.rotations[i], rig.translations[i])
            R, p = sensor_pose(x, rig, i)
            assert np.allclose(R, T[:3, :3], atol=1e-12)
            assert np.allclose(p, T[:3, 3], atol=1e-12)


@pytest.fixture(scope="module")
def grid_setup(dipoles):
    """Exact map plus a rig whose sensors sit on cell centers."""
    res = 0.05
    m = map_from_function(lambda p: world_field(dipoles, DEFAULT_BASE_FIELD, p), (-1, -1, -0.1, 1, 1, 0.1), res,
                          DEFAULT_BASE_FIELD)
    rig = SensorRig([np.eye(3)] * 3, [(0, 0, 0), (0.1, 0, 0), (0, -0.15, 0)])
    x = State(p=(0.025, 0.025, 0.025))
    f = synthesize_frame(x, rig, dipoles, DEFAULT_BASE_FIELD, NoiseModel(0.0, 0.0), 0)
    return m, rig, x, f


def test_cost_zero_for_perfect_data(grid_setup):
    m, rig, x, f = grid_setup
    c, n = matching_cost(x, f, m, rig, 6.75)
    assert c < 1e-20 and n == 3


def test_cost_outside_map(grid_setup):
    m, rig, _, f = grid_setup
    c, n = matching_cost(State(p=(10, 10, 10)), f, m, rig, 6.75)
    assert c == 3 * 6.75 and n == 0


def test_cost_hand_evaluated(grid_setup):
    m, rig, x, f = grid_setup
    readings = f.readings.copy()
    readings[1] += (4.0, 0.0, 0.0)   # r^2 = 16 > c^2
    readings[2] += (0.0, 1.0, -1.0)  # r^2 = 2 < c^2
    g = MeasurementFrame(f.t, readings)
    c, n = matching_cost(x, g, m, rig, 6.75)
    assert n == 2
    assert np.isclose(c, 2.0 + 6.75, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 100.0))
def test_truncation_ceiling(exact_map, rig7, seed, c2):
    r = np.random.default_rng(seed)
    x = State(p=r.uniform(-1.5, 1.5, 3) * [1, 1, 0.2], phi=r.normal(size=3) * 0.3)
    f = MeasurementFrame(0.0, r.normal(scale=40.0, size=(7, 3)) + DEFAULT_BASE_FIELD)
    c, n = matching_cost(x, f, exact_map, rig7, c2)
    assert c <= 7 * c2 * (1 + 1e-12)
    if n == 0:
        assert c == pytest.approx(7 * c2, rel=1e-12)
    else:
        assert c < 7 * c2 - 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1.0, 1e3))
def test_outlier_invariance(exact_map, rig7, dipoles, seed, scale):
    r = np.random.default_rng(seed)
    x = State(p=r.uniform(-0.5, 0.5, 3) * [1, 1, 0.1], phi=(0, 0, r.uniform(-3, 3)))
    f = synthesize_frame(x, rig7, dipoles, DEFAULT_BASE_FIELD, NoiseModel(0.3, 0.0), r)
    c2 = 6.75
    base, _ = matching_cost(x, f, exact_map, rig7, c2)
    R1, p1 = sensor_pose(x, rig7, 3)
    target = exact_map.query(p1)
    # any reading whose world-frame residual is at least c below or beyond
    d = r.normal(size=3)
    d *= (np.sqrt(c2) * (1.0 + scale / 10.0)) / np.linalg.norm(d)
    readings = f.readings.copy()
    readings[3] = R1.T @ (target + d)
    g = MeasurementFrame(f.t, readings)
    r_before = np.sum((target - R1 @ f.readings[3]) ** 2)
    c_new, _ = matching_cost(x, g, exact_map, rig7, c2)
    if r_before >= c2:
        assert c_new == pytest.approx(base, abs=1e-9)
    else:
        assert c_new == pytest.approx(base - r_before + c2, abs=1e-9)


def test_propagate_examples():
    x = State(p=(1, 2, 3), phi=(0.1, 0.2, 0.3), t=1.0)
    y = propagate(x, ControlSample(), 0.5)
    assert np.array_equal(y.p, x.p) and np.allclose(y.phi, x.phi, atol=1e-15) and y.t == 1.5
    y = propagate(State(v=(1, 0, 0)), ControlSample(), 0.01)
    assert np.allclose(y.p, [0.01, 0, 0], atol=1e-15)
    with pytest.raises(InvalidInputError):
        propagate(x, ControlSample(), 0.0)


def quat_mul(a, b):
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2, w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                     w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2, w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2])


def quat_of(phi):
    th = np.linalg.norm(phi)
    return np.concatenate([[np.cos(th / 2)], np.sin(th / 2) * phi / th]) if th > 0 else np.array([1.0, 0, 0, 0])


def quat_to_matrix(q):
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                     [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                     [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]])


def test_propagate_oracles(rng):
    dt = 0.01
    for _ in range(100):
        x = State(p=rng.normal(size=3), phi=rng.normal(size=3), v=rng.normal(size=3), omega=rng.normal(size=3))
        tau = ControlSample(rng.normal(size=3) * 3, rng.normal(size=3))
        y = propagate(x, tau, dt)
        # position: integrate a constant acceleration with many small Euler steps
        p, v = x.p.copy(), x.v.copy()
        n = 2000
        for _ in range(n):
            p = p + (v + 0.5 * tau.a * dt / n) * dt / n
            v = v + tau.a * dt / n
        assert np.allclose(y.p, p, atol=1e-12)
        assert np.allclose(y.v, v, atol=1e-12)
        # orientation: world-frame quaternion increment
        q = quat_mul(quat_of(tau.omega * dt), quat_of(x.phi))
        assert np.allclose(y.R, quat_to_matrix(q), atol=1e-9)
        assert np.array_equal(y.omega, tau.omega)


def test_propagate_batch_matches_scalar(rng):
    x = State(p=rng.normal(size=3), phi=rng.normal(size=3), v=rng.normal(size=3))
    taus = rng.normal(size=(20, 6))
    P, R, V = propagate_batch(x.p, x.R, x.v, taus, 0.1)
    for k in range(20):
        y = propagate(x, ControlSample.from_vector(taus[k]), 0.1)
        assert np.allclose(P[k], y.p, atol=1e-14) and np.allclose(V[k], y.v, atol=1e-14)
        assert np.allclose(R[k], y.R, atol=1e-12)


def test_weights_closed_form():
    lam = 0.7
    w = importance_weights([0.0, lam * np.log(3.0)], lam)
    assert np.allclose(w, [0.75, 0.25], atol=1e-15)
    w = importance_weights(np.full(10, 4.2), 1.0)
    assert np.allclose(w, 0.1, atol=1e-16)


@settings(max_examples=100)
@given(st.lists(st.floats(0.0, 1e4), min_size=1, max_size=200), st.floats(1e-3, 1e3))
def test_weights_normalized(costs, lam):
    w = importance_weights(costs, lam)
    assert abs(w.sum() - 1.0) < 1e-12
    assert np.all(w >= 0)
    ess = 1.0 / np.sum(w * w)
    assert 0 < ess <= len(costs) + 1e-9


@settings(max_examples=100)
@given(st.lists(st.floats(0.0, 50.0), min_size=2, max_size=50), st.floats(0.5, 10.0), st.floats(0.0, 1e6))
def test_cost_shift_invariance(costs, lam, offset):
    taus = np.arange(len(costs), dtype=float)
    a = importance_weights(costs, lam, shift=True) @ taus
    b = importance_weights(costs, lam, shift=False) @ taus
    assert abs(a - b) < 1e-9 * max(1.0, abs(a))
    # shifting every cost changes nothing with the shift on, even where the
    # unshifted exponent underflows
    shifted = np.asarray(costs) + offset
    c = importance_weights(shifted, lam, shift=True) @ taus
    assert abs(a - c) < 1e-9 * max(1.0, abs(a))


def test_shift_prevents_nan():
    costs = 1e6 + np.array([0.0, 1.0, 2.0])
    w = importance_weights(costs, 1.0, shift=True)
    assert np.all(np.isfinite(w)) and abs(w.sum() - 1.0) < 1e-12
    with np.errstate(invalid="ignore"):
        u = importance_weights(costs, 1.0, shift=False)
    assert np.any(np.isnan(u))


def test_non_finite_costs_are_dropped():
    w = importance_weights([np.inf, 1.0, np.nan, 1.0], 1.0)
    assert np.array_equal(w, [0.0, 0.5, 0.0, 0.5])
    with pytest.raises(StepFailure):
        importance_weights([np.inf, np.nan], 1.0)


@pytest.fixture(scope="module")
def step_case(exact_map, rig7, dipoles):
    prev = State(p=(0.0, 0.0, 0.025), v=(0.5, 0.0, 0.0))
    truth = State(p=(0.05, 0.0, 0.025), v=(0.5, 0.0, 0.0), t=0.1)
    f = synthesize_frame(truth, rig7, dipoles, DEFAULT_BASE_FIELD, NoiseModel(0.5, 0.0), 1)
    return prev, f


def test_estimate_step_deterministic(step_case, exact_map, rig7):
    prev, f = step_case
    a = estimate_step(prev, f, exact_map, rig7, TUNED, step=3)
    b = estimate_step(prev, f, exact_map, rig7, TUNED, step=3)
    c = estimate_step(prev, f, exact_map, rig7, TUNED, step=4)
    assert a[0] == b[0] and np.array_equal(a[1].tau_hat, b[1].tau_hat)
    assert not np.array_equal(a[1].tau_hat, c[1].tau_hat)
    assert 0 < a[1].effective_sample_size <= TUNED.M
    assert a[0].t == f.t


def test_estimate_step_is_weighted_mean(step_case, exact_map, rig7):
    prev, f = step_case
    x, d = estimate_step(prev, f, exact_map, rig7, TUNED, step=0)
    taus = draw_controls(d.center, TUNED, 0)
    P, R, _ = propagate_batch(prev.p, prev.R, prev.v, taus, f.t - prev.t)
    costs, _ = batch_cost(R, P, f, exact_map, rig7, TUNED.ceiling)
    w = importance_weights(costs, TUNED.lam)
    assert np.allclose(d.tau_hat, w @ taus, atol=1e-12)
    assert np.isclose(d.s_min, costs.min())
    assert x == propagate(prev, ControlSample.from_vector(d.tau_hat), f.t - prev.t)


def test_equal_costs_give_sample_mean(step_case, rig7):
    prev, f = step_case
    # one giant cell: every sample sees the same value
    m = MagneticMap(100.0, [(0, 0, 0), (-1, -1, -1), (-1, 0, 0), (0, -1, 0), (-1, -1, 0), (0, 0, -1), (-1, 0, -1),
                            (0, -1, -1)], np.tile(DEFAULT_BASE_FIELD, (8, 1)))
    cfg = replace(TUNED, M=64)
    _, d = estimate_step(prev, f, m, rig7, cfg, step=0)
    taus = draw_controls(d.center, cfg, 0)
    assert np.allclose(d.tau_hat, taus.mean(axis=0), atol=1e-12)
    assert np.isclose(d.effective_sample_size, 64)


def test_small_temperature_selects_best(step_case, exact_map, rig7):
    prev, f = step_case
    cfg = replace(TUNED, lam=1e-6)
    _, d = estimate_step(prev, f, exact_map, rig7, cfg, step=2)
    assert np.allclose(d.tau_hat, d.best_tau, atol=1e-6)


def test_shift_flag_same_estimate(step_case, exact_map, rig7):
    prev, f = step_case
    cfg = replace(TUNED, lam=50.0)
    a = estimate_step(prev, f, exact_map, rig7, cfg, step=1)[1].tau_hat
    b = estimate_step(prev, f, exact_map, rig7, replace(cfg, shift_costs=False), step=1)[1].tau_hat
    assert np.allclose(a, b, atol=1e-9)


def test_dimension_reduction_equivalence(step_case, exact_map, rig7):
    prev, f = step_case
    dt = f.t - prev.t
    x, d = estimate_step(prev, f, exact_map, rig7, TUNED, step=5)
    taus = draw_controls(d.center, TUNED, 5)
    states = [propagate(prev, ControlSample.from_vector(t), dt) for t in taus]
    costs = np.array([matching_cost(s, f, exact_map, rig7, TUNED.ceiling)[0] for s in states])
    w = importance_weights(costs, TUNED.lam)
    for attr in ("p", "v", "omega"):
        full = np.sum(w[:, None] * np.array([getattr(s, attr) for s in states]), axis=0)
        assert np.allclose(full, getattr(x, attr), atol=1e-9)


def test_estimator_errors(step_case, rig7):
    prev, f = step_case
    empty = MagneticMap(0.05, np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(EstimatorError):
        estimate_step(prev, f, empty, rig7, TUNED)
    far = MagneticMap(0.05, [(1000, 1000, 1000)], [DEFAULT_BASE_FIELD])
    with pytest.raises(StepFailure):
        estimate_step(prev, f, far, rig7, replace(TUNED, c_squared=np.inf))
    with pytest.raises(InvalidInputError):
        estimate_step(prev, MeasurementFrame(0.0, f.readings), far, rig7, TUNED)


def test_config_validation():
    with pytest.raises(InvalidInputError):
        EstimatorConfig(M=0)
    with pytest.raises(InvalidInputError):
        EstimatorConfig(lam=0.0)
    with pytest.raises(InvalidInputError):
        EstimatorConfig(sampling_std=(1, 1, 1))
    with pytest.raises(InvalidInputError):
        EstimatorConfig(damping=1.0)
    assert EstimatorConfig().ceiling == pytest.approx(3 * (3 * 0.5) ** 2)


@pytest.fixture(scope="module")
def line_run(dipoles, rig7):
    traj = generate_trajectory(TrajectorySpec("line", duration=4.0, rate=10, speed=0.4, origin=(-0.8, -0.3, 0.025),
                                              heading=0.3))
    frames = simulate_frames(traj, rig7, dipoles, DEFAULT_BASE_FIELD, NoiseModel(0.0, 0.0), seed=0)
    return traj, frames


def test_closed_loop_noiseless(line_run, exact_map, rig7):
    traj, frames = line_run
    out = run_sequence(frames, traj[0][1], exact_map, rig7, TUNED)
    err = [np.linalg.norm(x.p - t.p) for (x, _), (_, t) in zip(out, traj[1:])]
    assert len(out) == len(frames)
    assert max(err) < 2 * exact_map.resolution
    assert not any(d.failed for _, d in out)


def test_run_sequence_contracts(line_run, exact_map, rig7):
    traj, frames = line_run
    one = run_sequence(frames[:1], traj[0][1], exact_map, rig7, TUNED)
    assert len(one) == 1
    a = run_sequence(frames[:10], traj[0][1], exact_map, rig7, TUNED)
    b = run_sequence(frames[:10], traj[0][1], exact_map, rig7, TUNED)
    assert all(x == y for (x, _), (y, _) in zip(a, b))
    with pytest.raises(InvalidInputError):
        run_sequence([], traj[0][1], exact_map, rig7, TUNED)
    with pytest.raises(InvalidInputError):
        run_sequence(frames, traj[3][1], exact_map, rig7, TUNED)


def test_failed_step_coasts(line_run, rig7):
    traj, frames = line_run
    far = MagneticMap(0.05, [(1000, 1000, 1000)], [DEFAULT_BASE_FIELD])
    calls = []
    cfg = replace(TUNED, c_squared=np.inf, M=32, relocalize=lambda x, f: calls.append(f.t))
    out = run_sequence(frames[:3], traj[0][1], far, rig7, cfg)
    x0 = traj[0][1]
    for k, (x, d) in enumerate(out):
        assert d.failed and d.discarded == 32
        assert np.allclose(x.p, x0.p + x0.v * frames[k].t, atol=1e-12)
    assert len(calls) == 3
