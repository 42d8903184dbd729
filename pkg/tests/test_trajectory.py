"""Tests for trajectory generation, grid snapping, splits, and windowing."""

import math

import numpy as np
import pytest

from bfftrack.channel import Environment, Obstacle, SounderConfig, default_environment, segment_blocked, uniform_codebook
from bfftrack.config import ConfigError
from bfftrack.dataset import BffDataset, build_dataset
from bfftrack.trajectory import (
    GenerationError,
    KinematicProfile,
    Trajectory,
    generate_trajectories,
    generate_trajectory,
    load_trajectories,
    make_sequences,
    mean_speed,
    pedestrian_profile,
    profile_by_kind,
    save_trajectories,
    snap_to_grid,
    split_groups,
    trajectory_rng,
    vehicle_profile,
)

PEDESTRIAN_MEAN = 5.0 / 3.6
VEHICLE_MEAN = 30.0 / 3.6


def _open_env(extent=500.0):
    return Environment(extent_x=extent, extent_y=extent, grid_nx=11, grid_ny=11)


def _headings(positions):
    steps = np.diff(positions, axis=0)
    return np.arctan2(steps[:, 1], steps[:, 0])


def _wrap_angle(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


# ---------------------------------------------------------------- profiles


def test_profile_validation():
    with pytest.raises(ValueError):
        KinematicProfile("bicycle", 1.0, 2.0, 1.0, 0.5)
    with pytest.raises(ValueError):
        KinematicProfile("pedestrian", 3.0, 2.0, 1.0, 0.5)  # mean > max
    with pytest.raises(ValueError):
        KinematicProfile("pedestrian", 0.0, 2.0, 1.0, 0.5)  # mean not positive
    with pytest.raises(ValueError):
        KinematicProfile("pedestrian", 1.0, 2.0, 1.0, 4.0)  # turn > pi
    with pytest.raises(ValueError):
        KinematicProfile("pedestrian", 1.0, 2.0, 1.0, 0.5, stop_probability=1.0)
    with pytest.raises(ValueError):
        KinematicProfile("pedestrian", 1.0, 2.0, 0.0, 0.5)  # accel not positive


def test_default_profiles():
    ped = pedestrian_profile()
    veh = vehicle_profile()
    assert ped.mean_speed == pytest.approx(PEDESTRIAN_MEAN)
    assert veh.mean_speed == pytest.approx(VEHICLE_MEAN)
    assert veh.stop_probability == 0.0
    assert ped.stop_probability == 0.05
    # steering is tighter for vehicles than for pedestrians
    assert veh.max_turn_per_step < ped.max_turn_per_step
    assert profile_by_kind("vehicle") == veh
    assert profile_by_kind("pedestrian", stop_probability=0.2).stop_probability == 0.2
    with pytest.raises(ValueError):
        profile_by_kind("boat")


# ------------------------------------------------------------- generation


def test_length_validation():
    with pytest.raises(ValueError):
        generate_trajectory(_open_env(), pedestrian_profile(), 1, np.random.default_rng(0))


def test_trajectory_shape_and_len():
    traj = generate_trajectory(_open_env(), vehicle_profile(), 12, np.random.default_rng(3))
    assert traj.positions.shape == (12, 2)
    assert len(traj) == 12
    assert traj.group_id == 0


def test_pedestrian_mean_speed():
    trajectories = generate_trajectories(_open_env(), pedestrian_profile(), 300, 12, master_seed=11)
    v = mean_speed(trajectories)
    assert abs(v - PEDESTRIAN_MEAN) < 0.1 * PEDESTRIAN_MEAN


def test_vehicle_mean_speed():
    trajectories = generate_trajectories(_open_env(), vehicle_profile(), 300, 12, master_seed=12)
    v = mean_speed(trajectories)
    assert abs(v - VEHICLE_MEAN) < 0.1 * VEHICLE_MEAN


def test_pedestrian_speed_bound_and_stops():
    profile = pedestrian_profile(stop_probability=0.5)
    traj = generate_trajectory(_open_env(), profile, 60, np.random.default_rng(7))
    steps = np.linalg.norm(np.diff(traj.positions, axis=0), axis=1)
    assert steps.max() <= profile.max_speed + 1e-9
    assert (steps == 0.0).sum() > 0  # stops show up as zero-displacement steps


def test_vehicle_kinematic_bounds():
    profile = vehicle_profile()
    env = default_environment()
    for seed in range(100):
        traj = generate_trajectory(env, profile, 12, np.random.default_rng((900, seed)))
        steps = np.linalg.norm(np.diff(traj.positions, axis=0), axis=1)
        assert steps.min() > 0.0  # vehicles never stop
        assert steps.max() <= profile.max_speed + 1e-9
        assert np.abs(np.diff(steps)).max() <= profile.max_accel + 1e-9
        turns = _wrap_angle(np.diff(_headings(traj.positions)))
        assert np.abs(turns).max() <= profile.max_turn_per_step + 1e-9


def test_containment_and_clear_segments():
    env = default_environment()
    for kind, seed in (("pedestrian", 1), ("vehicle", 2)):
        for i in range(40):
            traj = generate_trajectory(
                env, profile_by_kind(kind), 12, np.random.default_rng((seed, i))
            )
            pos = traj.positions
            assert pos[:, 0].min() >= env.x_min and pos[:, 0].max() <= env.x_max
            assert pos[:, 1].min() >= env.y_min and pos[:, 1].max() <= env.y_max
            for p in pos:
                assert not any(obs.strictly_contains(p) for obs in env.obstacles)
            for a, b in zip(pos[:-1], pos[1:]):
                assert not segment_blocked(a, b, env.obstacles)


def test_vehicle_zero_turn_is_collinear():
    profile = vehicle_profile(max_turn_per_step=0.0)
    traj = generate_trajectory(_open_env(), profile, 12, np.random.default_rng(5))
    steps = np.diff(traj.positions, axis=0)
    cross = steps[:-1, 0] * steps[1:, 1] - steps[:-1, 1] * steps[1:, 0]
    assert np.abs(cross).max() < 1e-9


def test_vehicle_restart_budget_error():
    # an environment too small for a single 8 m vehicle step from any start
    env = Environment(extent_x=4.0, extent_y=4.0, grid_nx=2, grid_ny=2)
    with pytest.raises(GenerationError):
        generate_trajectory(env, vehicle_profile(), 12, np.random.default_rng(0))


def test_generation_reproducible():
    a = generate_trajectories(_open_env(), vehicle_profile(), 5, 12, master_seed=42)
    b = generate_trajectories(_open_env(), vehicle_profile(), 5, 12, master_seed=42)
    for ta, tb in zip(a, b):
        np.testing.assert_array_equal(ta.positions, tb.positions)
    c = generate_trajectories(_open_env(), vehicle_profile(), 5, 12, master_seed=43)
    assert not np.array_equal(a[0].positions, c[0].positions)


def test_per_trajectory_seed_is_order_free():
    batch = generate_trajectories(_open_env(), pedestrian_profile(), 6, 12, master_seed=9)
    solo = generate_trajectory(
        _open_env(), pedestrian_profile(), 12, trajectory_rng(9, 4), group_id=0
    )
    np.testing.assert_array_equal(batch[4].positions, solo.positions)


def test_group_assignment_balanced():
    batch = generate_trajectories(_open_env(), pedestrian_profile(), 10, 2, master_seed=1, n_groups=5)
    assert [t.group_id for t in batch] == [0, 0, 1, 1, 2, 2, 3, 3, 4, 4]
    # group count clamps to the trajectory count so every group is non-empty
    small = generate_trajectories(_open_env(), pedestrian_profile(), 3, 2, master_seed=1, n_groups=5)
    assert [t.group_id for t in small] == [0, 1, 2]
    with pytest.raises(ValueError):
        generate_trajectories(_open_env(), pedestrian_profile(), 3, 2, master_seed=1, n_groups=0)


def test_mean_speed_exact_on_straight_line():
    positions = np.stack([np.arange(5.0) * 2.0, np.zeros(5)], axis=1)
    traj = Trajectory(positions, pedestrian_profile(), 0)
    assert mean_speed([traj]) == pytest.approx(2.0, abs=1e-12)


# ---------------------------------------------------------------- snapping


def test_snap_exact_node():
    env = Environment(extent_x=10.0, extent_y=8.0, grid_nx=6, grid_ny=5)
    nodes = snap_to_grid(np.array([[env.grid_xs()[2], env.grid_ys()[3]]]), env)
    assert nodes.tolist() == [[2, 3]]


def test_snap_tie_goes_to_lower_index():
    env = Environment(extent_x=10.0, extent_y=8.0, grid_nx=6, grid_ny=5)
    cx = 0.5 * (env.grid_xs()[1] + env.grid_xs()[2])
    cy = 0.5 * (env.grid_ys()[2] + env.grid_ys()[3])
    nodes = snap_to_grid(np.array([[cx, cy]]), env)
    assert nodes.tolist() == [[1, 2]]


def test_snap_matches_brute_force_oracle():
    env = Environment(extent_x=11.0, extent_y=7.0, grid_nx=7, grid_ny=5)
    rng = np.random.default_rng(77)
    positions = np.stack(
        [rng.uniform(env.x_min, env.x_max, 300), rng.uniform(env.y_min, env.y_max, 300)], axis=1
    )
    nodes = snap_to_grid(positions, env)
    px, py = env.grid_pitch
    for p, (ix, iy) in zip(positions, nodes):
        d2 = (env.grid_xs()[:, None] - p[0]) ** 2 + (env.grid_ys()[None, :] - p[1]) ** 2
        oix, oiy = np.unravel_index(np.argmin(d2), d2.shape)
        assert d2[ix, iy] <= d2[oix, oiy] + 1e-12
        assert abs(env.grid_xs()[ix] - p[0]) <= 0.5 * px + 1e-12
        assert abs(env.grid_ys()[iy] - p[1]) <= 0.5 * py + 1e-12


def test_snap_accepts_trajectory():
    env = Environment(extent_x=10.0, extent_y=10.0, grid_nx=3, grid_ny=3)
    traj = Trajectory(np.array([[0.0, 0.0], [4.9, -4.9]]), pedestrian_profile(), 0)
    assert snap_to_grid(traj, env).tolist() == [[1, 1], [2, 0]]


# ------------------------------------------------------------------ splits


def _dummy_trajectories(n_groups, per_group=3):
    out = []
    for g in range(n_groups):
        for k in range(per_group):
            positions = np.zeros((4, 2)) + g + 0.1 * k
            out.append(Trajectory(positions, pedestrian_profile(), g))
    return out


def test_split_8_1_1():
    train, val, test = split_groups(_dummy_trajectories(10))
    groups = [sorted({t.group_id for t in s}) for s in (train, val, test)]
    assert [len(g) for g in groups] == [8, 1, 1]
    assert len(train) == 24 and len(val) == 3 and len(test) == 3


def test_split_disjoint_and_complete():
    splits = split_groups(_dummy_trajectories(7), ratios=(0.5, 0.3, 0.2))
    sets = [{t.group_id for t in s} for s in splits]
    assert sets[0] & sets[1] == set() and sets[0] & sets[2] == set() and sets[1] & sets[2] == set()
    assert sets[0] | sets[1] | sets[2] == set(range(7))
    # largest remainder keeps each count within one of the exact quota
    for got, ratio in zip(sets, (0.5, 0.3, 0.2)):
        assert abs(len(got) - ratio * 7) < 1.0


def test_split_deterministic():
    trajectories = _dummy_trajectories(10)
    first = split_groups(trajectories)
    second = split_groups(trajectories)
    for a, b in zip(first, second):
        assert [t.group_id for t in a] == [t.group_id for t in b]


def test_split_errors():
    with pytest.raises(ConfigError):
        split_groups(_dummy_trajectories(2))  # fewer groups than splits
    with pytest.raises(ConfigError):
        split_groups(_dummy_trajectories(10), ratios=(0.8, 0.1, 0.2))
    with pytest.raises(ConfigError):
        split_groups(_dummy_trajectories(10), ratios=(1.1, -0.05, -0.05))


# --------------------------------------------------------------- sequences


def _ramp_trajectory(length, group_id=0, kind="pedestrian"):
    positions = np.stack([np.arange(float(length)), 2.0 * np.arange(float(length))], axis=1)
    return Trajectory(positions, profile_by_kind(kind), group_id)


def test_window_counts():
    samples, skipped = make_sequences([_ramp_trajectory(11)], 10)
    assert len(samples) == 1 and skipped == 0
    samples, skipped = make_sequences([_ramp_trajectory(13)], 10)
    assert len(samples) == 3 and skipped == 0
    samples, skipped = make_sequences([_ramp_trajectory(10), _ramp_trajectory(12)], 10)
    assert len(samples) == 2 and skipped == 1


def test_window_contents():
    traj = _ramp_trajectory(13, group_id=5, kind="vehicle")
    samples, _ = make_sequences([traj], 10)
    for s, sample in enumerate(samples):
        assert sample.observed.shape == (10, 2)
        np.testing.assert_array_equal(sample.observed, traj.positions[s : s + 10])
        np.testing.assert_array_equal(sample.target, traj.positions[s + 10])
        np.testing.assert_array_equal(sample.rollout_targets[0], sample.target)
        assert sample.rollout_targets.shape == (13 - 10 - s, 2)
        assert sample.group_id == 5 and sample.kind == "vehicle"
        assert sample.features is None


def test_make_sequences_validation():
    with pytest.raises(ValueError):
        make_sequences([_ramp_trajectory(13)], 10, mode="pixels")
    with pytest.raises(ValueError):
        make_sequences([_ramp_trajectory(13)], 10, mode="fingerprint")


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    env = Environment(extent_x=8.0, extent_y=8.0, grid_nx=5, grid_ny=5, rng_seed=21)
    cfg = SounderConfig(
        bandwidth_b=100e6,
        sample_interval_ts=10e-9,
        max_excess_delay_t=160e-9,
        n_samples_ns=16,
        threshold_eta_dbm=-100.0,
    )
    path = tmp_path_factory.mktemp("data") / "tiny.bff"
    build_dataset(env, cfg, uniform_codebook(2), path)
    return BffDataset(path)


def test_fingerprint_sequences(small_dataset):
    ds = small_dataset
    # walk along the x axis exactly on grid nodes at y node 2 (y = 0)
    xs = -4.0 + 2.0 * np.arange(4.0)
    positions = np.stack([xs, np.zeros(4)], axis=1)
    traj = Trajectory(positions, pedestrian_profile(), 0)
    samples, skipped = make_sequences([traj], 3, mode="fingerprint", dataset=ds)
    assert skipped == 0 and len(samples) == 1
    sample = samples[0]
    assert sample.features.shape == (3, ds.feature_dim)
    expected_nodes = [ds.index_of(ix, 2) for ix in (0, 1, 2)]
    np.testing.assert_array_equal(sample.features, ds.features(np.asarray(expected_nodes)))
    np.testing.assert_array_equal(sample.target, positions[3])


def test_fingerprint_snap_clips_to_edge(small_dataset):
    ds = small_dataset
    positions = np.array([[-7.0, -7.0], [-5.0, -5.0], [7.0, 7.0], [9.0, 9.0]])
    traj = Trajectory(positions, pedestrian_profile(), 0)
    samples, _ = make_sequences([traj], 3, mode="fingerprint", dataset=ds)
    corner_lo = ds.features(np.asarray([ds.index_of(0, 0)]))[0]
    corner_hi = ds.features(np.asarray([ds.index_of(4, 4)]))[0]
    np.testing.assert_array_equal(samples[0].features[0], corner_lo)
    np.testing.assert_array_equal(samples[0].features[2], corner_hi)


# --------------------------------------------------------------------- io


def test_csv_round_trip(tmp_path):
    env = _open_env()
    trajectories = generate_trajectories(env, pedestrian_profile(), 3, 6, master_seed=2, n_groups=3)
    trajectories += generate_trajectories(env, vehicle_profile(), 2, 6, master_seed=3, n_groups=2)
    path = tmp_path / "trajs.csv"
    save_trajectories(path, trajectories)
    loaded = load_trajectories(path)
    assert len(loaded) == len(trajectories)
    for orig, back in zip(trajectories, loaded):
        np.testing.assert_array_equal(back.positions, orig.positions)
        assert back.group_id == orig.group_id
        assert back.profile.kind == orig.profile.kind


def test_csv_header_validation(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("traj,group,kind,step,x,y\n0,0,pedestrian,0,0.0,0.0\n")
    with pytest.raises(ConfigError):
        load_trajectories(path)
