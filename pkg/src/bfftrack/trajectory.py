"""Pedestrian- and vehicle-like 2-D trajectories sampled at 1 Hz.

Both movers follow a heading random walk with profile-specific bounds.
Pedestrians may stop for a step (and pick a fresh heading afterwards) and
draw each step's speed independently; vehicles never stop, bound their
per-step heading change, and evolve speed as a reflected random walk so the
acceleration limit holds. Steps that would leave the area or enter an
obstacle are resampled; pedestrians fall back to reversing, then standing
still, while vehicles restart the whole trajectory rather than break their
steering bound.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .channel import Environment, segment_blocked
from .config import ConfigError
from .ioutil import atomic_write_text


class GenerationError(RuntimeError):
    """No valid trajectory could be produced within the retry budget."""


PROFILE_KINDS = ("pedestrian", "vehicle")


@dataclass
class KinematicProfile:
    kind: str
    mean_speed: float
    max_speed: float
    max_accel: float
    max_turn_per_step: float
    stop_probability: float = 0.0

    def __post_init__(self):
        if self.kind not in PROFILE_KINDS:
            raise ValueError(f"kind must be one of {PROFILE_KINDS}")
        if not 0 < self.mean_speed <= self.max_speed:
            raise ValueError("need 0 < mean_speed <= max_speed")
        if not 0 <= self.max_turn_per_step <= math.pi:
            raise ValueError("max_turn_per_step must be in [0, pi]")
        if not 0 <= self.stop_probability < 1:
            raise ValueError("stop_probability must be in [0, 1)")
        if self.max_accel <= 0:
            raise ValueError("max_accel must be positive")


def pedestrian_profile(**over):
    """5 km/h walker: free to spin, may stop, speed redrawn every second."""
    params = dict(
        kind="pedestrian",
        mean_speed=5.0 / 3.6,
        max_speed=2.5,
        max_accel=2.5,
        max_turn_per_step=math.pi / 4,
        stop_probability=0.05,
    )
    params.update(over)
    return KinematicProfile(**params)


def vehicle_profile(**over):
    """30 km/h vehicle: limited steering, bounded acceleration, never stops."""
    params = dict(
        kind="vehicle",
        mean_speed=30.0 / 3.6,
        max_speed=13.0,
        max_accel=2.0,
        max_turn_per_step=math.radians(15.0),
        stop_probability=0.0,
    )
    params.update(over)
    return KinematicProfile(**params)


def profile_by_kind(kind, **over):
    if kind == "pedestrian":
        return pedestrian_profile(**over)
    if kind == "vehicle":
        return vehicle_profile(**over)
    raise ValueError(f"kind must be one of {PROFILE_KINDS}")


@dataclass
class Trajectory:
    positions: np.ndarray
    profile: KinematicProfile
    group_id: int

    def __len__(self):
        return self.positions.shape[0]


@dataclass
class SequenceSample:
    """One sliding window: an observed block and the positions after it."""

    observed: np.ndarray
    target: np.ndarray
    rollout_targets: np.ndarray
    group_id: int
    kind: str
    features: np.ndarray | None = None


def _step_valid(env, pos, candidate, margin):
    if not (
        env.x_min <= candidate[0] <= env.x_max and env.y_min <= candidate[1] <= env.y_max
    ):
        return False
    for obs in env.obstacles:
        if obs.contains(candidate, margin):
            return False
    return not segment_blocked(pos, candidate, env.obstacles)


def _start_point(env, rng, margin, tries=256):
    for _ in range(tries):
        p = (
            float(rng.uniform(env.x_min, env.x_max)),
            float(rng.uniform(env.y_min, env.y_max)),
        )
        if all(not obs.contains(p, margin) for obs in env.obstacles):
            return p
    raise GenerationError("could not place a collision-free start point")


def _pedestrian_speed(profile, rng):
    # stops occur with probability p, so moving steps are drawn around
    # mean/(1-p) to keep the per-step average at the profile's mean speed
    center = profile.mean_speed / (1.0 - profile.stop_probability)
    return min(float(rng.uniform(0.5 * center, 1.5 * center)), profile.max_speed)


def _generate_pedestrian(env, profile, length, rng, margin):
    pos = _start_point(env, rng, margin)
    heading = float(rng.uniform(0.0, 2.0 * math.pi))
    points = [pos]
    stopped = False
    while len(points) < length:
        if rng.random() < profile.stop_probability:
            points.append(pos)
            stopped = True
            continue
        if stopped:
            heading = float(rng.uniform(0.0, 2.0 * math.pi))
            stopped = False
        else:
            heading += float(rng.uniform(-profile.max_turn_per_step, profile.max_turn_per_step))
        speed = _pedestrian_speed(profile, rng)
        placed = False
        for attempt in range(34):
            if attempt == 0:
                h = heading
            elif attempt <= 32:
                h = float(rng.uniform(0.0, 2.0 * math.pi))
            else:
                h = heading + math.pi  # reverse as a last resort
            candidate = (pos[0] + speed * math.cos(h), pos[1] + speed * math.sin(h))
            if _step_valid(env, pos, candidate, margin):
                heading, pos = h, candidate
                placed = True
                break
        if not placed:
            pass  # stand still this second; always collision-free
        points.append(pos)
    return np.asarray(points)


def _generate_vehicle_once(env, profile, length, rng, margin):
    pos = _start_point(env, rng, margin)
    heading = float(rng.uniform(0.0, 2.0 * math.pi))
    speed = profile.mean_speed
    lo = max(0.0, profile.mean_speed - 2.5)
    hi = min(profile.max_speed, profile.mean_speed + 2.5)
    points = [pos]
    while len(points) < length:
        delta_v = float(rng.uniform(-profile.max_accel, profile.max_accel))
        new_speed = speed + delta_v
        if new_speed > hi:
            new_speed = 2.0 * hi - new_speed
        elif new_speed < lo:
            new_speed = 2.0 * lo - new_speed
        placed = False
        for _ in range(32):
            turn = float(rng.uniform(-profile.max_turn_per_step, profile.max_turn_per_step))
            h = heading + turn
            candidate = (pos[0] + new_speed * math.cos(h), pos[1] + new_speed * math.sin(h))
            if _step_valid(env, pos, candidate, margin):
                heading, pos, speed = h, candidate, new_speed
                placed = True
                break
        if not placed:
            return None  # boxed in; steering bound forbids escape
        points.append(pos)
    return np.asarray(points)


def generate_trajectory(env, profile, length, rng, group_id=0, margin=0.25, restarts=256):
    """One trajectory of ``length`` positions satisfying the profile's bounds."""
    if length < 2:
        raise ValueError("trajectory length must be >= 2")
    if profile.kind == "pedestrian":
        positions = _generate_pedestrian(env, profile, length, rng, margin)
        return Trajectory(positions, profile, group_id)
    for _ in range(restarts):
        positions = _generate_vehicle_once(env, profile, length, rng, margin)
        if positions is not None:
            return Trajectory(positions, profile, group_id)
    raise GenerationError(f"vehicle generation failed after {restarts} restarts")


def trajectory_rng(master_seed, index):
    """Random generator for one trajectory, independent of generation order."""
    return np.random.default_rng(np.random.SeedSequence((int(master_seed), int(index))))


def generate_trajectories(env, profile, count, length, master_seed, n_groups=20):
    """``count`` trajectories with contiguous group ids balanced over ``n_groups``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if n_groups < 1:
        raise ValueError("n_groups must be >= 1")
    n_groups = min(n_groups, count)
    out = []
    for i in range(count):
        group = i * n_groups // count
        out.append(generate_trajectory(env, profile, length, trajectory_rng(master_seed, i), group))
    return out


def mean_speed(trajectories):
    """Grand per-step average displacement (m/s at 1 Hz) over trajectories."""
    steps = np.concatenate(
        [np.linalg.norm(np.diff(t.positions, axis=0), axis=1) for t in trajectories]
    )
    return float(steps.mean())


def snap_to_grid(trajectory, env):
    """Nearest grid node (ix, iy) per position; half-pitch ties go to the
    lower index."""
    positions = np.asarray(trajectory.positions if isinstance(trajectory, Trajectory) else trajectory)
    px, py = env.grid_pitch
    rx = (positions[:, 0] - env.x_min) / px
    ry = (positions[:, 1] - env.y_min) / py
    ix = np.clip(np.ceil(rx - 0.5).astype(int), 0, env.grid_nx - 1)
    iy = np.clip(np.ceil(ry - 0.5).astype(int), 0, env.grid_ny - 1)
    return np.stack([ix, iy], axis=1)


def split_groups(trajectories, ratios=(0.8, 0.1, 0.1)):
    """Partition trajectories by group id into per-ratio splits.

    Whole groups are apportioned by largest remainder (never split across
    outputs), so the group-id sets of the returned splits are disjoint.
    """
    if any(r <= 0 for r in ratios):
        raise ConfigError("split ratios must be positive")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios)}")
    groups = sorted({t.group_id for t in trajectories})
    if len(groups) < len(ratios):
        raise ConfigError(f"need at least {len(ratios)} groups, got {len(groups)}")
    quotas = [r * len(groups) for r in ratios]
    counts = [int(q) for q in quotas]
    remainders = sorted(range(len(ratios)), key=lambda i: quotas[i] - counts[i], reverse=True)
    for i in remainders[: len(groups) - sum(counts)]:
        counts[i] += 1
    splits = []
    start = 0
    for c in counts:
        chosen = set(groups[start : start + c])
        splits.append([t for t in trajectories if t.group_id in chosen])
        start += c
    return tuple(splits)


def make_sequences(trajectories, t_obs, mode="position", dataset=None):
    """Stride-1 sliding windows of ``t_obs`` observed steps plus their futures.

    Returns (samples, skipped) where ``skipped`` counts trajectories shorter
    than t_obs + 1. In fingerprint mode each observed step carries the stored
    noisy fingerprint of its snapped grid node as a flat float vector.
    """
    if mode not in ("position", "fingerprint"):
        raise ValueError("mode must be position or fingerprint")
    if mode == "fingerprint" and dataset is None:
        raise ValueError("fingerprint mode needs a dataset")
    samples = []
    skipped = 0
    env_like = dataset
    for traj in trajectories:
        n = len(traj)
        if n < t_obs + 1:
            skipped += 1
            continue
        if mode == "fingerprint":
            nodes = _snap_to_dataset(traj.positions, env_like)
            indices = nodes[:, 1] * env_like.grid_nx + nodes[:, 0]
            feats = env_like.features(indices)
        for s in range(n - t_obs):
            samples.append(
                SequenceSample(
                    observed=traj.positions[s : s + t_obs],
                    target=traj.positions[s + t_obs],
                    rollout_targets=traj.positions[s + t_obs :],
                    group_id=traj.group_id,
                    kind=traj.profile.kind,
                    features=feats[s : s + t_obs] if mode == "fingerprint" else None,
                )
            )
    return samples, skipped


def _snap_to_dataset(positions, dataset):
    px = dataset.extent_x / (dataset.grid_nx - 1)
    py = dataset.extent_y / (dataset.grid_ny - 1)
    rx = (positions[:, 0] + dataset.extent_x / 2.0) / px
    ry = (positions[:, 1] + dataset.extent_y / 2.0) / py
    ix = np.clip(np.ceil(rx - 0.5).astype(int), 0, dataset.grid_nx - 1)
    iy = np.clip(np.ceil(ry - 0.5).astype(int), 0, dataset.grid_ny - 1)
    return np.stack([ix, iy], axis=1)


def save_trajectories(path, trajectories):
    lines = ["traj_id,group_id,kind,step,x,y"]
    for tid, traj in enumerate(trajectories):
        for step, (x, y) in enumerate(traj.positions):
            lines.append(f"{tid},{traj.group_id},{traj.profile.kind},{step},{float(x)!r},{float(y)!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_trajectories(path):
    """Read a trajectory CSV; profiles are rebuilt from the kind column with
    default parameters (the CSV stores geometry, not kinematic settings)."""
    by_id = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["traj_id", "group_id", "kind", "step", "x", "y"]
        if reader.fieldnames != expected:
            raise ConfigError(f"{path}: expected columns {expected}, got {reader.fieldnames}")
        for row in reader:
            rec = by_id.setdefault(int(row["traj_id"]), {"group": int(row["group_id"]),
                                                         "kind": row["kind"], "steps": []})
            rec["steps"].append((int(row["step"]), float(row["x"]), float(row["y"])))
    out = []
    for tid in sorted(by_id):
        rec = by_id[tid]
        rec["steps"].sort()
        positions = np.asarray([(x, y) for _, x, y in rec["steps"]])
        out.append(Trajectory(positions, profile_by_kind(rec["kind"]), rec["group"]))
    return out
