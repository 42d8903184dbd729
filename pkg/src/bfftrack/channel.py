"""Millimeter-wave downlink simulator on a 2-D rectangular area.

A fixed transmitter sounds the area through a codebook of directional beams.
For a receiver position, propagation paths (direct plus specular reflections
of order one and two off axis-aligned rectangular obstacles, via the image
method) are traced, accumulated into a uniformly sampled power delay profile
per beam, perturbed by log-normal shadowing, and thresholded into a binary
beam/delay fingerprint matrix.

Geometry conventions: the area is centered on the origin and spans
``[-extent_x/2, extent_x/2] x [-extent_y/2, extent_y/2]``; angles are radians
counterclockwise from the +x axis; a 1 m near-field clamp keeps the free-space
loss finite at tiny ranges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import DomainError

SPEED_OF_LIGHT = 299792458.0
_EPS = 1e-9


@dataclass
class Obstacle:
    """Axis-aligned rectangular blocker; reflections off any face lose
    ``reflection_loss_db`` decibels."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    reflection_loss_db: float = 12.0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(
                f"obstacle must have positive area, got x [{self.x_min}, {self.x_max}] "
                f"y [{self.y_min}, {self.y_max}]"
            )
        if self.reflection_loss_db < 0:
            raise ValueError("reflection loss must be >= 0 dB")

    def contains(self, p, margin=0.0):
        return (
            self.x_min - margin <= p[0] <= self.x_max + margin
            and self.y_min - margin <= p[1] <= self.y_max + margin
        )

    def strictly_contains(self, p):
        return self.x_min < p[0] < self.x_max and self.y_min < p[1] < self.y_max

    def faces(self):
        """Four (axis, coord, lo, hi, normal_sign, loss_db) tuples.

        ``axis`` 0 means a vertical face at x = coord spanning y in [lo, hi];
        ``axis`` 1 a horizontal face at y = coord spanning x in [lo, hi].
        ``normal_sign`` is the outward normal direction along ``axis``.
        """
        return [
            (0, self.x_min, self.y_min, self.y_max, -1.0, self.reflection_loss_db),
            (0, self.x_max, self.y_min, self.y_max, +1.0, self.reflection_loss_db),
            (1, self.y_min, self.x_min, self.x_max, -1.0, self.reflection_loss_db),
            (1, self.y_max, self.x_min, self.x_max, +1.0, self.reflection_loss_db),
        ]


@dataclass
class Environment:
    extent_x: float = 128.0
    extent_y: float = 128.0
    grid_nx: int = 101
    grid_ny: int = 101
    tx_position: tuple = (0.0, 0.0)
    obstacles: list = field(default_factory=list)
    carrier_freq: float = 28e9
    rng_seed: int = 0

    def __post_init__(self):
        if self.extent_x <= 0 or self.extent_y <= 0:
            raise ValueError("extent must be positive")
        if self.grid_nx < 2 or self.grid_ny < 2:
            raise ValueError("grid must be at least 2x2")
        if self.carrier_freq <= 0:
            raise ValueError("carrier frequency must be positive")
        tx = np.asarray(self.tx_position, dtype=np.float64)
        self.tx_position = (float(tx[0]), float(tx[1]))
        if not self.contains(tx):
            raise ValueError(f"transmitter {self.tx_position} outside the area")
        for obs in self.obstacles:
            if obs.contains(tx):
                raise ValueError(f"transmitter {self.tx_position} inside an obstacle")

    @property
    def x_min(self):
        return -self.extent_x / 2.0

    @property
    def x_max(self):
        return self.extent_x / 2.0

    @property
    def y_min(self):
        return -self.extent_y / 2.0

    @property
    def y_max(self):
        return self.extent_y / 2.0

    def contains(self, p):
        return self.x_min <= p[0] <= self.x_max and self.y_min <= p[1] <= self.y_max

    def grid_xs(self):
        return np.linspace(self.x_min, self.x_max, self.grid_nx)

    def grid_ys(self):
        return np.linspace(self.y_min, self.y_max, self.grid_ny)

    @property
    def grid_pitch(self):
        return (
            self.extent_x / (self.grid_nx - 1),
            self.extent_y / (self.grid_ny - 1),
        )


def default_environment(**over):
    """Desk-scale area: 128 m square, 101x101 grid, three blockers."""
    params = dict(
        obstacles=[
            Obstacle(-40.0, -22.0, -8.0, 28.0),
            Obstacle(12.0, 38.0, 14.0, 42.0),
            Obstacle(6.0, 46.0, -44.0, -18.0),
        ]
    )
    params.update(over)
    return Environment(**params)


@dataclass
class SounderConfig:
    bandwidth_b: float = 100e6
    sample_interval_ts: float = 10e-9
    max_excess_delay_t: float = 640e-9
    n_samples_ns: int = 64
    sounding_amplitude_s: float = math.sqrt(1000.0)
    max_rx_power_cap_dbm: float = 30.0
    threshold_eta_dbm: float = -100.0
    floor_dbm: float = -200.0

    def __post_init__(self):
        if self.sample_interval_ts <= 0 or self.max_excess_delay_t <= 0:
            raise ValueError("sampling times must be positive")
        expected = round(self.max_excess_delay_t / self.sample_interval_ts)
        if self.n_samples_ns != expected or self.n_samples_ns < 1:
            raise ValueError(
                f"n_samples_ns={self.n_samples_ns} inconsistent with "
                f"round(T/Ts)={expected}"
            )
        if not self.threshold_eta_dbm < self.max_rx_power_cap_dbm:
            raise ValueError("threshold must lie below the power cap")
        if not self.floor_dbm < self.threshold_eta_dbm:
            raise ValueError("floor sentinel must lie below the threshold")


@dataclass
class BeamPattern:
    boresight: float
    beamwidth: float
    mainlobe_gain_db: float = 0.0
    sidelobe_gain_db: float = -20.0

    def __post_init__(self):
        if not 0 < self.beamwidth <= 2 * math.pi:
            raise ValueError("beamwidth must be in (0, 2*pi]")
        if not self.mainlobe_gain_db > self.sidelobe_gain_db:
            raise ValueError("mainlobe gain must exceed sidelobe gain")

    def gain_db(self, angle):
        diff = (angle - self.boresight + math.pi) % (2 * math.pi) - math.pi
        if abs(diff) <= self.beamwidth / 2.0:
            return self.mainlobe_gain_db
        return self.sidelobe_gain_db


@dataclass
class Codebook:
    beams: list

    def __post_init__(self):
        if len(self.beams) < 1:
            raise ValueError("codebook needs at least one beam")

    @property
    def m(self):
        return len(self.beams)


def uniform_codebook(m=8, mainlobe_gain_db=0.0, sidelobe_gain_db=-20.0, beamwidth=None):
    """M beams with boresights evenly covering [0, 2*pi)."""
    if m < 1:
        raise ValueError("codebook needs at least one beam")
    width = (2 * math.pi / m) if beamwidth is None else beamwidth
    return Codebook(
        [
            BeamPattern(2 * math.pi * i / m, width, mainlobe_gain_db, sidelobe_gain_db)
            for i in range(m)
        ]
    )


@dataclass
class PropagationPath:
    delay: float
    departure_angle: float
    path_gain_db: float
    bounce_count: int


@dataclass
class PowerDelayProfile:
    """Sampled received power per delay bin (dBm) for one beam.

    Bins with no contributing path hold ``floor_dbm``; ``n_dropped`` counts
    paths whose delay fell beyond the sampling window.
    """

    samples: np.ndarray
    n_dropped: int = 0
    floor_dbm: float = -200.0
    cap_dbm: float = 30.0


@dataclass
class FingerprintMatrix:
    bits: np.ndarray
    position: np.ndarray


def fspl_db(distance, carrier_freq):
    """Free-space path loss, clamped to the far field at 1 m."""
    d = max(float(distance), 1.0)
    lam = SPEED_OF_LIGHT / carrier_freq
    return 20.0 * math.log10(4.0 * math.pi * d / lam)


def segment_blocked(p, q, obstacles):
    """True when the open segment p-q passes through any obstacle interior.

    Endpoints are pulled in by a nanometer so segments that merely touch a
    face (reflection points, wall-adjacent nodes) do not count as blocked.
    """
    px, py = float(p[0]), float(p[1])
    dx, dy = float(q[0]) - px, float(q[1]) - py
    length = math.hypot(dx, dy)
    if length <= 2 * _EPS:
        return False
    shrink = _EPS / length
    for obs in obstacles:
        lo, hi = shrink, 1.0 - shrink
        ok = True
        for origin, delta, a_min, a_max in (
            (px, dx, obs.x_min, obs.x_max),
            (py, dy, obs.y_min, obs.y_max),
        ):
            if abs(delta) < 1e-15:
                if origin < a_min or origin > a_max:
                    ok = False
                    break
                continue
            ta = (a_min - origin) / delta
            tb = (a_max - origin) / delta
            if ta > tb:
                ta, tb = tb, ta
            lo = max(lo, ta)
            hi = min(hi, tb)
            if lo > hi:
                ok = False
                break
        if not ok or hi - lo <= 1e-12:
            continue
        tm = 0.5 * (lo + hi)
        mx, my = px + tm * dx, py + tm * dy
        if obs.x_min + 1e-12 < mx < obs.x_max - 1e-12 and obs.y_min + 1e-12 < my < obs.y_max - 1e-12:
            return True
    return False


def _mirror(point, face):
    axis, coord = face[0], face[1]
    out = [float(point[0]), float(point[1])]
    out[axis] = 2.0 * coord - out[axis]
    return out


def _hit_face(src, dst, face):
    """Reflection point where the segment src-dst crosses the face, or None."""
    axis, coord, lo, hi = face[0], face[1], face[2], face[3]
    denom = dst[axis] - src[axis]
    if abs(denom) < 1e-15:
        return None
    t = (coord - src[axis]) / denom
    if not (_EPS < t < 1.0 - _EPS):
        return None
    other = 1 - axis
    val = src[other] + t * (dst[other] - src[other])
    if not (lo - _EPS <= val <= hi + _EPS):
        return None
    point = [0.0, 0.0]
    point[axis] = coord
    point[other] = val
    return point


def _outward(face, point, ref):
    """True when ``ref`` lies on the outward side of the face at ``point``."""
    axis, _, _, _, normal_sign, _ = face
    return (ref[axis] - point[axis]) * normal_sign > _EPS


def _distance(p, q):
    return math.hypot(q[0] - p[0], q[1] - p[1])


def trace_paths(env: Environment, rx):
    """Direct plus order-1/2 specular paths from the transmitter to ``rx``.

    Returns paths sorted by delay. A receiver strictly inside an obstacle is
    in deep shadow and yields no paths; a receiver outside the area is a
    domain error. A receiver coincident with the transmitter gets the direct
    path at zero delay with near-field-clamped gain.
    """
    rx = (float(rx[0]), float(rx[1]))
    if not env.contains(rx):
        raise DomainError(f"receiver {rx} outside the area")
    for obs in env.obstacles:
        if obs.strictly_contains(rx):
            return []
    tx = env.tx_position
    obstacles = env.obstacles
    faces = [f for obs in obstacles for f in obs.faces()]
    paths = []

    if not segment_blocked(tx, rx, obstacles):
        d = _distance(tx, rx)
        angle = math.atan2(rx[1] - tx[1], rx[0] - tx[0]) if d > 0 else 0.0
        paths.append(PropagationPath(d / SPEED_OF_LIGHT, angle, -fspl_db(d, env.carrier_freq), 0))

    for f1 in faces:
        img1 = _mirror(tx, f1)
        p1 = _hit_face(img1, rx, f1)
        if p1 is None or not (_outward(f1, p1, tx) and _outward(f1, p1, rx)):
            continue
        if segment_blocked(tx, p1, obstacles) or segment_blocked(p1, rx, obstacles):
            continue
        d = _distance(img1, rx)
        gain = -fspl_db(d, env.carrier_freq) - f1[5]
        if not math.isfinite(gain):
            continue
        angle = math.atan2(p1[1] - tx[1], p1[0] - tx[0])
        paths.append(PropagationPath(d / SPEED_OF_LIGHT, angle, gain, 1))

    for f1 in faces:
        img1 = _mirror(tx, f1)
        for f2 in faces:
            if f2 is f1:
                continue
            img2 = _mirror(img1, f2)
            p2 = _hit_face(img2, rx, f2)
            if p2 is None or not _outward(f2, p2, rx):
                continue
            p1 = _hit_face(img1, p2, f1)
            if p1 is None:
                continue
            if not (_outward(f1, p1, tx) and _outward(f1, p1, p2) and _outward(f2, p2, p1)):
                continue
            if (
                segment_blocked(tx, p1, obstacles)
                or segment_blocked(p1, p2, obstacles)
                or segment_blocked(p2, rx, obstacles)
            ):
                continue
            d = _distance(img2, rx)
            gain = -fspl_db(d, env.carrier_freq) - f1[5] - f2[5]
            if not math.isfinite(gain):
                continue
            angle = math.atan2(p1[1] - tx[1], p1[0] - tx[0])
            paths.append(PropagationPath(d / SPEED_OF_LIGHT, angle, gain, 2))

    paths.sort(key=lambda p: p.delay)
    return paths


def compute_pdp(paths, beam: BeamPattern, cfg: SounderConfig):
    """Accumulate path powers into uniformly spaced delay bins for one beam.

    Each path lands in bin round(delay/Ts) with linear power
    s^2 * 10^((path gain + beam gain)/10) (milliwatts); same-bin paths add in
    the linear domain, the result is expressed in dBm and capped. Paths past
    the sampling window are dropped and counted.
    """
    n = cfg.n_samples_ns
    linear = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    dropped = 0
    for path in paths:
        j = round(path.delay / cfg.sample_interval_ts)
        if j >= n or path.delay > cfg.max_excess_delay_t:
            dropped += 1
            continue
        gain = path.path_gain_db + beam.gain_db(path.departure_angle)
        linear[j] += cfg.sounding_amplitude_s**2 * 10.0 ** (gain / 10.0)
        hit[j] = True
    samples = np.full(n, cfg.floor_dbm)
    nonzero = hit & (linear > 0.0)
    samples[nonzero] = np.minimum(10.0 * np.log10(linear[nonzero]), cfg.max_rx_power_cap_dbm)
    return PowerDelayProfile(samples, dropped, cfg.floor_dbm, cfg.max_rx_power_cap_dbm)


def apply_shadowing(pdp: PowerDelayProfile, shift_db: float):
    """Shift every non-floor bin by ``shift_db`` and re-apply the power cap."""
    samples = pdp.samples.copy()
    active = samples != pdp.floor_dbm
    samples[active] = np.minimum(samples[active] + shift_db, pdp.cap_dbm)
    return PowerDelayProfile(samples, pdp.n_dropped, pdp.floor_dbm, pdp.cap_dbm)


def add_shadowing(pdp: PowerDelayProfile, sigma_db: float, rng):
    """Perturb one profile with a single zero-mean log-normal (dB) draw."""
    if sigma_db < 0:
        raise DomainError(f"shadowing sigma must be >= 0, got {sigma_db}")
    if sigma_db == 0:
        return apply_shadowing(pdp, 0.0)
    return apply_shadowing(pdp, float(rng.normal(0.0, sigma_db)))


def binarize(pdp: PowerDelayProfile, eta_dbm: float):
    """Indicator row: bit j is 1 exactly when sample j is at or above eta."""
    return (pdp.samples >= eta_dbm).astype(np.uint8)


def fingerprint(env, cfg, codebook, rx, rng, shadow_sigma_db=6.0):
    """Binary M x N_s fingerprint for one receiver position.

    One shadowing value is drawn per call and shared by every beam, so the
    beams of one realization stay correlated the way large-scale fading is.
    """
    if shadow_sigma_db < 0:
        raise DomainError(f"shadowing sigma must be >= 0, got {shadow_sigma_db}")
    paths = trace_paths(env, rx)
    shift = float(rng.normal(0.0, shadow_sigma_db)) if shadow_sigma_db > 0 else 0.0
    rows = []
    for beam in codebook.beams:
        pdp = apply_shadowing(compute_pdp(paths, beam, cfg), shift)
        rows.append(binarize(pdp, cfg.threshold_eta_dbm))
    return FingerprintMatrix(np.vstack(rows), np.asarray(rx, dtype=np.float64))
