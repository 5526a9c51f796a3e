"""Kinematic bicycle model and synthetic BSM trace generation.

Frame: road-aligned, x along the lane, y to the left, heading measured
counter-clockwise from the road direction. Lateral position of a trace is
relative to the center of the lane the vehicle starts in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .signals import SAMPLE_INTERVAL, TraceRecord

G = 9.81
MAX_LAT_ACCEL = 0.2 * G
MIN_JERK_PEAK = 10.0 / math.sqrt(3.0)  # peak |s''| of 10t^3 - 15t^4 + 6t^5
STEERING_RATIO = 15.0
DURATION_ENVELOPE = (3.5, 8.5)


class ManeuverError(ValueError):
    pass


@dataclass(frozen=True)
class KinematicVehicle:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0
    v: float = 0.0
    phi: float = 0.0
    L: float = 5.0


def _deriv(state: np.ndarray, v: float, phi: float, L: float) -> np.ndarray:
    theta = state[2]
    return np.array([v * math.cos(theta), v * math.sin(theta), v / L * math.tan(phi)])


def kinematic_step(kv: KinematicVehicle, dt: float = SAMPLE_INTERVAL) -> KinematicVehicle:
    """Advance the bicycle model one step with RK4, holding v and phi."""
    if abs(kv.phi) >= math.pi / 2:
        raise ValueError(f"steering angle {kv.phi} rad outside (-pi/2, pi/2)")
    s = np.array([kv.x, kv.y, kv.theta])
    k1 = _deriv(s, kv.v, kv.phi, kv.L)
    k2 = _deriv(s + 0.5 * dt * k1, kv.v, kv.phi, kv.L)
    k3 = _deriv(s + 0.5 * dt * k2, kv.v, kv.phi, kv.L)
    k4 = _deriv(s + dt * k3, kv.v, kv.phi, kv.L)
    s = s + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return replace(kv, x=float(s[0]), y=float(s[1]), theta=float(s[2]))


def min_jerk(tau: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Minimum-jerk progress s(tau) on [0, 1] and its first two derivatives."""
    t = np.clip(tau, 0.0, 1.0)
    s = 10 * t**3 - 15 * t**4 + 6 * t**5
    ds = 30 * t**2 - 60 * t**3 + 30 * t**4
    dds = 60 * t - 180 * t**2 + 120 * t**3
    inside = (tau >= 0) & (tau <= 1)
    return s, np.where(inside, ds, 0.0), np.where(inside, dds, 0.0)


def min_feasible_duration(lane_width: float, max_lat_accel: float = MAX_LAT_ACCEL) -> float:
    return math.sqrt(MIN_JERK_PEAK * lane_width / max_lat_accel)


# progress thresholds separating intention / preparation / transition / completion
PHASE_PROGRESS = (0.02, 0.15, 0.85)


def maneuver_phases(duration: float) -> List[Tuple[str, float, float]]:
    """Phase intervals (name, start, end) in seconds from maneuver start."""
    grid = np.linspace(0.0, 1.0, 20001)
    s, _, _ = min_jerk(grid)
    cuts = [0.0] + [float(grid[np.searchsorted(s, p)]) * duration for p in PHASE_PROGRESS] + [duration]
    names = ("intention", "preparation", "transition", "completion")
    return [(n, a, b) for n, a, b in zip(names, cuts[:-1], cuts[1:])]


@dataclass
class _Noise:
    steer: float = 2e-4  # rad, road-wheel process noise (AR(1))
    steer_corr: float = 0.9
    position: float = 0.03  # m
    speed: float = 0.02  # m/s
    heading: float = 0.002  # rad
    yaw_rate: float = 0.002  # rad/s
    accel: float = 0.02  # m/s^2
    swa: float = 0.3  # deg


def _simulate(
    n_steps: int,
    v0: float,
    lateral_ref,
    rng: np.random.Generator,
    noise: _Noise,
    accel_profile: Optional[np.ndarray] = None,
    curvature: float = 0.0,
    length: float = 5.0,
    width: float = 1.8,
    dt: float = SAMPLE_INTERVAL,
) -> Tuple[List[TraceRecord], dict]:
    """Drive the bicycle model along a lateral reference and sample BSMs.

    ``lateral_ref(t)`` returns (y, y', y'') of the desired lateral offset in
    the road frame. With nonzero ``curvature`` the road is a circular arc and
    the sampled x/y are projected back into the road-aligned frame.
    Returns the records and the noise-free lateral offset and lateral
    acceleration.
    """
    kv = KinematicVehicle(v=v0, L=length)
    steer_noise = 0.0
    radius = 1.0 / curvature if curvature else None
    records: List[TraceRecord] = []
    lat_acc = np.zeros(n_steps)
    lat_true = np.zeros(n_steps)
    speeds = np.full(n_steps + 1, v0)
    if accel_profile is not None:
        speeds[1:] = v0 + np.cumsum(accel_profile[:n_steps]) * dt
        speeds = np.maximum(speeds, 0.5)
    for k in range(n_steps):
        t = k * dt
        # road-frame pose
        if radius is None:
            s_pos, d_pos, rel_heading = kv.x, kv.y, kv.theta
        else:
            dx, dy = kv.x, kv.y - radius
            ang = math.atan2(dx, -dy) if radius > 0 else math.atan2(dx, dy)
            dist = math.hypot(dx, dy)
            s_pos = abs(radius) * ang
            d_pos = (abs(radius) - dist) * math.copysign(1.0, radius)
            rel_heading = kv.theta - ang * math.copysign(1.0, radius)
        y_ref, dy_ref, ddy_ref = lateral_ref(t)
        v = max(kv.v, 0.5)
        head_ref = math.asin(np.clip(dy_ref / v, -0.5, 0.5))
        yaw_ff = ddy_ref / (v * math.cos(head_ref)) + v * curvature
        heading_cmd = head_ref + 0.8 * (y_ref - d_pos) / v
        yaw_cmd = yaw_ff + 2.5 * (heading_cmd - rel_heading)
        steer_noise = noise.steer_corr * steer_noise + noise.steer * math.sqrt(
            1 - noise.steer_corr**2
        ) * rng.standard_normal()
        phi = math.atan(length * yaw_cmd / v) + steer_noise
        kv = replace(kv, phi=phi, v=float(speeds[k]))
        yaw_rate = kv.v / length * math.tan(phi)
        accel = (speeds[k + 1] - speeds[k]) / dt
        lat_acc[k] = kv.v * (yaw_rate - (v * curvature if radius else 0.0))
        lat_true[k] = d_pos
        records.append(
            TraceRecord(
                timestamp=round(t, 10),
                longitudinal_pos=s_pos + noise.position * rng.standard_normal(),
                lateral_pos=d_pos + noise.position * rng.standard_normal(),
                elevation=0.0,
                speed=max(0.0, kv.v + noise.speed * rng.standard_normal()),
                heading=kv.theta + noise.heading * rng.standard_normal(),
                steering_wheel_angle=math.degrees(phi) * STEERING_RATIO
                + noise.swa * rng.standard_normal(),
                yaw_rate=yaw_rate + noise.yaw_rate * rng.standard_normal(),
                accel_long=accel + noise.accel * rng.standard_normal(),
                accel_lat=kv.v * yaw_rate + noise.accel * rng.standard_normal(),
                accel_vert=noise.accel * rng.standard_normal(),
                vehicle_length=length,
                vehicle_width=width,
            )
        )
        kv = kinematic_step(kv, dt)
    return records, {"lateral": lat_true, "lat_accel": lat_acc}


def generate_lane_change(
    duration: float,
    v: float,
    lane_width: float = 3.7,
    seed: int = 0,
    direction: int = 1,
    pre_time: float = 3.0,
    post_time: float = 2.0,
    accel_std: float = 0.0,
    noise: Optional[_Noise] = None,
    return_truth: bool = False,
):
    """Synthetic four-phase lane change sampled at 10 Hz.

    The lateral reference follows a minimum-jerk profile across one lane
    width; a steering feedback loop tracks it through ``kinematic_step``
    with small correlated steering noise. The maneuver starts at
    ``pre_time`` after ``pre_time`` seconds of lane keeping and is followed
    by ``post_time`` seconds of lane keeping in the target lane.

    With ``return_truth`` the noise-free lateral offset and lateral
    acceleration are returned as well.
    """
    lo, hi = DURATION_ENVELOPE
    d_min = min_feasible_duration(lane_width)
    if duration < d_min:
        raise ManeuverError(
            f"duration {duration:.2f} s violates the 0.2 g lateral limit for a "
            f"{lane_width} m lane; minimum feasible duration is {d_min:.2f} s"
        )
    if not lo - 1e-9 <= duration <= hi + 1e-9:
        raise ManeuverError(f"duration {duration} s outside the {lo}-{hi} s envelope")
    if direction not in (-1, 1):
        raise ValueError("direction must be +1 or -1")
    rng = np.random.default_rng(seed)
    noise = _Noise() if noise is None else noise
    amp = direction * lane_width

    def lateral_ref(t):
        tau = (t - pre_time) / duration
        s, ds, dds = min_jerk(np.array(tau))
        return amp * float(s), amp * float(ds) / duration, amp * float(dds) / duration**2

    n = int(round((pre_time + duration + post_time) / SAMPLE_INTERVAL)) + 1
    accel = rng.normal(0.0, accel_std, n) if accel_std > 0 else None
    if accel is not None:
        accel = _smooth_noise(accel, 20)
    records, truth = _simulate(n, v, lateral_ref, rng, noise, accel_profile=accel)
    return (records, truth) if return_truth else records


def generate_road_trace(
    duration: float,
    v: float,
    curvature: float = 0.0,
    seed: int = 0,
    accel_std: float = 0.0,
    noise: Optional[_Noise] = None,
) -> List[TraceRecord]:
    """Lane keeping on a straight road or a constant-curvature arc."""
    rng = np.random.default_rng(seed)
    noise = _Noise() if noise is None else noise
    n = int(round(duration / SAMPLE_INTERVAL)) + 1
    accel = _smooth_noise(rng.normal(0.0, accel_std, n), 20) if accel_std > 0 else None
    records, _ = _simulate(
        n, v, lambda t: (0.0, 0.0, 0.0), rng, noise, accel_profile=accel, curvature=curvature
    )
    return records


def _smooth_noise(x: np.ndarray, width: int) -> np.ndarray:
    kernel = np.ones(width) / math.sqrt(width)
    return np.convolve(x, kernel, mode="same")


def generate_corpus(
    n_maneuvers: int = 90,
    seed: int = 0,
    n_straight: Optional[int] = None,
    n_curved: Optional[int] = None,
    lane_width: float = 3.7,
) -> List[Tuple[str, List[TraceRecord]]]:
    """Named traces: lane changes plus straight and curved lane keeping.

    The road traces give the lateral model examples of steering that is not
    a lane change.
    """
    if n_maneuvers < 1:
        raise ValueError("n_maneuvers must be at least 1")
    rng = np.random.default_rng(seed)
    n_straight = max(1, n_maneuvers // 6) if n_straight is None else n_straight
    n_curved = max(1, n_maneuvers // 6) if n_curved is None else n_curved
    out = []
    for i in range(n_maneuvers):
        dur = float(rng.triangular(3.5, 5.5, 8.5))
        v = float(rng.uniform(20.0, 32.0))
        rec = generate_lane_change(
            round(dur, 2),
            v,
            lane_width,
            seed=int(rng.integers(2**31)),
            direction=int(rng.choice([-1, 1])),
            pre_time=round(float(rng.uniform(2.5, 5.0)), 1),
            post_time=round(float(rng.uniform(1.5, 3.0)), 1),
            accel_std=0.3,
        )
        out.append((f"lane_change_{i:03d}", rec))
    for i in range(n_straight):
        rec = generate_road_trace(
            float(rng.uniform(8.0, 14.0)), float(rng.uniform(20.0, 32.0)), 0.0,
            seed=int(rng.integers(2**31)), accel_std=0.3,
        )
        out.append((f"straight_{i:03d}", rec))
    for i in range(n_curved):
        radius = float(rng.uniform(300.0, 900.0)) * float(rng.choice([-1, 1]))
        rec = generate_road_trace(
            float(rng.uniform(8.0, 14.0)), float(rng.uniform(20.0, 30.0)), 1.0 / radius,
            seed=int(rng.integers(2**31)), accel_std=0.3,
        )
        out.append((f"curve_{i:03d}", rec))
    return out
