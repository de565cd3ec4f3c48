"""Simulated 2D range scanner and the world it measures.

Scans store one range per beam; beams with no return inside the sensor range
carry NaN.  A swept scan stamps each beam at its own emission time and casts
it from the pose the robot occupied then, which is what makes scan-time
motion compensation meaningful downstream.
"""

from dataclasses import dataclass, field

import numpy as np

from .geometry import _as_point


@dataclass
class World:
    """Static obstacle set inside rectangular bounds (xmin, ymin, xmax, ymax)."""

    obstacles: list
    bounds: tuple = (-20.0, -20.0, 20.0, 20.0)

    def __post_init__(self):
        xmin, ymin, xmax, ymax = self.bounds
        if not (xmin < xmax and ymin < ymax):
            raise ValueError(f"degenerate world bounds {self.bounds}")
        for obs in self.obstacles:
            cx, cy = obs.center
            if not (xmin <= cx <= xmax and ymin <= cy <= ymax):
                raise ValueError(f"obstacle center ({cx}, {cy}) outside bounds")

    def inside(self, p):
        xmin, ymin, xmax, ymax = self.bounds
        return xmin <= p[0] <= xmax and ymin <= p[1] <= ymax


@dataclass
class LidarConfig:
    """Scanner parameters: beam spacing, range cutoff, sweep rate, field of view."""

    angular_resolution: float = np.deg2rad(1.0)
    max_range: float = 5.0
    rate: float = 5.0
    fov: float = 2.0 * np.pi

    @property
    def n_beams(self):
        return int(np.floor(self.fov / self.angular_resolution + 1e-9))

    @property
    def sweep_duration(self):
        return 1.0 / self.rate


@dataclass
class Scan:
    """One sweep: per-beam ranges with NaN marking no return.

    Beam k points at angle_start + k * angle_increment and was emitted at
    stamp + k / n * sweep_duration.
    """

    stamp: float
    angle_start: float
    angle_increment: float
    ranges: np.ndarray
    sweep_duration: float = 0.0
    origins: np.ndarray = field(default=None, repr=False)

    @property
    def n_beams(self):
        return len(self.ranges)

    def beam_angles(self):
        return self.angle_start + self.angle_increment * np.arange(self.n_beams)

    def beam_stamps(self):
        return self.stamp + self.sweep_duration * np.arange(self.n_beams) / self.n_beams


def _cast_all(world, origins, angles, max_range):
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    dist = np.full(len(angles), np.inf)
    for obs in world.obstacles:
        dist = np.minimum(dist, obs.ray_distances(origins, dirs))
    ranges = np.where(dist <= max_range, dist, np.nan)
    return ranges


def simulate_scan(world, position, heading, config, stamp):
    """Instantaneous sweep from a single pose.

    Every finite range lies in (0, max_range]; misses are NaN.  The pose must
    be inside the world bounds.
    """
    position = _as_point(position)
    if not world.inside(position):
        raise ValueError(f"scan pose {position.tolist()} outside world bounds")
    angles = heading + config.angular_resolution * np.arange(config.n_beams)
    ranges = _cast_all(world, position[None, :], angles, config.max_range)
    return Scan(stamp=stamp, angle_start=heading,
                angle_increment=config.angular_resolution, ranges=ranges,
                sweep_duration=0.0, origins=np.broadcast_to(position, (config.n_beams, 2)).copy())


def simulate_swept_scan(world, positions, heading, config, stamp):
    """Sweep where beam k is cast from positions[k], its pose at emission time.

    positions is (n_beams, 2); the caller supplies the robot path sampled at
    the per-beam stamps.  All poses must be inside the world bounds.
    """
    positions = np.asarray(positions, dtype=float)
    if positions.shape != (config.n_beams, 2):
        raise ValueError(f"need one pose per beam, got {positions.shape}")
    xmin, ymin, xmax, ymax = world.bounds
    if (positions[:, 0].min() < xmin or positions[:, 0].max() > xmax
            or positions[:, 1].min() < ymin or positions[:, 1].max() > ymax):
        raise ValueError("swept scan pose leaves world bounds")
    angles = heading + config.angular_resolution * np.arange(config.n_beams)
    ranges = _cast_all(world, positions, angles, config.max_range)
    return Scan(stamp=stamp, angle_start=heading,
                angle_increment=config.angular_resolution, ranges=ranges,
                sweep_duration=config.sweep_duration, origins=positions.copy())


def scan_point_position(length, angle, robot_position):
    """World position of a return: robot + length * (cos angle, sin angle).

    Rejects NaN lengths; a missing return must never enter geometry.
    """
    if not np.isfinite(length):
        raise ValueError("cannot place a beam with no return")
    robot_position = _as_point(robot_position)
    return robot_position + length * np.array([np.cos(angle), np.sin(angle)])
