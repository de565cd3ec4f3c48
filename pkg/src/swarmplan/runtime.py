"""Per-agent receding-horizon loop and the timestamped message bus.

Each agent runs the same ordered cycle at the planning rate: read its own
state from the ideal tracker, process any finished LiDAR sweep into staged
shapes, fold previously staged shapes into the local map and rebuild the
moving obstacle volume along the old plan, drain peer broadcasts into
anonymous tracks, grow/contract/deflate the safe regions, replan with the
fallback ladder, and commit the result.  Shape staging (stage 2) and map
folding (stage 3) touch disjoint state so their order within a cycle does
not change the outcome.

Agents never see each other directly: coordination happens only through
`MessageBus`, which delivers anonymous kinematic payloads with configurable
latency and drop probability, deterministically for a given seed.
"""

import time
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

from .bspline import plan_knot_layout
from .perception import (LocalMap, PerceptionConfig, build_moving_volume,
                         classify_cluster, compensate_motion,
                         decompose_boundary, segment_scan)
from .planner import (PlanRequest, Weights, _tightest_accel_bound,
                      admit_obstacles, constant_spline, end_time_heuristic,
                      plan_with_fallback)
from .prediction import (PeerState, PredictionConfig, footprint_from_size,
                         update_tracks)
from .regions import RegionConfig, build_safe_regions
from .sensor import LidarConfig

__all__ = [
    "AgentConfig", "AgentState", "Agent", "BusMessage", "MessageBus",
    "CycleReport", "ExecutedPath", "ideal_track", "broadcast",
    "symmetric_limits",
]


def _comfortable_arrival(start, goal, limits, t_segment):
    """Relaxed travel time: cruise at half the velocity cap plus ramp time.

    Falls back to twice the dynamics-based estimate when no velocity bound
    is configured; never shorter than two knot segments.
    """
    d = float(np.linalg.norm(goal - start))
    a_max = _tightest_accel_bound(limits)
    v_max = np.inf
    if 1 in limits:
        lo, hi = limits[1]
        vals = np.abs(np.concatenate([np.atleast_1d(lo), np.atleast_1d(hi)]))
        vals = vals[np.isfinite(vals)]
        if len(vals):
            v_max = float(vals.min())
    if np.isfinite(v_max):
        T = d / (0.5 * v_max) + v_max / a_max
    else:
        rest = np.zeros((2, 2))
        rest[0] = start
        T = 2.0 * end_time_heuristic(rest, goal, a_max, t_segment)
    return max(T, 2.0 * t_segment)


def symmetric_limits(bounds):
    """Expand {order: b} scalars into {order: ((-b, -b), (b, b))} boxes.

    Tuples/arrays pass through untouched, so mixed forms are fine.
    """
    out = {}
    for order, b in bounds.items():
        if np.isscalar(b):
            b = float(b)
            out[order] = (np.array([-b, -b]), np.array([b, b]))
        else:
            lo, hi = b
            out[order] = (np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))
    return out


@dataclass
class AgentConfig:
    """Static per-agent parameters: dynamics order, body size, rates, tuning."""

    order: int = 2
    footprint_size: tuple = (0.3,)
    limits: dict = field(default_factory=lambda: symmetric_limits({1: 2.0, 2: 4.0}))
    plan_rate: float = 25.0
    broadcast_rate: float = 10.0
    lidar: LidarConfig = field(default_factory=LidarConfig)
    weights: Weights = field(default_factory=Weights)
    t_h: float = 4.0
    tau: float = 0.1
    t_segment: float = 1.0
    perception: PerceptionConfig = field(default_factory=PerceptionConfig)
    prediction: PredictionConfig = field(default_factory=PredictionConfig)
    region: RegionConfig = field(default_factory=RegionConfig)

    def __post_init__(self):
        if self.plan_rate <= 0:
            raise ValueError("plan_rate must be positive")
        if self.order < 1:
            raise ValueError("integrator order must be at least 1")
        if abs(self.tau * round(self.t_h / self.tau) - self.t_h) > 1e-9:
            raise ValueError(f"tau {self.tau} must divide the horizon {self.t_h}")
        self.footprint_size = tuple(float(v) for v in np.atleast_1d(self.footprint_size))
        if not 1 <= len(self.footprint_size) <= 3:
            raise ValueError("footprint_size needs 1..3 lengths")


@dataclass
class AgentState:
    """Snapshot of one agent: stamp plus derivative orders 0..n-1, each (2,)."""

    stamp: float
    derivatives: np.ndarray

    def __post_init__(self):
        self.derivatives = np.atleast_2d(np.asarray(self.derivatives, dtype=float))
        if not np.all(np.isfinite(self.derivatives)):
            raise ValueError("agent state must be finite")

    @property
    def position(self):
        return self.derivatives[0]


def ideal_track(trajectory, t_from, t_to, n_orders=None):
    """State reached by executing the trajectory exactly from t_from to t_to.

    Perfect tracking: the state is simply the trajectory's derivative stack
    at t_to.  Past the domain end the robot has run out of plan and holds
    position: the state is the final point with zero derivatives.  Reads
    before the domain start are rejected.
    """
    lo, hi = trajectory.domain
    if t_to < t_from - 1e-12:
        raise ValueError(f"cannot track backwards from {t_from} to {t_to}")
    for t in (t_from, t_to):
        if t < lo - 1e-9:
            raise ValueError(f"t={t} precedes trajectory domain start {lo}")
    if n_orders is None:
        n_orders = trajectory.degree - 1
    if t_to > hi + 1e-9:
        derivs = np.zeros((n_orders, 2))
        derivs[0] = trajectory.position(hi)
        return AgentState(stamp=t_to, derivatives=derivs)
    t_to = trajectory.clamp_time(t_to)
    return AgentState(stamp=t_to, derivatives=trajectory.state_stack(t_to, n_orders))


# --- message bus ------------------------------------------------------------

@dataclass
class BusMessage:
    """One logged broadcast: anonymous payload plus delivery metadata.

    `sender` is transport routing only (a robot must not receive its own
    broadcast); it is never exposed to consumers, which see just the payload.
    """

    payload: PeerState
    send_stamp: float
    delivery_stamp: float
    dropped: bool
    sender: int
    seq: int

    def __post_init__(self):
        if self.delivery_stamp < self.send_stamp:
            raise ValueError("delivery cannot precede sending")


class MessageBus:
    """Append-only broadcast log with per-consumer delivery cursors.

    Constant latency keeps delivery order equal to send order, so a cursor
    index per consumer suffices.  Drops are decided at send time from the
    bus RNG, making delivery deterministic for a given seed.
    """

    def __init__(self, latency=0.0, drop_probability=0.0, rng=None):
        if latency < 0:
            raise ValueError("latency must be nonnegative")
        if not 0.0 <= drop_probability <= 1.0:
            raise ValueError("drop_probability must be in [0, 1]")
        self.latency = float(latency)
        self.drop_probability = float(drop_probability)
        self.log = []
        self._cursors = {}
        self._rng = rng if rng is not None else np.random.default_rng(0)

    def post(self, sender, payload, now):
        dropped = (self.drop_probability > 0.0
                   and float(self._rng.random()) < self.drop_probability)
        msg = BusMessage(payload=payload, send_stamp=float(now),
                         delivery_stamp=float(now) + self.latency,
                         dropped=dropped, sender=sender, seq=len(self.log))
        self.log.append(msg)
        return msg

    def poll(self, consumer, now):
        """Payloads from other senders delivered by `now`, oldest first.

        Each consumer sees every message exactly once across successive
        polls; dropped messages stay in the log but are never handed out.
        """
        i = self._cursors.get(consumer, 0)
        out = []
        while i < len(self.log) and self.log[i].delivery_stamp <= now + 1e-12:
            m = self.log[i]
            if not m.dropped and m.sender != consumer:
                out.append(m.payload)
            i += 1
        self._cursors[consumer] = i
        return out


# --- executed-motion history ------------------------------------------------

class ExecutedPath:
    """Position lookup over the sequence of committed trajectories.

    During a tick the robot follows the trajectory committed at that tick's
    cycle, so the executed position at time t comes from the latest commit
    at or before t (clamped into that spline's domain at the run edges).
    """

    def __init__(self, commits):
        self._commits = commits

    def _active(self, t):
        times = [c[0] for c in self._commits]
        i = bisect_right(times, t + 1e-12) - 1
        return self._commits[max(i, 0)][1]

    def clamp_time(self, t):
        return max(t, self._commits[0][0])

    def position(self, t):
        tr = self._active(t)
        return tr.position(tr.clamp_time(t))

    def positions(self, times):
        """Vectorized lookup: times grouped by their governing commit."""
        times = np.asarray(times, dtype=float)
        stamps = [c[0] for c in self._commits]
        which = np.clip(np.searchsorted(stamps, times + 1e-12) - 1, 0, None)
        out = np.empty((len(times), 2))
        for k in np.unique(which):
            sel = which == k
            tr = self._commits[k][1]
            lo, hi = tr.domain
            out[sel] = tr.positions(np.clip(times[sel], lo, hi))
        return out

    def state(self, t, n_orders):
        tr = self._active(t)
        hi = tr.domain[1]
        if t > hi + 1e-9:
            # Past the last plan's end the robot is parked at its final
            # position with all motion derivatives at zero.
            out = np.zeros((n_orders, 2))
            out[0] = tr.position(hi)
            return out
        return tr.state_stack(tr.clamp_time(t), n_orders)


# --- the agent --------------------------------------------------------------

@dataclass
class CycleReport:
    """Diagnostics for one planning cycle."""

    t: float
    status: str
    iterations: int = 0
    kkt_residual: float = np.nan
    solve_time_us: float = 0.0
    cycle_time_us: float = 0.0
    continuity_error: float = np.nan
    n_tracks: int = 0
    stale_tracks: int = 0
    scan_processed: bool = False
    flags: tuple = ()


class Agent:
    """One robot: sensing, mapping, prediction, and replanning state.

    The constructor commits a stationary bootstrap trajectory so the very
    first cycle has a previous plan to fold volumes around and fall back to.
    """

    def __init__(self, index, config, start, goal, *, goal_time=None,
                 waypoints=(), end_velocity=None, heading=0.0, bus=None,
                 t_start=0.0):
        self.index = index
        self.config = config
        self.goal = np.asarray(goal, dtype=float)
        if goal_time is None:
            # Anchor an arrival stamp once at spawn: a fixed stamp keeps
            # successive replans consistent, so the approach settles without
            # hunting around the goal.  The schedule is deliberately relaxed
            # (cruise at half the velocity cap) so the soft pins track it
            # without saturating the dynamic limits.
            goal_time = t_start + _comfortable_arrival(
                np.asarray(start, dtype=float), np.asarray(goal, dtype=float),
                config.limits, config.t_segment)
        self.goal_time = float(goal_time)
        self.waypoints = [(float(t), np.asarray(p, dtype=float))
                          for t, p in waypoints]
        self.end_velocity = (None if end_velocity is None
                             else np.asarray(end_velocity, dtype=float))
        self.heading = float(heading)
        self.bus = bus
        start = np.asarray(start, dtype=float)

        layout = plan_knot_layout(t_start, config.t_h, config.t_segment,
                                  config.order + 1)
        self.trajectory = constant_spline(layout, start)
        self.commits = [(float(t_start), self.trajectory)]
        self.local_map = LocalMap(origin=start, config=config.perception)
        self.footprint = footprint_from_size(config.footprint_size)
        self.staged = []
        self.pending_scan = None
        self.volume = None
        self.tracks = []
        self.regions = None
        self.reports = []
        self._last_now = float(t_start)

    # -- harness-facing helpers ------------------------------------------

    @property
    def path(self):
        return ExecutedPath(self.commits)

    def receive_scan(self, scan):
        self.pending_scan = scan

    # -- the cycle --------------------------------------------------------

    def agent_cycle(self, now, stage_order="scan_first"):
        """Run one full planning cycle at time `now`; returns a CycleReport.

        stage_order picks the serial order of the scan-staging and
        map-folding stages; both orders produce identical results because
        the stages share no mutable state within a cycle.
        """
        t_wall = time.perf_counter()
        flags = []
        prev = self.trajectory
        cfg = self.config

        # (1) Own state from the ideal tracker.  Reading past the plan's
        # end reports the robot parked there, not still moving.
        state = ideal_track(prev, prev.clamp_time(self._last_now), now,
                            n_orders=cfg.order)
        initial_state = state.derivatives

        # Snapshot handoff: stage 3 folds only shapes staged by earlier
        # cycles; shapes staged now are folded next cycle.
        to_fold = self.staged
        self.staged = []
        scan_processed = False

        def stage_scan():
            # (2) Segment and classify a finished sweep into staged shapes.
            nonlocal scan_processed
            scan = self.pending_scan
            if scan is None:
                return
            self.pending_scan = None
            history = ExecutedPath(self.commits)
            for cluster in segment_scan(scan, cfg.perception.jump_distance):
                origin = compensate_motion(cluster, history)
                if cluster.closed:
                    # The returns surround us: stage one wall piece per face
                    # instead of fitting a single shape we would be inside.
                    self.staged.extend(decompose_boundary(
                        cluster.points, origin, cfg.perception, closed=True))
                    continue
                try:
                    shape = classify_cluster(cluster.points, origin, cfg.perception)
                except ValueError:
                    continue
                if shape.contains(origin):
                    # A shape inferred from surface returns can never cover
                    # the sensor; the cluster must bend around us, so split
                    # it into per-face pieces instead.
                    self.staged.extend(decompose_boundary(
                        cluster.points, origin, cfg.perception))
                    continue
                self.staged.append((shape, cluster.points))
            scan_processed = True

        def stage_map():
            # (3) Fold staged shapes into the map, rebuild the moving volume.
            for shape, pts in to_fold:
                self.local_map.insert(shape, pts)
            self.local_map.recenter(initial_state[0])
            self.volume = build_moving_volume(
                self.local_map, prev, now, cfg.t_h, cfg.tau,
                cfg.perception.window_radius)

        if stage_order not in ("scan_first", "map_first"):
            raise ValueError(f"unknown stage order {stage_order!r}")
        try:
            if stage_order == "scan_first":
                stage_scan()
                stage_map()
            else:
                stage_map()
                stage_scan()
        except Exception as exc:  # sensing must never kill the cycle
            flags.append(f"perception:{type(exc).__name__}")

        # (4) Drain the bus into anonymous peer tracks.
        try:
            if self.bus is not None:
                for payload in self.bus.poll(self.index, now):
                    update_tracks(self.tracks, payload, cfg.prediction)
        except Exception as exc:
            flags.append(f"tracks:{type(exc).__name__}")
        stale = sum(tr.is_stale(now, cfg.prediction) for tr in self.tracks)
        if self.tracks and stale:
            flags.append("stale_tracks")
            # A starved track is flagged once, then dropped: extrapolating a
            # peer far beyond its last report constrains the planner against
            # a ghost.  If the peer is still there, its next message simply
            # opens a fresh track.
            self.tracks = [tr for tr in self.tracks
                           if not tr.is_stale(now, cfg.prediction)]

        # (5) Safe regions along the previous plan.
        regions = self.regions
        try:
            if self.volume is not None:
                regions = build_safe_regions(
                    self.volume, self.tracks, self.footprint, now,
                    cfg.prediction, cfg.region, previous=self.regions)
        except Exception as exc:
            flags.append(f"regions:{type(exc).__name__}")
            regions = self.regions

        # (6) Replan with the fallback ladder.
        near = []
        if self.volume is not None and regions is not None:
            seen = {}
            for sl in self.volume.slices:
                for s in sl.shapes:
                    seen[id(s)] = s
            near = admit_obstacles(list(seen.values()), regions)
        try:
            req = PlanRequest(
                t_now=now, initial_state=initial_state, goal=self.goal,
                previous=prev, regions=regions, goal_time=self.goal_time,
                waypoints=self.waypoints, near_obstacles=near,
                limits=cfg.limits, horizon=cfg.t_h, dt=cfg.t_segment,
                end_velocity=self.end_velocity)
            traj, plan = plan_with_fallback(req, cfg.weights)
        except Exception as exc:
            flags.append(f"plan:{type(exc).__name__}")
            traj, plan = prev, None

        # (7) Commit and report.
        self.trajectory = traj
        if traj is not prev:
            self.commits.append((float(now), traj))
        self.regions = regions
        self._last_now = float(now)
        report = CycleReport(
            t=float(now),
            status=plan.status if plan is not None else "fallback",
            iterations=plan.iterations if plan is not None else 0,
            kkt_residual=plan.kkt_residual if plan is not None else np.nan,
            solve_time_us=plan.solve_time_us if plan is not None else 0.0,
            cycle_time_us=(time.perf_counter() - t_wall) * 1e6,
            continuity_error=plan.continuity_error if plan is not None else 0.0,
            n_tracks=len(self.tracks),
            stale_tracks=stale,
            scan_processed=scan_processed,
            flags=tuple(flags),
        )
        self.reports.append(report)
        return report


def broadcast(agent, now):
    """Post the agent's current kinematic state and body size to the bus.

    The payload carries no identity: receivers must associate it with a
    track from the motion alone.
    """
    traj = agent.trajectory
    st = ideal_track(traj, traj.clamp_time(now), now, n_orders=3).derivatives
    payload = PeerState(stamp=float(now), position=st[0], velocity=st[1],
                        acceleration=st[2], size=agent.config.footprint_size)
    return agent.bus.post(agent.index, payload, now)
