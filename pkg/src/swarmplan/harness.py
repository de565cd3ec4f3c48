"""Closed-loop simulation: run a scenario and collect artifacts.

One run builds the world, the shared message bus, and one `Agent` per spec,
then steps a fixed planning-rate clock.  Each tick delivers any completed
LiDAR sweep (beams cast from the poses the agent actually occupied during
the sweep), runs every agent's replanning cycle in index order, and then
fires due broadcasts — so a state sent at tick k is visible to peers from
tick k+1 at the earliest, as it would be over a real link.

Everything is seeded: one seed stream resolves random spawns, a second
drives bus drops.  Identical scenario + seed gives bitwise-identical logs.

The executed motion is sampled on the prediction grid into a trajectory
table; metrics are computed from that table alone so they can be recomputed
from the CSV bit for bit.
"""

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .metrics import (RunMetrics, compute_motion_metrics, solve_time_stats,
                      write_trajectories)
from .runtime import Agent, AgentConfig, MessageBus, broadcast
from .scenario import resolve_agents
from .sensor import World, simulate_scan, simulate_swept_scan

__all__ = ["RunResult", "run_scenario", "build_agents"]


@dataclass
class RunResult:
    """A finished run: metrics plus the raw material they came from."""

    metrics: RunMetrics
    table: dict      # agent -> (T, 7) array of t, x, y, vx, vy, ax, ay
    reports: dict    # agent -> list of CycleReport
    resolved: list   # concrete AgentSpec per agent


def build_agents(resolved, bus):
    """One Agent per resolved spec, indexed in list order."""
    agents = []
    for i, spec in enumerate(resolved):
        cfg = AgentConfig(order=spec.order, footprint_size=spec.footprint,
                          limits=spec.limits)
        agents.append(Agent(
            i, cfg, spec.start, spec.goal, goal_time=spec.goal_time,
            waypoints=spec.waypoints, end_velocity=spec.end_velocity,
            heading=spec.heading, bus=bus))
    return agents


def _swept_poses(agent, stamps, bounds):
    pts = agent.path.positions(stamps)
    xmin, ymin, xmax, ymax = bounds
    pts[:, 0] = np.clip(pts[:, 0], xmin, xmax)
    pts[:, 1] = np.clip(pts[:, 1], ymin, ymax)
    return pts


def run_scenario(scenario, out_dir=None, *, plots=False, metrics_only=False):
    """Simulate the scenario and return a RunResult.

    With out_dir set, writes metrics.json, trajectories.csv (skipped under
    metrics_only), and SVG plots when requested.  The run itself never
    aborts: per-stage failures inside an agent surface as report flags and
    fallback statuses, not exceptions.
    """
    ss = np.random.SeedSequence(scenario.seed)
    spawn_seed, bus_seed = ss.spawn(2)
    resolved = resolve_agents(scenario, np.random.default_rng(spawn_seed))
    world = World(obstacles=list(scenario.obstacles),
                  bounds=tuple(scenario.bounds))
    bus = MessageBus(latency=scenario.bus_latency,
                     drop_probability=scenario.bus_drop,
                     rng=np.random.default_rng(bus_seed))
    agents = build_agents(resolved, bus)

    plan_rate = agents[0].config.plan_rate
    bcast_period = 1.0 / agents[0].config.broadcast_rate
    ticks_per_sweep = int(round(plan_rate / agents[0].config.lidar.rate))

    n_ticks = int(round(scenario.duration * plan_rate))
    reports = {a.index: [] for a in agents}
    next_due = 0.0
    for k in range(n_ticks):
        t = k / plan_rate
        if k == 0:
            # Startup sweep from the spawn pose so the first fold already
            # knows the nearby walls.
            for a in agents:
                a.receive_scan(simulate_scan(
                    world, a.path.position(t), a.heading, a.config.lidar, t))
        elif k % ticks_per_sweep == 0:
            for a in agents:
                lidar = a.config.lidar
                t0 = t - lidar.sweep_duration
                stamps = t0 + lidar.sweep_duration * np.arange(lidar.n_beams) / lidar.n_beams
                poses = _swept_poses(a, stamps, world.bounds)
                a.receive_scan(simulate_swept_scan(
                    world, poses, a.heading, lidar, t0))
        for a in agents:
            reports[a.index].append(a.agent_cycle(t))
        while next_due <= t + 1e-9:
            for a in agents:
                broadcast(a, t)
            next_due += bcast_period

    tau = agents[0].config.tau
    n_samples = int(round(scenario.duration / tau)) + 1
    times = np.arange(n_samples) * tau
    table = {}
    rows = []
    for a in agents:
        path = a.path
        data = np.empty((n_samples, 7))
        data[:, 0] = times
        for s, t in enumerate(times):
            stack = path.state(t, 3)
            data[s, 1:3] = stack[0]
            data[s, 3:5] = stack[1]
            data[s, 5:7] = stack[2]
        table[a.index] = data
        rows.extend((a.index, *data[s]) for s in range(n_samples))

    motion = compute_motion_metrics(
        table,
        footprints=[spec.footprint for spec in resolved],
        goals=[spec.goal for spec in resolved],
        limits=[spec.limits for spec in resolved],
        obstacles=list(scenario.obstacles))
    all_reports = [r for rs in reports.values() for r in rs]
    metrics = RunMetrics(
        scenario=scenario.name, seed=scenario.seed,
        duration=float(scenario.duration), n_agents=len(agents),
        solve_times=solve_time_stats([r.solve_time_us for r in all_reports]),
        cycle_times=solve_time_stats([r.cycle_time_us for r in all_reports]),
        cycle_statuses=dict(Counter(r.status for r in all_reports)),
        flag_counts=dict(Counter(f for r in all_reports for f in r.flags)),
        unrecovered_infeasibility=bool(any(
            rs and rs[-1].status == "fallback" for rs in reports.values())),
        **motion)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        metrics.save(out / "metrics.json")
        if not metrics_only:
            write_trajectories(out / "trajectories.csv", rows)
            if plots:
                from .plots import save_run_plots
                save_run_plots(out, scenario, resolved, table)

    return RunResult(metrics=metrics, table=table, reports=reports,
                     resolved=resolved)
