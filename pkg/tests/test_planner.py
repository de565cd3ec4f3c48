"""Trajectory optimizer: obstacle kernel, QP assembly, fallback ladder."""

import numpy as np
import pytest
from scipy.interpolate import BSpline as SciBSpline

from swarmplan.bspline import TrajectorySpline, plan_knot_layout, position_map
from swarmplan.geometry import Circle, ConvexPolytope, Halfplane, Square
from swarmplan.planner import (AllSlicesInfeasible, DISTANCE_FLOOR, PlanRequest,
                               Weights, admit_obstacles, assemble_qp,
                               collision_cost_closed_form, collision_kernel,
                               constant_spline, end_cost, end_time_heuristic,
                               fit_to_layout, plan_with_fallback,
                               quadratize_collision)
from swarmplan.qp import solve_qp
from swarmplan.regions import RegionSlice, SafeRegion


def dist_many(shape, pts):
    """Test-local vectorized point-to-shape distance."""
    if isinstance(shape, Circle):
        return np.maximum(np.linalg.norm(pts - shape.center, axis=1) - shape.radius, 0.0)
    a = shape.corners
    b = np.roll(a, -1, axis=0)
    e = b - a
    t = np.clip(np.einsum("nkd,kd->nk", pts[:, None, :] - a, e)
                / np.sum(e * e, axis=1), 0.0, 1.0)
    d = np.linalg.norm(pts[:, None, :] - (a + t[:, :, None] * e), axis=2).min(axis=1)
    d[shape.contains_many(pts)] = 0.0
    return d


def scipy_eval(traj, ts):
    knots = traj.t0 + traj.dt * np.arange(traj.m + traj.degree + 1)
    return np.column_stack([
        SciBSpline(knots, traj.control[:, ax], traj.degree)(ts) for ax in range(2)])


def random_trajectory(rng, degree=3, m=7, t0=0.0, dt=1.0, scale=2.0):
    control = rng.normal(scale=scale, size=(m, 2))
    return TrajectorySpline(degree, t0 - degree * dt, dt, control)


class TestKernel:
    def test_threshold_value(self):
        w = Weights()
        assert collision_kernel(w.rho, w) == pytest.approx(1.0 / w.K_p)

    def test_decay_ten_efolds(self):
        w = Weights()
        d = w.rho + 10.0 / w.K_p
        assert collision_kernel(d, w) == pytest.approx(np.exp(-10.0) / w.K_p)

    def test_monotone_decreasing(self):
        w = Weights()
        d = np.linspace(0.0, 3.0, 1000)
        vals = collision_kernel(d, w)
        assert np.all(np.diff(vals) <= 1e-15)

    def test_floor_flattens_contact(self):
        w = Weights()
        assert collision_kernel(0.0, w) == collision_kernel(DISTANCE_FLOOR, w)

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            Weights(K_p=0.0)
        with pytest.raises(ValueError):
            Weights(Q_final=-1.0)


class TestClosedForm:
    def test_static_point_at_threshold(self):
        w = Weights()
        layout = plan_knot_layout(0.0, 4.0, 1.0, 3)
        traj = constant_spline(layout, [0.0, 0.0])
        obs = Circle([w.rho + 1.0, 0.0], 1.0)  # distance exactly rho
        got = collision_cost_closed_form(traj, obs, (0.0, 1.0), w)
        assert got == pytest.approx(1.0 / w.K_p, rel=1e-12)

    def test_distant_trajectory_negligible(self):
        w = Weights()
        layout = plan_knot_layout(0.0, 4.0, 1.0, 3)
        traj = constant_spline(layout, [0.0, 0.0])
        obs = Circle([50.0, 0.0], 1.0)
        got = collision_cost_closed_form(traj, obs, (0.0, 4.0), w)
        assert got < 1e-3 * 4.0 / w.K_p

    def test_matches_riemann_oracle(self):
        # The reference quadrature targets trajectories that keep clear of
        # the shape; the integrand loses smoothness exactly at contact.
        w = Weights()
        rng = np.random.default_rng(17)
        checked = 0
        attempts = 0
        while checked < 6 and attempts < 200:
            attempts += 1
            traj = random_trajectory(rng)
            if attempts % 2 == 0:
                obs = Circle(rng.normal(scale=1.5, size=2), float(rng.uniform(0.3, 1.0)))
            else:
                c = rng.normal(scale=1.5, size=2)
                h = float(rng.uniform(0.3, 0.8))
                obs = Square([[c[0] - h, c[1] - h], [c[0] + h, c[1] - h],
                              [c[0] + h, c[1] + h], [c[0] - h, c[1] + h]])
            lo, hi = traj.domain
            span = (lo + 0.3, hi - 0.5)
            step = 1e-4
            ts = np.arange(span[0] + step / 2, span[1], step)
            pts = scipy_eval(traj, ts)
            dists = dist_many(obs, pts)
            if dists.min() < 0.05:
                continue
            got = collision_cost_closed_form(traj, obs, span, w)
            want = float(np.sum(collision_kernel(dists, w)) * step)
            assert got == pytest.approx(want, rel=1e-5)
            checked += 1
        assert checked == 6

    def test_span_clipped_to_domain(self):
        w = Weights()
        layout = plan_knot_layout(0.0, 2.0, 1.0, 3)
        traj = constant_spline(layout, [0.0, 0.0])
        obs = Circle([w.rho + 1.0, 0.0], 1.0)
        full = collision_cost_closed_form(traj, obs, (-10.0, 10.0), w)
        assert full == pytest.approx(2.0 / w.K_p, rel=1e-12)


class TestQuadratize:
    def setup_pair(self, seed):
        rng = np.random.default_rng(seed)
        traj = random_trajectory(rng)
        obs = Circle(rng.normal(scale=1.0, size=2), float(rng.uniform(0.4, 1.0)))
        lo, hi = traj.domain
        return traj, obs, (lo, hi), rng

    def test_value_matches_closed_form(self):
        w = Weights()
        for seed in range(5):
            traj, obs, span, _ = self.setup_pair(seed)
            H, F, c0 = quadratize_collision(traj, obs, span, w)
            x0 = np.concatenate([traj.control[:, 0], traj.control[:, 1]])
            got = 0.5 * x0 @ H @ x0 + F @ x0 + c0
            want = collision_cost_closed_form(traj, obs, span, w)
            assert got == pytest.approx(want, rel=1e-9, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        w = Weights()
        for seed in (3, 9, 21):
            traj, obs, span, _ = self.setup_pair(seed)
            H, F, _ = quadratize_collision(traj, obs, span, w)
            x0 = np.concatenate([traj.control[:, 0], traj.control[:, 1]])
            grad = H @ x0 + F
            h = 1e-6
            fd = np.zeros_like(grad)
            for i in range(len(x0)):
                for sgn, acc in ((1.0, 1.0), (-1.0, -1.0)):
                    c = traj.control.copy()
                    c[i % traj.m, i // traj.m] += sgn * h
                    t2 = TrajectorySpline(traj.degree, traj.t0, traj.dt, c)
                    fd[i] += acc * collision_cost_closed_form(t2, obs, span, w)
                fd[i] /= 2 * h
            scale = max(np.linalg.norm(fd), 1e-12)
            assert np.linalg.norm(grad - fd) / scale < 1e-4

    def test_far_obstacle_vanishes(self):
        w = Weights()
        traj, _, span, _ = self.setup_pair(2)
        obs = Circle([100.0, 100.0], 1.0)
        H, F, c0 = quadratize_collision(traj, obs, span, w)
        assert np.linalg.norm(H) < 1e-8
        assert np.linalg.norm(F) < 1e-8

    def test_hessian_psd(self):
        w = Weights()
        for seed in range(6):
            traj, obs, span, _ = self.setup_pair(seed)
            H, _, _ = quadratize_collision(traj, obs, span, w)
            assert np.linalg.eigvalsh(H).min() >= -1e-9

    def test_polygon_obstacle_gradient(self):
        w = Weights()
        rng = np.random.default_rng(31)
        traj = random_trajectory(rng)
        obs = Square([[0.5, -0.5], [1.5, -0.5], [1.5, 0.5], [0.5, 0.5]])
        lo, hi = traj.domain
        span = (lo, hi)
        H, F, _ = quadratize_collision(traj, obs, span, w)
        x0 = np.concatenate([traj.control[:, 0], traj.control[:, 1]])
        grad = H @ x0 + F
        h = 1e-6
        fd = np.zeros_like(grad)
        for i in range(len(x0)):
            c_hi = traj.control.copy()
            c_lo = traj.control.copy()
            c_hi[i % traj.m, i // traj.m] += h
            c_lo[i % traj.m, i // traj.m] -= h
            hi_v = collision_cost_closed_form(
                TrajectorySpline(traj.degree, traj.t0, traj.dt, c_hi), obs, span, w)
            lo_v = collision_cost_closed_form(
                TrajectorySpline(traj.degree, traj.t0, traj.dt, c_lo), obs, span, w)
            fd[i] = (hi_v - lo_v) / (2 * h)
        scale = max(np.linalg.norm(fd), 1e-12)
        assert np.linalg.norm(grad - fd) / scale < 1e-4


class TestEndCost:
    def test_zero_weight(self):
        H, F = end_cost(np.array([1.0, 2.0]), np.ones(5), 0.0)
        assert not H.any() and not F.any()

    def test_pinned_at_goal_zero_gradient(self):
        layout = plan_knot_layout(0.0, 3.0, 1.0, 3)
        goal = np.array([1.5, -0.5])
        traj = constant_spline(layout, goal)
        row = position_map(layout, [layout.t_end])[0]
        H, F = end_cost(goal, row, 7.0)
        x0 = np.concatenate([traj.control[:, 0], traj.control[:, 1]])
        assert np.linalg.norm(H @ x0 + F) < 1e-10
        # Cost at the pinned point equals the dropped constant.
        assert 0.5 * x0 @ H @ x0 + F @ x0 == pytest.approx(-7.0 * goal @ goal)

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(5)
        layout = plan_knot_layout(0.0, 3.0, 1.0, 3)
        control = rng.normal(size=(layout.m, 2))
        goal = rng.normal(size=2)
        row = position_map(layout, [layout.t_end])[0]
        H, F = end_cost(goal, row, 3.0)
        x0 = np.concatenate([control[:, 0], control[:, 1]])
        grad = H @ x0 + F

        def cost(x):
            c = np.column_stack([x[:layout.m], x[layout.m:]])
            p = row @ c
            return 3.0 * float((p - goal) @ (p - goal))

        h = 1e-6
        for i in range(len(x0)):
            e = np.zeros_like(x0)
            e[i] = h
            fd = (cost(x0 + e) - cost(x0 - e)) / (2 * h)
            assert grad[i] == pytest.approx(fd, abs=1e-6)


class TestEndTime:
    def test_rest_to_goal(self):
        state = np.array([[0.0, 0.0], [0.0, 0.0]])
        assert end_time_heuristic(state, [4.0, 0.0], 2.0) == pytest.approx(2.0)

    def test_zero_distance_floor(self):
        state = np.array([[1.0, 1.0], [0.0, 0.0]])
        assert end_time_heuristic(state, [1.0, 1.0], 2.0) == pytest.approx(2.0)

    def test_moving_start(self):
        state = np.array([[0.0, 0.0], [1.0, 0.0]])
        # 3 = T + T^2  ->  positive root of T^2 + T - 3 (above the floor
        # when segments are short enough).
        want = (-1.0 + np.sqrt(1.0 + 12.0)) / 2.0
        got = end_time_heuristic(state, [3.0, 0.0], 2.0, t_segment=0.5)
        assert got == pytest.approx(want)

    def test_floor_applies(self):
        state = np.array([[0.0, 0.0], [0.0, 0.0]])
        assert end_time_heuristic(state, [0.1, 0.0], 10.0) == pytest.approx(2.0)


def wall_region(tau=0.1, n_slices=40, x_wall=2.0):
    planes = [Halfplane(np.array([1.0, 0.0]), x_wall),
              Halfplane(np.array([-1.0, 0.0]), 20.0),
              Halfplane(np.array([0.0, 1.0]), 20.0),
              Halfplane(np.array([0.0, -1.0]), 20.0)]
    poly = ConvexPolytope(planes)
    slices = [RegionSlice(t_rel=tau * (k + 1), seed=np.zeros(2), polytope=poly,
                          feasible=True, static_polytope=poly)
              for k in range(n_slices)]
    return SafeRegion(slices=slices, tau=tau)


def base_request(**kw):
    defaults = dict(
        t_now=0.0,
        initial_state=np.array([[0.0, 0.0], [0.0, 0.0]]),
        goal=np.array([3.0, 0.0]),
        previous=None,
        goal_time=4.0,
        limits={1: (np.array([-5.0, -5.0]), np.array([5.0, 5.0])),
                2: (np.array([-10.0, -10.0]), np.array([10.0, 10.0]))},
        horizon=4.0,
        dt=1.0,
    )
    defaults.update(kw)
    if defaults["previous"] is None:
        layout = plan_knot_layout(defaults["t_now"], defaults["horizon"],
                                  defaults["dt"], 3)
        defaults["previous"] = constant_spline(
            layout, np.atleast_2d(defaults["initial_state"])[0])
    return PlanRequest(**defaults)


class TestAssembleAndSolve:
    def test_free_space_reaches_goal(self):
        req = base_request()
        w = Weights()
        traj, report = plan_with_fallback(req, w)
        assert report.status == "optimal"
        assert np.linalg.norm(traj.position(4.0) - req.goal) < 1e-3

    def test_matches_equality_only_kkt(self):
        # With inactive boxes the solution equals the unconstrained
        # equality-KKT solve of the same objective.
        req = base_request()
        w = Weights()
        layout = plan_knot_layout(req.t_now, req.horizon, req.dt, 3,
                                  goal_time=req.goal_time)
        reference = fit_to_layout(req.previous, layout)
        qp = assemble_qp(req, w, layout, reference)
        sol = solve_qp(qp)
        assert sol.status == "optimal"
        nvar = len(qp.F)
        neq = len(qp.b_eq)
        K = np.zeros((nvar + neq, nvar + neq))
        K[:nvar, :nvar] = qp.H
        K[:nvar, nvar:] = qp.A_eq.T
        K[nvar:, :nvar] = qp.A_eq
        rhs = np.concatenate([-qp.F, qp.b_eq])
        direct = np.linalg.solve(K, rhs)[:nvar]
        assert np.allclose(sol.x, direct, atol=1e-6)

    def test_goal_behind_wall_clamps_to_wall(self):
        req = base_request(goal=np.array([5.0, 0.0]), regions=wall_region())
        w = Weights()
        traj, report = plan_with_fallback(req, w)
        assert report.status == "optimal"
        end = traj.position(4.0)
        assert abs(end[0] - 2.0) < 1e-4
        assert abs(end[1]) < 1e-3

    def test_region_compliance_at_slice_times(self):
        req = base_request(goal=np.array([5.0, 0.0]), regions=wall_region())
        traj, _ = plan_with_fallback(req, Weights())
        for sl in req.regions.slices:
            p = traj.position(req.t_now + sl.t_rel)
            assert sl.polytope.violation(p) <= 1e-6

    def test_waypoint_interpolated(self):
        wp = (1.5, np.array([1.0, 0.5]))
        req = base_request(waypoints=[wp])
        traj, report = plan_with_fallback(req, Weights())
        assert report.status == "optimal"
        assert np.linalg.norm(traj.position(1.5) - wp[1]) < 1e-6

    def test_out_of_horizon_waypoint_deferred(self):
        wp = (9.5, np.array([50.0, 50.0]))
        req = base_request(waypoints=[wp])
        traj, report = plan_with_fallback(req, Weights())
        assert report.status == "optimal"
        # The far waypoint must not bend this cycle's spline to reach it.
        assert np.linalg.norm(traj.position(4.0) - req.goal) < 1e-3

    def test_continuity_with_moving_start(self):
        req = base_request(
            initial_state=np.array([[0.5, -0.2], [0.8, 0.3]]))
        traj, report = plan_with_fallback(req, Weights())
        assert report.status == "optimal"
        assert report.continuity_error <= 1e-6
        assert np.allclose(traj.position(0.0), [0.5, -0.2], atol=1e-6)
        assert np.allclose(traj.derivative_value(0.0, 1), [0.8, 0.3], atol=1e-6)

    def test_minimum_derivative_degeneracy(self):
        # Only the order-n energy active: the optimum coasts on the initial
        # straight line, the analytic minimum-acceleration trajectory.
        w = Weights(Q_n=1.0, Q_nm1=0.0, Q_final=0.0, Q_final_vel=0.0,
                    Q_obs=0.0)
        req = base_request(
            initial_state=np.array([[1.0, 2.0], [0.5, -0.3]]),
            goal=np.array([3.0, 0.8]), goal_time=None, limits={})
        traj, report = plan_with_fallback(req, w)
        assert report.status == "optimal"
        lo, hi = traj.domain
        for t in np.linspace(lo, hi, 9):
            want = np.array([1.0, 2.0]) + np.array([0.5, -0.3]) * (t - lo)
            assert np.allclose(traj.position(t), want, atol=1e-6)

    def test_mismatched_layout_degree_rejected(self):
        req = base_request()
        layout = plan_knot_layout(0.0, 4.0, 1.0, 5)
        with pytest.raises(ValueError):
            assemble_qp(req, Weights(), layout, constant_spline(layout, [0, 0]))


class TestFallbackLadder:
    def test_dense_infeasible_relaxed_succeeds(self):
        # A waypoint needing 0.72 m in 1 s from rest under a 1 m/s cap: the
        # speed profile must spike toward the cap mid-segment, which the
        # conservative control-point rows forbid but the sampled rows allow.
        req = base_request(
            waypoints=[(1.0, np.array([0.72, 0.0]))],
            limits={1: (np.array([-1.0, -1.0]), np.array([1.0, 1.0]))})
        traj, report = plan_with_fallback(req, Weights())
        assert report.status == "relaxed"
        assert np.linalg.norm(traj.position(1.0) - [0.72, 0.0]) < 1e-6
        # Sampled speeds respect the cap on the enforcement grid.
        for t in np.arange(0.0, 4.01, 0.1):
            v = traj.derivative_value(t, 1)
            assert np.all(np.abs(v) <= 1.0 + 1e-6)

    def test_feasible_problem_identical_to_plain_solve(self):
        req = base_request()
        w = Weights()
        traj, report = plan_with_fallback(req, w)
        assert report.status == "optimal"
        layout = report.layout
        reference = fit_to_layout(req.previous, layout)
        sol = solve_qp(assemble_qp(req, w, layout, reference),
                       warm_start=(np.concatenate([reference.control[:, 0],
                                                   reference.control[:, 1]]), []))
        assert np.allclose(np.concatenate([traj.control[:, 0], traj.control[:, 1]]),
                           sol.x, atol=1e-12)

    def test_walled_in_keeps_previous(self):
        region = wall_region()
        for sl in region.slices:
            sl.feasible = False
        req = base_request(regions=region)
        traj, report = plan_with_fallback(req, Weights())
        assert report.status == "fallback"
        assert traj is req.previous

    def test_impossible_both_passes_keeps_previous(self):
        # A waypoint pinned outside the region wall conflicts with the
        # region rows, which both passes keep.
        req = base_request(regions=wall_region(),
                           waypoints=[(1.0, np.array([10.0, 0.0]))])
        traj, report = plan_with_fallback(req, Weights())
        assert report.status == "fallback"
        assert traj is req.previous


class TestHelpers:
    def test_fit_to_layout_reproduces_spline(self):
        rng = np.random.default_rng(3)
        layout = plan_knot_layout(0.0, 4.0, 1.0, 3)
        traj = TrajectorySpline.from_layout(layout, rng.normal(size=(layout.m, 2)))
        refit = fit_to_layout(traj, layout)
        assert np.allclose(refit.control, traj.control, atol=1e-8)

    def test_fit_to_shifted_layout_close(self):
        rng = np.random.default_rng(5)
        layout = plan_knot_layout(0.0, 4.0, 1.0, 3)
        traj = TrajectorySpline.from_layout(layout, rng.normal(size=(layout.m, 2)))
        shifted = plan_knot_layout(0.04, 4.0, 1.0, 3)
        refit = fit_to_layout(traj, shifted)
        ts = np.linspace(0.04, 3.9, 25)
        err = np.linalg.norm(refit.positions(ts) - traj.positions(ts), axis=1)
        # Random control points are far wigglier than planned trajectories;
        # the refit only needs to stay in the same neighborhood.
        assert err.max() < 0.05

    def test_admit_obstacles_filters_far_shapes(self):
        region = wall_region()
        near = Circle([1.0, 0.0], 0.5)
        outside_wall = Circle([30.0, 0.0], 0.5)
        got = admit_obstacles([near, outside_wall, near], region)
        assert got == [near]

    def test_admit_requires_regions(self):
        assert admit_obstacles([Circle([0.0, 0.0], 1.0)], None) == []

    def test_quadratization_contracts_on_repeats(self):
        # Re-expanding around the latest solution in a frozen world shrinks
        # the step between successive solutions.
        w = Weights(Q_final=50.0)
        obs = Circle([1.5, 0.05], 0.4)
        req = base_request(goal=np.array([3.0, 0.0]), near_obstacles=[obs])
        prev = req.previous
        controls = []
        for _ in range(3):
            req = base_request(goal=np.array([3.0, 0.0]), near_obstacles=[obs],
                               previous=prev)
            traj, report = plan_with_fallback(req, w)
            assert report.status == "optimal"
            controls.append(traj.control.copy())
            prev = traj
        step1 = np.linalg.norm(controls[1] - controls[0])
        step2 = np.linalg.norm(controls[2] - controls[1])
        assert step2 <= step1 + 1e-9
