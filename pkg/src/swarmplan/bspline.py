"""Uniform B-splines on an equally spaced knot grid.

A spline of degree l with m control points uses knots t0 + k*dt for
k = 0..m+l and is well defined on [t0 + l*dt, t0 + m*dt].  Trajectories keep
one scalar spline per axis on a shared grid.  Derivatives are again uniform
B-splines whose control points are first differences scaled by 1/dt, so
linear maps from control points to sampled positions or derivatives are
banded with at most l+1 nonzeros per row.
"""

from dataclasses import dataclass

import numpy as np

_DOMAIN_TOL = 1e-9


def basis_function(i, order, t, t0, dt, n_knots):
    """Cox-de Boor basis B_{i,order}(t) on the uniform grid, 0/0 taken as 0.

    Knots are t0 + k*dt for k = 0..n_knots-1.  The half-open convention
    [t_k, t_{k+1}) applies, with the final interval closed.
    """
    if i < 0 or i + order + 1 > n_knots - 1:
        raise ValueError("basis index out of range for the knot grid")
    knot = lambda k: t0 + k * dt
    if order == 0:
        hi_closed = i + 1 == n_knots - 1
        if knot(i) <= t < knot(i + 1) or (hi_closed and t == knot(i + 1)):
            return 1.0
        return 0.0
    left = 0.0
    den_l = knot(i + order) - knot(i)
    if den_l > 0:
        left = (t - knot(i)) / den_l * basis_function(i, order - 1, t, t0, dt, n_knots)
    right = 0.0
    den_r = knot(i + order + 1) - knot(i + 1)
    if den_r > 0:
        right = (knot(i + order + 1) - t) / den_r * basis_function(i + 1, order - 1, t, t0, dt, n_knots)
    return left + right


def _basis_weights(degree, u):
    """Weights of the degree+1 active basis functions at local coordinate u.

    u is (t - t_span)/dt in [0, 1) within the active knot interval.  Returned
    weights w satisfy value = sum_j w[j] * c[span - degree + j].
    """
    w = np.zeros(degree + 1)
    w[0] = 1.0
    for k in range(1, degree + 1):
        prev = w[:k].copy()
        w[:k + 1] = 0.0
        for j in range(k):
            # Active interval offsets for uniform knots.
            a = (u + (k - 1 - j)) / k
            w[j] += (1.0 - a) * prev[j]
            w[j + 1] += a * prev[j]
    return w


def basis_weight_rows(degree, u):
    """Active-basis weights for many local coordinates at once.

    u is an array of (t - t_span)/dt values inside one knot interval; returns
    (len(u), degree+1) weights, row k matching _basis_weights(degree, u[k]).
    """
    u = np.asarray(u, dtype=float)
    w = np.zeros((len(u), degree + 1))
    w[:, 0] = 1.0
    for k in range(1, degree + 1):
        prev = w[:, :k].copy()
        w[:, :k + 1] = 0.0
        for j in range(k):
            a = (u + (k - 1 - j)) / k
            w[:, j] += (1.0 - a) * prev[:, j]
            w[:, j + 1] += a * prev[:, j]
    return w


class UniformBSpline:
    """Scalar uniform B-spline: degree, origin knot t0, spacing dt, control (m,)."""

    __slots__ = ("degree", "t0", "dt", "control")

    def __init__(self, degree, t0, dt, control):
        control = np.asarray(control, dtype=float)
        if control.ndim != 1:
            raise ValueError("control points must be a 1D array")
        if len(control) < degree + 1:
            raise ValueError(f"need at least degree+1={degree + 1} control points, got {len(control)}")
        if dt <= 0:
            raise ValueError("knot spacing must be positive")
        self.degree = int(degree)
        self.t0 = float(t0)
        self.dt = float(dt)
        self.control = control

    @property
    def m(self):
        return len(self.control)

    @property
    def domain(self):
        return (self.t0 + self.degree * self.dt, self.t0 + self.m * self.dt)

    def _check_domain(self, t):
        lo, hi = self.domain
        if t < lo - _DOMAIN_TOL or t > hi + _DOMAIN_TOL:
            raise ValueError(f"t={t} outside spline domain [{lo}, {hi}]")
        return min(max(t, lo), hi)

    def _span(self, t):
        """Knot interval index j such that t is in [knot_j, knot_{j+1})."""
        j = int(np.floor((t - self.t0) / self.dt + _DOMAIN_TOL))
        return min(max(j, self.degree), self.m - 1)

    def basis_row(self, t):
        """(indices, weights) of active controls at t; len degree+1 each."""
        t = self._check_domain(t)
        j = self._span(t)
        u = (t - (self.t0 + j * self.dt)) / self.dt
        w = _basis_weights(self.degree, u)
        return np.arange(j - self.degree, j + 1), w

    def derivative(self):
        """Spline of the first derivative: degree-1 on knots shifted by dt."""
        if self.degree == 0:
            raise ValueError("cannot differentiate a degree-0 spline")
        c = (self.control[1:] - self.control[:-1]) / self.dt
        return UniformBSpline(self.degree - 1, self.t0 + self.dt, self.dt, c)

    def evaluate(self, t, order=0):
        if order > self.degree:
            return 0.0
        s = self
        for _ in range(order):
            s = s.derivative()
        idx, w = s.basis_row(t)
        return float(w @ s.control[idx])

    def evaluate_many(self, times, order=0):
        s = self
        for _ in range(min(order, self.degree)):
            s = s.derivative()
        if order > self.degree:
            return np.zeros(len(times))
        out = np.empty(len(times))
        for k, t in enumerate(times):
            idx, w = s.basis_row(t)
            out[k] = w @ s.control[idx]
        return out


def difference_matrix(m, dt, order):
    """(m-order, m) matrix mapping control points to order-th derivative controls."""
    D = np.eye(m)
    for _ in range(order):
        n = D.shape[0]
        S = np.zeros((n - 1, n))
        idx = np.arange(n - 1)
        S[idx, idx] = -1.0 / dt
        S[idx, idx + 1] = 1.0 / dt
        D = S @ D
    return D


@dataclass(frozen=True)
class KnotLayout:
    """Knot grid for one replanning cycle.

    t_start is the current time; the spline origin sits degree knots earlier
    so the domain begins exactly at t_start.  horizon is the domain length.
    """

    degree: int
    t0: float
    dt: float
    m: int
    t_start: float
    horizon: float

    @property
    def t_end(self):
        return self.t_start + self.horizon

    @property
    def segments(self):
        return self.m - self.degree


def plan_knot_layout(t_now, horizon, dt, degree, goal_time=None, extension_segments=2):
    """Choose the knot grid for a replanning cycle starting at t_now.

    The horizon is rounded up to a whole number of knot segments.  When the
    goal time falls exactly on the domain end the grid is extended by
    extension_segments so that end conditions there do not pin the spline
    against the last controls.
    """
    if dt <= 0 or horizon <= 0:
        raise ValueError("horizon and knot spacing must be positive")
    segs = max(1, int(np.ceil(horizon / dt - 1e-9)))
    if goal_time is not None:
        rel = goal_time - t_now
        if rel > 0 and abs(rel - segs * dt) <= 1e-9:
            segs += extension_segments
    m = degree + segs
    t0 = t_now - degree * dt
    return KnotLayout(degree=degree, t0=t0, dt=dt, m=m, t_start=t_now, horizon=segs * dt)


class TrajectorySpline:
    """Planar trajectory: two uniform B-splines sharing one knot grid.

    control is (m, 2) holding x and y control points columnwise.
    """

    __slots__ = ("degree", "t0", "dt", "control")

    def __init__(self, degree, t0, dt, control):
        control = np.asarray(control, dtype=float)
        if control.ndim != 2 or control.shape[1] != 2:
            raise ValueError("trajectory control points must be (m, 2)")
        # Validate through the scalar constructor.
        UniformBSpline(degree, t0, dt, control[:, 0])
        self.degree = int(degree)
        self.t0 = float(t0)
        self.dt = float(dt)
        self.control = control

    @classmethod
    def from_layout(cls, layout, control):
        return cls(layout.degree, layout.t0, layout.dt, control)

    @property
    def m(self):
        return len(self.control)

    @property
    def x_spline(self):
        return UniformBSpline(self.degree, self.t0, self.dt, self.control[:, 0])

    @property
    def y_spline(self):
        return UniformBSpline(self.degree, self.t0, self.dt, self.control[:, 1])

    @property
    def domain(self):
        return (self.t0 + self.degree * self.dt, self.t0 + self.m * self.dt)

    def clamp_time(self, t):
        lo, hi = self.domain
        return min(max(t, lo), hi)

    def position(self, t):
        idx, w = self.x_spline.basis_row(t)
        return w @ self.control[idx]

    def derivative_value(self, t, order):
        if order == 0:
            return self.position(t)
        if order > self.degree:
            return np.zeros(2)
        sx = self.x_spline
        for _ in range(order):
            sx = sx.derivative()
        idx, w = sx.basis_row(t)
        D = difference_matrix(self.m, self.dt, order)
        c = D @ self.control
        return w @ c[idx]

    def positions(self, times):
        sx = self.x_spline
        out = np.empty((len(times), 2))
        for k, t in enumerate(times):
            idx, w = sx.basis_row(t)
            out[k] = w @ self.control[idx]
        return out

    def derivative_values(self, times, order):
        if order == 0:
            return self.positions(times)
        if order > self.degree:
            return np.zeros((len(times), 2))
        sx = self.x_spline
        for _ in range(order):
            sx = sx.derivative()
        c = difference_matrix(self.m, self.dt, order) @ self.control
        out = np.empty((len(times), 2))
        for k, t in enumerate(times):
            idx, w = sx.basis_row(t)
            out[k] = w @ c[idx]
        return out

    def state_stack(self, t, n_orders):
        """(n_orders, 2) stack of derivative orders 0..n_orders-1 at t."""
        return np.stack([self.derivative_value(t, k) for k in range(n_orders)])


def position_map(layout, times):
    """(len(times), m) matrix T with T @ control = positions at `times`."""
    return derivative_map(layout, times, 0)


def derivative_map(layout, times, order):
    """(len(times), m) matrix mapping control points to order-th derivatives."""
    proto = UniformBSpline(layout.degree, layout.t0, layout.dt, np.zeros(layout.m))
    s = proto
    for _ in range(order):
        s = s.derivative()
    if order > layout.degree:
        return np.zeros((len(times), layout.m))
    D = difference_matrix(layout.m, layout.dt, order)
    rows = np.zeros((len(times), layout.m - order))
    for k, t in enumerate(times):
        idx, w = s.basis_row(t)
        rows[k, idx] = w
    return rows @ D


def derivative_gram(layout, order, span=None):
    """Gram matrix G with c' G c = integral over span of (d^order s/dt^order)^2.

    Integration uses Gauss-Legendre quadrature per knot interval with enough
    nodes to be exact for the piecewise-polynomial integrand.  G is symmetric
    positive semidefinite.  span defaults to the full domain.
    """
    deg_d = layout.degree - order
    if deg_d < 0:
        return np.zeros((layout.m, layout.m))
    lo, hi = layout.t_start, layout.t_end
    if span is not None:
        lo, hi = max(lo, span[0]), min(hi, span[1])
    if hi <= lo:
        return np.zeros((layout.m, layout.m))
    m_d = layout.m - order
    proto = UniformBSpline(deg_d, layout.t0 + order * layout.dt, layout.dt, np.zeros(m_d))
    nodes, weights = np.polynomial.legendre.leggauss(deg_d + 1)
    G_d = np.zeros((m_d, m_d))
    # Walk whole knot intervals clipped to the span.
    k_lo = int(np.floor((lo - layout.t_start) / layout.dt + 1e-12))
    k_hi = int(np.ceil((hi - layout.t_start) / layout.dt - 1e-12))
    for k in range(k_lo, k_hi):
        a = max(lo, layout.t_start + k * layout.dt)
        b = min(hi, layout.t_start + (k + 1) * layout.dt)
        if b - a < 1e-12:
            continue
        ts = 0.5 * (b - a) * nodes + 0.5 * (b + a)
        ws = 0.5 * (b - a) * weights
        for t, w in zip(ts, ws):
            idx, row = proto.basis_row(t)
            G_d[np.ix_(idx, idx)] += w * np.outer(row, row)
    D = difference_matrix(layout.m, layout.dt, order)
    return D.T @ G_d @ D
