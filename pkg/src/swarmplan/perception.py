"""Shape mapping from range scans.

Scans are segmented into contiguous return runs, each run is compensated for
robot motion during the sweep, classified into a circle / square / rectangle /
triangle, and inserted into a robot-centric map of shapes bucketed on a 1 m
hash grid.  Overlapping observations of the same obstacle merge into a single
grown shape, so the map stays small no matter how often an obstacle is seen.
"""

from dataclasses import dataclass, field

import numpy as np

from .geometry import (Circle, Square, Rectangle, Triangle,
                       circle_from_three_points, oriented_rectangle)
from .sensor import scan_point_position


@dataclass
class PerceptionConfig:
    radius_threshold: float = 100.0   # circle fits at least this large are lines
    fit_tol: float = 0.05             # circle consistency band, meters
    line_tol: float = 0.03            # perpendicular residual band for lines
    min_cluster_points: int = 2
    min_square_side: float = 0.1      # two-point clusters become this square
    max_classify_iters: int = 5
    jump_distance: float = 0.3        # adjacent-return gap that splits a cluster
    map_radius: float = 15.0          # shapes farther than this are dropped
    window_radius: float = 5.0        # moving-volume admission distance


@dataclass
class Cluster:
    """Contiguous run of returns: world-frame points plus the median beam stamp.

    closed marks a full-circle run whose ends meet: the returns enclose the
    sensor, so the cluster traces the surrounding boundary rather than the
    outline of one object.
    """

    points: np.ndarray
    median_stamp: float
    closed: bool = False


def segment_scan(scan, jump_distance=None):
    """Split a scan into clusters of consecutive finite returns.

    Runs wrap across the sweep seam when the field of view closes the circle,
    and additionally split wherever adjacent returns are farther apart than
    jump_distance (occlusion boundaries between objects at different depths).
    Single-return runs are discarded as speckle.  Points are placed from each
    beam's own origin pose.
    """
    finite = np.isfinite(scan.ranges)
    if not np.any(finite):
        return []
    n = scan.n_beams
    angles = scan.beam_angles()
    stamps = scan.beam_stamps()
    origins = scan.origins
    if origins is None:
        raise ValueError("scan carries no origin poses")
    full_circle = abs(scan.angle_increment * n - 2.0 * np.pi) < 1e-6

    idx = np.flatnonzero(finite)
    # Break runs where consecutive finite beams are not adjacent.
    breaks = np.flatnonzero(np.diff(idx) > 1)
    runs = np.split(idx, breaks + 1)
    wraps = (len(runs) > 1 and idx[0] == 0 and idx[-1] == n - 1 and full_circle)
    if wraps:
        runs[0] = np.concatenate([runs[-1], runs[0]])
        runs = runs[:-1]

    clusters = []
    for run in runs:
        if len(run) < 2:
            continue
        pts = np.stack([scan_point_position(scan.ranges[k], angles[k], origins[k])
                        for k in run])
        if jump_distance is not None:
            gaps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
            pieces = np.split(np.arange(len(run)), np.flatnonzero(gaps > jump_distance) + 1)
        else:
            pieces = [np.arange(len(run))]
        for piece in pieces:
            if len(piece) < 2:
                continue
            seam = float(np.linalg.norm(pts[piece[0]] - pts[piece[-1]]))
            closed = (full_circle and len(piece) == n
                      and seam <= (jump_distance if jump_distance is not None else 0.3))
            clusters.append(Cluster(points=pts[piece],
                                    median_stamp=float(np.median(stamps[run][piece])),
                                    closed=closed))
    return clusters


def compensate_motion(cluster, trajectory):
    """Robot position to reconstruct the cluster from: the path at its median stamp.

    The stamp is clamped into the trajectory domain.  `trajectory` is anything
    with clamp_time/position, typically the committed trajectory that was
    being executed while the sweep ran.
    """
    t = trajectory.clamp_time(cluster.median_stamp)
    return trajectory.position(t)


def _fit_line(points):
    """Chord line through the two extreme points; returns (p0, u, residual, length).

    u is the unit chord direction, residual the largest perpendicular distance
    of any point from the chord.
    """
    p0, p1 = points[0], points[-1]
    chord = p1 - p0
    length = float(np.linalg.norm(chord))
    if length < 1e-12:
        # Degenerate: all points coincide.
        return p0, np.array([1.0, 0.0]), float(np.max(np.linalg.norm(points - p0, axis=1))), 0.0
    u = chord / length
    rel = points - p0
    perp = rel[:, 0] * u[1] - rel[:, 1] * u[0]
    return p0, u, float(np.max(np.abs(perp))), length


def fit_rectangle(points, robot_position, line_tol=0.03):
    """Erect a square on a line-like cluster, away from the robot.

    The observed chord becomes the near side; the square extends one chord
    length on the far side from the robot.  Raises ValueError when the points
    are not within line_tol of their chord.
    """
    points = np.asarray(points, dtype=float)
    robot_position = np.asarray(robot_position, dtype=float)
    p0, u, residual, length = _fit_line(points)
    if residual > line_tol:
        raise ValueError(f"cluster is not line-like (residual {residual:.4f} > {line_tol})")
    if length < 1e-9:
        raise ValueError("cluster has no extent to erect a square on")
    # Project all points on the chord so partial outliers cannot shrink the side.
    s = (points - p0) @ u
    lo, hi = float(s.min()), float(s.max())
    a = p0 + lo * u
    b = p0 + hi * u
    side = hi - lo
    n = np.array([-u[1], u[0]])
    mid = 0.5 * (a + b)
    if float(n @ (mid - robot_position)) < 0.0:
        n = -n
    return Square([a, b, b + side * n, a + side * n])


def _split_corner(points, line_tol):
    """Two-chord decomposition: split at the point farthest from the overall chord.

    Returns the corner point when both halves are line-like and their chord
    lines meet near an observed interior point, else None.
    """
    if len(points) < 4:
        return None
    p0, u, _, length = _fit_line(points)
    if length < 1e-9:
        return None
    rel = points - p0
    perp = np.abs(rel[:, 0] * u[1] - rel[:, 1] * u[0])
    k = int(np.argmax(perp))
    if k <= 0 or k >= len(points) - 1:
        return None
    a0, ua, res_a, len_a = _fit_line(points[:k + 1])
    b0, ub, res_b, len_b = _fit_line(points[k:])
    if res_a > line_tol or res_b > line_tol or len_a < 1e-9 or len_b < 1e-9:
        return None
    # Intersect the two chord lines.
    denom = ua[0] * ub[1] - ua[1] * ub[0]
    if abs(denom) < 1e-9:
        return None
    d = b0 - a0
    t = (d[0] * ub[1] - d[1] * ub[0]) / denom
    corner = a0 + t * ua
    if np.linalg.norm(corner - points[k]) > max(0.1, 3.0 * line_tol):
        return None
    return corner


def _polyline_breakpoints(points, tol):
    """Indices where the polyline bends: recursive max-deviation splitting.

    Splits the chord between the current endpoints at the most deviant
    interior point until every piece is within tol of its chord.
    """
    out = []
    stack = [(0, len(points) - 1)]
    while stack:
        i, j = stack.pop()
        if j - i < 2:
            continue
        chord = points[j] - points[i]
        length = np.linalg.norm(chord)
        rel = points[i + 1:j] - points[i]
        if length < 1e-12:
            dev = np.linalg.norm(rel, axis=1)
        else:
            u = chord / length
            dev = np.abs(rel[:, 0] * u[1] - rel[:, 1] * u[0])
        k = int(np.argmax(dev))
        if dev[k] > tol:
            k += i + 1
            out.append(k)
            stack.append((i, k))
            stack.append((k, j))
    return sorted(out)


def decompose_boundary(points, robot_position, config=None, closed=False):
    """Split a wall-like run of returns into per-face pieces.

    Fitting one convex shape to a boundary that bends around the sensor
    would swallow the robot, so the polyline is split at its bends and each
    line-like piece erects a square away from the robot.  A closed ring is
    first rotated to start at the nearest return (the foot of a face, never
    a corner) so the seam does not cut a face in half.  Returns
    (shape, piece_points) pairs.
    """
    if config is None:
        config = PerceptionConfig()
    points = np.asarray(points, dtype=float)
    robot_position = np.asarray(robot_position, dtype=float)
    if closed:
        k0 = int(np.argmin(np.linalg.norm(points - robot_position, axis=1)))
        points = np.roll(points, -k0, axis=0)
    cuts = _polyline_breakpoints(points, config.line_tol)
    bounds = [0] + cuts + [len(points) - 1]
    out = []
    for i, j in zip(bounds[:-1], bounds[1:]):
        piece = points[i:j + 1]
        if len(piece) < 2 or np.linalg.norm(piece[-1] - piece[0]) < 1e-9:
            continue
        try:
            shape = fit_rectangle(piece, robot_position, config.line_tol)
        except ValueError:
            shape = _pca_rectangle(piece)
        out.append((shape, piece))
    return out


def _pca_rectangle(points):
    """Oriented bounding rectangle along the principal axis of the points."""
    c = points.mean(axis=0)
    rel = points - c
    cov = rel.T @ rel
    _, vecs = np.linalg.eigh(cov)
    u = vecs[:, -1]
    v = np.array([-u[1], u[0]])
    su = rel @ u
    sv = rel @ v
    half_u = max(float(su.max() - su.min()) / 2.0, 0.01)
    half_v = max(float(sv.max() - sv.min()) / 2.0, 0.01)
    mid = c + u * (su.max() + su.min()) / 2.0 + v * (sv.max() + sv.min()) / 2.0
    return oriented_rectangle(mid, u, half_u, half_v)


def _line_family(points, robot_position, config, allow_triangle=True):
    """Classify a cluster already known not to be a clean circle."""
    _, _, residual, length = _fit_line(points)
    if residual <= config.line_tol:
        return fit_rectangle(points, robot_position, config.line_tol)
    if allow_triangle:
        corner = _split_corner(points, config.line_tol)
        if corner is not None:
            tri = Triangle([points[0], corner, points[-1]])
            return tri
    return _pca_rectangle(points)


def classify_cluster(points, robot_position, config=None):
    """Fit a shape to a cluster of world-frame points.

    Three-point circle fitting over (first, middle, last) recurses into the
    first half whenever interior midpoints disagree with the fitted circle.
    Degenerate or enormous fits mean the points run straight: a square erected
    away from the robot on the first pass, or on later passes a rectangle, or
    a triangle when two clean chords meet at an observed corner.  Two-point
    clusters become small squares of a fixed minimum side.
    """
    if config is None:
        config = PerceptionConfig()
    points = np.asarray(points, dtype=float)
    if len(points) < 2:
        raise ValueError("cannot classify fewer than 2 points")
    if len(points) == 2:
        side = max(float(np.linalg.norm(points[1] - points[0])), config.min_square_side)
        mid = points.mean(axis=0)
        u = points[1] - points[0]
        if np.linalg.norm(u) < 1e-12:
            u = np.array([1.0, 0.0])
        u = u / np.linalg.norm(u)
        n = np.array([-u[1], u[0]])
        if float(n @ (mid - robot_position)) < 0.0:
            n = -n
        a = mid - 0.5 * side * u
        b = mid + 0.5 * side * u
        return Square([a, b, b + side * n, a + side * n])

    lo, hi = 0, len(points) - 1
    for iteration in range(1, config.max_classify_iters + 1):
        mid = (lo + hi) // 2
        if mid == lo or mid == hi:
            return _line_family(points, robot_position, config)
        fit = circle_from_three_points(points[lo], points[mid], points[hi])
        if fit is None or fit.radius >= config.radius_threshold:
            if iteration == 1:
                # Straight run seen end to end: erect a square on it.
                try:
                    return fit_rectangle(points, robot_position, config.line_tol)
                except ValueError:
                    return _line_family(points, robot_position, config)
            return _line_family(points, robot_position, config)
        q1 = (lo + mid) // 2
        q2 = (mid + hi) // 2
        probes = [q for q in (q1, q2) if q not in (lo, mid, hi)]
        if not probes:
            # Too few points to probe further; the three-point fit stands.
            return fit
        err = max(abs(float(np.linalg.norm(points[q] - fit.center)) - fit.radius)
                  for q in probes)
        if err <= config.fit_tol:
            return fit
        hi = mid
    return _line_family(points, robot_position, config)


# --- local map -------------------------------------------------------------

def _shape_center(shape):
    return shape.center


def _bucket_key(center, origin):
    return (int(np.floor(center[0] - origin[0] + 0.5)),
            int(np.floor(center[1] - origin[1] + 0.5)))


class LocalMap:
    """Robot-centric shape store bucketed on a 1 m grid.

    Shapes whose centers round to nearby buckets are candidates for merging;
    recentering rebuilds the buckets around a new origin and drops shapes
    beyond the configured radius.
    """

    def __init__(self, origin=(0.0, 0.0), config=None):
        self.config = config or PerceptionConfig()
        self.origin = np.asarray(origin, dtype=float)
        self.buckets = {}

    def __len__(self):
        return sum(len(v) for v in self.buckets.values())

    def shapes(self):
        out = []
        for key in sorted(self.buckets):
            out.extend(self.buckets[key])
        return out

    def _add(self, shape):
        key = _bucket_key(_shape_center(shape), self.origin)
        self.buckets.setdefault(key, []).append(shape)

    def _remove(self, shape):
        key = _bucket_key(_shape_center(shape), self.origin)
        entries = self.buckets.get(key, [])
        entries.remove(shape)
        if not entries:
            del self.buckets[key]

    def _neighborhood(self, center, reach):
        k = _bucket_key(center, self.origin)
        r = int(np.ceil(reach)) + 1
        found = []
        for dx in range(-r, r + 1):
            for dy in range(-r, r + 1):
                found.extend(self.buckets.get((k[0] + dx, k[1] + dy), ()))
        return found

    def recenter(self, new_origin):
        shapes = self.shapes()
        self.origin = np.asarray(new_origin, dtype=float)
        self.buckets = {}
        for s in shapes:
            if np.linalg.norm(_shape_center(s) - self.origin) <= self.config.map_radius:
                self._add(s)

    def insert(self, shape, points=None):
        """Insert a classified shape, merging with an overlapping stored one.

        `points` are the cluster points behind `shape`; they arbitrate
        conflicts between different shape families by refit residual.
        Inserting the same shape twice leaves a single entry.
        """
        center = _shape_center(shape)
        if np.linalg.norm(center - self.origin) > self.config.map_radius:
            return None
        reach = shape.size_scale + self._max_scale()
        for other in self._neighborhood(center, reach):
            gap = float(np.linalg.norm(center - _shape_center(other)))
            if gap >= max(shape.size_scale, other.size_scale):
                continue
            merged = _merge_shapes(other, shape, points)
            if merged is None:
                # Unfaithful union: keep the stored shape and look for a
                # better merge partner.
                continue
            if (merged.contains(self.origin)
                    and not shape.contains(self.origin)
                    and not other.contains(self.origin)):
                # The union would claim the spot the robot stands on even
                # though neither observation does; refuse to grow over it.
                continue
            self._remove(other)
            return self.insert(merged, points=None)
        self._add(shape)
        return shape

    def _max_scale(self):
        best = 0.0
        for entries in self.buckets.values():
            for s in entries:
                best = max(best, s.size_scale)
        return best


def _family(shape):
    if isinstance(shape, Circle):
        return "circle"
    if isinstance(shape, (Square, Rectangle)):
        return "rect"
    return "triangle"


def _mean_boundary_residual(shape, points):
    """Mean distance from sample points to the shape (0 when all are inside)."""
    return float(np.mean([shape.distance(p) for p in points]))


def _enclosing_circle(a, b):
    d = float(np.linalg.norm(b.center - a.center))
    if d + b.radius <= a.radius:
        return Circle(a.center, a.radius)
    if d + a.radius <= b.radius:
        return Circle(b.center, b.radius)
    r = 0.5 * (d + a.radius + b.radius)
    u = (b.center - a.center) / d
    center = a.center + (r - a.radius) * u
    return Circle(center, r)


def _enclosing_rect(a, b):
    big = a if _poly_area(a) >= _poly_area(b) else b
    e = big.corners[1] - big.corners[0]
    u = e / np.linalg.norm(e)
    v = np.array([-u[1], u[0]])
    pts = np.vstack([a.corners, b.corners])
    su = pts @ u
    sv = pts @ v
    mid = (su.max() + su.min()) / 2.0 * u + (sv.max() + sv.min()) / 2.0 * v
    half_u = (su.max() - su.min()) / 2.0
    half_v = (sv.max() - sv.min()) / 2.0
    if abs(half_u - half_v) <= 1e-9 * max(half_u, half_v):
        return Square([mid - half_u * u - half_v * v, mid + half_u * u - half_v * v,
                       mid + half_u * u + half_v * v, mid - half_u * u + half_v * v])
    return oriented_rectangle(mid, u, half_u, half_v)


def _poly_area(shape):
    c = shape.corners
    n = np.roll(c, -1, axis=0)
    return 0.5 * abs(float(np.sum(c[:, 0] * n[:, 1] - c[:, 1] * n[:, 0])))


def _corners_area(corners):
    corners = np.asarray(corners, dtype=float)
    n = np.roll(corners, -1, axis=0)
    return 0.5 * abs(float(np.sum(corners[:, 0] * n[:, 1] - corners[:, 1] * n[:, 0])))


def _convex_intersection_area(a_corners, b_corners):
    """Area of the intersection of two convex CCW polygons (clip a by b)."""
    out = [np.asarray(p, dtype=float) for p in a_corners]
    b_corners = np.asarray(b_corners, dtype=float)
    for i in range(len(b_corners)):
        va = b_corners[i]
        edge = b_corners[(i + 1) % len(b_corners)] - va
        cur = out
        out = []
        if not cur:
            return 0.0
        side = [edge[0] * (p[1] - va[1]) - edge[1] * (p[0] - va[0]) for p in cur]
        for j in range(len(cur)):
            p, q = cur[j], cur[(j + 1) % len(cur)]
            sp, sq = side[j], side[(j + 1) % len(cur)]
            if sp >= -1e-12:
                out.append(p)
            if (sp >= -1e-12) != (sq >= -1e-12):
                d = q - p
                denom = edge[0] * d[1] - edge[1] * d[0]
                if abs(denom) > 1e-15:
                    out.append(p - (sp / denom) * d)
    if len(out) < 3:
        return 0.0
    return _corners_area(out)


#: A union is kept only while its area stays within this factor of the
#: combined areas of the parts.  Beyond that the enclosure mostly covers
#: free space (e.g. two perpendicular wall faces), so the observations are
#: better kept as separate shapes.
MERGE_AREA_SLACK = 1.3


def _merge_shapes(stored, incoming, points):
    """Union policy for two overlapping observations.

    Same-family pairs grow into the minimal enclosing shape of that family,
    but only when the enclosure stays faithful to the parts: when its area
    exceeds ``MERGE_AREA_SLACK`` times the area the two shapes actually
    cover it would claim free space as obstacle, so ``None`` is returned
    and both shapes are kept.  Across families the refit residual of the
    incoming cluster points decides which representation survives; without
    points there is no evidence either way and both are kept.
    """
    fam_s, fam_i = _family(stored), _family(incoming)
    if fam_s == "circle" and fam_i == "circle":
        union = _enclosing_circle(stored, incoming)
        parts = stored.radius ** 2 + incoming.radius ** 2
        if union.radius ** 2 > MERGE_AREA_SLACK * parts:
            return None
        return union
    if (fam_s == "rect" and fam_i == "rect") or (
            fam_s == "triangle" and fam_i == "triangle"):
        union = _enclosing_rect(stored, incoming)
        overlap = _convex_intersection_area(stored.corners, incoming.corners)
        covered = _poly_area(stored) + _poly_area(incoming) - overlap
        if _poly_area(union) > MERGE_AREA_SLACK * max(covered, 1e-12):
            return None
        return union
    if points is None or len(points) == 0:
        return None
    if _mean_boundary_residual(incoming, points) < _mean_boundary_residual(stored, points):
        return incoming
    return stored


# --- moving volume ---------------------------------------------------------

@dataclass
class VolumeSlice:
    t_rel: float
    center: np.ndarray
    shapes: list = field(default_factory=list)


@dataclass
class MovingVolume:
    """Per-timestep obstacle windows along the previously planned path."""

    slices: list
    tau: float
    horizon: float


def build_moving_volume(local_map, trajectory, t_now, horizon, tau, window_radius):
    """Collect, for each future timestep, map shapes near the old planned position.

    Slice k covers t_now + k*tau for k = 1..horizon/tau; the window center is
    the previous trajectory evaluated there (clamped into its domain).  A
    shape joins a slice when its center is within window_radius of the center.
    """
    n = int(round(horizon / tau))
    if abs(n * tau - horizon) > 1e-9:
        raise ValueError(f"tau {tau} does not divide horizon {horizon}")
    shapes = local_map.shapes()
    if shapes:
        centers = np.stack([_shape_center(s) for s in shapes])
    slices = []
    for k in range(1, n + 1):
        t_rel = k * tau
        c = trajectory.position(trajectory.clamp_time(t_now + t_rel))
        members = []
        if shapes:
            d = np.linalg.norm(centers - c, axis=1)
            members = [shapes[i] for i in np.flatnonzero(d <= window_radius)]
        slices.append(VolumeSlice(t_rel=t_rel, center=c, shapes=members))
    return MovingVolume(slices=slices, tau=tau, horizon=horizon)
