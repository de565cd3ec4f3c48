"""2D geometric primitives: obstacle shapes, halfplanes, and convex polytopes.

Shapes are closed point sets (boundary included).  All polygons store their
corners counter-clockwise so that edge normals computed as (dy, -dx) point
outward.  Angles are radians, distances meters.
"""

import numpy as np

# Points within this of a boundary count as on it.
BOUNDARY_TOL = 1e-6


def _as_point(p):
    p = np.asarray(p, dtype=float)
    if p.shape != (2,):
        raise ValueError(f"expected a 2D point, got shape {p.shape}")
    return p


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


class Circle:
    """Disk with center (2,) and radius > 0."""

    __slots__ = ("center", "radius")

    def __init__(self, center, radius):
        self.center = _as_point(center)
        radius = float(radius)
        if radius <= 0:
            raise ValueError(f"circle radius must be positive, got {radius}")
        self.radius = radius

    def __repr__(self):
        return f"Circle(center={self.center.tolist()}, radius={self.radius})"

    @property
    def size_scale(self):
        return self.radius

    def distance(self, p):
        """Distance from p to the disk (0 if inside)."""
        return max(0.0, float(np.linalg.norm(_as_point(p) - self.center)) - self.radius)

    def boundary_distance(self, p):
        return abs(float(np.linalg.norm(_as_point(p) - self.center)) - self.radius)

    def contains(self, p, tol=0.0):
        return float(np.linalg.norm(_as_point(p) - self.center)) <= self.radius + tol

    def contains_many(self, pts, tol=0.0):
        d = pts - self.center
        return d[:, 0] ** 2 + d[:, 1] ** 2 <= (self.radius + tol) ** 2

    def boundary_samples(self, n=64):
        th = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
        return self.center + self.radius * np.stack([np.cos(th), np.sin(th)], axis=1)

    def ray_distances(self, origins, dirs):
        """First-hit distances for rays origin + t*dir, t > 0; inf on miss.

        origins is (2,) or (k, 2); dirs is (k, 2) unit vectors.
        """
        rel = self.center - np.atleast_2d(origins)
        proj = np.sum(rel * dirs, axis=1)
        perp2 = np.sum(rel * rel, axis=1) - proj ** 2
        disc = self.radius ** 2 - perp2
        out = np.full(len(dirs), np.inf)
        ok = disc >= 0.0
        root = np.sqrt(np.maximum(disc, 0.0))
        t_near = proj - root
        t_far = proj + root
        # From outside the first crossing is t_near; from inside it is t_far.
        t = np.where(t_near > BOUNDARY_TOL, t_near, t_far)
        hit = ok & (t > BOUNDARY_TOL)
        out[hit] = t[hit]
        return out

    def support(self, u):
        """max_{x in shape} u.x for unit direction u."""
        return float(u @ self.center) + self.radius

    def nearest_boundary_feature(self, p):
        """Nearest boundary point and curvature center info for exterior p.

        Returns (q, kind) with kind 'arc'.  Undefined at the exact center.
        """
        v = _as_point(p) - self.center
        norm = np.linalg.norm(v)
        if norm < 1e-12:
            return self.center + np.array([self.radius, 0.0]), "arc"
        return self.center + v * (self.radius / norm), "arc"


class ConvexPolygonShape:
    """Base for convex polygon obstacles with CCW corners (k, 2)."""

    __slots__ = ("corners",)

    def __init__(self, corners):
        corners = np.asarray(corners, dtype=float)
        if corners.ndim != 2 or corners.shape[1] != 2 or len(corners) < 3:
            raise ValueError(f"polygon corners must be (k>=3, 2), got {corners.shape}")
        area2 = 0.0
        for i in range(len(corners)):
            area2 += _cross(corners[i], corners[(i + 1) % len(corners)])
        if area2 < 0:
            corners = corners[::-1].copy()
        self.corners = corners

    def __repr__(self):
        return f"{type(self).__name__}(corners={self.corners.tolist()})"

    @property
    def center(self):
        return self.corners.mean(axis=0)

    @property
    def size_scale(self):
        c = self.center
        return float(np.max(np.linalg.norm(self.corners - c, axis=1)))

    def _edges(self):
        return self.corners, np.roll(self.corners, -1, axis=0)

    def edge_normals(self):
        """Outward unit normals, one per CCW edge."""
        a, b = self._edges()
        e = b - a
        n = np.stack([e[:, 1], -e[:, 0]], axis=1)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def contains(self, p, tol=0.0):
        p = _as_point(p)
        a, b = self._edges()
        return bool(np.all(_cross(b - a, p - a) >= -tol * np.linalg.norm(b - a, axis=1)))

    def contains_many(self, pts, tol=0.0):
        a, b = self._edges()
        e = b - a
        lens = np.linalg.norm(e, axis=1)
        rel = pts[:, None, :] - a[None, :, :]
        cr = e[None, :, 0] * rel[:, :, 1] - e[None, :, 1] * rel[:, :, 0]
        return np.all(cr >= -tol * lens[None, :], axis=1)

    def distance(self, p):
        p = _as_point(p)
        if self.contains(p):
            return 0.0
        return self._boundary_dist(p)

    def _boundary_dist(self, p):
        a, b = self._edges()
        e = b - a
        t = np.clip(np.sum((p - a) * e, axis=1) / np.sum(e * e, axis=1), 0.0, 1.0)
        proj = a + t[:, None] * e
        return float(np.min(np.linalg.norm(p - proj, axis=1)))

    def boundary_distance(self, p):
        return self._boundary_dist(_as_point(p))

    def boundary_samples(self, n=64):
        a, b = self._edges()
        lens = np.linalg.norm(b - a, axis=1)
        perim = lens.sum()
        s = np.linspace(0.0, perim, n, endpoint=False)
        cum = np.concatenate([[0.0], np.cumsum(lens)])
        idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(lens) - 1)
        frac = (s - cum[idx]) / lens[idx]
        return a[idx] + frac[:, None] * (b[idx] - a[idx])

    def ray_distances(self, origins, dirs):
        """First-hit distances against all edges; inf on miss."""
        a, b = self._edges()
        e = b - a
        origins = np.atleast_2d(origins)
        if len(origins) == 1:
            origins = np.broadcast_to(origins, dirs.shape)
        denom = dirs[:, None, 0] * e[None, :, 1] - dirs[:, None, 1] * e[None, :, 0]
        rel = a[None, :, :] - origins[:, None, :]
        t_num = rel[:, :, 0] * e[None, :, 1] - rel[:, :, 1] * e[None, :, 0]
        s_num = rel[:, :, 0] * dirs[:, None, 1] - rel[:, :, 1] * dirs[:, None, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = t_num / denom
            s = s_num / denom
        ok = (np.abs(denom) > 1e-14) & (s >= 0.0) & (s <= 1.0) & (t > BOUNDARY_TOL)
        t = np.where(ok, t, np.inf)
        return t.min(axis=1)

    def support(self, u):
        return float(np.max(self.corners @ u))

    def nearest_boundary_feature(self, p):
        """Nearest boundary point and whether it lies on an edge or a vertex."""
        p = _as_point(p)
        a, b = self._edges()
        e = b - a
        t = np.clip(np.sum((p - a) * e, axis=1) / np.sum(e * e, axis=1), 0.0, 1.0)
        proj = a + t[:, None] * e
        d = np.linalg.norm(p - proj, axis=1)
        i = int(np.argmin(d))
        kind = "vertex" if (t[i] < 1e-9 or t[i] > 1.0 - 1e-9) else "edge"
        return proj[i], kind


class Square(ConvexPolygonShape):
    """Axis-arbitrary square: 4 CCW corners with equal side lengths."""

    def __init__(self, corners):
        super().__init__(corners)
        if len(self.corners) != 4:
            raise ValueError("square needs exactly 4 corners")


class Rectangle(ConvexPolygonShape):
    """Oriented rectangle: 4 CCW corners."""

    def __init__(self, corners):
        super().__init__(corners)
        if len(self.corners) != 4:
            raise ValueError("rectangle needs exactly 4 corners")


class Triangle(ConvexPolygonShape):
    def __init__(self, corners):
        super().__init__(corners)
        if len(self.corners) != 3:
            raise ValueError("triangle needs exactly 3 corners")


def axis_rectangle(xmin, ymin, xmax, ymax):
    """Axis-aligned Rectangle from min/max corners."""
    return Rectangle([[xmin, ymin], [xmax, ymin], [xmax, ymax], [xmin, ymax]])


def oriented_rectangle(center, axis_u, half_u, half_v):
    """Rectangle centered at `center` with unit long axis `axis_u` and half extents."""
    u = np.asarray(axis_u, dtype=float)
    u = u / np.linalg.norm(u)
    v = np.array([-u[1], u[0]])
    c = _as_point(center)
    corners = [c - half_u * u - half_v * v, c + half_u * u - half_v * v,
               c + half_u * u + half_v * v, c - half_u * u + half_v * v]
    return Rectangle(corners)


class Halfplane:
    """Closed halfplane {p : normal . p <= offset} with unit normal."""

    __slots__ = ("normal", "offset")

    def __init__(self, normal, offset):
        normal = _as_point(normal)
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            raise ValueError("halfplane normal must be nonzero")
        self.normal = normal / norm
        self.offset = float(offset) / norm

    def __repr__(self):
        return f"Halfplane(normal={self.normal.tolist()}, offset={self.offset})"

    def contains(self, p, tol=BOUNDARY_TOL):
        return float(self.normal @ _as_point(p)) <= self.offset + tol


class ConvexPolytope:
    """Intersection of halfplanes, stored as normals (m, 2) and offsets (m,).

    Construction drops exact duplicate rows (same normal and offset bits).
    """

    __slots__ = ("normals", "offsets")

    def __init__(self, halfplanes):
        normals = []
        offsets = []
        seen = set()
        for hp in halfplanes:
            key = (hp.normal[0], hp.normal[1], hp.offset)
            if key in seen:
                continue
            seen.add(key)
            normals.append(hp.normal)
            offsets.append(hp.offset)
        if not normals:
            raise ValueError("polytope needs at least one halfplane")
        self.normals = np.array(normals)
        self.offsets = np.array(offsets)

    def __len__(self):
        return len(self.offsets)

    def contains(self, p, tol=1e-9):
        return bool(np.all(self.normals @ _as_point(p) <= self.offsets + tol))

    def violation(self, p):
        """Largest constraint violation at p (<= 0 means inside)."""
        return float(np.max(self.normals @ _as_point(p) - self.offsets))

    def halfplanes(self):
        return [Halfplane(n, o) for n, o in zip(self.normals, self.offsets)]


def circle_from_three_points(p1, p2, p3):
    """Circumscribed circle through three points, or None if collinear.

    Uses the determinant form: with s_i = x_i^2 + y_i^2,
      b = 2 (x1 (y2 - y3) + x2 (y3 - y1) + x3 (y1 - y2))
      cx = (s1 (y2 - y3) + s2 (y3 - y1) + s3 (y1 - y2)) / b
      cy = (s1 (x3 - x2) + s2 (x1 - x3) + s3 (x2 - x1)) / b
    Returns None when b vanishes (collinear input).
    """
    (x1, y1), (x2, y2), (x3, y3) = _as_point(p1), _as_point(p2), _as_point(p3)
    b = 2.0 * (x1 * (y2 - y3) + x2 * (y3 - y1) + x3 * (y1 - y2))
    scale = max(1.0, x1 * x1 + y1 * y1, x2 * x2 + y2 * y2, x3 * x3 + y3 * y3)
    if abs(b) < 1e-12 * scale:
        return None
    s1 = x1 * x1 + y1 * y1
    s2 = x2 * x2 + y2 * y2
    s3 = x3 * x3 + y3 * y3
    cx = (s1 * (y2 - y3) + s2 * (y3 - y1) + s3 * (y1 - y2)) / b
    cy = (s1 * (x3 - x2) + s2 * (x1 - x3) + s3 * (x2 - x1)) / b
    center = np.array([cx, cy])
    radius = float(np.linalg.norm(center - (x1, y1)))
    if radius <= 0.0:
        return None
    return Circle(center, radius)


def distance_point_to_shape(p, shape):
    """Euclidean distance from p to the closed shape (0 inside)."""
    return shape.distance(p)


def segment_shape_intersection(a, b, shape):
    """First boundary crossing of segment a->b, or None if it never crosses.

    Returns the crossing point nearest to a.
    """
    a = _as_point(a)
    b = _as_point(b)
    d = b - a
    length = float(np.linalg.norm(d))
    if length < 1e-12:
        return None
    u = d / length
    t = float(shape.ray_distances(a[None, :], u[None, :])[0])
    if not np.isfinite(t) or t > length + BOUNDARY_TOL:
        return None
    return a + min(t, length) * u


def ray_cast(origin, angle, shape, max_range):
    """Distance along the ray from origin at `angle` to the shape boundary.

    Returns None when the first boundary crossing is beyond max_range or absent.
    """
    u = np.array([np.cos(angle), np.sin(angle)])
    t = float(shape.ray_distances(_as_point(origin)[None, :], u[None, :])[0])
    if not np.isfinite(t) or t > max_range:
        return None
    return t


def supporting_halfplane(shape, boundary_point, exterior_point):
    """Halfplane tangent to the shape at boundary_point, containing exterior_point.

    The shape lies entirely on the excluded side (normal . p >= offset for all
    shape points).  boundary_point must lie on the shape boundary and
    exterior_point strictly outside, on the outward side of the tangent.
    """
    q = _as_point(boundary_point)
    e = _as_point(exterior_point)
    if shape.boundary_distance(q) > BOUNDARY_TOL:
        raise ValueError("boundary_point is not on the shape boundary")
    if shape.distance(e) <= 0.0:
        raise ValueError("exterior_point is not strictly outside the shape")
    if isinstance(shape, Circle):
        v = q - shape.center
        n_out = v / np.linalg.norm(v)
    else:
        corners = shape.corners
        nxt = np.roll(corners, -1, axis=0)
        edge = nxt - corners
        t = np.clip(np.sum((q - corners) * edge, axis=1) / np.sum(edge * edge, axis=1), 0.0, 1.0)
        proj = corners + t[:, None] * edge
        dists = np.linalg.norm(q - proj, axis=1)
        on_edges = np.flatnonzero(dists <= BOUNDARY_TOL * 10 + dists.min())
        normals = shape.edge_normals()
        # At a vertex two edges qualify; pick the one whose outward side best
        # contains the exterior point.
        best = max(on_edges, key=lambda i: float(normals[i] @ (e - q)))
        n_out = normals[best]
    hp = Halfplane(-n_out, float(-n_out @ q))
    if not hp.contains(e, tol=BOUNDARY_TOL):
        raise ValueError("exterior_point is not on the outward side of the tangent")
    return hp


def shape_distance(a, b):
    """Distance between two closed shapes (0 if they touch or overlap)."""
    if isinstance(a, Circle) and isinstance(b, Circle):
        return max(0.0, float(np.linalg.norm(a.center - b.center)) - a.radius - b.radius)
    if isinstance(a, Circle):
        return max(0.0, b.distance(a.center) - a.radius)
    if isinstance(b, Circle):
        return max(0.0, a.distance(b.center) - b.radius)
    # Polygon vs polygon: zero if any corner is inside the other, else the
    # minimum distance over edge-segment pairs.
    if np.any(a.contains_many(b.corners)) or np.any(b.contains_many(a.corners)):
        return 0.0
    best = np.inf
    for p in a.corners:
        best = min(best, b.boundary_distance(p))
    for p in b.corners:
        best = min(best, a.boundary_distance(p))
    a1, a2 = a._edges()
    b1, b2 = b._edges()
    for i in range(len(a1)):
        for j in range(len(b1)):
            best = min(best, _segment_segment_distance(a1[i], a2[i], b1[j], b2[j]))
    return float(best)


def _segment_segment_distance(p1, p2, q1, q2):
    d1 = p2 - p1
    d2 = q2 - q1
    r = p1 - q1
    a = d1 @ d1
    e = d2 @ d2
    f = d2 @ r
    if a < 1e-30 and e < 1e-30:
        return float(np.linalg.norm(r))
    if a < 1e-30:
        t = np.clip(f / e, 0.0, 1.0)
        return float(np.linalg.norm(p1 - (q1 + t * d2)))
    c = d1 @ r
    if e < 1e-30:
        s = np.clip(-c / a, 0.0, 1.0)
        return float(np.linalg.norm(p1 + s * d1 - q1))
    b = d1 @ d2
    denom = a * e - b * b
    s = np.clip((b * f - c * e) / denom, 0.0, 1.0) if denom > 1e-30 else 0.0
    t = (b * s + f) / e
    if t < 0.0:
        t = 0.0
        s = np.clip(-c / a, 0.0, 1.0)
    elif t > 1.0:
        t = 1.0
        s = np.clip((b - c) / a, 0.0, 1.0)
    return float(np.linalg.norm(p1 + s * d1 - (q1 + t * d2)))
