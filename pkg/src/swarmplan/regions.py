"""Convex safe regions carved from free space around a seed path.

For every future timestep a polytope is grown around the previously planned
position: rays marched in a fan of directions find the obstacles that bound
free space, each contributes a supporting halfplane, and a bounding box caps
the region.  Predicted peers cut the polytope further, and finally it is
deflated by the ego footprint so the trajectory optimizer can treat the
robot as a point.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .geometry import (Halfplane, ConvexPolytope, segment_shape_intersection,
                       supporting_halfplane)
from .prediction import CircleFootprint, footprint_from_size


@dataclass
class RegionConfig:
    n_directions: int = 16
    step: float = 0.05          # march resolution, meters
    r_max: float = 5.0          # march range and bounding-box half width
    max_planes: int = 24        # nearest planes kept per region
    peer_margin: float = 0.1    # extra clearance cut away around peers, meters


class SeedInsideObstacle(ValueError):
    """The region seed lies inside a mapped shape; no region can be grown."""


@dataclass
class RegionSlice:
    t_rel: float
    seed: np.ndarray
    polytope: ConvexPolytope          # peer-contracted and ego-deflated
    feasible: bool = True
    static_polytope: ConvexPolytope = None  # before peer cuts / deflation


@dataclass
class SafeRegion:
    slices: list
    tau: float

    def slice_at(self, t_rel):
        """Slice whose timestep is nearest to t_rel."""
        k = int(round(t_rel / self.tau)) - 1
        k = min(max(k, 0), len(self.slices) - 1)
        return self.slices[k]


def _box_halfplanes(seed, r_max):
    return [
        Halfplane(np.array([1.0, 0.0]), seed[0] + r_max),
        Halfplane(np.array([-1.0, 0.0]), -seed[0] + r_max),
        Halfplane(np.array([0.0, 1.0]), seed[1] + r_max),
        Halfplane(np.array([0.0, -1.0]), -seed[1] + r_max),
    ]


def seed_region(seed, shapes, config=None):
    """Convex free-space polytope around a seed point.

    Rays in n_directions march outward in `step` increments up to r_max; the
    first shape hit per direction contributes one supporting halfplane at the
    point where the segment from seed to its center crosses its boundary.
    Four axis-aligned box planes at r_max close the region.  When more than
    max_planes accumulate, the planes nearest the seed win.  Raises
    SeedInsideObstacle when the seed is covered by a shape.
    """
    if config is None:
        config = RegionConfig()
    seed = np.asarray(seed, dtype=float)
    for s in shapes:
        if s.contains(seed):
            raise SeedInsideObstacle(f"seed {seed.tolist()} is inside {s!r}")

    planes = _box_halfplanes(seed, config.r_max)
    if shapes:
        n_steps = int(round(config.r_max / config.step))
        th = 2.0 * np.pi * np.arange(config.n_directions) / config.n_directions
        dirs = np.stack([np.cos(th), np.sin(th)], axis=1)
        radii = config.step * np.arange(1, n_steps + 1)
        pts = seed[None, None, :] + radii[None, :, None] * dirs[:, None, :]
        flat = pts.reshape(-1, 2)
        first_hit = np.full(config.n_directions, n_steps, dtype=int)
        hit_shape = np.full(config.n_directions, -1, dtype=int)
        for si, s in enumerate(shapes):
            inside = s.contains_many(flat).reshape(config.n_directions, n_steps)
            any_hit = inside.any(axis=1)
            idx = np.where(any_hit, inside.argmax(axis=1), n_steps)
            closer = idx < first_hit
            first_hit[closer] = idx[closer]
            hit_shape[closer] = si
        chosen = []
        for d in range(config.n_directions):
            si = hit_shape[d]
            if si >= 0 and si not in chosen:
                chosen.append(si)
        for si in chosen:
            s = shapes[si]
            q = segment_shape_intersection(seed, s.center, s)
            if q is None:
                continue
            planes.append(supporting_halfplane(s, q, seed))

    if len(planes) > config.max_planes:
        dist = [hp.offset - float(hp.normal @ seed) for hp in planes]
        order = np.argsort(dist, kind="stable")[:config.max_planes]
        planes = [planes[i] for i in sorted(order)]
    return ConvexPolytope(planes)


def contract_for_peer(polytope, seed, peer_position, footprint, margin=0.0):
    """Cut the region away from a predicted peer, or leave it unchanged.

    The peer occupies `footprint` centered at peer_position, padded by
    `margin` to absorb prediction error and inter-sample motion.  If a
    region plane already separates the padded footprint, nothing changes.
    Otherwise one plane normal to the seed-to-peer direction is added,
    touching the padded footprint on the seed side.  Returns (polytope,
    feasible); feasible goes False when the seed itself is covered.
    """
    seed = np.asarray(seed, dtype=float)
    peer_position = np.asarray(peer_position, dtype=float)
    rel = seed - peer_position
    if footprint.contains(rel):
        return polytope, False
    # Separated when some plane keeps the whole padded footprint outside.
    margins = polytope.normals @ peer_position - polytope.offsets
    supports = np.array([footprint.support(-n) for n in polytope.normals])
    if np.any(margins - supports > margin):
        return polytope, True
    u = -rel / np.linalg.norm(rel)
    offset = float(u @ peer_position) - footprint.support(-u) - margin
    planes = polytope.halfplanes()
    planes.append(Halfplane(u, offset))
    return ConvexPolytope(planes), True


def region_is_empty(polytope, probe=None):
    """True when the polytope has no interior point.

    A cheap probe containment test short-circuits; otherwise the Chebyshev
    center linear program decides.
    """
    if probe is not None and polytope.contains(probe):
        return False
    m = len(polytope)
    # max r s.t. n_k . x + r <= o_k  ->  linprog minimizes -r.
    A = np.hstack([polytope.normals, np.ones((m, 1))])
    res = linprog(c=[0.0, 0.0, -1.0], A_ub=A, b_ub=polytope.offsets,
                  bounds=[(None, None), (None, None), (None, None)],
                  method="highs")
    if not res.success:
        return True
    return -res.fun < -1e-9


def deflate_for_ego(polytope, footprint):
    """Shrink every plane inward by the ego footprint's support in its normal.

    After deflation the optimizer can constrain the reference point alone.
    """
    planes = [Halfplane(n, o - footprint.support(n))
              for n, o in zip(polytope.normals, polytope.offsets)]
    return ConvexPolytope(planes)


def build_safe_regions(volume, tracks, ego_footprint, now, prediction_config,
                       region_config=None, previous=None):
    """One deflated polytope per moving-volume slice.

    Slice seeds come from the volume (the old plan's positions).  Static
    shapes bound each region, every live track cuts it at its predicted
    position, and the result is deflated by the ego footprint.  A seed stuck
    inside a mapped shape falls back to the previous cycle's nearest region;
    slices whose seed is covered by a peer or whose polytope ends up empty
    are flagged infeasible.
    """
    if region_config is None:
        region_config = RegionConfig()
    track_paths = []
    times = np.array([now + s.t_rel for s in volume.slices])
    for tr in tracks:
        track_paths.append((tr.predict_positions(times, prediction_config),
                            footprint_from_size(tr.latest.size or (0.1,))))
    slices = []
    for k, vs in enumerate(volume.slices):
        feasible = True
        try:
            poly = seed_region(vs.center, vs.shapes, region_config)
        except SeedInsideObstacle:
            if previous is not None:
                prev_slice = previous.slice_at(vs.t_rel)
                poly = (prev_slice.static_polytope
                        if prev_slice.static_polytope is not None
                        else prev_slice.polytope)
                feasible = prev_slice.feasible
            else:
                poly = ConvexPolytope(_box_halfplanes(vs.center, region_config.r_max))
                feasible = False
        static_poly = poly
        for path, fp in track_paths:
            poly, ok = contract_for_peer(poly, vs.center, path[k], fp,
                                         margin=region_config.peer_margin)
            feasible = feasible and ok
        poly = deflate_for_ego(poly, ego_footprint)
        if feasible and region_is_empty(poly, probe=vs.center):
            feasible = False
        slices.append(RegionSlice(t_rel=vs.t_rel, seed=vs.center,
                                  polytope=poly, feasible=feasible,
                                  static_polytope=static_poly))
    return SafeRegion(slices=slices, tau=volume.tau)
