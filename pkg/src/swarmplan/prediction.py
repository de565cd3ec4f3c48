"""Anonymous peer tracking and motion prediction from broadcast states.

Broadcasts carry no sender identity, so incoming states are associated to
tracks by how well each track's current prediction explains them.  Tracks
keep a sliding window of states and fit a jerk-regularized quintic per axis;
until enough data arrives, a constant-acceleration extrapolation of the
newest state fills in.
"""

from dataclasses import dataclass, field

import numpy as np

from numpy.polynomial import polynomial as P


@dataclass
class PredictionConfig:
    window: int = 20                  # states kept per track
    lambda_jerk: float = 0.05         # smoothness weight in the quintic fit
    gate: float = 1.0                 # association score admitted to a track
    w_velocity: float = 0.5           # association weight on velocity mismatch
    w_acceleration: float = 0.1       # association weight on acceleration mismatch
    staleness: float = 0.5            # seconds without updates before flagging
    physical_half_factor: bool = False  # use 1/2 a t^2 in the bootstrap


@dataclass
class PeerState:
    """One broadcast sample: kinematic state plus the sender's size descriptor."""

    stamp: float
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    size: tuple = ()

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.velocity = np.asarray(self.velocity, dtype=float)
        self.acceleration = np.asarray(self.acceleration, dtype=float)


def predict_constant_accel(state, t, half_factor=False):
    """Extrapolate a single state to time t.

    The default propagates position as P + v dt + a dt^2; with half_factor
    the familiar P + v dt + a dt^2 / 2 is used instead.
    """
    dt = t - state.stamp
    scale = 0.5 if half_factor else 1.0
    return state.position + state.velocity * dt + scale * state.acceleration * dt * dt


def _jerk_gram(T):
    """Gram matrix J with a' J a = integral_0^T (jerk of sum a_i s^i)^2 ds."""
    J = np.zeros((6, 6))
    J[3, 3] = 36.0 * T
    J[3, 4] = J[4, 3] = 72.0 * T ** 2
    J[4, 4] = 192.0 * T ** 3
    J[3, 5] = J[5, 3] = 120.0 * T ** 3
    J[4, 5] = J[5, 4] = 360.0 * T ** 4
    J[5, 5] = 720.0 * T ** 5
    return J


def _state_rows(s):
    """Position/velocity/acceleration observation rows at relative time s."""
    return np.array([
        [1.0, s, s ** 2, s ** 3, s ** 4, s ** 5],
        [0.0, 1.0, 2 * s, 3 * s ** 2, 4 * s ** 3, 5 * s ** 4],
        [0.0, 0.0, 2.0, 6 * s, 12 * s ** 2, 20 * s ** 3],
    ])


def fit_quintic(states, t1, t2, lambda_jerk):
    """Least-squares quintic through the window, regularized by jerk energy.

    Minimizes |A a - b|^2 + lambda_jerk * integral of squared jerk over
    [0, t2 - t1], with position, velocity, and acceleration rows for every
    state.  Returns (6, 2) coefficients per axis in powers of (t - t1).
    The system is nonsingular for lambda_jerk > 0 and t2 > t1.
    """
    if not states:
        raise ValueError("cannot fit an empty window")
    T = t2 - t1
    if T <= 0:
        raise ValueError(f"window must have positive length, got {T}")
    rows = []
    rhs = []
    for st in states:
        s = st.stamp - t1
        rows.append(_state_rows(s))
        rhs.append(np.stack([st.position, st.velocity, st.acceleration]))
    A = np.vstack(rows)
    b = np.vstack(rhs)
    H = A.T @ A + lambda_jerk * _jerk_gram(T)
    return np.linalg.solve(H, A.T @ b)


@dataclass
class PeerTrack:
    """Sliding-window history of one anonymous peer with its fitted motion."""

    states: list = field(default_factory=list)
    coeffs: np.ndarray = None
    t_ref: float = 0.0

    @property
    def latest(self):
        return self.states[-1]

    def push(self, state, config):
        self.states.append(state)
        if len(self.states) > config.window:
            self.states = self.states[-config.window:]
        if len(self.states) >= 2:
            t1 = self.states[0].stamp
            t2 = self.states[-1].stamp
            if t2 > t1:
                self.coeffs = fit_quintic(self.states, t1, t2, config.lambda_jerk)
                self.t_ref = t1

    def is_stale(self, now, config):
        return now - self.latest.stamp > config.staleness

    def _poly_eval(self, t, order):
        c = self.coeffs
        out = np.empty(2)
        for ax in range(2):
            cc = c[:, ax]
            for _ in range(order):
                cc = P.polyder(cc)
            out[ax] = P.polyval(t - self.t_ref, cc)
        return out

    def predict_position(self, t, config):
        if self.coeffs is None:
            return predict_constant_accel(self.latest, t, config.physical_half_factor)
        return self._poly_eval(t, 0)

    def predict_velocity(self, t, config):
        if self.coeffs is None:
            st = self.latest
            dt = t - st.stamp
            scale = 0.5 if config.physical_half_factor else 1.0
            return st.velocity + 2.0 * scale * st.acceleration * dt
        return self._poly_eval(t, 1)

    def predict_acceleration(self, t, config):
        if self.coeffs is None:
            scale = 0.5 if config.physical_half_factor else 1.0
            return 2.0 * scale * self.latest.acceleration
        return self._poly_eval(t, 2)

    def predict_positions(self, times, config):
        """Vectorized position prediction at an array of times."""
        if self.coeffs is None:
            st = self.latest
            dt = np.asarray(times) - st.stamp
            scale = 0.5 if config.physical_half_factor else 1.0
            return (st.position[None, :] + st.velocity[None, :] * dt[:, None]
                    + scale * st.acceleration[None, :] * (dt * dt)[:, None])
        s = np.asarray(times) - self.t_ref
        out = np.empty((len(s), 2))
        for ax in range(2):
            out[:, ax] = P.polyval(s, self.coeffs[:, ax])
        return out


def association_score(track, state, config):
    """Mismatch between a track's prediction and an incoming state."""
    t = state.stamp
    dp = np.linalg.norm(track.predict_position(t, config) - state.position)
    dv = np.linalg.norm(track.predict_velocity(t, config) - state.velocity)
    da = np.linalg.norm(track.predict_acceleration(t, config) - state.acceleration)
    return float(dp + config.w_velocity * dv + config.w_acceleration * da)


def associate(tracks, state, config):
    """Index of the track that best explains `state`, or None for a new track.

    The best score must pass the gate; ties go to the lowest track index.
    """
    best_idx = None
    best = np.inf
    for i, tr in enumerate(tracks):
        score = association_score(tr, state, config)
        if score < best - 1e-12:
            best = score
            best_idx = i
    if best_idx is None or best > config.gate:
        return None
    return best_idx


def update_tracks(tracks, state, config):
    """Associate one incoming state, updating or creating a track in place."""
    idx = associate(tracks, state, config)
    if idx is None:
        tracks.append(PeerTrack(states=[state]))
        return len(tracks) - 1
    tracks[idx].push(state, config)
    return idx


# --- footprints ------------------------------------------------------------

class CircleFootprint:
    """Disk footprint used for peers reporting one or two size lengths."""

    __slots__ = ("radius",)

    def __init__(self, radius):
        if radius <= 0:
            raise ValueError("footprint radius must be positive")
        self.radius = float(radius)

    def support(self, u):
        return self.radius

    def contains(self, rel, tol=0.0):
        return float(np.linalg.norm(rel)) <= self.radius + tol


class SquareFootprint:
    """Axis-aligned square footprint for peers reporting three size lengths."""

    __slots__ = ("half_extent",)

    def __init__(self, half_extent):
        if half_extent <= 0:
            raise ValueError("footprint half extent must be positive")
        self.half_extent = float(half_extent)

    def support(self, u):
        return self.half_extent * (abs(u[0]) + abs(u[1]))

    def contains(self, rel, tol=0.0):
        return float(np.max(np.abs(rel))) <= self.half_extent + tol


def footprint_from_size(size):
    """Bounding footprint per the broadcast size convention.

    One or two lengths describe a round body: a disk of the largest length.
    Three lengths describe an angular body: an axis-aligned square with half
    extent sqrt(2) times the largest length, covering it in any orientation.
    """
    size = tuple(float(v) for v in size)
    if not 1 <= len(size) <= 3:
        raise ValueError(f"size descriptor needs 1..3 lengths, got {len(size)}")
    if any(v <= 0 for v in size):
        raise ValueError("size lengths must be positive")
    if len(size) == 3:
        return SquareFootprint(np.sqrt(2.0) * max(size))
    return CircleFootprint(max(size))
