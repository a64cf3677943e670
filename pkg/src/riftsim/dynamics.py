"""Kinematic bicycle model, PID tracking, oriented-box geometry and forward simulation.

All propagation is vectorized over a leading batch axis so a whole candidate set
(or every background agent) advances in one numpy call per tick.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .worldmap import ReferenceLine, wrap_angle

DT = 0.1
TWO_PI = 2.0 * np.pi


def _wrap(a):
    # [-pi, pi); callers that expose headings map -pi to pi via wrap_angle
    return np.remainder(a + np.pi, TWO_PI) - np.pi


@dataclass(frozen=True)
class Limits:
    a_min: float = -6.0
    a_max: float = 3.0
    steer_max: float = 0.5
    v_cap: float = 25.0


DEFAULT_LIMITS = Limits()


@dataclass(frozen=True)
class VehicleShape:
    length: float = 4.5
    width: float = 1.9
    wheelbase: float = 2.7

    def __post_init__(self):
        if not (self.length > self.wheelbase > 0 and self.width > 0):
            raise ValueError(f"invalid vehicle shape {self}")


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    heading: float
    speed: float
    accel: float = 0.0
    steering: float = 0.0
    yaw_rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))
        if self.speed < 0:
            raise ValueError("speed must be non-negative (no reverse gear)")

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def velocity(self) -> np.ndarray:
        return self.speed * np.array([np.cos(self.heading), np.sin(self.heading)])


@dataclass(frozen=True)
class ControlCommand:
    """Acceleration and steering, clamped to ``limits`` on construction."""

    accel: float
    steer: float
    limits: Limits = field(default=DEFAULT_LIMITS, repr=False, compare=False)

    def __post_init__(self):
        lim = self.limits
        object.__setattr__(self, "accel", float(min(max(self.accel, lim.a_min), lim.a_max)))
        object.__setattr__(self, "steer", float(min(max(self.steer, -lim.steer_max), lim.steer_max)))


@dataclass(frozen=True)
class PIDGains:
    kp_speed: float = 2.5
    ki_speed: float = 0.1
    kd_speed: float = 0.0
    kp_lat: float = 0.5
    ki_lat: float = 0.0
    kd_lat: float = 0.0
    k_heading: float = 2.0
    k_station: float = 1.0
    integral_limit: float = 0.5


DEFAULT_GAINS = PIDGains()


def propagate(x, y, heading, speed, accel, steer, wheelbase, dt, v_cap=DEFAULT_LIMITS.v_cap):
    """One semi-implicit Euler step of the rear-axle bicycle model on arrays.

    Speed updates first; heading integrates the new speed; position uses the new
    speed with the old heading. Returns (x, y, heading, speed, accel, yaw_rate),
    where accel is the acceleration actually realized after the speed clamp.
    """
    v_raw = speed + accel * dt
    v_new = np.minimum(np.maximum(v_raw, 0.0), v_cap)
    realized = np.where(v_new == v_raw, accel, (v_new - speed) / dt)
    yaw_rate = v_new * np.tan(steer) / wheelbase
    x_new = x + v_new * np.cos(heading) * dt
    y_new = y + v_new * np.sin(heading) * dt
    h_new = _wrap(heading + yaw_rate * dt)
    return x_new, y_new, h_new, v_new, realized, yaw_rate


def bicycle_step(state: VehicleState, cmd: ControlCommand, shape: VehicleShape, dt: float = DT,
                 limits: Limits = DEFAULT_LIMITS) -> VehicleState:
    if not dt > 0:
        raise ValueError("dt must be positive")
    x, y, h, v, a, w = propagate(state.x, state.y, state.heading, state.speed, cmd.accel, cmd.steer,
                                 shape.wheelbase, dt, limits.v_cap)
    return VehicleState(float(x), float(y), float(h), float(v), float(a), cmd.steer, float(w))


# ---------------------------------------------------------------------------
# PID tracking


class PIDTracker:
    """Batched PID tracker; holds integrator and derivative memory for ``n`` vehicles.

    Longitudinal loop: PID on speed error plus k_station times the along-track gap. Lateral loop: PID on
    (-cross-track offset + k_heading * heading error) measured against the target
    point's tangent line. Integrators are clamped for anti-windup.
    """

    def __init__(self, gains: PIDGains = DEFAULT_GAINS, limits: Limits = DEFAULT_LIMITS, dt: float = DT, n: int = 1):
        self.gains = gains
        self.limits = limits
        self.dt = dt
        self.n = n
        self.reset()

    def reset(self):
        self.int_speed = np.zeros(self.n)
        self.int_lat = np.zeros(self.n)
        self.prev_speed = None
        self.prev_lat = None

    def command(self, x, y, heading, speed, tx, ty, theading, tspeed, station: bool = True):
        """With ``station`` the target is where the vehicle should be one step ahead,
        and the along-track shortfall feeds the speed loop."""
        g, lim, dt = self.gains, self.limits, self.dt
        dx = x - tx
        dy = y - ty
        e_v = tspeed - speed
        if station:
            along = -(np.cos(theading) * dx + np.sin(theading) * dy)
            e_v = e_v + g.k_station * (along - tspeed * dt)
        offset = -np.sin(theading) * dx + np.cos(theading) * dy
        e_lat = -offset + g.k_heading * _wrap(theading - heading)

        lim_i = g.integral_limit
        self.int_speed = np.minimum(np.maximum(self.int_speed + e_v * dt, -lim_i), lim_i)
        self.int_lat = np.minimum(np.maximum(self.int_lat + e_lat * dt, -lim_i), lim_i)
        d_v = 0.0 if self.prev_speed is None else (e_v - self.prev_speed) / dt
        d_lat = 0.0 if self.prev_lat is None else (e_lat - self.prev_lat) / dt
        self.prev_speed, self.prev_lat = e_v, e_lat

        accel = g.kp_speed * e_v + g.ki_speed * self.int_speed + g.kd_speed * d_v
        steer = g.kp_lat * e_lat + g.ki_lat * self.int_lat + g.kd_lat * d_lat
        return (np.minimum(np.maximum(accel, lim.a_min), lim.a_max),
                np.minimum(np.maximum(steer, -lim.steer_max), lim.steer_max))


def trajectory_target(points: np.ndarray, t: float, dt: float = DT):
    """Time-indexed tracking target (x, y, heading, speed) from (..., T, 6) candidate points."""
    T = points.shape[-2]
    j = min(int(round(t / dt)) + 1, T - 1)
    p = points[..., j, :]
    return p[..., 0], p[..., 1], np.arctan2(p[..., 3], p[..., 2]), np.hypot(p[..., 4], p[..., 5])


def line_target(line: ReferenceLine, x: float, y: float, lookahead: float = 1.0):
    """Nearest point on a reference line, shifted ``lookahead`` meters forward."""
    d2 = (line.xy[:, 0] - x) ** 2 + (line.xy[:, 1] - y) ** 2
    i = int(np.argmin(d2))
    s = min(line.s[i] + lookahead, line.s[-1])
    tx = float(np.interp(s, line.s, line.xy[:, 0]))
    ty = float(np.interp(s, line.s, line.xy[:, 1]))
    th = float(np.interp(s, line.s, line.heading))
    return tx, ty, th


def pid_track(state: VehicleState, target, gains: PIDGains = DEFAULT_GAINS, t: float = 0.0,
              limits: Limits = DEFAULT_LIMITS, dt: float = DT, target_speed: float | None = None,
              tracker: PIDTracker | None = None) -> ControlCommand:
    """Control command steering ``state`` toward a candidate trajectory or a reference line.

    ``target`` may be a CandidateTrajectory (anything with ``.points``), a raw (T, 6)
    point array, or a ReferenceLine (then ``target_speed`` is required). Without a
    ``tracker`` the PID memory starts fresh.
    """
    tracker = tracker or PIDTracker(gains, limits, dt)
    if isinstance(target, ReferenceLine):
        if target_speed is None:
            raise ValueError("tracking a reference line needs target_speed")
        tx, ty, th = line_target(target, state.x, state.y)
        tv = target_speed
    else:
        pts = np.asarray(getattr(target, "points", target), dtype=float)
        if len(pts) == 0:
            raise ValueError("empty target trajectory")
        tx, ty, th, tv = trajectory_target(pts, t, dt)
    a, s = tracker.command(np.array([state.x]), np.array([state.y]), np.array([state.heading]),
                           np.array([state.speed]), tx, ty, th, tv, station=not isinstance(target, ReferenceLine))
    return ControlCommand(float(a[0]), float(s[0]), limits)


# ---------------------------------------------------------------------------
# Oriented boxes


def box_corners(x, y, heading, length, width) -> np.ndarray:
    """Corners (..., 4, 2) in counter-clockwise order; length/width broadcast against the pose batch."""
    x, y, heading = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float), np.asarray(heading, float))
    c, s = np.cos(heading), np.sin(heading)
    hl, hw = np.asarray(length, float) / 2.0, np.asarray(width, float) / 2.0
    lx = np.stack([hl, -hl, -hl, hl], axis=-1)
    ly = np.stack([hw, hw, -hw, -hw], axis=-1)
    cx = x[..., None] + c[..., None] * lx - s[..., None] * ly
    cy = y[..., None] + s[..., None] * lx + c[..., None] * ly
    return np.stack([cx, cy], axis=-1)


def boxes_overlap(ax, ay, ah, a_len, a_wid, bx, by, bh, b_len, b_wid) -> np.ndarray:
    """Separating-axis test for oriented rectangles; touching counts as overlap. Broadcasts."""
    dx = np.asarray(bx, float) - ax
    dy = np.asarray(by, float) - ay
    ca, sa = np.cos(ah), np.sin(ah)
    cb, sb = np.cos(bh), np.sin(bh)
    overlap = True
    for nx, ny in ((ca, sa), (-sa, ca), (cb, sb), (-sb, cb)):
        ra = a_len / 2.0 * np.abs(ca * nx + sa * ny) + a_wid / 2.0 * np.abs(-sa * nx + ca * ny)
        rb = b_len / 2.0 * np.abs(cb * nx + sb * ny) + b_wid / 2.0 * np.abs(-sb * nx + cb * ny)
        overlap = overlap & (np.abs(dx * nx + dy * ny) <= ra + rb)
    return np.asarray(overlap)


def obb_overlap(a: VehicleState, a_shape: VehicleShape, b: VehicleState, b_shape: VehicleShape) -> bool:
    return bool(boxes_overlap(a.x, a.y, a.heading, a_shape.length, a_shape.width,
                              b.x, b.y, b.heading, b_shape.length, b_shape.width))


def _point_segment_dist(p, a, b):
    ab = b - a
    t = np.clip(np.sum((p - a) * ab, axis=-1) / np.maximum(np.sum(ab * ab, axis=-1), 1e-300), 0.0, 1.0)
    q = a + t[..., None] * ab
    return np.hypot(p[..., 0] - q[..., 0], p[..., 1] - q[..., 1])


def box_distance(ca: np.ndarray, cb: np.ndarray, overlap: np.ndarray) -> np.ndarray:
    """Minimum distance between rectangles given corners (..., 4, 2); zero where overlapping."""
    a_edges = (ca, np.roll(ca, -1, axis=-2))
    b_edges = (cb, np.roll(cb, -1, axis=-2))
    d1 = _point_segment_dist(ca[..., :, None, :], b_edges[0][..., None, :, :], b_edges[1][..., None, :, :])
    d2 = _point_segment_dist(cb[..., :, None, :], a_edges[0][..., None, :, :], a_edges[1][..., None, :, :])
    d = np.minimum(d1.min(axis=(-1, -2)), d2.min(axis=(-1, -2)))
    return np.where(overlap, 0.0, d)


# ---------------------------------------------------------------------------
# Forecasting and forward simulation


@dataclass(eq=False)
class Trajectories:
    """Per-step state arrays with shape (N, H+1)."""

    x: np.ndarray
    y: np.ndarray
    heading: np.ndarray
    speed: np.ndarray
    accel: np.ndarray
    steer: np.ndarray
    yaw_rate: np.ndarray
    jerk: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def horizon(self) -> int:
        return self.x.shape[1] - 1

    def state(self, i: int, t: int) -> VehicleState:
        return VehicleState(float(self.x[i, t]), float(self.y[i, t]), float(self.heading[i, t]),
                            float(self.speed[i, t]), float(self.accel[i, t]), float(self.steer[i, t]),
                            float(self.yaw_rate[i, t]))


@dataclass(eq=False)
class Rollout:
    """Forward-simulated states of one candidate, t = 0..H."""

    states: Trajectories
    candidate: int

    def __len__(self) -> int:
        return self.states.x.shape[1]

    def state(self, t: int) -> VehicleState:
        return self.states.state(0, t)


def _empty(n, H):
    return {k: np.zeros((n, H + 1)) for k in ("x", "y", "heading", "speed", "accel", "steer", "yaw_rate", "jerk")}


def _init(buf, states):
    for k, attr in (("x", "x"), ("y", "y"), ("heading", "heading"), ("speed", "speed"),
                    ("accel", "accel"), ("steer", "steering"), ("yaw_rate", "yaw_rate")):
        buf[k][:, 0] = [getattr(s, attr) for s in states]


def forecast_background(agents, actions, H: int, dt: float = DT, limits: Limits = DEFAULT_LIMITS) -> Trajectories:
    """Propagate each (state, shape) with its action held constant for H steps."""
    if len(agents) != len(actions):
        raise ValueError("one action per agent required")
    n = len(agents)
    buf = _empty(n, H)
    if n == 0:
        return Trajectories(**buf)
    states = [a[0] for a in agents]
    wb = np.array([a[1].wheelbase for a in agents])
    acc = np.array([c.accel for c in actions])
    steer = np.array([c.steer for c in actions])
    _init(buf, states)
    for t in range(H):
        x, y, h, v, a, w = propagate(buf["x"][:, t], buf["y"][:, t], buf["heading"][:, t], buf["speed"][:, t],
                                     acc, steer, wb, dt, limits.v_cap)
        buf["x"][:, t + 1], buf["y"][:, t + 1], buf["heading"][:, t + 1] = x, y, h
        buf["speed"][:, t + 1], buf["accel"][:, t + 1], buf["yaw_rate"][:, t + 1] = v, a, w
        buf["steer"][:, t + 1] = steer
        buf["jerk"][:, t + 1] = (a - buf["accel"][:, t]) / dt
    buf["heading"] = wrap_angle(buf["heading"])
    return Trajectories(**buf)


def simulate_candidates(state: VehicleState, shape: VehicleShape, points: np.ndarray, H: int,
                        dt: float = DT, gains: PIDGains = DEFAULT_GAINS,
                        limits: Limits = DEFAULT_LIMITS) -> Trajectories:
    """PID + bicycle rollouts of a (G, T, 6) candidate stack from a common start state."""
    points = np.asarray(points, dtype=float)
    G, T = points.shape[0], points.shape[1]
    if H > T:
        raise ValueError(f"rollout horizon {H} exceeds candidate horizon {T}")
    buf = _empty(G, H)
    _init(buf, [state] * G)
    tracker = PIDTracker(gains, limits, dt, n=G)
    all_h = np.arctan2(points[..., 3], points[..., 2])
    all_v = np.hypot(points[..., 4], points[..., 5])
    for t in range(H):
        j = min(t + 1, T - 1)
        tx, ty, th, tv = points[:, j, 0], points[:, j, 1], all_h[:, j], all_v[:, j]
        xs, ys, hs, vs = buf["x"][:, t], buf["y"][:, t], buf["heading"][:, t], buf["speed"][:, t]
        acc, steer = tracker.command(xs, ys, hs, vs, tx, ty, th, tv)
        x, y, h, v, a, w = propagate(xs, ys, hs, vs, acc, steer, shape.wheelbase, dt, limits.v_cap)
        buf["x"][:, t + 1], buf["y"][:, t + 1], buf["heading"][:, t + 1] = x, y, h
        buf["speed"][:, t + 1], buf["accel"][:, t + 1], buf["yaw_rate"][:, t + 1] = v, a, w
        buf["steer"][:, t + 1] = steer
        buf["jerk"][:, t + 1] = (a - buf["accel"][:, t]) / dt
    buf["heading"] = wrap_angle(buf["heading"])
    return Trajectories(**buf)


def forward_simulate(state: VehicleState, shape: VehicleShape, candidate, H: int, dt: float = DT,
                     gains: PIDGains = DEFAULT_GAINS, limits: Limits = DEFAULT_LIMITS,
                     index: int = 0) -> Rollout:
    pts = np.asarray(getattr(candidate, "points", candidate), dtype=float)[None]
    return Rollout(simulate_candidates(state, shape, pts, H, dt, gains, limits), index)


def with_action(state: VehicleState, cmd: ControlCommand) -> VehicleState:
    return replace(state, accel=cmd.accel, steering=cmd.steer)
