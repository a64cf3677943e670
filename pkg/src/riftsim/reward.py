"""State-wise reward model over forward-simulated rollouts."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .dynamics import DT, Trajectories, VehicleShape, box_corners, boxes_overlap
from .worldmap import DrivableArea, LaneGraph

GAMMA = 0.98
COMFORT_THRESHOLD = 4.0
SPEED_BAND = (3.0, 20.0)


@dataclass(frozen=True)
class RewardConfig:
    collision: float = 20.0
    boundary: float = 5.0
    comfort: float = 0.8
    l_align: float = 0.5
    vel_align: float = 0.05
    l_center: float = 0.6
    center_bias: float = 0.0
    velocity: float = 0.1
    timestep: float = 0.1
    gamma: float = GAMMA
    style: str = "normal"

    def __post_init__(self):
        for f in fields(self):
            if f.name in ("gamma", "style"):
                continue
            if getattr(self, f.name) < 0:
                raise ValueError(f"reward weight {f.name} must be non-negative")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")


STYLES = {
    "normal": RewardConfig(),
    "aggressive": RewardConfig(collision=5.0, velocity=0.2, style="aggressive"),
}


def style_config(style: str, **overrides) -> RewardConfig:
    try:
        base = STYLES[style]
    except KeyError:
        raise ValueError(f"unknown style {style!r}; expected one of {sorted(STYLES)}") from None
    if overrides:
        return RewardConfig(**{**base.__dict__, **overrides})
    return base


@dataclass(frozen=True)
class StateFeatures:
    collision: bool
    boundary: bool
    a_long: float
    a_lat: float
    theta_f: float
    x_f: float
    v: float
    a: float
    omega: float = 0.0


@dataclass(eq=False)
class RewardContext:
    graph: LaneGraph
    area: DrivableArea
    forecasts: Trajectories
    other_lengths: np.ndarray
    other_widths: np.ndarray
    lane_ids: tuple[int, ...] = ()


def rollout_features(traj: Trajectories, shape: VehicleShape, ctx: RewardContext, dt: float = DT) -> dict:
    """Feature arrays of shape (G, H+1) for a batch of rollouts."""
    G, n = traj.x.shape
    H = n - 1
    collision = np.zeros((G, n), dtype=bool)
    fc = ctx.forecasts
    if len(fc) > 0:
        if fc.horizon < H:
            raise ValueError("forecast horizon does not cover the rollout")
        ov = boxes_overlap(traj.x[:, None], traj.y[:, None], traj.heading[:, None], shape.length, shape.width,
                           fc.x[None, :, :n], fc.y[None, :, :n], fc.heading[None, :, :n],
                           ctx.other_lengths[None, :, None], ctx.other_widths[None, :, None])
        collision = ov.any(axis=1)
    corners = box_corners(traj.x, traj.y, traj.heading, shape.length, shape.width)
    inside = ctx.area.contains(corners.reshape(-1, 2)).reshape(G, n, 4)
    boundary = ~inside.all(axis=2)

    pts = np.column_stack([traj.x.ravel(), traj.y.ravel()])
    heads = traj.heading.ravel()
    if ctx.lane_ids:
        _, _, x_f, theta_f = ctx.graph.project(pts, heads, ctx.lane_ids)
        half = max(ctx.graph[i].width for i in ctx.lane_ids) / 2.0
        far = np.abs(x_f) > half
        if far.any():
            _, _, xf2, th2 = ctx.graph.project(pts[far], heads[far])
            x_f[far], theta_f[far] = xf2, th2
    else:
        _, _, x_f, theta_f = ctx.graph.project(pts, heads)

    a_long = traj.accel
    a_lat = traj.speed * traj.yaw_rate
    omega = np.zeros_like(traj.yaw_rate)
    omega[:, 1:] = np.diff(traj.yaw_rate, axis=1) / dt
    return {
        "collision": collision,
        "boundary": boundary,
        "a_long": a_long,
        "a_lat": a_lat,
        "theta_f": theta_f.reshape(G, n),
        "x_f": x_f.reshape(G, n),
        "v": traj.speed,
        "a": np.hypot(a_long, a_lat),
        "omega": omega,
    }


def extract_features(traj: Trajectories, t: int, shape: VehicleShape, ctx: RewardContext, i: int = 0,
                     dt: float = DT) -> StateFeatures:
    """Features of rollout ``i`` at step ``t``."""
    f = rollout_features(traj, shape, ctx, dt)
    return StateFeatures(**{k: (bool(v[i, t]) if v.dtype == bool else float(v[i, t])) for k, v in f.items()})


def reward_terms(phi, cfg: RewardConfig) -> dict:
    """Individual reward components; ``phi`` is a StateFeatures or a dict of broadcastable arrays."""
    get = (lambda k: np.asarray(phi[k])) if isinstance(phi, dict) else (lambda k: np.asarray(getattr(phi, k)))
    col = get("collision").astype(float)
    bnd = get("boundary").astype(float)
    v = np.abs(get("v"))
    a = np.abs(get("a"))
    om = np.abs(get("omega"))
    th = get("theta_f")
    cos_t = np.cos(th)
    dev = np.abs(get("x_f") - cfg.center_bias)
    in_band = ((v > SPEED_BAND[0]) & (v < SPEED_BAND[1])).astype(float)
    return {
        "collision": -(cfg.collision + v) * col,
        "off_road": -cfg.boundary * bnd,
        "comfort": -cfg.comfort * ((a > COMFORT_THRESHOLD).astype(float) + (om > COMFORT_THRESHOLD).astype(float)),
        "l_align": cfg.l_align * (np.minimum(cos_t, 0.0) + cfg.vel_align * np.minimum(cos_t * v, 0.0)
                                  + 0.25 * (1.0 - np.abs(th) / (np.pi / 2.0))),
        "l_center": -cfg.l_center * ((cos_t > 0.5).astype(float) * (dev - 0.05 / np.exp(dev - 0.5))),
        "velocity": cfg.velocity * np.maximum(cos_t, 0.0) * in_band * v,
        "timestep": -cfg.timestep * ((v > 0) | (a > 0)).astype(float),
    }


def state_wise_reward(phi, cfg: RewardConfig):
    """Sum of the reward components, with the lane term taken as alignment plus centering."""
    t = reward_terms(phi, cfg)
    total = (t["collision"] + t["off_road"] + t["comfort"] + t["l_align"] + t["l_center"]
             + t["velocity"] + t["timestep"])
    return float(total) if np.ndim(total) == 0 else total


def rollout_rewards(phi: dict, cfg: RewardConfig) -> np.ndarray:
    """Per-step rewards of (G, n) rollouts with the first collision treated as terminal.

    The colliding state is still scored; every later state contributes zero.
    """
    r = np.asarray(state_wise_reward(phi, cfg), dtype=float)
    col = np.asarray(phi["collision"], dtype=bool)
    after = np.cumsum(col, axis=-1) - col > 0
    return np.where(after, 0.0, r)


def discounted_return(rewards, gamma: float = GAMMA):
    """sum_t gamma^t r_t along the last axis, accumulated front to back."""
    r = np.asarray(rewards, dtype=float)
    if r.shape[-1] == 0:
        raise ValueError("empty reward sequence")
    total = np.zeros(r.shape[:-1])
    disc = 1.0
    for t in range(r.shape[-1]):
        total = total + disc * r[..., t]
        disc *= gamma
    return float(total) if total.ndim == 0 else total
