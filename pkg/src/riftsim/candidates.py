"""Frozen trajectory generation: N_ref x N_lon candidates conditioned on reference lines."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import DT, VehicleState
from .worldmap import ReferenceLine

N_LON = 12
HORIZON = 80
V_MAX = 20.0
A_LIMIT = 3.0
BLEND_LENGTH = 30.0


@dataclass(frozen=True)
class GenerationConfig:
    n_lon: int = N_LON
    horizon: int = HORIZON
    dt: float = DT
    v_max: float = V_MAX
    a_limit: float = A_LIMIT
    blend_length: float = BLEND_LENGTH


@dataclass(eq=False)
class CandidateTrajectory:
    """T points of (p_x, p_y, cos h, sin h, v_x, v_y) at dt spacing."""

    points: np.ndarray
    ref_index: int
    lon_index: int
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.points)

    @property
    def speeds(self) -> np.ndarray:
        return np.hypot(self.points[:, 4], self.points[:, 5])

    @property
    def headings(self) -> np.ndarray:
        return np.arctan2(self.points[:, 3], self.points[:, 2])


@dataclass(eq=False)
class CandidateSet:
    candidates: list[CandidateTrajectory]
    config: GenerationConfig = field(default_factory=GenerationConfig)

    def __post_init__(self):
        if not self.candidates:
            raise ValueError("a candidate set needs at least one candidate")
        T = len(self.candidates[0])
        if any(len(c) != T for c in self.candidates):
            raise ValueError("all candidates must share the horizon")
        pairs = [(c.ref_index, c.lon_index) for c in self.candidates]
        if len(set(pairs)) != len(pairs):
            raise ValueError("(ref, lon) index pairs must be unique")
        self.points = np.stack([c.points for c in self.candidates])

    def __len__(self) -> int:
        return len(self.candidates)

    def __getitem__(self, i: int) -> CandidateTrajectory:
        return self.candidates[i]

    @property
    def ref_index(self) -> np.ndarray:
        return np.array([c.ref_index for c in self.candidates])

    @property
    def lon_index(self) -> np.ndarray:
        return np.array([c.lon_index for c in self.candidates])


def longitudinal_profiles(v0: float, n_lon: int = N_LON, v_max: float = V_MAX, T: int = HORIZON,
                          dt: float = DT, a_limit: float = A_LIMIT) -> np.ndarray:
    """(n_lon, T) speed profiles ramping from v0 to evenly spaced targets in [0, v_max]."""
    if n_lon < 1 or not v_max > 0:
        raise ValueError("need n_lon >= 1 and v_max > 0")
    v0 = min(max(float(v0), 0.0), v_max)
    targets = np.linspace(0.0, v_max, n_lon)[:, None]
    ramp = a_limit * (np.arange(T) * dt)[None, :]
    up = np.minimum(targets, v0 + ramp)
    down = np.maximum(targets, v0 - ramp)
    return np.where(targets >= v0, up, down)


def _smoothstep5(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)


def _project_on_line(line: ReferenceLine, p: np.ndarray):
    a = line.xy[:-1]
    d = np.diff(line.xy, axis=0)
    len2 = np.einsum("ij,ij->i", d, d)
    t = np.clip(np.einsum("ij,ij->i", p - a, d) / len2, 0.0, 1.0)
    q = a + t[:, None] * d
    dist2 = np.sum((p - q) ** 2, axis=1)
    k = int(np.argmin(dist2))
    seg_len = np.sqrt(len2[k])
    s = line.s[k] + t[k] * (line.s[k + 1] - line.s[k])
    cross = (d[k, 0] * (p[1] - q[k, 1]) - d[k, 1] * (p[0] - q[k, 0])) / seg_len
    offset = np.sqrt(dist2[k]) * (1.0 if cross >= 0 else -1.0)
    return float(s), float(offset)


def _blended_path(state: VehicleState, line: ReferenceLine, blend_length: float):
    """Dense path from the state onto the line; returns (xy, chord arclength, vertex headings)."""
    anchor = np.array([state.x, state.y])
    if len(line) < 2:
        return anchor[None], np.zeros(1), np.array([state.heading])
    s0, d0 = _project_on_line(line, anchor)
    sig = np.concatenate([[s0], line.s[line.s > s0 + 1e-9]])
    if len(sig) < 2:
        return anchor[None], np.zeros(1), np.array([state.heading])
    span = min(blend_length, line.length - s0)
    u = (sig - s0) / span if span > 0 else np.ones_like(sig)
    fade = 1.0 - _smoothstep5(u)
    bx = np.interp(sig, line.s, line.xy[:, 0])
    by = np.interp(sig, line.s, line.xy[:, 1])
    bh = np.interp(sig, line.s, line.heading)
    off = d0 * fade
    px = bx - np.sin(bh) * off
    py = by + np.cos(bh) * off
    corr = anchor - np.array([px[0], py[0]])
    px = px + corr[0] * fade
    py = py + corr[1] * fade
    xy = np.column_stack([px, py])
    seg = np.diff(xy, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    keep = np.concatenate([[True], seg_len > 1e-12])
    xy = xy[keep]
    seg = np.diff(xy, axis=0)
    if len(seg) == 0:
        return anchor[None], np.zeros(1), np.array([state.heading])
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    chord = np.concatenate([[0.0], np.cumsum(seg_len)])
    sh = np.unwrap(np.arctan2(seg[:, 1], seg[:, 0]))
    vh = np.concatenate([[sh[0]], 0.5 * (sh[:-1] + sh[1:]), [sh[-1]]])
    return xy, chord, vh


def generate_candidates(state: VehicleState, refs: list[ReferenceLine], config: GenerationConfig | None = None,
                        **overrides) -> CandidateSet:
    """Enumerate candidates ref-major: index = ref * n_lon + lon.

    Each candidate integrates its speed profile along a path that fades the current
    lateral offset onto the reference line with a quintic blend. Candidates running
    past the end of the line hold the terminal point and are flagged ``truncated``.
    """
    cfg = config or GenerationConfig()
    if overrides:
        cfg = GenerationConfig(**{**cfg.__dict__, **overrides})
    if not refs:
        raise ValueError("at least one reference line is required")
    T, dt = cfg.horizon, cfg.dt
    profiles = longitudinal_profiles(state.speed, cfg.n_lon, cfg.v_max, T, dt, cfg.a_limit)
    dist = np.zeros_like(profiles)
    dist[:, 1:] = np.cumsum(0.5 * (profiles[:, 1:] + profiles[:, :-1]) * dt, axis=1)
    out = []
    for r, line in enumerate(refs):
        xy, chord, vh = _blended_path(state, line, cfg.blend_length)
        total = chord[-1]
        over = dist > total + 1e-9
        s = np.minimum(dist, total)
        if len(chord) > 1:
            px = np.interp(s, chord, xy[:, 0])
            py = np.interp(s, chord, xy[:, 1])
            ph = np.interp(s, chord, vh)
        else:
            px = np.full_like(s, xy[0, 0])
            py = np.full_like(s, xy[0, 1])
            ph = np.full_like(s, vh[0])
        px[:, 0], py[:, 0] = state.x, state.y
        v = np.where(over, 0.0, profiles)
        c, sn = np.cos(ph), np.sin(ph)
        for lon in range(cfg.n_lon):
            pts = np.column_stack([px[lon], py[lon], c[lon], sn[lon], v[lon] * c[lon], v[lon] * sn[lon]])
            out.append(CandidateTrajectory(pts, r, lon, bool(over[lon].any())))
    return CandidateSet(out, cfg)
