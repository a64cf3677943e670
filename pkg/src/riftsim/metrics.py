"""Episode logs and the realism, interaction, map and comfort metrics computed from them."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist

import numpy as np

from .dynamics import VehicleShape, box_corners
from .worldmap import DrivableArea, wrap_angle

LOG_SCHEMA = "riftsim-episode/1"
LOG_COLUMNS = ("step", "time", "agent_id", "role", "controlled", "x", "y", "heading", "speed", "accel", "a_lat",
               "yaw_rate", "target_speed", "offroad", "collision_with", "selected", "probs")
_INT_COLS = ("step", "agent_id", "controlled", "offroad", "collision_with", "selected")
_STR_COLS = ("role", "probs")
METRICS_SCHEMA = "riftsim-metrics/1"

TTC_CAP = 10.0
FVS_BOUNDS = {"a_long": (-4.05, 2.40), "a_lat": (-4.89, 4.89), "jerk": (-8.37, 8.37)}
SW_MAX_N = 5000


# ---------------------------------------------------------------------------
# Episode logs


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


@dataclass(eq=False)
class EpisodeLog:
    """Column-oriented per-(step, agent) record of one episode."""

    scenario_id: str
    seed: int
    dt: float
    data: dict

    def __post_init__(self):
        missing = [c for c in LOG_COLUMNS if c not in self.data]
        if missing:
            raise ValueError(f"episode log lacks columns {missing}")
        n = len(self.data["step"])
        if any(len(v) != n for v in self.data.values()):
            raise ValueError("episode log columns differ in length")
        step = self.data["step"]
        if n and np.any(np.diff(step) < 0):
            raise ValueError("episode log steps must be non-decreasing")
        if n and not np.allclose(self.data["time"], step * self.dt, rtol=0, atol=1e-9):
            raise ValueError("episode log times must sit on the dt grid")
        roles = {}
        for aid, role in zip(self.data["agent_id"], self.data["role"]):
            if roles.setdefault(int(aid), role) != role:
                raise ValueError(f"agent {aid} changes role within the episode")

    def __len__(self) -> int:
        return len(self.data["step"])

    def __getitem__(self, col: str) -> np.ndarray:
        return self.data[col]

    @classmethod
    def from_rows(cls, rows: list, scenario_id: str = "episode", seed: int = 0, dt: float = 0.1) -> "EpisodeLog":
        data = {}
        for c in LOG_COLUMNS:
            vals = [r.get(c) for r in rows]
            if c == "probs":
                data[c] = np.array([p if isinstance(p, str) else ("" if p is None else
                                    " ".join(repr(float(x)) for x in p)) for p in vals], dtype=object)
            elif c == "role":
                data[c] = np.array(vals, dtype=object)
            elif c in _INT_COLS:
                data[c] = np.array([int(v) for v in vals], dtype=np.int64)
            else:
                data[c] = np.array([float(v) for v in vals], dtype=float)
        return cls(scenario_id, int(seed), float(dt), data)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# schema={LOG_SCHEMA} scenario={self.scenario_id} seed={self.seed} dt={self.dt!r}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        cols = [self.data[c] for c in LOG_COLUMNS]
        for i in range(len(self)):
            w.writerow([_fmt(c[i]) for c in cols])
        return buf.getvalue()

    def write_csv(self, path):
        Path(path).write_text(self.to_csv())

    @classmethod
    def read_csv(cls, path) -> "EpisodeLog":
        text = Path(path).read_text()
        first, _, rest = text.partition("\n")
        if not first.startswith("# ") or f"schema={LOG_SCHEMA}" not in first:
            raise ValueError(f"{path}: not a {LOG_SCHEMA} episode log")
        meta = dict(kv.split("=", 1) for kv in first[2:].split())
        reader = csv.reader(io.StringIO(rest))
        header = next(reader)
        if tuple(header) != LOG_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {header}")
        rows = [dict(zip(header, r)) for r in reader if r]
        for r in rows:
            for c in LOG_COLUMNS:
                if c in _INT_COLS:
                    r[c] = int(r[c])
                elif c not in _STR_COLS:
                    r[c] = float(r[c])
        return cls.from_rows(rows, meta["scenario"], int(meta["seed"]), float(meta["dt"]))

    def agent_ids(self, role: str | None = None) -> list[int]:
        ids = self.data["agent_id"] if role is None else self.data["agent_id"][self.data["role"] == role]
        return sorted(set(int(i) for i in ids))

    def agent(self, aid: int) -> dict:
        m = self.data["agent_id"] == aid
        return {c: v[m] for c, v in self.data.items()}

    def role_mask(self, role: str) -> np.ndarray:
        return self.data["role"] == role


# ---------------------------------------------------------------------------
# Distribution statistics


def _poly(c, x):
    return sum(ci * x ** i for i, ci in enumerate(c))


def shapiro_wilk(samples, rng: np.random.Generator | None = None) -> float:
    """Shapiro-Wilk W using Royston's coefficient approximation."""
    x = np.asarray(samples, dtype=float).ravel()
    n = len(x)
    if n < 3:
        raise ValueError("Shapiro-Wilk needs at least 3 samples")
    if n > SW_MAX_N:
        rng = rng or np.random.default_rng(0)
        x = rng.choice(x, SW_MAX_N, replace=False)
        n = SW_MAX_N
    x = np.sort(x)
    ss = np.sum((x - x.mean()) ** 2)
    if ss <= 0.0 or x[-1] - x[0] < 1e-12 * max(1.0, abs(x[0])):
        raise ValueError("Shapiro-Wilk is undefined for constant samples")
    if n == 3:
        a = np.array([-math.sqrt(0.5), 0.0, math.sqrt(0.5)])
    else:
        nd = NormalDist()
        m = np.array([nd.inv_cdf((i - 0.375) / (n + 0.25)) for i in range(1, n + 1)])
        mm = float(m @ m)
        u = 1.0 / math.sqrt(n)
        a = m / math.sqrt(mm)
        an = a[-1] + _poly((0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056), u)
        if n > 5:
            an1 = a[-2] + _poly((0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633), u)
            phi = (mm - 2 * m[-1] ** 2 - 2 * m[-2] ** 2) / (1 - 2 * an ** 2 - 2 * an1 ** 2)
            a = m / math.sqrt(phi)
            a[-1], a[-2], a[0], a[1] = an, an1, -an, -an1
        else:
            phi = (mm - 2 * m[-1] ** 2) / (1 - 2 * an ** 2)
            a = m / math.sqrt(phi)
            a[-1], a[0] = an, -an
    w = float((a @ x) ** 2 / ss)
    return min(w, 1.0)


def wasserstein_1d(a, b) -> float:
    """First Wasserstein distance between two empirical distributions, integral of |F_a - F_b|."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if len(a) == 0 or len(b) == 0:
        raise ValueError("Wasserstein distance needs non-empty samples")
    if len(a) == len(b):
        return float(np.mean(np.abs(a - b)))
    allv = np.sort(np.concatenate([a, b]))
    deltas = np.diff(allv)
    fa = np.searchsorted(a, allv[:-1], side="right") / len(a)
    fb = np.searchsorted(b, allv[:-1], side="right") / len(b)
    return float(np.sum(np.abs(fa - fb) * deltas))


# ---------------------------------------------------------------------------
# Interaction geometry


def _half_extents(length, width, rel_heading):
    c, s = np.abs(np.cos(rel_heading)), np.abs(np.sin(rel_heading))
    return 0.5 * length * c + 0.5 * width * s, 0.5 * length * s + 0.5 * width * c


def ttc_2d(av: dict, other: dict, av_shape: VehicleShape = VehicleShape(),
           other_shape: VehicleShape = VehicleShape()) -> float:
    """Two-axis time-to-collision in the AV frame.

    ``av``/``other`` carry x, y, heading, speed. Per axis the bumper gap is divided
    by the closing speed; an axis where the boxes already overlap gives no sample,
    and overlap on both axes means contact (0). Returns inf when nothing closes.
    """
    h = av["heading"]
    c, s = math.cos(h), math.sin(h)
    dx, dy = other["x"] - av["x"], other["y"] - av["y"]
    r = np.array([c * dx + s * dy, -s * dx + c * dy])
    vo = other["speed"] * np.array([math.cos(other["heading"]), math.sin(other["heading"])])
    va = av["speed"] * np.array([c, s])
    dv = vo - va
    v = np.array([c * dv[0] + s * dv[1], -s * dv[0] + c * dv[1]])
    ext_lon, ext_lat = _half_extents(other_shape.length, other_shape.width, wrap_angle(other["heading"] - h))
    ext = np.array([0.5 * av_shape.length + ext_lon, 0.5 * av_shape.width + ext_lat])
    gap = np.abs(r) - ext
    if np.all(gap <= 0):
        return 0.0
    best = math.inf
    for k in range(2):
        if gap[k] > 0 and r[k] * v[k] < 0:
            best = min(best, gap[k] / abs(v[k]))
    return best


def anticipated_collision_time(av: dict, other: dict, av_shape: VehicleShape = VehicleShape(),
                               other_shape: VehicleShape = VehicleShape()) -> float:
    """Time until the two oriented boxes first touch under constant velocities (swept SAT)."""
    ca = box_corners(av["x"], av["y"], av["heading"], av_shape.length, av_shape.width)
    cb = box_corners(other["x"], other["y"], other["heading"], other_shape.length, other_shape.width)
    vel = (other["speed"] * np.array([math.cos(other["heading"]), math.sin(other["heading"])])
           - av["speed"] * np.array([math.cos(av["heading"]), math.sin(av["heading"])]))
    t_enter, t_exit = -math.inf, math.inf
    for h in (av["heading"], other["heading"]):
        for n in (np.array([math.cos(h), math.sin(h)]), np.array([-math.sin(h), math.cos(h)])):
            pa, pb = ca @ n, cb @ n
            lo = pa.min() - pb.max()
            hi = pa.max() - pb.min()
            vn = float(vel @ n)
            if abs(vn) < 1e-12:
                if lo > 0 or hi < 0:
                    return math.inf
                continue
            t0, t1 = lo / vn, hi / vn
            if t0 > t1:
                t0, t1 = t1, t0
            t_enter, t_exit = max(t_enter, t0), min(t_exit, t1)
            if t_enter > t_exit:
                return math.inf
    if t_exit < 0:
        return math.inf
    return max(t_enter, 0.0)


def _steps(log: EpisodeLog):
    step = log["step"]
    bounds = np.flatnonzero(np.diff(step)) + 1
    return np.split(np.arange(len(step)), bounds)


def _row(log: EpisodeLog, i: int) -> dict:
    return {k: float(log[k][i]) for k in ("x", "y", "heading", "speed")}


def cbv_distance(log: EpisodeLog) -> float:
    total = 0.0
    for aid in log.agent_ids("CBV"):
        a = log.agent(aid)
        total += float(np.sum(np.hypot(np.diff(a["x"]), np.diff(a["y"]))))
    return total


def collision_events(log: EpisodeLog) -> int:
    """Contact onsets involving at least one CBV: a pair counts once per run of consecutive overlapping steps."""
    roles = dict(zip(log["agent_id"].tolist(), log["role"].tolist()))
    contacts = set()
    for step, aid, other in zip(log["step"], log["agent_id"], log["collision_with"]):
        if other < 0:
            continue
        if roles.get(int(aid)) == "CBV" or roles.get(int(other)) == "CBV":
            contacts.add((int(step), min(int(aid), int(other)), max(int(aid), int(other))))
    return sum((s - 1, a, b) not in contacts for s, a, b in contacts)


def interaction_metrics(log: EpisodeLog, cap: float = TTC_CAP) -> dict:
    rp = cbv_distance(log)
    n_col = collision_events(log)
    out = {"RP": (rp, 1), "collisions": (float(n_col), 1),
           "CPK": (1000.0 * n_col / rp, 1) if rp > 0 else (None, 0)}
    ttc, act = [], []
    for idx in _steps(log):
        roles = log["role"][idx]
        av = idx[roles == "AV"]
        cbvs = idx[roles == "CBV"]
        if len(av) == 0 or len(cbvs) == 0:
            continue
        a = _row(log, int(av[0]))
        t1 = min(ttc_2d(a, _row(log, int(j))) for j in cbvs)
        t2 = min(anticipated_collision_time(a, _row(log, int(j))) for j in cbvs)
        if t1 < cap:
            ttc.append(t1)
        if t2 < cap:
            act.append(t2)
    out["2D-TTC"] = (float(np.mean(ttc)), len(ttc)) if ttc else (None, 0)
    out["ACT"] = (float(np.mean(act)), len(act)) if act else (None, 0)
    return out


def offroad_flags(log: EpisodeLog, area: DrivableArea, shape: VehicleShape = VehicleShape()) -> np.ndarray:
    """Recompute the per-row off-road flag from logged poses."""
    corners = box_corners(log["x"], log["y"], log["heading"], shape.length, shape.width)
    inside = area.contains(corners.reshape(-1, 2)).reshape(len(log), 4)
    return (~inside.all(axis=1)).astype(np.int64)


def map_metrics(log: EpisodeLog) -> dict:
    m = log.role_mask("CBV")
    n = int(m.sum())
    if n == 0:
        return {"ORR": (None, 0)}
    return {"ORR": (100.0 * float(log["offroad"][m].sum()) / n, n)}


def jerk_series(accel, dt: float) -> np.ndarray:
    """Central differences inside, one-sided at both ends."""
    a = np.asarray(accel, dtype=float)
    if len(a) < 2:
        return np.zeros_like(a)
    return np.gradient(a, dt)


def comfortable_frames(a_long, a_lat, jerk) -> np.ndarray:
    lo, hi = FVS_BOUNDS["a_long"]
    ok = (a_long >= lo) & (a_long <= hi)
    ok &= (a_lat >= FVS_BOUNDS["a_lat"][0]) & (a_lat <= FVS_BOUNDS["a_lat"][1])
    ok &= (jerk >= FVS_BOUNDS["jerk"][0]) & (jerk <= FVS_BOUNDS["jerk"][1])
    return ok


def comfort_metrics(log: EpisodeLog) -> dict:
    frames, bad, jerks = 0, 0, []
    for aid in log.agent_ids("CBV"):
        a = log.agent(aid)
        if len(a["step"]) < 2:
            continue
        j = jerk_series(a["accel"], log.dt)
        ok = comfortable_frames(a["accel"], a["a_lat"], j)
        frames += len(ok)
        bad += int((~ok).sum())
        jerks.append(np.abs(j))
    if frames == 0:
        return {"UCR": (None, 0), "Jerk": (None, 0), "FVS": (None, 0)}
    return {"UCR": (100.0 * bad / frames, frames), "Jerk": (float(np.mean(np.concatenate(jerks))), frames),
            "FVS": (100.0 * (frames - bad) / frames, frames)}


def blocked_rate(log: EpisodeLog, speed_threshold: float = 0.1, duration: float = 30.0, radius: float = 15.0,
                 cone: float = math.radians(60.0)) -> int:
    """Count maximal AV standstills of at least ``duration`` with a CBV close ahead."""
    flags = []
    for idx in _steps(log):
        roles = log["role"][idx]
        av = idx[roles == "AV"]
        if len(av) == 0:
            flags.append(False)
            continue
        i = int(av[0])
        blocked = False
        if log["speed"][i] < speed_threshold:
            for j in idx[roles == "CBV"]:
                dx, dy = log["x"][j] - log["x"][i], log["y"][j] - log["y"][i]
                if math.hypot(dx, dy) <= radius and abs(wrap_angle(math.atan2(dy, dx) - log["heading"][i])) <= cone:
                    blocked = True
                    break
        flags.append(blocked)
    need = int(math.ceil(duration / log.dt - 1e-9))
    events, run = 0, 0
    for f in flags + [False]:
        if f:
            run += 1
        else:
            if run >= need:
                events += 1
            run = 0
    return events


def kinematic_metrics(log: EpisodeLog) -> dict:
    m = log.role_mask("CBV")
    v = log["speed"][m]
    acc = log["accel"][m]

    def sw(x):
        try:
            return (shapiro_wilk(x), len(x))
        except ValueError:
            return (None, len(x))

    out = {"S-SW": sw(v), "A-SW": sw(acc)}
    out["S-WD"] = (wasserstein_1d(v, log["target_speed"][m]), len(v)) if len(v) else (None, 0)
    out["mean_speed"] = (float(v.mean()), len(v)) if len(v) else (None, 0)
    return out


# ---------------------------------------------------------------------------
# Reports

METRIC_NAMES = ("S-SW", "S-WD", "A-SW", "mean_speed", "CPK", "RP", "collisions", "2D-TTC", "ACT", "ORR", "UCR",
                "Jerk", "FVS", "BR")


def episode_metrics(log: EpisodeLog) -> dict:
    out = {}
    out.update(kinematic_metrics(log))
    out.update(interaction_metrics(log))
    out.update(map_metrics(log))
    out.update(comfort_metrics(log))
    out["BR"] = (float(blocked_rate(log)), 1)
    out["_cbv_steps"] = (float(log.role_mask("CBV").sum()), 1)
    out["_orr_steps"] = (float(log["offroad"][log.role_mask("CBV")].sum()), 1)
    return out


@dataclass(eq=False)
class MetricsReport:
    episodes: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def clean(d):
            return {k: {"value": v[0], "count": v[1]} for k, v in d.items() if not k.startswith("_")}

        return {"schema": METRICS_SCHEMA, "aggregate": clean(self.aggregate),
                "episodes": [{"episode": name, "metrics": clean(m)} for name, m in self.episodes]}

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        buf = io.StringIO()
        buf.write(f"# schema={METRICS_SCHEMA}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("episode",) + METRIC_NAMES)
        for name, m in self.episodes + [("aggregate", self.aggregate)]:
            w.writerow([name] + ["" if m[k][0] is None else _fmt(float(m[k][0])) for k in METRIC_NAMES])
        (out / "metrics.csv").write_text(buf.getvalue())


def aggregate_metrics(per_episode: list) -> dict:
    """Means over episodes; CPK and ORR as ratios of summed counts."""
    agg = {}
    for k in METRIC_NAMES:
        vals = [m[k][0] for m in per_episode if m[k][0] is not None]
        cnt = sum(m[k][1] for m in per_episode if m[k][0] is not None)
        agg[k] = (float(np.mean(vals)), cnt) if vals else (None, 0)
    rp = sum(m["RP"][0] for m in per_episode)
    col = sum(m["collisions"][0] for m in per_episode)
    agg["CPK"] = (1000.0 * col / rp, len(per_episode)) if rp > 0 else (None, 0)
    steps = sum(m["_cbv_steps"][0] for m in per_episode)
    off = sum(m["_orr_steps"][0] for m in per_episode)
    agg["ORR"] = (100.0 * off / steps, int(steps)) if steps > 0 else (None, 0)
    return agg


def compute_metrics(logs: list, names: list | None = None) -> MetricsReport:
    if not logs:
        raise ValueError("no episode logs")
    names = names or [lg.scenario_id for lg in logs]
    per = [episode_metrics(lg) for lg in logs]
    return MetricsReport(list(zip(names, per)), aggregate_metrics(per))
