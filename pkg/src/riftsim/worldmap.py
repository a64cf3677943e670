"""Lane-graph maps, drivable area, scenarios, A* routing and CBV identification."""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import shapely
from shapely.geometry import LineString, Polygon, box
from shapely.ops import unary_union

SCENARIO_FORMAT = 1
DEFAULT_CBV_DELTA = 15.0
UNREACHABLE = math.inf


class MapError(ValueError):
    """Invalid map geometry or scenario definition."""


def wrap_angle(a):
    """Wrap angles into (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w <= -np.pi, w + 2.0 * np.pi, w)
    if np.ndim(w) == 0:
        return float(w)
    return w


@dataclass(eq=False)
class Lane:
    id: int
    centerline: np.ndarray
    width: float
    successors: tuple[int, ...] = ()
    left: int | None = None
    right: int | None = None
    target_speed: float = 10.0

    def __post_init__(self):
        pts = np.asarray(self.centerline, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise MapError(f"lane {self.id}: centerline needs >= 2 points of shape (n, 2)")
        seg = np.diff(pts, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(seg_len <= 0.0):
            raise MapError(f"lane {self.id}: consecutive centerline points must be distinct")
        if not self.width > 0.0:
            raise MapError(f"lane {self.id}: width must be positive, got {self.width}")
        self.centerline = pts
        self.successors = tuple(int(s) for s in self.successors)
        self.cum_s = np.concatenate([[0.0], np.cumsum(seg_len)])
        self.seg_heading = np.arctan2(seg[:, 1], seg[:, 0])

    @property
    def length(self) -> float:
        return float(self.cum_s[-1])

    def point_at(self, s: float) -> tuple[float, float, float]:
        """(x, y, heading) at arclength s, clamped to the lane."""
        s = min(max(float(s), 0.0), self.length)
        i = int(np.searchsorted(self.cum_s, s, side="right") - 1)
        i = min(max(i, 0), len(self.seg_heading) - 1)
        u = (s - self.cum_s[i]) / (self.cum_s[i + 1] - self.cum_s[i])
        p = self.centerline[i] + u * (self.centerline[i + 1] - self.centerline[i])
        return float(p[0]), float(p[1]), float(self.seg_heading[i])


@dataclass(frozen=True)
class LaneProjection:
    lane_id: int
    s: float
    x_f: float
    theta_f: float

    @property
    def lateral(self) -> float:
        return self.x_f


class LaneGraph:
    """Directed lane graph. Lanes are immutable after construction."""

    def __init__(self, lanes: Iterable[Lane]):
        self.lanes: dict[int, Lane] = {}
        for lane in sorted(lanes, key=lambda ln: ln.id):
            if lane.id in self.lanes:
                raise MapError(f"duplicate lane id {lane.id}")
            self.lanes[lane.id] = lane
        if not self.lanes:
            raise MapError("lane graph is empty")
        for lane in self.lanes.values():
            for ref in (*lane.successors, lane.left, lane.right):
                if ref is not None and ref not in self.lanes:
                    raise MapError(f"lane {lane.id} references unknown lane {ref}")
        self._build_segments()

    def _build_segments(self):
        a, d, s0, lid, head = [], [], [], [], []
        for lane in self.lanes.values():
            pts = lane.centerline
            a.append(pts[:-1])
            d.append(np.diff(pts, axis=0))
            s0.append(lane.cum_s[:-1])
            lid.append(np.full(len(pts) - 1, lane.id))
            head.append(lane.seg_heading)
        self._seg_a = np.concatenate(a)
        self._seg_d = np.concatenate(d)
        self._seg_len2 = np.einsum("ij,ij->i", self._seg_d, self._seg_d)
        self._seg_len = np.sqrt(self._seg_len2)
        self._seg_s0 = np.concatenate(s0)
        self._seg_lane = np.concatenate(lid)
        self._seg_heading = np.concatenate(head)
        self._sel_cache: dict = {}

    def __getitem__(self, lane_id: int) -> Lane:
        return self.lanes[lane_id]

    def __contains__(self, lane_id) -> bool:
        return lane_id in self.lanes

    def __len__(self) -> int:
        return len(self.lanes)

    def project(self, points, headings=None, lane_ids: Sequence[int] | None = None):
        """Vectorized projection of points onto the nearest lane centerline.

        Returns arrays (lane_id, s, x_f, theta_f). x_f is positive to the left of the
        lane direction. Exact distance ties go to the lower lane id.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if lane_ids is None:
            sel = slice(None)
        else:
            key = tuple(lane_ids)
            sel = self._sel_cache.get(key)
            if sel is None:
                sel = np.isin(self._seg_lane, np.asarray(key))
                if not np.any(sel):
                    raise MapError(f"no lanes among {list(lane_ids)}")
                self._sel_cache[key] = sel
        a = self._seg_a[sel]
        d = self._seg_d[sel]
        len2 = self._seg_len2[sel]
        rel = pts[:, None, :] - a[None, :, :]
        t = np.clip((rel[..., 0] * d[:, 0] + rel[..., 1] * d[:, 1]) / len2, 0.0, 1.0)
        cx = rel[..., 0] - t * d[:, 0]
        cy = rel[..., 1] - t * d[:, 1]
        dist2 = cx * cx + cy * cy
        k = np.argmin(dist2, axis=1)
        rows = np.arange(len(pts))
        seg_len = self._seg_len[sel][k]
        dk = d[k]
        cross = (dk[:, 0] * cy[rows, k] - dk[:, 1] * cx[rows, k]) / seg_len
        dist = np.sqrt(dist2[rows, k])
        x_f = np.where(cross >= 0.0, dist, -dist)
        s = self._seg_s0[sel][k] + t[rows, k] * seg_len
        lane = self._seg_lane[sel][k]
        if headings is None:
            theta_f = np.zeros(len(pts))
        else:
            theta_f = wrap_angle(np.asarray(headings, dtype=float) - self._seg_heading[sel][k])
            theta_f = np.atleast_1d(theta_f)
        return lane, s, x_f, theta_f


@dataclass(eq=False)
class DrivableArea:
    """Union of simple polygons; boundary points count as drivable."""

    polygons: list

    def __post_init__(self):
        polys = []
        for p in self.polygons:
            poly = p if isinstance(p, Polygon) else Polygon(np.asarray(p, dtype=float))
            if not poly.is_valid or poly.is_empty:
                raise MapError("drivable polygons must be simple and non-empty")
            polys.append(poly)
        if not polys:
            raise MapError("drivable area needs at least one polygon")
        self.polygons = polys
        self.union = unary_union(polys)
        shapely.prepare(self.union)

    def contains(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return shapely.intersects_xy(self.union, pts[:, 0], pts[:, 1])


def project_to_lane(point, graph: LaneGraph, heading: float = 0.0,
                    lane_ids: Sequence[int] | None = None) -> LaneProjection:
    lane, s, x_f, theta_f = graph.project(np.asarray(point, dtype=float)[None, :], [heading], lane_ids)
    return LaneProjection(int(lane[0]), float(s[0]), float(x_f[0]), float(theta_f[0]))


def in_drivable(point, area: DrivableArea) -> bool:
    return bool(area.contains(np.asarray(point, dtype=float)[None, :])[0])


# ---------------------------------------------------------------------------
# Built-in maps


def _corridor(points, width) -> Polygon:
    return LineString(points).buffer(width / 2.0, cap_style="flat", join_style="round", quad_segs=8)


def _arc(center, radius, a0, a1, max_chord=2.0) -> np.ndarray:
    n = max(8, int(math.ceil(abs(a1 - a0) * radius / max_chord)))
    ang = np.linspace(a0, a1, n + 1)
    return np.column_stack([center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)])


def _bezier(p0, d0, p3, d3, n=12) -> np.ndarray:
    chord = float(np.hypot(*(np.asarray(p3) - np.asarray(p0))))
    k = 0.5523 * chord / math.sqrt(2.0)
    p0, p3 = np.asarray(p0, float), np.asarray(p3, float)
    p1 = p0 + k * np.asarray(d0)
    p2 = p3 - k * np.asarray(d3)
    t = np.linspace(0.0, 1.0, n + 1)[:, None]
    return (1 - t) ** 3 * p0 + 3 * (1 - t) ** 2 * t * p1 + 3 * (1 - t) * t ** 2 * p2 + t ** 3 * p3


def _require_positive(**vals):
    for name, v in vals.items():
        if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
            raise MapError(f"{name} must be a positive finite number, got {v!r}")


def _straight_map(length=200.0, n_lanes=2, width=3.5, target_speed=10.0):
    _require_positive(length=length, n_lanes=n_lanes, width=width, target_speed=target_speed)
    n_lanes = int(n_lanes)
    lanes = [
        Lane(i, np.array([[0.0, i * width], [length, i * width]]), width,
             left=i + 1 if i + 1 < n_lanes else None, right=i - 1 if i > 0 else None,
             target_speed=target_speed)
        for i in range(n_lanes)
    ]
    area = DrivableArea([box(0.0, -width / 2.0, length, (n_lanes - 1) * width + width / 2.0)])
    return LaneGraph(lanes), area


def _curve_map(radius=50.0, angle=math.pi / 2, n_lanes=1, width=3.5, approach=30.0, target_speed=10.0):
    _require_positive(radius=radius, angle=angle, n_lanes=n_lanes, width=width,
                      approach=approach, target_speed=target_speed)
    n_lanes = int(n_lanes)
    if radius - (n_lanes - 0.5) * width <= 0.0:
        raise MapError(f"radius {radius} too small for {n_lanes} lanes of width {width}")
    if angle >= 2 * math.pi:
        raise MapError("curve angle must be below 2*pi")
    center = (0.0, radius)
    lanes, corridors = [], []
    for i in range(n_lanes):
        r = radius - i * width
        arc = _arc(center, r, -math.pi / 2, -math.pi / 2 + angle)
        end_dir = np.array([math.cos(angle), math.sin(angle)])
        pts = np.vstack([[-approach, i * width], arc, arc[-1] + approach * end_dir])
        lanes.append(Lane(i, pts, width, left=i + 1 if i + 1 < n_lanes else None,
                          right=i - 1 if i > 0 else None, target_speed=target_speed))
        corridors.append(_corridor(pts, width * (1.0 + 1e-6)))
    return LaneGraph(lanes), DrivableArea(_as_polygons(unary_union(corridors)))


_ARMS = {"east": (1.0, 0.0), "north": (0.0, 1.0), "west": (-1.0, 0.0), "south": (0.0, -1.0)}
ARM_ORDER = ("east", "north", "west", "south")
TURNS = ("right", "straight", "left")


def intersection_lane_ids(arm: str) -> dict:
    """Lane ids for one arm of the built-in four-way intersection."""
    k = ARM_ORDER.index(arm)
    return {"incoming": k, "outgoing": 4 + k,
            "connectors": {t: 8 + 3 * k + j for j, t in enumerate(TURNS)}}


def _turn_target(k: int, turn: str) -> int:
    # Incoming from arm k travels toward the center; right turn exits on arm k+1 (ccw order E,N,W,S).
    return {"right": (k + 1) % 4, "straight": (k + 2) % 4, "left": (k + 3) % 4}[turn]


def _intersection_map(arm=80.0, width=3.5, box_half=10.0, target_speed=10.0):
    _require_positive(arm=arm, width=width, box_half=box_half, target_speed=target_speed)
    if box_half < width:
        raise MapError("box_half must be at least one lane width")
    h = box_half
    lanes, corridors = [], [box(-h, -h, h, h)]
    inc_end, out_start = {}, {}
    for k, name in enumerate(ARM_ORDER):
        u = np.array(_ARMS[name])
        d = -u
        off_in = np.array([d[1], -d[0]]) * width / 2.0
        off_out = np.array([u[1], -u[0]]) * width / 2.0
        p_in = np.array([u * (h + arm) + off_in, u * h + off_in])
        p_out = np.array([u * h + off_out, u * (h + arm) + off_out])
        conn = intersection_lane_ids(name)["connectors"]
        lanes.append(Lane(k, p_in, width, successors=tuple(conn.values()), target_speed=target_speed))
        lanes.append(Lane(4 + k, p_out, width, target_speed=target_speed))
        inc_end[k] = (p_in[-1], d)
        out_start[k] = (p_out[0], u)
        road = np.array([u * h, u * (h + arm)])
        corridors.append(_corridor(road, 2.0 * width))
    for k in range(4):
        p0, d0 = inc_end[k]
        for j, turn in enumerate(TURNS):
            tgt = _turn_target(k, turn)
            p3, d3 = out_start[tgt]
            pts = np.array([p0, p3]) if turn == "straight" else _bezier(p0, d0, p3, d3)
            lanes.append(Lane(8 + 3 * k + j, pts, width, successors=(4 + tgt,), target_speed=target_speed))
            corridors.append(_corridor(pts, width))
    return LaneGraph(lanes), DrivableArea(_as_polygons(unary_union(corridors)))


def _as_polygons(geom) -> list:
    if isinstance(geom, Polygon):
        return [geom]
    return list(geom.geoms)


MAP_KINDS = {
    "straight": _straight_map,
    "curve": _curve_map,
    "four_way_intersection": _intersection_map,
}


def synthesize_map(kind: str, **params) -> tuple[LaneGraph, DrivableArea]:
    """Build one of the built-in desk-scale maps.

    ``straight``: length, n_lanes, width. ``curve``: radius, angle, n_lanes, width,
    approach. ``four_way_intersection``: arm, width (one lane per direction; 12
    connectors, one per arm and turn), box_half (half-size of the junction box).
    """
    try:
        builder = MAP_KINDS[kind]
    except KeyError:
        raise MapError(f"unknown map kind {kind!r}; expected one of {sorted(MAP_KINDS)}") from None
    try:
        return builder(**params)
    except TypeError as exc:
        raise MapError(f"bad parameters for {kind}: {exc}") from None


# ---------------------------------------------------------------------------
# Routing


@dataclass(frozen=True)
class Waypoint:
    lane_id: int
    s: float


@dataclass(frozen=True)
class RouteQuery:
    start_position: tuple[float, float]
    start_lane: int
    start_s: float
    goal: Waypoint
    distance: float
    path: tuple[int, ...]
    vehicle_id: int | None = None

    @property
    def reachable(self) -> bool:
        return math.isfinite(self.distance)


def waypoint_position(graph: LaneGraph, wp: Waypoint) -> np.ndarray:
    x, y, _ = graph[wp.lane_id].point_at(wp.s)
    return np.array([x, y])


def _neighbor_entry(graph: LaneGraph, lane: Lane, s: float, nb_id: int):
    nb = graph[nb_id]
    p = np.array(lane.point_at(s)[:2])
    _, s_nb, x_f, _ = graph.project(p[None, :], lane_ids=[nb_id])
    if s_nb[0] >= nb.length:
        return None
    return float(s_nb[0]), abs(float(x_f[0]))


def distance_to_goal(graph: LaneGraph, start_position, start_lane: int, goal: Waypoint,
                     vehicle_id: int | None = None) -> RouteQuery:
    """A* over (lane, entry arclength) states with a Euclidean heuristic.

    Cost is centerline arclength; a lane change to a neighbor costs the lateral
    distance between the two centerlines at the change point.
    """
    if start_lane not in graph or goal.lane_id not in graph:
        raise MapError("start lane and goal lane must exist in the graph")
    start_position = np.asarray(start_position, dtype=float)
    _, s_start, _, _ = graph.project(start_position[None, :], lane_ids=[start_lane])
    s_start = float(s_start[0])
    goal_xy = waypoint_position(graph, goal)

    def h(lane_id, s):
        p = graph[lane_id].point_at(s)
        return float(math.hypot(p[0] - goal_xy[0], p[1] - goal_xy[1]))

    GOAL = ("goal",)
    start = (start_lane, s_start)
    best = {start: 0.0}
    parent = {start: None}
    counter = 0
    heap = [(h(*start), counter, 0.0, start)]
    while heap:
        _, _, g, node = heapq.heappop(heap)
        if node == GOAL:
            path = []
            cur = parent[GOAL]
            while cur is not None:
                if not path or path[-1] != cur[0]:
                    path.append(cur[0])
                cur = parent[cur]
            return RouteQuery(tuple(start_position), start_lane, s_start, goal, g, tuple(reversed(path)), vehicle_id)
        if g > best.get(node, math.inf):
            continue
        lane_id, s = node
        lane = graph[lane_id]
        edges = []
        if lane_id == goal.lane_id and goal.s >= s:
            edges.append((GOAL, goal.s - s, 0.0))
        for succ in lane.successors:
            edges.append(((succ, 0.0), lane.length - s, None))
        for nb in (lane.left, lane.right):
            if nb is None:
                continue
            entry = _neighbor_entry(graph, lane, s, nb)
            if entry is not None:
                edges.append(((nb, entry[0]), entry[1], None))
        for nxt, cost, hv in edges:
            ng = g + cost
            if ng < best.get(nxt, math.inf):
                best[nxt] = ng
                parent[nxt] = node
                counter += 1
                heapq.heappush(heap, (ng + (h(*nxt) if hv is None else hv), counter, ng, nxt))
    return RouteQuery(tuple(start_position), start_lane, s_start, goal, UNREACHABLE, (), vehicle_id)


def identify_cbv(av: RouteQuery, bvs: Sequence[RouteQuery], delta: float = DEFAULT_CBV_DELTA,
                 max_cbv: int = 1) -> list[int]:
    """Vehicle ids of the critical background vehicles, closest distance-to-goal first."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    if not math.isfinite(av.distance):
        return []
    scored = []
    for q in bvs:
        if q.vehicle_id is None:
            raise ValueError("background route queries need a vehicle_id")
        if not math.isfinite(q.distance):
            continue
        gap = abs(q.distance - av.distance)
        if gap < delta:
            scored.append((gap, q.vehicle_id))
    scored.sort()
    return [vid for _, vid in scored[:max_cbv]]


# ---------------------------------------------------------------------------
# Reference lines


@dataclass(eq=False)
class ReferenceLine:
    xy: np.ndarray
    heading: np.ndarray
    s: np.ndarray
    lanes: tuple[int, ...] = ()

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def __len__(self) -> int:
        return len(self.s)


def _chain_points(graph: LaneGraph, lane_ids: Sequence[int], s0: float) -> np.ndarray:
    first = graph[lane_ids[0]]
    x0, y0, _ = first.point_at(s0)
    keep = first.cum_s > s0
    pts = [np.array([[x0, y0]]), first.centerline[keep]]
    for lid in lane_ids[1:]:
        pts.append(graph[lid].centerline)
    pts = np.vstack(pts)
    step = np.hypot(*np.diff(pts, axis=0).T)
    return pts[np.concatenate([[True], step > 1e-9])]


def _extend(graph: LaneGraph, lane_ids: list[int], s0: float, length: float) -> list[int]:
    lanes = list(lane_ids)
    total = graph[lanes[0]].length - s0 + sum(graph[lid].length for lid in lanes[1:])
    while total < length:
        succ = graph[lanes[-1]].successors
        if not succ:
            break
        nxt = min(succ)
        if nxt in lanes:
            break
        lanes.append(nxt)
        total += graph[nxt].length
    return lanes


def resample_polyline(pts: np.ndarray, length: float, spacing: float = 1.0) -> ReferenceLine:
    seg = np.diff(pts, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = min(cum[-1], length)
    n = int(math.floor(total / spacing + 1e-9))
    s = np.arange(n + 1) * spacing
    if n == 0:
        s = np.array([0.0, total])
    x = np.interp(s, cum, pts[:, 0])
    y = np.interp(s, cum, pts[:, 1])
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    heading = np.unwrap(np.arctan2(seg[idx, 1], seg[idx, 0]))
    return ReferenceLine(np.column_stack([x, y]), heading, s)


def reference_lines(query: RouteQuery, graph: LaneGraph, n_ref: int = 3, length: float = 200.0,
                    spacing: float = 1.0) -> list[ReferenceLine]:
    """Route centerline first, then neighbor-lane alternatives from the start lane."""
    if not query.reachable or not query.path:
        raise ValueError("reference lines need a reachable route query")
    lines = []
    route = _extend(graph, list(query.path), query.start_s, length)
    line = resample_polyline(_chain_points(graph, route, query.start_s), length, spacing)
    line.lanes = tuple(route)
    lines.append(line)
    start = graph[query.start_lane]
    for nb in (start.left, start.right):
        if len(lines) >= n_ref or nb is None:
            continue
        entry = _neighbor_entry(graph, start, query.start_s, nb)
        if entry is None:
            continue
        chain = _extend(graph, [nb], entry[0], length)
        alt = resample_polyline(_chain_points(graph, chain, entry[0]), length, spacing)
        alt.lanes = tuple(chain)
        lines.append(alt)
    return lines[:n_ref]


# ---------------------------------------------------------------------------
# Scenarios


@dataclass(frozen=True)
class Spawn:
    lane: int
    s: float
    speed: float
    id: int = 0
    route: tuple[int, ...] = ()
    target_speed: float | None = None


@dataclass(eq=False)
class Scenario:
    map_spec: dict
    av: Spawn
    av_route: tuple[int, ...]
    goal: Waypoint
    bvs: list[Spawn] = field(default_factory=list)
    seed: int = 0
    style: str = "normal"
    horizon: int = 150
    scenario_id: str = "scenario"

    def __post_init__(self):
        self.graph, self.area = build_map(self.map_spec)
        self.validate()

    def validate(self):
        if self.horizon <= 0:
            raise MapError("horizon must be positive")
        if self.goal.lane_id not in self.av_route:
            raise MapError("goal waypoint must lie on the AV route")
        if not 0.0 <= self.goal.s <= self.graph[self.goal.lane_id].length:
            raise MapError("goal arclength outside its lane")
        route_set = set(self.av_route)
        for a, b in zip(self.av_route, self.av_route[1:]):
            lane = self.graph[a]
            if b not in lane.successors and b not in (lane.left, lane.right):
                raise MapError(f"AV route breaks between lanes {a} and {b}")
        if self.av.lane not in route_set:
            raise MapError("AV must spawn on its route")
        ids = {self.av.id}
        for sp in [self.av, *self.bvs]:
            if sp.lane not in self.graph:
                raise MapError(f"spawn on unknown lane {sp.lane}")
            if not 0.0 <= sp.s <= self.graph[sp.lane].length:
                raise MapError(f"spawn of vehicle {sp.id} outside lane {sp.lane}")
            if sp.speed < 0:
                raise MapError("spawn speeds must be non-negative")
            x, y, _ = self.graph[sp.lane].point_at(sp.s)
            if not in_drivable((x, y), self.area):
                raise MapError(f"spawn of vehicle {sp.id} not in drivable area")
        for sp in self.bvs:
            if sp.id in ids:
                raise MapError(f"duplicate vehicle id {sp.id}")
            ids.add(sp.id)

    def to_dict(self) -> dict:
        def spawn(sp: Spawn, with_route=True):
            d = {"id": sp.id, "lane": sp.lane, "s": sp.s, "speed": sp.speed}
            if with_route and sp.route:
                d["route"] = list(sp.route)
            if sp.target_speed is not None:
                d["target_speed"] = sp.target_speed
            return d

        return {
            "format": SCENARIO_FORMAT,
            "id": self.scenario_id,
            "map": self.map_spec,
            "av": spawn(self.av, with_route=False),
            "bvs": [spawn(b) for b in self.bvs],
            "route": {"lanes": list(self.av_route), "goal": {"lane": self.goal.lane_id, "s": self.goal.s}},
            "seed": self.seed,
            "style": self.style,
            "horizon_steps": self.horizon,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        allowed = {"format", "id", "map", "av", "bvs", "route", "seed", "style", "horizon_steps"}
        unknown = set(data) - allowed
        if unknown:
            raise MapError(f"unknown scenario keys: {sorted(unknown)}")
        if data.get("format") != SCENARIO_FORMAT:
            raise MapError(f"unsupported scenario format {data.get('format')!r}")
        try:
            av = _spawn_from(data["av"])
            bvs = [_spawn_from(b) for b in data.get("bvs", [])]
            route = data["route"]
            goal = Waypoint(int(route["goal"]["lane"]), float(route["goal"]["s"]))
            return cls(map_spec=data["map"], av=av, av_route=tuple(int(x) for x in route["lanes"]),
                       goal=goal, bvs=bvs, seed=int(data.get("seed", 0)),
                       style=str(data.get("style", "normal")), horizon=int(data["horizon_steps"]),
                       scenario_id=str(data.get("id", "scenario")))
        except (KeyError, TypeError) as exc:
            raise MapError(f"malformed scenario: {exc!r}") from None

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Scenario":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise MapError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)


def _spawn_from(d: dict) -> Spawn:
    return Spawn(lane=int(d["lane"]), s=float(d["s"]), speed=float(d["speed"]), id=int(d.get("id", 0)),
                 route=tuple(int(x) for x in d.get("route", ())),
                 target_speed=None if d.get("target_speed") is None else float(d["target_speed"]))


def build_map(spec: dict) -> tuple[LaneGraph, DrivableArea]:
    if "kind" in spec:
        return synthesize_map(spec["kind"], **spec.get("params", {}))
    if "lanes" in spec:
        lanes = [
            Lane(int(d["id"]), np.asarray(d["centerline"], float), float(d["width"]),
                 successors=tuple(d.get("successors", ())), left=d.get("left"), right=d.get("right"),
                 target_speed=float(d.get("target_speed", 10.0)))
            for d in spec["lanes"]
        ]
        graph = LaneGraph(lanes)
        if "drivable" in spec:
            area = DrivableArea([np.asarray(p, float) for p in spec["drivable"]])
        else:
            area = DrivableArea(_as_polygons(unary_union(
                [_corridor(ln.centerline, ln.width * (1.0 + 1e-6)) for ln in graph.lanes.values()])))
        return graph, area
    raise MapError("map spec needs either 'kind' or inline 'lanes'")


def intersection_scenario(seed: int = 0, n_bvs: int = 6, arm: float = 80.0, horizon: int = 150,
                          style: str = "normal", av_speed: float = 8.0) -> Scenario:
    """Randomized four-way intersection: AV drives south -> north, BVs on all arms.

    The AV's goal waypoint sits 20 m into the northern exit, so BVs merging into that
    exit at a similar distance become critical.
    """
    rng = np.random.default_rng(seed)
    south = intersection_lane_ids("south")
    north = intersection_lane_ids("north")
    av_route = (south["incoming"], south["connectors"]["straight"], north["outgoing"])
    av_s = float(rng.uniform(arm - 50.0, arm - 35.0))
    av = Spawn(lane=south["incoming"], s=av_s, speed=av_speed, id=0)
    goal = Waypoint(north["outgoing"], 20.0)
    bvs = []
    taken = {south["incoming"]: [av_s]}
    arms = ["west", "east", "west", "east", "north", "south"]
    for i in range(n_bvs):
        arm_name = arms[i % len(arms)]
        ids = intersection_lane_ids(arm_name)
        lane = ids["incoming"]
        for _ in range(20):
            s = float(rng.uniform(arm - 60.0, arm - 20.0))
            if all(abs(s - o) > 10.0 for o in taken.get(lane, [])):
                break
        else:
            continue
        taken.setdefault(lane, []).append(s)
        turn = TURNS[int(rng.integers(0, 3))]
        conn = ids["connectors"][turn]
        out = 4 + _turn_target(ARM_ORDER.index(arm_name), turn)
        speed = float(rng.uniform(5.0, 10.0))
        bvs.append(Spawn(lane=lane, s=s, speed=speed, id=i + 1, route=(lane, conn, out),
                         target_speed=float(rng.uniform(8.0, 11.0))))
    return Scenario(map_spec={"kind": "four_way_intersection", "params": {"arm": arm}},
                    av=av, av_route=av_route, goal=goal, bvs=bvs, seed=seed, style=style,
                    horizon=horizon, scenario_id=f"intersection-{seed}")
