"""Closed-loop traffic environment.

The AV and ordinary background vehicles follow their routes with an IDM speed law
and the PID tracker. At every tick the critical background vehicle (CBV) is
re-identified by distance-to-goal; if one exists it is driven by the scoring
policy: candidates are generated, forward simulated against constant-action
forecasts of everyone else, scored by the reward model, and the argmax candidate's
first tracking command is executed.

Vehicles are purely kinematic: overlaps are logged as collisions but nobody is
removed, and the episode runs until the AV finishes its route or the horizon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .candidates import GenerationConfig, generate_candidates
from .dynamics import (DEFAULT_GAINS, DEFAULT_LIMITS, DT, ControlCommand, Limits, PIDGains, PIDTracker,
                       VehicleShape, VehicleState, bicycle_step, box_corners, boxes_overlap, forecast_background,
                       simulate_candidates, trajectory_target)
from .objectives import group_advantages
from .policy import FeatureConfig, ScoringContext, ScoringParams, candidate_features, score, select_trajectory
from .reward import RewardConfig, RewardContext, discounted_return, rollout_features, rollout_rewards
from .worldmap import (ReferenceLine, RouteQuery, Scenario, _chain_points, distance_to_goal, identify_cbv,
                       reference_lines, resample_polyline, wrap_angle)

ROLES = ("AV", "BV", "CBV")


@dataclass(frozen=True)
class IDMParams:
    a_max: float = 1.5
    b_comf: float = 2.0
    s0: float = 2.0
    headway: float = 1.2
    delta: float = 4.0
    lookahead: float = 50.0
    corridor: float = 2.2


@dataclass(frozen=True)
class EnvConfig:
    dt: float = DT
    horizon: int = 80
    n_ref: int = 3
    n_lon: int = 12
    v_max: float = 20.0
    a_limit: float = 3.0
    ref_length: float = 200.0
    cbv_delta: float = 15.0
    max_cbv: int = 1
    end_margin: float = 3.0
    features: FeatureConfig = field(default_factory=FeatureConfig)
    gains: PIDGains = DEFAULT_GAINS
    limits: Limits = DEFAULT_LIMITS
    idm: IDMParams = field(default_factory=IDMParams)

    def __post_init__(self):
        if self.horizon < 1 or self.n_lon < 1 or self.n_ref < 1:
            raise ValueError("horizon, n_lon and n_ref must be positive")
        if not self.dt > 0 or not self.cbv_delta > 0:
            raise ValueError("dt and cbv_delta must be positive")

    @property
    def generation(self) -> GenerationConfig:
        return GenerationConfig(self.n_lon, self.horizon, self.dt, self.v_max, self.a_limit)


@dataclass(eq=False)
class TransitionRecord:
    """One CBV decision: everything an update needs without simulator access."""

    features: np.ndarray
    old_probs: np.ndarray
    returns: np.ndarray
    advantages: np.ndarray
    executed: int
    scenario_id: str
    step: int
    agent_id: int
    snapshot: str = ""

    def __post_init__(self):
        G = len(self.old_probs)
        if self.features.shape[0] != G or len(self.returns) != G or len(self.advantages) != G:
            raise ValueError("inconsistent group size in transition record")
        if not 0 <= self.executed < G:
            raise ValueError("executed index out of range")


@dataclass(eq=False)
class Agent:
    id: int
    role: str
    state: VehicleState
    shape: VehicleShape
    route: tuple[int, ...]
    line: ReferenceLine
    target_speed: float
    alive: bool = True
    ever_cbv: bool = False
    last_jerk: float = 0.0


def route_line(scenario: Scenario, route) -> ReferenceLine:
    pts = _chain_points(scenario.graph, list(route), 0.0)
    total = float(np.sum(np.hypot(*np.diff(pts, axis=0).T)))
    line = resample_polyline(pts, total, 1.0)
    line.lanes = tuple(route)
    return line


def _project_on(line: ReferenceLine, xy: np.ndarray):
    """Arclength and signed lateral offset of points (n, 2) on a 1 m resampled line."""
    d2 = (xy[:, None, 0] - line.xy[None, :, 0]) ** 2 + (xy[:, None, 1] - line.xy[None, :, 1]) ** 2
    k = np.argmin(d2, axis=1)
    h = line.heading[k]
    dx = xy[:, 0] - line.xy[k, 0]
    dy = xy[:, 1] - line.xy[k, 1]
    s = line.s[k] + np.cos(h) * dx + np.sin(h) * dy
    lat = -np.sin(h) * dx + np.cos(h) * dy
    return s, lat


@dataclass(eq=False)
class StepRecord:
    step: int
    rows: list
    decision: TransitionRecord | None = None


class TrafficEnv:
    def __init__(self, scenario: Scenario, params: ScoringParams | None = None, reward: RewardConfig | None = None,
                 config: EnvConfig | None = None, snapshot: str = "", select_mode: str = "argmax",
                 rng: np.random.Generator | None = None):
        self.scenario = scenario
        self.cfg = config or EnvConfig()
        self.reward = reward or RewardConfig()
        self.params = params or ScoringParams.zeros(self.cfg.features.size)
        if self.params.n_features != self.cfg.features.size:
            raise ValueError(f"scorer expects {self.params.n_features} features, config yields {self.cfg.features.size}")
        self.snapshot = snapshot
        self.select_mode = select_mode
        self.rng = rng
        self.reset()

    # setup ---------------------------------------------------------------

    def _spawn(self, sp, role, route) -> Agent:
        g = self.scenario.graph
        x, y, h = g[sp.lane].point_at(sp.s)
        lane_speed = g[route[0]].target_speed if route else g[sp.lane].target_speed
        target = sp.target_speed if sp.target_speed is not None else lane_speed
        return Agent(sp.id, role, VehicleState(x, y, h, sp.speed), VehicleShape(), tuple(route),
                     route_line(self.scenario, route), float(target))

    def reset(self):
        sc = self.scenario
        self.t = 0
        self.done = False
        self.agents: list[Agent] = [self._spawn(sc.av, "AV", sc.av_route)]
        for sp in sc.bvs:
            route = sp.route or self._default_route(sp.lane)
            self.agents.append(self._spawn(sp, "BV", route))
        self.cbv_ids: list[int] = []
        self.history: list[StepRecord] = []
        self._log_rows(0, {}, None, None)

    def _default_route(self, lane_id: int) -> tuple[int, ...]:
        route = [lane_id]
        while self.scenario.graph[route[-1]].successors and len(route) < 8:
            nxt = min(self.scenario.graph[route[-1]].successors)
            if nxt in route:
                break
            route.append(nxt)
        return tuple(route)

    @property
    def av(self) -> Agent:
        return self.agents[0]

    def alive(self) -> list[Agent]:
        return [a for a in self.agents if a.alive]

    # rule-based driving ----------------------------------------------------

    def _current_lane(self, agent: Agent) -> int:
        lane, _, _, _ = self.scenario.graph.project(np.array([[agent.state.x, agent.state.y]]),
                                                      lane_ids=agent.route)
        return int(lane[0])

    def _idm_accel(self, agent: Agent, others: list[Agent]) -> float:
        p = self.cfg.idm
        v = agent.state.speed
        v0 = max(agent.target_speed, 0.1)
        free = p.a_max * (1.0 - (v / v0) ** p.delta)
        if not others:
            return free
        xy = np.array([[agent.state.x, agent.state.y]] + [[o.state.x, o.state.y] for o in others])
        s, lat = _project_on(agent.line, xy)
        ds = s[1:] - s[0]
        ok = (ds > 0.0) & (ds < p.lookahead) & (np.abs(lat[1:]) < p.corridor)
        if not ok.any():
            return free
        j = int(np.flatnonzero(ok)[np.argmin(ds[ok])])
        o = others[j]
        gap = max(ds[j] - 0.5 * (agent.shape.length + o.shape.length), 0.1)
        k = int(np.argmin(np.abs(agent.line.s - s[j + 1])))
        v_lead = o.state.speed * math.cos(wrap_angle(o.state.heading - agent.line.heading[k]))
        s_star = p.s0 + max(0.0, v * p.headway + v * (v - v_lead) / (2.0 * math.sqrt(p.a_max * p.b_comf)))
        return free - p.a_max * (s_star / gap) ** 2

    def _rule_command(self, agent: Agent, others: list[Agent]) -> ControlCommand:
        lim = self.cfg.limits
        acc = self._idm_accel(agent, others)
        s, _ = _project_on(agent.line, np.array([[agent.state.x, agent.state.y]]))
        look = float(np.clip(s[0] + 1.0 + 0.3 * agent.state.speed, 0.0, agent.line.s[-1]))
        tx = float(np.interp(look, agent.line.s, agent.line.xy[:, 0]))
        ty = float(np.interp(look, agent.line.s, agent.line.xy[:, 1]))
        th = float(np.interp(look, agent.line.s, agent.line.heading))
        tracker = PIDTracker(self.cfg.gains, lim, self.cfg.dt)
        _, steer = tracker.command(np.array([agent.state.x]), np.array([agent.state.y]),
                                   np.array([agent.state.heading]), np.array([agent.state.speed]),
                                   tx, ty, th, agent.state.speed, station=False)
        return ControlCommand(float(acc), float(steer[0]), lim)

    # CBV -------------------------------------------------------------------

    def _route_query(self, agent: Agent) -> RouteQuery:
        pos = (agent.state.x, agent.state.y)
        return distance_to_goal(self.scenario.graph, pos, self._current_lane(agent), self.scenario.goal,
                                vehicle_id=agent.id)

    def _select_cbv(self):
        av = self.av
        if not av.alive:
            return [], {}
        bvs = [a for a in self.alive() if a.role == "BV"]
        if not bvs:
            return [], {}
        av_q = self._route_query(av)
        queries = {b.id: self._route_query(b) for b in bvs}
        ids = identify_cbv(av_q, list(queries.values()), self.cfg.cbv_delta, self.cfg.max_cbv)
        return ids, queries

    def _decide(self, agent: Agent, query: RouteQuery, others: list[Agent], commands: dict):
        cfg = self.cfg
        g = self.scenario.graph
        if tuple(query.path) != agent.route[-len(query.path):]:
            agent.route = tuple(query.path)
            agent.line = route_line(self.scenario, agent.route)
        refs = reference_lines(query, g, cfg.n_ref, cfg.ref_length)
        cset = generate_candidates(agent.state, refs, cfg.generation)
        fc = forecast_background([(o.state, o.shape) for o in others], [commands[o.id] for o in others],
                                 cfg.horizon, cfg.dt, cfg.limits)
        lengths = np.array([o.shape.length for o in others])
        widths = np.array([o.shape.width for o in others])
        lanes = tuple(sorted({lid for r in refs for lid in r.lanes}))
        sctx = ScoringContext(fc, lengths, widths, g, lanes, agent.shape)
        feats = candidate_features(cset, sctx, cfg.features)
        dist = score(self.params, feats)
        roll = simulate_candidates(agent.state, agent.shape, cset.points, cfg.horizon, cfg.dt, cfg.gains,
                                   cfg.limits)
        rctx = RewardContext(g, self.scenario.area, fc, lengths, widths, lanes)
        phi = rollout_features(roll, agent.shape, rctx, cfg.dt)
        rewards = rollout_rewards(phi, self.reward)
        returns = discounted_return(rewards, self.reward.gamma)
        adv = group_advantages(returns)
        idx = select_trajectory(dist, self.select_mode, self.rng)
        tracker = PIDTracker(cfg.gains, cfg.limits, cfg.dt)
        tx, ty, th, tv = trajectory_target(cset.points[idx], 0.0, cfg.dt)
        a, st = tracker.command(np.array([agent.state.x]), np.array([agent.state.y]),
                                np.array([agent.state.heading]), np.array([agent.state.speed]), tx, ty, th, tv)
        cmd = ControlCommand(float(a[0]), float(st[0]), cfg.limits)
        rec = TransitionRecord(feats, dist.probs.copy(), np.asarray(returns, float), adv.advantages, idx,
                               self.scenario.scenario_id, self.t, agent.id, self.snapshot)
        return cmd, rec, dist

    # stepping -------------------------------------------------------------

    def step(self) -> StepRecord:
        if self.done:
            raise RuntimeError("episode already finished")
        cfg = self.cfg
        live = self.alive()
        cbv_ids, queries = self._select_cbv()
        self.cbv_ids = cbv_ids
        commands = {}
        for a in live:
            if a.id not in cbv_ids:
                commands[a.id] = self._rule_command(a, [o for o in live if o is not a])
        decision = None
        selected = {}
        for cid in cbv_ids:
            agent = next(a for a in live if a.id == cid)
            agent.ever_cbv = True
            others = [o for o in live if o.id not in cbv_ids]
            cmd, rec, dist = self._decide(agent, queries[cid], others, commands)
            commands[cid] = cmd
            selected[cid] = (rec.executed, dist.probs)
            decision = decision or rec
        for a in live:
            prev_a = a.state.accel
            a.state = bicycle_step(a.state, commands[a.id], a.shape, cfg.dt, cfg.limits)
            a.last_jerk = (a.state.accel - prev_a) / cfg.dt
        self.t += 1
        collisions = self._collisions(live)
        rec = self._log_rows(self.t, collisions, selected, decision)
        for a in live:
            s, _ = _project_on(a.line, np.array([[a.state.x, a.state.y]]))
            if s[0] >= a.line.length - cfg.end_margin:
                a.alive = False
        if not self.av.alive or self.t >= self.scenario.horizon:
            self.done = True
        return rec

    def _collisions(self, live: list[Agent]) -> dict:
        n = len(live)
        if n < 2:
            return {}
        x = np.array([a.state.x for a in live])
        y = np.array([a.state.y for a in live])
        h = np.array([a.state.heading for a in live])
        ln = np.array([a.shape.length for a in live])
        wd = np.array([a.shape.width for a in live])
        ov = boxes_overlap(x[:, None], y[:, None], h[:, None], ln[:, None], wd[:, None],
                           x[None], y[None], h[None], ln[None], wd[None])
        np.fill_diagonal(ov, False)
        out = {}
        for i in range(n):
            js = np.flatnonzero(ov[i])
            if len(js):
                out[live[i].id] = live[int(js[0])].id
        return out

    def _log_rows(self, step, collisions, selected, decision) -> StepRecord:
        live = self.alive()
        corners = box_corners(np.array([a.state.x for a in live]), np.array([a.state.y for a in live]),
                              np.array([a.state.heading for a in live]), np.array([a.shape.length for a in live]),
                              np.array([a.shape.width for a in live]))
        inside = self.scenario.area.contains(corners.reshape(-1, 2)).reshape(len(live), 4).all(axis=1)
        rows = []
        for k, a in enumerate(live):
            st = a.state
            sel, probs = (selected or {}).get(a.id, (-1, None))
            lane = self._current_lane(a)
            rows.append({
                "step": step,
                "time": step * self.cfg.dt,
                "agent_id": a.id,
                "base_role": a.role,
                "controlled": int(a.id in (selected or {})),
                "x": st.x, "y": st.y, "heading": st.heading, "speed": st.speed, "accel": st.accel,
                "a_lat": st.speed * st.yaw_rate, "yaw_rate": st.yaw_rate,
                "target_speed": self.scenario.graph[lane].target_speed if a.role == "AV" else a.target_speed,
                "offroad": int(not inside[k]),
                "collision_with": collisions.get(a.id, -1),
                "selected": sel,
                "probs": probs,
            })
        rec = StepRecord(step, rows, decision)
        self.history.append(rec)
        return rec

    def run(self) -> "EpisodeResult":
        decisions = []
        while not self.done:
            r = self.step()
            if r.decision is not None:
                decisions.append(r.decision)
        return EpisodeResult(self.scenario, self.history, decisions, self.cfg.dt)

    def decisions(self):
        """Yield CBV decisions one at a time, stepping the world in between."""
        while not self.done:
            r = self.step()
            if r.decision is not None:
                yield r.decision


@dataclass(eq=False)
class EpisodeResult:
    scenario: Scenario
    history: list
    decisions: list
    dt: float

    def log(self):
        from .metrics import EpisodeLog

        cbvs = {row["agent_id"] for rec in self.history for row in rec.rows if row["controlled"]}
        rows = []
        for rec in self.history:
            for row in rec.rows:
                r = dict(row)
                base = r.pop("base_role")
                r["role"] = "CBV" if base == "BV" and r["agent_id"] in cbvs else base
                rows.append(r)
        return EpisodeLog.from_rows(rows, self.scenario.scenario_id, self.scenario.seed, self.dt)
