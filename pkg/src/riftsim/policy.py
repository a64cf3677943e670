"""Trainable scoring head: candidate features -> smoothed softmax over the candidate set."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .candidates import CandidateSet
from .dynamics import Trajectories, VehicleShape, box_corners, box_distance, boxes_overlap
from .worldmap import LaneGraph

CHECKPOINT_VERSION = 1
FEATURE_NAMES = ("progress", "clearance", "mean_speed", "terminal_offset", "max_lat_accel")


@dataclass(frozen=True)
class FeatureConfig:
    horizon: int = 80
    clearance_cap: float = 20.0
    n_ref_slots: int = 3
    scales: tuple[float, ...] = (50.0, 1.0, 10.0, 2.0, 4.0)

    @property
    def size(self) -> int:
        return len(FEATURE_NAMES) + self.n_ref_slots


@dataclass(eq=False)
class ScoringContext:
    """Everything besides the candidates that features depend on."""

    forecasts: Trajectories
    other_lengths: np.ndarray
    other_widths: np.ndarray
    graph: LaneGraph
    lane_ids: tuple[int, ...]
    shape: VehicleShape


def candidate_features(cset: CandidateSet, context: ScoringContext, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Standardized (G, F) feature matrix."""
    H = min(cfg.horizon, cset.points.shape[1] - 1)
    pts = cset.points[:, : H + 1]
    G = len(cset)
    step = np.hypot(np.diff(pts[..., 0], axis=1), np.diff(pts[..., 1], axis=1))
    progress = step.sum(axis=1)
    heading = np.arctan2(pts[..., 3], pts[..., 2])
    speed = np.hypot(pts[..., 4], pts[..., 5])

    clearance = np.full(G, cfg.clearance_cap)
    fc = context.forecasts
    if len(fc) > 0:
        if fc.horizon < H:
            raise ValueError(f"forecast horizon {fc.horizon} shorter than feature horizon {H}")
        ox, oy, oh = fc.x[:, : H + 1], fc.y[:, : H + 1], fc.heading[:, : H + 1]
        ol = context.other_lengths[:, None]
        ow = context.other_widths[:, None]
        sh = context.shape
        ov = boxes_overlap(pts[:, None, :, 0], pts[:, None, :, 1], heading[:, None, :], sh.length, sh.width,
                           ox[None], oy[None], oh[None], ol[None], ow[None])
        # exact distances only where the bounding circles come within the cap
        reach = 0.5 * (np.hypot(sh.length, sh.width) + np.hypot(ol, ow))[None]
        centre = np.hypot(pts[:, None, :, 0] - ox[None], pts[:, None, :, 1] - oy[None])
        # box distance lies in [centre - reach, centre], so only triples whose lower
        # bound undercuts the best upper bound of their group can hold the minimum
        lower = centre - reach
        best = np.minimum(centre.min(axis=(1, 2)), cfg.clearance_cap)
        near = (lower <= best[:, None, None]) & ~ov
        d = np.where(ov, 0.0, cfg.clearance_cap)
        if near.any():
            gi, ai, ti = np.nonzero(near)
            ca = box_corners(pts[gi, ti, 0], pts[gi, ti, 1], heading[gi, ti], sh.length, sh.width)
            cb = box_corners(ox[ai, ti], oy[ai, ti], oh[ai, ti], ol[ai, 0], ow[ai, 0])
            d[near] = box_distance(ca, cb, np.zeros(len(gi), dtype=bool))
        clearance = np.minimum(d.min(axis=(1, 2)), cfg.clearance_cap)

    _, _, x_f, _ = context.graph.project(pts[:, H, :2], lane_ids=context.lane_ids or None)
    dh = np.diff(np.unwrap(heading, axis=1), axis=1)
    dt = cset.config.dt
    lat = np.abs(speed[:, 1:] * dh / dt).max(axis=1) if H > 0 else np.zeros(G)

    raw = np.column_stack([progress, clearance, speed.mean(axis=1), np.abs(x_f), lat])
    feats = raw / np.asarray(cfg.scales)
    onehot = np.zeros((G, cfg.n_ref_slots))
    onehot[np.arange(G), np.minimum(cset.ref_index, cfg.n_ref_slots - 1)] = 1.0
    return np.hstack([feats, onehot])


@dataclass(eq=False)
class ScoringParams:
    """Linear scorer, or one tanh hidden layer when ``hidden`` weights are present."""

    weights: np.ndarray
    bias: float = 0.0
    hidden_weights: np.ndarray | None = None
    hidden_bias: np.ndarray | None = None
    temperature: float = 1.0
    eta: float = 0.01

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.eta < 1.0:
            raise ValueError("smoothing eta must lie in [0, 1)")
        if self.hidden_weights is not None:
            self.hidden_weights = np.asarray(self.hidden_weights, dtype=float)
            self.hidden_bias = np.asarray(self.hidden_bias, dtype=float)
        if not np.all(np.isfinite(self.vector())):
            raise ValueError("non-finite scoring parameters")

    @classmethod
    def zeros(cls, n_features: int, hidden: int = 0, temperature: float = 1.0, eta: float = 0.01,
              rng: np.random.Generator | None = None) -> "ScoringParams":
        if hidden:
            rng = rng or np.random.default_rng(0)
            w1 = rng.normal(0.0, 1.0 / np.sqrt(n_features), size=(n_features, hidden))
            return cls(np.zeros(hidden), 0.0, w1, np.zeros(hidden), temperature, eta)
        return cls(np.zeros(n_features), 0.0, temperature=temperature, eta=eta)

    @property
    def n_features(self) -> int:
        return len(self.weights) if self.hidden_weights is None else self.hidden_weights.shape[0]

    def vector(self) -> np.ndarray:
        parts = [self.weights, [self.bias]]
        if self.hidden_weights is not None:
            parts = [self.hidden_weights.ravel(), self.hidden_bias] + parts
        return np.concatenate([np.ravel(p) for p in parts]).astype(float)

    def with_vector(self, vec: np.ndarray) -> "ScoringParams":
        vec = np.asarray(vec, dtype=float)
        i = 0
        w1 = b1 = None
        if self.hidden_weights is not None:
            n = self.hidden_weights.size
            w1 = vec[i:i + n].reshape(self.hidden_weights.shape)
            i += n
            b1 = vec[i:i + len(self.hidden_bias)]
            i += len(self.hidden_bias)
        w = vec[i:i + len(self.weights)]
        b = float(vec[i + len(self.weights)])
        return ScoringParams(w.copy(), b, None if w1 is None else w1.copy(), None if b1 is None else b1.copy(),
                             self.temperature, self.eta)

    def network(self, feats: np.ndarray):
        """Raw scores (G,) and their Jacobian (G, P) w.r.t. the parameter vector."""
        G = feats.shape[0]
        if self.hidden_weights is None:
            z = feats @ self.weights + self.bias
            jac = np.hstack([feats, np.ones((G, 1))])
            return z, jac
        a = feats @ self.hidden_weights + self.hidden_bias
        h = np.tanh(a)
        z = h @ self.weights + self.bias
        gate = (1.0 - h * h) * self.weights
        d_w1 = (feats[:, :, None] * gate[:, None, :]).reshape(G, -1)
        jac = np.hstack([d_w1, gate, h, np.ones((G, 1))])
        return z, jac

    # checkpoints ---------------------------------------------------------

    def to_dict(self) -> dict:
        d = {
            "version": CHECKPOINT_VERSION,
            "temperature": self.temperature,
            "eta": self.eta,
            "shapes": {"weights": list(self.weights.shape), "bias": []},
            "values": {"weights": self.weights.tolist(), "bias": [self.bias]},
        }
        if self.hidden_weights is not None:
            d["shapes"]["hidden_weights"] = list(self.hidden_weights.shape)
            d["shapes"]["hidden_bias"] = list(self.hidden_bias.shape)
            d["values"]["hidden_weights"] = self.hidden_weights.ravel().tolist()
            d["values"]["hidden_bias"] = self.hidden_bias.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScoringParams":
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
        vals, shapes = d["values"], d["shapes"]
        w1 = b1 = None
        if "hidden_weights" in vals:
            w1 = np.asarray(vals["hidden_weights"], float).reshape(shapes["hidden_weights"])
            b1 = np.asarray(vals["hidden_bias"], float)
        return cls(np.asarray(vals["weights"], float), float(vals["bias"][0]), w1, b1,
                   float(d["temperature"]), float(d["eta"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ScoringParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(eq=False)
class PolicyDistribution:
    probs: np.ndarray
    logits: np.ndarray
    eta: float = 0.0
    raw: np.ndarray = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.probs)

    @property
    def floor(self) -> float:
        return self.eta / len(self.probs)

    @classmethod
    def from_probs(cls, probs, eta: float = 0.0) -> "PolicyDistribution":
        p = np.asarray(probs, dtype=float)
        with np.errstate(divide="ignore"):
            return cls(p, np.log(p), eta, p)


def smoothed_softmax(logits: np.ndarray, eta: float):
    z = logits - logits.max()
    e = np.exp(z)
    p = e / e.sum()
    return (1.0 - eta) * p + eta / len(p), p


def score(params: ScoringParams, feats: np.ndarray) -> PolicyDistribution:
    feats = np.asarray(feats, dtype=float)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise ValueError("features must be a non-empty (G, F) matrix")
    bad = ~np.all(np.isfinite(feats), axis=1)
    if bad.any():
        raise ValueError(f"non-finite feature for candidate {int(np.flatnonzero(bad)[0])}")
    z, _ = params.network(feats)
    logits = z / params.temperature
    probs, raw = smoothed_softmax(logits, params.eta)
    return PolicyDistribution(probs, logits, params.eta, raw)


def grad_log_probs(params: ScoringParams, feats: np.ndarray):
    """Distribution plus the (G, P) matrix of d log pi_i / d theta for every candidate."""
    feats = np.asarray(feats, dtype=float)
    z, jac = params.network(feats)
    logits = z / params.temperature
    probs, raw = smoothed_softmax(logits, params.eta)
    # d log out_i / d logit_k = (1 - eta) p_i (delta_ik - p_k) / out_i
    m = (1.0 - params.eta) * (raw / probs)[:, None] * (np.eye(len(raw)) - raw[None, :])
    grads = m @ jac / params.temperature
    return PolicyDistribution(probs, logits, params.eta, raw), grads


def grad_log_prob(params: ScoringParams, feats: np.ndarray, i: int) -> np.ndarray:
    if not 0 <= i < len(feats):
        raise IndexError(f"candidate index {i} out of range")
    return grad_log_probs(params, feats)[1][i]


def select_trajectory(dist: PolicyDistribution, mode: str = "argmax", rng: np.random.Generator | None = None) -> int:
    if mode == "argmax":
        return int(np.argmax(dist.probs))
    if mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs a seeded generator")
        return int(rng.choice(len(dist.probs), p=dist.probs / dist.probs.sum()))
    raise ValueError(f"unknown selection mode {mode!r}")
