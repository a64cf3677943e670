"""Closed-loop fine-tuning of the scoring head: collect, snapshot, minibatch updates."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .env import EnvConfig, TrafficEnv, TransitionRecord
from .objectives import (VARIANTS, SurrogateConfig, grpo_objective, old_weight_objective, ppo_objective,
                         reinforce_objective, rift_objective)
from .policy import FeatureConfig, PolicyDistribution, ScoringParams, grad_log_probs
from .reward import style_config
from .worldmap import Scenario, intersection_scenario

__all__ = ["TrainConfig", "TransitionRecord", "RolloutBuffer", "PartialFillError", "TrainingError",
           "lr_schedule", "collect", "update", "run_training", "evaluate", "params_hash"]


class PartialFillError(RuntimeError):
    def __init__(self, filled: int, capacity: int):
        super().__init__(f"scenario set exhausted after {filled} of {capacity} decisions; "
                         "add scenarios or lower buffer_capacity")
        self.filled = filled
        self.capacity = capacity


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    buffer_capacity: int = 4096
    batch_size: int = 256
    epochs: int = 16
    warmup_epochs: int = 3
    lr: float = 1e-4
    min_lr: float = 1e-6
    lr_decay: float = 0.9
    lr_schedule: str = "cosine"
    weight_decay: float = 1e-5
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    gamma: float = 0.98
    clip: float = 0.2
    dual_clip: float = 3.0
    beta: float = 0.04
    n_lon: int = 12
    horizon: int = 80
    dt: float = 0.1
    iterations: int = 10
    objective: str = "rift"
    style: str = "normal"
    hidden: int = 0
    eta: float = 0.01
    temperature: float = 1.0
    n_scenarios: int = 64
    scenario_bvs: int = 6

    def __post_init__(self):
        for name in ("buffer_capacity", "batch_size", "epochs", "n_lon", "horizon", "n_scenarios"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lr", "min_lr", "lr_decay", "dt", "gamma", "clip", "temperature"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.iterations < 0 or self.warmup_epochs < 0 or self.weight_decay < 0 or self.beta < 0:
            raise ValueError("iterations, warmup_epochs, weight_decay and beta must be non-negative")
        if self.min_lr > self.lr:
            raise ValueError("min_lr must not exceed lr")
        if self.warmup_epochs >= self.epochs:
            raise ValueError("warmup must leave at least one cosine epoch")
        if self.objective not in VARIANTS:
            raise ValueError(f"unknown objective {self.objective!r}; choose from {VARIANTS}")
        if self.lr_schedule != "cosine":
            raise ValueError("only the cosine schedule is implemented")
        style_config(self.style)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        d = dict(d)
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    def surrogate(self) -> SurrogateConfig:
        if self.objective == "rift":
            return SurrogateConfig(self.clip, self.dual_clip, 0.0, "equal", "dual_clip")
        if self.objective == "old_weight":
            return SurrogateConfig(self.clip, self.dual_clip, self.beta, "old_policy", "ppo_clip")
        beta = self.beta if self.objective == "grpo" else 0.0
        return SurrogateConfig(self.clip, self.dual_clip, beta, "equal", "ppo_clip")

    def env_config(self) -> EnvConfig:
        return EnvConfig(dt=self.dt, horizon=self.horizon, n_lon=self.n_lon)


def params_hash(params: ScoringParams) -> str:
    h = hashlib.sha256(params.vector().tobytes())
    h.update(repr((params.temperature, params.eta)).encode())
    return h.hexdigest()[:16]


@dataclass(eq=False)
class RolloutBuffer:
    capacity: int
    records: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def full(self) -> bool:
        return len(self.records) >= self.capacity

    def add(self, rec: TransitionRecord):
        if self.full:
            raise OverflowError("rollout buffer is full")
        if abs(float(np.sum(rec.advantages))) > 1e-9:
            raise ValueError("advantage group does not sum to zero")
        self.records.append(rec)

    def clear(self):
        self.records = []

    def mean_return(self) -> float:
        """Mean discounted return of the executed candidates."""
        if not self.records:
            return float("nan")
        return float(np.mean([r.returns[r.executed] for r in self.records]))


def lr_schedule(iteration: int, epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to the iteration's initial LR, then cosine down to min_lr at the final epoch."""
    if iteration < 0 or not 0 <= epoch < cfg.epochs:
        raise ValueError("iteration/epoch out of range")
    lr0 = max(cfg.lr * cfg.lr_decay ** iteration, cfg.min_lr)
    w = cfg.warmup_epochs
    if epoch < w:
        return lr0 * (epoch + 1) / w
    start = max(w - 1, 0)
    span = cfg.epochs - 1 - start
    if span <= 0:
        return lr0
    frac = (epoch - start) / span
    return cfg.min_lr + 0.5 * (lr0 - cfg.min_lr) * (1.0 + math.cos(math.pi * frac))


def training_scenarios(seed: int, cfg: TrainConfig) -> list[Scenario]:
    return [intersection_scenario(seed * 100_003 + k, n_bvs=cfg.scenario_bvs, style=cfg.style)
            for k in range(cfg.n_scenarios)]


def collect(buffer: RolloutBuffer, scenarios: list[Scenario], params: ScoringParams, cfg: TrainConfig,
            snapshot: str | None = None, keep_logs: bool = False):
    """Run scenarios in order with the frozen snapshot until the buffer is full."""
    if len(buffer):
        raise ValueError("collect expects an empty buffer")
    snapshot = snapshot or params_hash(params)
    reward = style_config(cfg.style, gamma=cfg.gamma)
    env_cfg = cfg.env_config()
    logs = []
    for sc in scenarios:
        env = TrafficEnv(sc, params, reward, env_cfg, snapshot=snapshot)
        for rec in env.decisions():
            buffer.add(rec)
            if buffer.full:
                break
        if keep_logs:
            logs.append(env)
        if buffer.full:
            return buffer, logs
    raise PartialFillError(len(buffer), buffer.capacity)


class AdamW:
    def __init__(self, n: int, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay

    def ascend(self, theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        """One maximization step with decoupled weight decay."""
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        return theta - lr * self.wd * theta + lr * m_hat / (np.sqrt(v_hat) + self.eps)


def record_objective(params: ScoringParams, rec: TransitionRecord, cfg: TrainConfig, sur: SurrogateConfig,
                     ref: ScoringParams | None):
    new, grads = grad_log_probs(params, rec.features)
    old = PolicyDistribution.from_probs(rec.old_probs, params.eta)
    obj = cfg.objective
    if obj == "rift":
        return rift_objective(new, old, rec.advantages, sur, grads)
    if obj in ("grpo", "old_weight"):
        ref_dist, _ = grad_log_probs(ref, rec.features)
        fn = grpo_objective if obj == "grpo" else old_weight_objective
        return fn(new, old, ref_dist, rec.advantages, sur, grads)
    if obj == "ppo":
        return ppo_objective(new, old, rec.executed, float(rec.advantages[rec.executed]), sur, grads)
    return reinforce_objective(new, rec.executed, float(rec.returns[rec.executed]), float(np.mean(rec.returns)),
                               grads)


def update(params: ScoringParams, buffer: RolloutBuffer, cfg: TrainConfig, iteration: int = 0,
           seed: int = 0, snapshot: str | None = None, ref: ScoringParams | None = None):
    """mu epochs of shuffled minibatch ascent; returns (new params, per-epoch stats)."""
    if not len(buffer):
        raise ValueError("update needs a non-empty buffer")
    snapshot = snapshot or params_hash(params)
    stale = {r.snapshot for r in buffer.records} - {snapshot}
    if stale:
        raise TrainingError(f"buffer holds records from other snapshots: {sorted(stale)}")
    ref = ref or params
    sur = cfg.surrogate()
    rng = np.random.default_rng([seed, iteration])
    opt = AdamW(len(params.vector()), cfg.adam_betas, cfg.adam_eps, cfg.weight_decay)
    theta = params.vector()
    stats = []
    n = len(buffer)
    for epoch in range(cfg.epochs):
        lr = lr_schedule(iteration, epoch, cfg)
        order = rng.permutation(n)
        acc = {"objective": 0.0, "clip_fraction": 0.0, "dual_clip_fraction": 0.0, "mean_ratio": 0.0,
               "max_ratio": 0.0, "kl": 0.0}
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            cur = params.with_vector(theta)
            grad = np.zeros_like(theta)
            for i in idx:
                rep = record_objective(cur, buffer.records[i], cfg, sur, ref)
                grad += rep.grad
                acc["objective"] += rep.value
                for k in ("clip_fraction", "dual_clip_fraction", "mean_ratio"):
                    acc[k] += rep.diagnostics.get(k, 0.0)
                acc["max_ratio"] = max(acc["max_ratio"], rep.diagnostics.get("max_ratio", 1.0))
                acc["kl"] += rep.diagnostics.get("kl", rep.diagnostics.get("kl_old", 0.0))
            grad /= len(idx)
            if not np.all(np.isfinite(grad)):
                raise TrainingError(f"non-finite gradient at iteration {iteration}, epoch {epoch}, "
                                    f"batch starting {start}: {grad}")
            theta = opt.ascend(theta, grad, lr)
        row = {"iteration": iteration, "epoch": epoch, "lr": lr}
        for k, v in acc.items():
            row[k] = v if k == "max_ratio" else v / n
        stats.append(row)
    return params.with_vector(theta), stats


@dataclass(eq=False)
class TrainingResult:
    params: ScoringParams
    initial: ScoringParams
    stats: list
    iteration_returns: list


def initial_params(cfg: TrainConfig, seed: int) -> ScoringParams:
    fc = FeatureConfig()
    return ScoringParams.zeros(fc.size, cfg.hidden, cfg.temperature, cfg.eta, rng=np.random.default_rng(seed))


def run_training(scenarios: list[Scenario] | None, cfg: TrainConfig, seed: int = 0, out_dir=None,
                 init: ScoringParams | None = None) -> TrainingResult:
    """Snapshot -> collect -> update, ``cfg.iterations`` times."""
    scenarios = scenarios if scenarios is not None else training_scenarios(seed, cfg)
    params = init or initial_params(cfg, seed)
    initial = params
    stats, returns = [], []
    stats_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stats_path = out / "train_stats.jsonl"
        stats_path.write_text("")
    for it in range(cfg.iterations):
        snap = params_hash(params)
        buffer = RolloutBuffer(cfg.buffer_capacity)
        try:
            collect(buffer, scenarios, params, cfg, snap)
            mean_ret = buffer.mean_return()
            params, ep_stats = update(params, buffer, cfg, it, seed, snap, initial)
        except (PartialFillError, TrainingError) as exc:
            raise TrainingError(f"iteration {it}: {exc}") from exc
        returns.append(mean_ret)
        for row in ep_stats:
            row["mean_return"] = mean_ret
            row["objective_variant"] = cfg.objective
            row["snapshot"] = snap
        stats.extend(ep_stats)
        if stats_path is not None:
            with stats_path.open("a") as fh:
                for row in ep_stats:
                    fh.write(json.dumps(row, sort_keys=True) + "\n")
    if out_dir is not None:
        params.save(Path(out_dir) / "checkpoint.json")
    return TrainingResult(params, initial, stats, returns)


def evaluate(params: ScoringParams, scenarios: list[Scenario], cfg: TrainConfig):
    """Run each scenario once with the given scorer; returns the episode logs."""
    reward = style_config(cfg.style, gamma=cfg.gamma)
    logs = []
    for sc in scenarios:
        env = TrafficEnv(sc, params, reward, cfg.env_config())
        logs.append(env.run().log())
    return logs
