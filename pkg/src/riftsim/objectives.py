"""Group-relative advantages, clipping kernels and the surrogate objectives with analytic gradients.

Gradients are assembled from per-candidate score-function gradients
``grads[i] = d log pi_theta(tau_i | s) / d theta`` (shape (G, P)), using
d rho_i / d theta = rho_i * grads[i].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .policy import PolicyDistribution

CLIP_EPS = 0.2
DUAL_CLIP = 3.0
ADV_EPS = 1e-8
VARIANTS = ("rift", "grpo", "old_weight", "ppo", "reinforce")


@dataclass(frozen=True)
class SurrogateConfig:
    clip: float = CLIP_EPS
    dual_clip: float = DUAL_CLIP
    beta: float = 0.0
    weighting: str = "equal"
    kernel: str = "dual_clip"

    def __post_init__(self):
        if not self.clip > 0:
            raise ValueError("clip epsilon must be positive")
        if not self.dual_clip > 1:
            raise ValueError("dual-clip ratio c must exceed 1")
        if self.beta < 0:
            raise ValueError("KL weight must be non-negative")
        if self.weighting not in ("equal", "old_policy"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.kernel not in ("ppo_clip", "dual_clip"):
            raise ValueError(f"unknown kernel {self.kernel!r}")


RIFT = SurrogateConfig()
GRPO = SurrogateConfig(kernel="ppo_clip", beta=0.04)
OLD_WEIGHT = SurrogateConfig(kernel="ppo_clip", weighting="old_policy", beta=0.04)
PPO = SurrogateConfig(kernel="ppo_clip")


@dataclass(eq=False)
class AdvantageGroup:
    returns: np.ndarray
    advantages: np.ndarray
    eps: float = ADV_EPS


@dataclass(eq=False)
class ObjectiveReport:
    value: float
    terms: np.ndarray
    grad: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def group_advantages(returns, eps: float = ADV_EPS) -> AdvantageGroup:
    """Standardize returns within the group using the population variance."""
    r = np.asarray(returns, dtype=float)
    if r.ndim != 1 or len(r) < 1:
        raise ValueError("returns must be a non-empty vector")
    centered = r - r.mean()
    var = np.mean(centered * centered)
    if np.all(r == r[0]):
        # exact zeros: the rounded mean of a constant group need not equal its value
        return AdvantageGroup(r, np.zeros_like(r), eps)
    adv = centered / np.sqrt(var + eps)
    return AdvantageGroup(r, adv, eps)


def importance_ratios(new: PolicyDistribution, old: PolicyDistribution) -> np.ndarray:
    p, q = np.asarray(new.probs, float), np.asarray(old.probs, float)
    if p.shape != q.shape:
        raise ValueError("distributions must cover the same candidates")
    floor = old.floor
    if np.any(q <= 0.0) or np.any(q < floor * (1.0 - 1e-9)):
        raise ValueError(f"old-policy probability {q.min():.3g} below support floor {floor:.3g}")
    return p / q


def ppo_clip_kernel(rho, adv, eps: float = CLIP_EPS):
    """min(rho A, clip(rho) A) and its subgradient in rho (flat branch at kinks)."""
    rho = np.asarray(rho, dtype=float)
    adv = np.asarray(adv, dtype=float)
    value = np.minimum(rho * adv, np.clip(rho, 1.0 - eps, 1.0 + eps) * adv)
    slope = np.where(adv > 0, np.where(rho < 1.0 + eps, adv, 0.0),
                     np.where(adv < 0, np.where(rho > 1.0 - eps, adv, 0.0), 0.0))
    return value, slope


def dual_clip_kernel(rho, adv, eps: float = CLIP_EPS, c: float = DUAL_CLIP):
    """Clipped term with the extra lower bound c*A on negative advantages."""
    if not c > 1:
        raise ValueError("dual-clip ratio c must exceed 1")
    value, slope = ppo_clip_kernel(rho, adv, eps)
    rho = np.asarray(rho, dtype=float)
    adv = np.asarray(adv, dtype=float)
    neg = adv < 0
    value = np.where(neg, np.maximum(value, c * adv), value)
    slope = np.where(neg & (rho >= c), 0.0, slope)
    return value, slope


def categorical_kl(p, q) -> float:
    p = np.asarray(getattr(p, "probs", p), dtype=float)
    q = np.asarray(getattr(q, "probs", q), dtype=float)
    if p.shape != q.shape:
        raise ValueError("KL needs distributions over the same support")
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


def _kl_grad(new: PolicyDistribution, ref: PolicyDistribution, grads: np.ndarray) -> np.ndarray:
    # sum_i p_i (log(p_i/q_i) + 1) grad log p_i, and sum_i p_i grad log p_i = 0
    p, q = new.probs, ref.probs
    return (p * np.log(p / q)) @ grads


def _advantages(adv) -> np.ndarray:
    return np.asarray(getattr(adv, "advantages", adv), dtype=float)


def _diagnostics(rho, adv, cfg: SurrogateConfig, new, old, ref=None) -> dict:
    d = {
        "mean_ratio": float(np.mean(rho)),
        "max_ratio": float(np.max(rho)),
        "clip_fraction": float(np.mean(np.abs(rho - 1.0) > cfg.clip)),
        "dual_clip_fraction": float(np.mean((adv < 0) & (rho >= cfg.dual_clip))),
        "kl_old": categorical_kl(new, old),
    }
    if ref is not None:
        d["kl"] = categorical_kl(new, ref)
    return d


def _check(cfg: SurrogateConfig, kernel: str, weighting: str, zero_beta: bool = False):
    if cfg.kernel != kernel or cfg.weighting != weighting or (zero_beta and cfg.beta != 0.0):
        raise ValueError(f"config {cfg} does not match this objective (kernel={kernel}, weighting={weighting}"
                         + (", beta=0" if zero_beta else "") + ")")


def _clipped_group(new, old, adv, cfg, grads, weights, kernel):
    a = _advantages(adv)
    rho = importance_ratios(new, old)
    if kernel == "dual_clip":
        psi, slope = dual_clip_kernel(rho, a, cfg.clip, cfg.dual_clip)
    else:
        psi, slope = ppo_clip_kernel(rho, a, cfg.clip)
    value = float(np.sum(weights * psi))
    grad = (weights * slope * rho) @ grads
    return rho, a, psi, value, grad


def rift_objective(new: PolicyDistribution, old: PolicyDistribution, adv, cfg: SurrogateConfig,
                   grads: np.ndarray) -> ObjectiveReport:
    """Equal-weight dual-clip surrogate without KL: (1/G) sum_i psi(rho_i, A_i)."""
    _check(cfg, "dual_clip", "equal", zero_beta=True)
    G = len(new)
    rho, a, psi, value, grad = _clipped_group(new, old, adv, cfg, grads, np.full(G, 1.0 / G), "dual_clip")
    return ObjectiveReport(value, psi, grad, _diagnostics(rho, a, cfg, new, old))


def grpo_objective(new: PolicyDistribution, old: PolicyDistribution, ref: PolicyDistribution, adv,
                   cfg: SurrogateConfig, grads: np.ndarray) -> ObjectiveReport:
    """Equal-weight PPO-clip surrogate minus beta * KL(new || ref)."""
    _check(cfg, "ppo_clip", "equal")
    G = len(new)
    rho, a, psi, value, grad = _clipped_group(new, old, adv, cfg, grads, np.full(G, 1.0 / G), "ppo_clip")
    kl = categorical_kl(new, ref)
    value -= cfg.beta * kl
    grad = grad - cfg.beta * _kl_grad(new, ref, grads)
    return ObjectiveReport(value, psi, grad, _diagnostics(rho, a, cfg, new, old, ref))


def old_weight_objective(new: PolicyDistribution, old: PolicyDistribution, ref: PolicyDistribution, adv,
                         cfg: SurrogateConfig, grads: np.ndarray) -> ObjectiveReport:
    """PPO-clip terms weighted by the old-policy probabilities, minus beta * KL(new || ref)."""
    _check(cfg, "ppo_clip", "old_policy")
    w = np.asarray(old.probs, dtype=float)
    rho, a, psi, value, grad = _clipped_group(new, old, adv, cfg, grads, w, "ppo_clip")
    kl = categorical_kl(new, ref)
    value -= cfg.beta * kl
    grad = grad - cfg.beta * _kl_grad(new, ref, grads)
    return ObjectiveReport(value, w * psi, grad, _diagnostics(rho, a, cfg, new, old, ref))


def reinforce_objective(new: PolicyDistribution, executed: int, ret: float, baseline: float,
                        grads: np.ndarray) -> ObjectiveReport:
    """(R - b) log pi(executed)."""
    if not 0 <= executed < len(new):
        raise IndexError("executed index out of range")
    coef = float(ret - baseline)
    logp = float(np.log(new.probs[executed]))
    terms = np.zeros(len(new))
    terms[executed] = coef * logp
    return ObjectiveReport(coef * logp, terms, coef * grads[executed], {"advantage": coef})


def ppo_objective(new: PolicyDistribution, old: PolicyDistribution, executed: int, adv_exec: float,
                  cfg: SurrogateConfig, grads: np.ndarray) -> ObjectiveReport:
    """Single-sample clipped surrogate on the executed candidate."""
    _check(cfg, "ppo_clip", "equal")
    if not 0 <= executed < len(new):
        raise IndexError("executed index out of range")
    rho = importance_ratios(new, old)[executed]
    psi, slope = ppo_clip_kernel(rho, adv_exec, cfg.clip)
    terms = np.zeros(len(new))
    terms[executed] = float(psi)
    diag = {"mean_ratio": float(rho), "max_ratio": float(rho), "clip_fraction": float(abs(rho - 1.0) > cfg.clip),
            "dual_clip_fraction": 0.0, "kl_old": categorical_kl(new, old)}
    return ObjectiveReport(float(psi), terms, float(slope * rho) * grads[executed], diag)
