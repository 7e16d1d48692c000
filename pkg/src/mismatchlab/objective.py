"""Token-level surrogate objective, calibration masking, and exact gradients.

Per token, the surrogate multiplies a calibration factor (computed from
the two engines' log probabilities recorded at generation time) against
the clipped importance-weighted advantage, minus an optional exact
categorical KL penalty to a frozen reference policy:

    value_t = m_t * min(r_t * A, clip(r_t, 1-eps, 1+eps) * A) - gamma * KL_t

where the calibration ratio c_t = pi_train(old) / pi_infer(old) and the
importance ratio r_t = pi_train(theta) / pi_train(old). The mode decides
m_t: the masked variant keeps c_t inside [alpha, beta] and zeroes it
outside; the unmasked variant uses c_t as-is; the truncated variant caps
it at a constant. m_t and the advantage are treated as constants in the
gradient. Aggregation is token-mean within a rollout, mean over the
group, mean over groups, in that fixed order so results are bit-stable.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .errors import NumericError
from .policy import (
    PolicyParams,
    batched_log_softmax,
    batched_train_logits,
    feature_rows,
)
from .tasks import TaskSpec

if TYPE_CHECKING:
    from .scheduler import Rollout


class Algo(enum.Enum):
    ICEPOP = "icepop"
    GRPO = "grpo"
    TIS = "tis"


@dataclass(frozen=True)
class MaskingBounds:
    """Inclusive lower/upper limits for the calibration ratio."""

    alpha: float = 0.5
    beta: float = 5.0

    def __post_init__(self) -> None:
        if not (0.0 < self.alpha <= 1.0 <= self.beta):
            raise ValueError(f"bounds must satisfy 0 < alpha <= 1 <= beta, got [{self.alpha}, {self.beta}]")


def mask(k: float, bounds: MaskingBounds) -> float:
    """k if alpha <= k <= beta (inclusive), else 0."""
    if not math.isfinite(k) or k <= 0.0:
        raise ValueError(f"mask argument must be a finite positive ratio, got {k}")
    return k if bounds.alpha <= k <= bounds.beta else 0.0


@dataclass(frozen=True)
class ObjectiveConfig:
    algo: Algo = Algo.ICEPOP
    clip_eps: float = 0.2
    kl_coeff: float = 0.0
    group_size: int = 8
    tis_cap: float = 2.0

    def __post_init__(self) -> None:
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must be in (0, 1)")
        if self.kl_coeff < 0.0:
            raise ValueError("kl_coeff must be nonnegative")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.tis_cap <= 0.0:
            raise ValueError("tis_cap must be positive")


@dataclass
class TokenRecord:
    """Per-token bookkeeping recorded at generation and refreshed at training.

    logp_infer_old and logp_train_old are both evaluated at the token's
    generating parameter version; logp_train_cur is rewritten with the
    current parameters whenever the objective is evaluated.
    """

    token: int
    logp_infer_old: float
    logp_train_old: float
    logp_train_cur: float
    gen_version: int

    def __post_init__(self) -> None:
        for name in ("logp_infer_old", "logp_train_old", "logp_train_cur"):
            if not math.isfinite(getattr(self, name)):
                raise NumericError(f"TokenRecord.{name} is not finite")


@dataclass
class PromptGroup:
    """A prompt with its sibling rollouts, rewards, and group advantages."""

    task: TaskSpec
    rollouts: list["Rollout"]
    rewards: list[float]
    advantages: list[float]

    def __post_init__(self) -> None:
        if not (len(self.rollouts) == len(self.rewards) == len(self.advantages)):
            raise ValueError("rollouts, rewards, and advantages must have equal length")
        if not all(math.isfinite(a) for a in self.advantages):
            raise NumericError("group advantages contain non-finite values")


@dataclass
class LossBreakdown:
    objective_value: float
    per_token_mask_kept: np.ndarray
    clipped_fraction: float
    grad: np.ndarray
    kl_to_ref: float
    token_count: int = 0
    mean_logp: float = 0.0
    entropy_all: float = 0.0
    entropy_clipped: float = math.nan
    per_token_surrogate: np.ndarray = field(default_factory=lambda: np.zeros(0))
    per_token_calibration: np.ndarray = field(default_factory=lambda: np.zeros(0))
    per_token_entropy: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def grad_norm(self) -> float:
        return float(np.linalg.norm(self.grad))


def empty_breakdown(params: PolicyParams) -> LossBreakdown:
    """Placeholder for iterations that emitted no trainable groups."""
    return LossBreakdown(
        objective_value=0.0,
        per_token_mask_kept=np.zeros(0, dtype=bool),
        clipped_fraction=0.0,
        grad=np.zeros_like(params.weights),
        kl_to_ref=0.0,
    )


def group_advantages(rewards: list[float] | np.ndarray) -> np.ndarray:
    """Group z-scores with a 1e-6 std floor; zero-variance groups get zeros."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("advantage normalization needs a group of >= 2 rewards")
    std = float(r.std())
    return (r - r.mean()) / max(std, 1e-6)


def _rollout_feats(task: TaskSpec, tokens: list[TokenRecord], n_features: int) -> np.ndarray:
    """(T, 4) active feature rows for every position of a rollout."""
    feats = np.empty((len(tokens), 4), dtype=np.intp)
    prev, last = -1, -1
    for t, rec in enumerate(tokens):
        feats[t] = feature_rows(task.prompt_id, prev, last, n_features)
        prev, last = last, rec.token
    return feats


def objective_and_grad(
    groups: list[PromptGroup],
    theta: PolicyParams,
    theta_old: PolicyParams,
    ref: PolicyParams | None,
    cfg: ObjectiveConfig,
    bounds: MaskingBounds,
    temperature: float = 1.0,
) -> LossBreakdown:
    """Objective value and its exact analytic gradient w.r.t. theta.

    The current-train log probabilities are recomputed from theta (and
    written back into each TokenRecord), so the value is a pure function
    of theta given the recorded generation-time fields; that is what the
    finite-difference checks differentiate. A calibration ratio that
    underflows to zero counts as outside any bounds (masked, or zero
    weight in the unmasked modes).
    """
    if not groups:
        raise ValueError("objective needs at least one prompt group")
    if theta_old.version_id > theta.version_id:
        raise ValueError("theta_old must not be newer than theta")

    grad = np.zeros_like(theta.weights)
    kept_parts: list[np.ndarray] = []
    surrogate_parts: list[np.ndarray] = []
    calib_parts: list[np.ndarray] = []
    entropy_parts: list[np.ndarray] = []
    logp_parts: list[np.ndarray] = []
    kl_parts: list[np.ndarray] = []

    total = 0.0
    for group in groups:
        if not group.rollouts:
            raise ValueError("empty prompt group")
        group_value = 0.0
        for rollout, advantage in zip(group.rollouts, group.advantages):
            tokens = rollout.tokens
            if not tokens:
                raise ValueError("empty rollout in prompt group")
            if any(rec.gen_version > theta_old.version_id for rec in tokens):
                raise ValueError("token generated by a version newer than theta_old")
            n_tok = len(tokens)
            weight = 1.0 / (len(groups) * len(group.rollouts) * n_tok)
            token_ids = np.asarray([rec.token for rec in tokens])
            lp_old = np.asarray([rec.logp_train_old for rec in tokens])
            lp_inf = np.asarray([rec.logp_infer_old for rec in tokens])
            pos = np.arange(n_tok)

            feats = _rollout_feats(group.task, tokens, theta.n_features)
            log_probs, probs = batched_log_softmax(batched_train_logits(theta, feats, temperature))
            lp_cur = log_probs[pos, token_ids]
            for rec, value in zip(tokens, lp_cur):
                rec.logp_train_cur = float(value)

            calib = np.exp(lp_old - lp_inf)
            if not np.isfinite(calib).all():
                raise NumericError("calibration ratio overflow")
            if cfg.algo is Algo.ICEPOP:
                kept = (calib >= bounds.alpha) & (calib <= bounds.beta)
                factor = np.where(kept, calib, 0.0)
            elif cfg.algo is Algo.GRPO:
                kept = np.ones(n_tok, dtype=bool)
                factor = calib
            else:
                kept = np.ones(n_tok, dtype=bool)
                factor = np.minimum(calib, cfg.tis_cap)

            ratio = np.exp(lp_cur - lp_old)
            if not np.isfinite(ratio).all():
                raise NumericError("importance ratio overflow")
            unclipped = ratio * advantage
            clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * advantage
            active = unclipped <= clipped
            pg_values = factor * np.where(active, unclipped, clipped)

            # Gradient w.r.t. the scaled logits, then scattered onto the
            # four active feature rows per position (duplicates counted).
            coeffs = np.where(active, weight * factor * ratio * advantage / temperature, 0.0)
            grad_logits = -coeffs[:, None] * probs
            grad_logits[pos, token_ids] += coeffs

            kl_values = np.zeros(n_tok)
            if ref is not None:
                ref_log_probs, _ = batched_log_softmax(batched_train_logits(ref, feats, temperature))
                diff = log_probs - ref_log_probs
                kl_values = (probs * diff).sum(axis=1)
                if cfg.kl_coeff > 0.0:
                    kl_grad = (weight * cfg.kl_coeff / temperature) * (
                        probs * (diff - kl_values[:, None])
                    )
                    grad_logits -= kl_grad

            for j in range(4):
                np.add.at(grad, feats[:, j], grad_logits)

            token_values = pg_values - cfg.kl_coeff * kl_values
            group_value += float(token_values.sum()) / (len(group.rollouts) * n_tok)

            kept_parts.append(kept)
            surrogate_parts.append(pg_values)
            calib_parts.append(calib)
            entropy_parts.append(-(probs * log_probs).sum(axis=1))
            logp_parts.append(lp_cur)
            kl_parts.append(kl_values)
        total += group_value
    objective = total / len(groups)
    if not math.isfinite(objective) or not np.isfinite(grad).all():
        raise NumericError("objective or gradient is not finite")

    kept_arr = np.concatenate(kept_parts)
    entropy_arr = np.concatenate(entropy_parts)
    n_clipped = int((~kept_arr).sum())
    return LossBreakdown(
        objective_value=objective,
        per_token_mask_kept=kept_arr,
        clipped_fraction=n_clipped / kept_arr.size,
        grad=grad,
        kl_to_ref=float(np.concatenate(kl_parts).mean()),
        token_count=int(kept_arr.size),
        mean_logp=float(np.concatenate(logp_parts).mean()),
        entropy_all=float(entropy_arr.mean()),
        entropy_clipped=float(entropy_arr[~kept_arr].mean()) if n_clipped else math.nan,
        per_token_surrogate=np.concatenate(surrogate_parts),
        per_token_calibration=np.concatenate(calib_parts),
        per_token_entropy=entropy_arr,
    )


def sgd_update(theta: PolicyParams, grad: np.ndarray, lr: float) -> PolicyParams:
    """Gradient ascent step; increments the parameter version."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if grad.shape != theta.weights.shape:
        raise ValueError("gradient shape does not match parameters")
    with np.errstate(over="ignore"):
        weights = theta.weights + lr * grad
    if not np.isfinite(weights).all():
        raise NumericError("parameter update produced non-finite weights")
    return PolicyParams(weights=weights, version_id=theta.version_id + 1)


def momentum_update(
    theta: PolicyParams,
    grad: np.ndarray,
    velocity: np.ndarray,
    lr: float,
    beta: float = 0.9,
) -> tuple[PolicyParams, np.ndarray]:
    """Optional moment-based ascent variant; same contract as sgd_update."""
    if not 0.0 <= beta < 1.0:
        raise ValueError("momentum beta must be in [0, 1)")
    new_velocity = beta * velocity + grad
    params = sgd_update(theta, new_velocity, lr)
    return params, new_velocity
