"""Group-relative policy optimization at toy scale.

Returns are normalized within each rollout group, and the policy is updated
with the clipped importance-ratio surrogate (no KL term). The toy policy is a
table of per-context logits, which keeps exact gradients cheap enough to be
checked against finite differences.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError, TrainingError

log = logging.getLogger(__name__)

DEFAULT_DELTA = 1e-8
DEFAULT_EPS_CLIP = 0.2
DEFAULT_GROUP_SIZE = 4


@dataclass(frozen=True)
class TokenizedRollout:
    """Policy-authored tokens of one rollout with their log-probabilities.

    ``contexts[n]`` is the context the n-th token was sampled in and
    ``actions[n]`` the sampled symbol.
    """

    contexts: np.ndarray
    actions: np.ndarray
    logp_old: np.ndarray
    logp_new: np.ndarray
    S: float

    def __post_init__(self) -> None:
        lens = {len(self.contexts), len(self.actions), len(self.logp_old), len(self.logp_new)}
        if len(lens) != 1:
            raise ShapeError(f"rollout arrays have different lengths: {sorted(lens)}")
        if len(self.actions) < 1:
            raise ShapeError("a rollout needs at least one token")

    @property
    def T(self) -> int:
        return len(self.actions)


@dataclass(frozen=True)
class RolloutGroup:
    rollouts: tuple[TokenizedRollout, ...]
    advantages: np.ndarray | None = None

    @property
    def G(self) -> int:
        return len(self.rollouts)

    @property
    def returns(self) -> np.ndarray:
        return np.array([r.S for r in self.rollouts], dtype=float)

    def with_advantages(self, delta: float = DEFAULT_DELTA) -> "RolloutGroup":
        return replace(self, advantages=group_advantages(self.returns, delta))


def group_advantages(S: Sequence[float], delta: float = DEFAULT_DELTA) -> np.ndarray:
    """(S_i - mean) / sqrt(population variance + delta); all zeros if every S is equal."""
    s = np.asarray(S, dtype=float)
    if s.ndim != 1 or s.size < 1:
        raise ShapeError("returns must be a non-empty 1-D sequence")
    if delta <= 0:
        raise ValueError("delta must be positive")
    if np.all(s == s[0]):
        return np.zeros_like(s)
    mu = s.mean()
    sigma = math.sqrt(np.mean((s - mu) ** 2) + delta)
    return (s - mu) / sigma


def importance_ratios(rollout: TokenizedRollout) -> np.ndarray:
    old = np.asarray(rollout.logp_old, dtype=float)
    new = np.asarray(rollout.logp_new, dtype=float)
    if old.shape != new.shape:
        raise ShapeError(f"log-prob shapes differ: {old.shape} vs {new.shape}")
    return np.exp(new - old)


def _group_loss(group: RolloutGroup, eps_clip: float) -> float:
    if group.advantages is None:
        raise ValueError("group advantages have not been computed")
    total = 0.0
    for rollout, a in zip(group.rollouts, group.advantages):
        rho = importance_ratios(rollout)
        surrogate = np.minimum(rho * a, np.clip(rho, 1 - eps_clip, 1 + eps_clip) * a)
        total += surrogate.mean()
    return -total / group.G


def clipped_loss(groups: Sequence[RolloutGroup], eps_clip: float = DEFAULT_EPS_CLIP) -> float:
    """Clipped surrogate loss, averaged over tokens, rollouts and then groups."""
    if not 0 < eps_clip < 1:
        raise ValueError("eps_clip must lie in (0, 1)")
    if not groups:
        raise ValueError("no groups")
    return sum(_group_loss(g, eps_clip) for g in groups) / len(groups)


# --- toy policy ----------------------------------------------------------------------


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class ToyPolicy:
    """Softmax policy over ``n_actions`` symbols, one logit row per context."""

    theta: np.ndarray

    @classmethod
    def zeros(cls, n_contexts: int, n_actions: int) -> "ToyPolicy":
        return cls(np.zeros((n_contexts, n_actions)))

    def copy(self) -> "ToyPolicy":
        return ToyPolicy(self.theta.copy())

    def probs(self, context: int) -> np.ndarray:
        return np.exp(_log_softmax(self.theta[context]))

    def logp(self, contexts: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return _log_softmax(self.theta[contexts])[np.arange(len(actions)), actions]

    def sample(self, context: int, rng: np.random.Generator) -> int:
        return int(rng.choice(self.theta.shape[1], p=self.probs(context)))

    def greedy(self, context: int) -> int:
        return int(np.argmax(self.theta[context]))

    def rescore(self, group: RolloutGroup) -> RolloutGroup:
        """Recompute ``logp_new`` for every rollout under this policy."""
        rollouts = tuple(replace(r, logp_new=self.logp(r.contexts, r.actions)) for r in group.rollouts)
        return replace(group, rollouts=rollouts)


def loss_and_gradient(
    policy: ToyPolicy,
    groups: Sequence[RolloutGroup],
    eps_clip: float = DEFAULT_EPS_CLIP,
) -> tuple[float, np.ndarray]:
    """Clipped loss at ``policy.theta`` and its exact gradient.

    ``logp_old`` of every rollout stays frozen; ``logp_new`` is recomputed.
    Where the clipped branch is the active minimum, the token contributes no
    gradient.
    """
    grad = np.zeros_like(policy.theta)
    rescored = [policy.rescore(g) for g in groups]
    loss = clipped_loss(rescored, eps_clip)
    scale_groups = 1.0 / len(groups)
    for group in rescored:
        for rollout, a in zip(group.rollouts, group.advantages):
            if a == 0:
                continue
            rho = importance_ratios(rollout)
            clipped = np.clip(rho, 1 - eps_clip, 1 + eps_clip)
            active = rho * a <= clipped * a
            coef = -scale_groups / group.G / rollout.T * a * rho * active
            probs = np.exp(_log_softmax(policy.theta[rollout.contexts]))
            dlogp = -probs
            dlogp[np.arange(rollout.T), rollout.actions] += 1.0
            np.add.at(grad, rollout.contexts, coef[:, None] * dlogp)
    return loss, grad


def finite_difference_gradient(
    policy: ToyPolicy,
    groups: Sequence[RolloutGroup],
    eps_clip: float = DEFAULT_EPS_CLIP,
    h: float = 1e-5,
) -> np.ndarray:
    """Central-difference gradient of the clipped loss with respect to theta."""
    grad = np.zeros_like(policy.theta)
    probe = policy.copy()
    for idx in np.ndindex(policy.theta.shape):
        orig = probe.theta[idx]
        probe.theta[idx] = orig + h
        up = clipped_loss([probe.rescore(g) for g in groups], eps_clip)
        probe.theta[idx] = orig - h
        down = clipped_loss([probe.rescore(g) for g in groups], eps_clip)
        probe.theta[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


# --- toy training --------------------------------------------------------------------


@dataclass(frozen=True)
class BanditSpec:
    """Contextual bandit: ``returns[c, a]`` is the deterministic return of arm ``a`` in context ``c``."""

    returns: np.ndarray
    arm_names: tuple[str, ...] = ()

    @property
    def n_contexts(self) -> int:
        return self.returns.shape[0]

    @property
    def n_arms(self) -> int:
        return self.returns.shape[1]

    def optimal_return(self) -> float:
        return float(self.returns.max(axis=1).mean())

    def greedy_return(self, policy: ToyPolicy) -> float:
        return float(np.mean([self.returns[c, policy.greedy(c)] for c in range(self.n_contexts)]))

    def expected_return(self, policy: ToyPolicy) -> float:
        return float(np.mean([policy.probs(c) @ self.returns[c] for c in range(self.n_contexts)]))


@dataclass(frozen=True)
class TrainConfig:
    G: int = DEFAULT_GROUP_SIZE
    iterations: int = 2000
    step_size: float = 0.5
    eps_clip: float = DEFAULT_EPS_CLIP
    delta: float = DEFAULT_DELTA
    inner_steps: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.G < 1 or self.iterations < 0 or self.inner_steps < 1:
            raise ValueError("G and inner_steps must be positive and iterations non-negative")
        if not 0 < self.eps_clip < 1:
            raise ValueError("eps_clip must lie in (0, 1)")
        if self.delta <= 0 or self.step_size < 0:
            raise ValueError("delta must be positive and step_size non-negative")


@dataclass
class TrainResult:
    policy: ToyPolicy
    curve: list[dict] = field(default_factory=list)

    def log_lines(self) -> list[str]:
        return [json.dumps(row, separators=(",", ":")) for row in self.curve]


def train_toy(
    bandit: BanditSpec,
    config: TrainConfig = TrainConfig(),
    on_iteration: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Optimize a tabular policy on ``bandit``; one group of ``G`` rollouts per iteration.

    The behaviour policy is refreshed from the current parameters at the start
    of every group, then ``inner_steps`` gradient steps are taken on that
    group.
    """
    rng = np.random.default_rng(config.seed)
    policy = ToyPolicy.zeros(bandit.n_contexts, bandit.n_arms)
    result = TrainResult(policy)
    for it in range(config.iterations):
        ctx = it % bandit.n_contexts
        old = policy.copy()
        rollouts = []
        for _ in range(config.G):
            a = old.sample(ctx, rng)
            c_arr, a_arr = np.array([ctx]), np.array([a])
            lp = old.logp(c_arr, a_arr)
            rollouts.append(TokenizedRollout(c_arr, a_arr, lp, lp.copy(), float(bandit.returns[ctx, a])))
        group = RolloutGroup(tuple(rollouts)).with_advantages(config.delta)
        loss = grad_norm = 0.0
        for _ in range(config.inner_steps):
            loss, grad = loss_and_gradient(policy, [group], config.eps_clip)
            grad_norm = float(np.linalg.norm(grad))
            if not (math.isfinite(loss) and math.isfinite(grad_norm)):
                raise TrainingError(f"non-finite loss or gradient at iteration {it}")
            policy.theta -= config.step_size * grad
        row = {
            "it": it,
            "mean_S": float(group.returns.mean()),
            "loss": float(loss),
            "grad_norm": grad_norm,
            "expected_S": bandit.expected_return(policy),
        }
        result.curve.append(row)
        if on_iteration is not None:
            on_iteration(row)
    return result
