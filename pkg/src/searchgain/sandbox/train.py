"""Clipped-surrogate policy optimization over the synthetic environment.

Each update rolls out a batch of episodes, estimates advantages with GAE,
and ascends

    mean_m min(r_m * A_m, clip(r_m, 1 - eps, 1 + eps) * A_m)
    - kl_coeff * mean_m KL(pi_theta(.|s_m) || pi_old(.|s_m))

where r_m is the probability ratio against the per-update frozen
reference.  The ascent step is accepted only if it improves this
penalized objective, halving the step size otherwise (so with a huge KL
coefficient the parameters provably stay at the reference).  A single
pass is taken per batch with no minibatching.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..loop import LoopConfig
from .env import SyntheticTask, oracle_accuracy, rollout_episode, synthetic_baseline_accuracy
from .policy import PolicySnapshot, SoftmaxPolicy

logger = logging.getLogger(__name__)

_MAX_BACKTRACKS = 40
_DIVERGENCE_RATIO_GAP = 10.0


@dataclass
class PpoConfig:
    clip_eps: float = 0.2
    discount: float = 1.0
    gae_lambda: float = 0.95
    kl_coeff: float = 0.001
    actor_lr: float = 60.0
    critic_lr: float = 0.5
    batch_size: int = 120
    rollout_temperature: float = 0.6

    def __post_init__(self):
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be > 0")
        if not 0.0 <= self.discount <= 1.0:
            raise ValueError("discount must be in [0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must be in [0, 1]")
        if self.kl_coeff < 0:
            raise ValueError("kl_coeff must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.rollout_temperature <= 0:
            raise ValueError("rollout_temperature must be > 0")


class DivergenceError(RuntimeError):
    """Policy ratios blew up; training aborts with diagnostics."""


@dataclass
class UpdateRecord:
    update: int
    mean_gbr: float
    mean_ratio: float
    kl: float
    surrogate: float

    def to_dict(self) -> dict:
        return {
            "update": self.update,
            "mean_gbr": self.mean_gbr,
            "mean_ratio": self.mean_ratio,
            "kl": self.kl,
            "surrogate": self.surrogate,
        }


@dataclass
class TrainingResult:
    records: list[UpdateRecord]
    episode_rewards: list[float]
    policy: SoftmaxPolicy


def compute_advantages(rewards, values, discount: float, gae_lambda: float) -> np.ndarray:
    """Generalized advantage estimation with a terminal bootstrap of zero.

    delta_t = r_t + discount * V(s_{t+1}) - V(s_t)
    A_t     = sum_l (discount * gae_lambda)^l delta_{t+l}

    With discount = gae_lambda = 1 this reduces to reward-to-go minus
    value.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape:
        raise ValueError(
            f"rewards and values must have equal length, got {len(rewards)} and {len(values)}"
        )
    n = len(rewards)
    advantages = np.zeros(n, dtype=np.float64)
    gae = 0.0
    for t in range(n - 1, -1, -1):
        next_value = values[t + 1] if t + 1 < n else 0.0
        delta = rewards[t] + discount * next_value - values[t]
        gae = delta + discount * gae_lambda * gae
        advantages[t] = gae
    return advantages


def ppo_surrogate(ratios, advantages, clip_eps: float) -> float:
    """Mean over steps of min(r * A, clip(r, 1-eps, 1+eps) * A)."""
    ratios = np.asarray(ratios, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    if ratios.shape != advantages.shape:
        raise ValueError("ratios and advantages must have equal length")
    if np.any(ratios <= 0):
        raise ValueError("ratios must be positive")
    clipped = np.clip(ratios, 1.0 - clip_eps, 1.0 + clip_eps)
    return float(np.mean(np.minimum(ratios * advantages, clipped * advantages)))


@dataclass
class BatchStep:
    """One flattened step of a rollout batch."""

    state: tuple
    n_actions: int
    action: int
    advantage: float
    log_prob_old: float = 0.0
    reward: float = 0.0
    value: float = 0.0


@dataclass
class RolloutBatch:
    """All steps of one update's episodes plus their terminal rewards."""

    steps: list[BatchStep]
    episode_rewards: list[float]

    def ratios(self, policy: SoftmaxPolicy, reference: SoftmaxPolicy) -> np.ndarray:
        out = np.empty(len(self.steps))
        for m, step in enumerate(self.steps):
            p = policy.probs(step.state, step.n_actions)
            q = reference.probs(step.state, step.n_actions)
            out[m] = p[step.action] / q[step.action]
        return out


def _log_ratio_and_kl(p: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, float]:
    """log(p/q) elementwise and KL(p || q), with 0 * log(0/q) taken as 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        log_ratio = np.log(p) - np.log(q)
        kl_terms = np.where(p > 0, p * log_ratio, 0.0)
    return log_ratio, float(kl_terms.sum())


def _objective_terms(policy: SoftmaxPolicy, reference: SoftmaxPolicy, steps, clip_eps: float):
    """Per-step ratios, surrogate terms, and KL values at the given policy."""
    ratios = np.empty(len(steps))
    terms = np.empty(len(steps))
    kls = np.empty(len(steps))
    lo, hi = 1.0 - clip_eps, 1.0 + clip_eps
    for m, step in enumerate(steps):
        p = policy.probs(step.state, step.n_actions)
        q = reference.probs(step.state, step.n_actions)
        r = p[step.action] / q[step.action]
        clipped = min(max(r, lo), hi)
        terms[m] = min(r * step.advantage, clipped * step.advantage)
        ratios[m] = r
        _, kls[m] = _log_ratio_and_kl(p, q)
    return ratios, terms, kls


def objective_value(
    policy: SoftmaxPolicy, reference: SoftmaxPolicy, steps, clip_eps: float, kl_coeff: float
) -> float:
    """Clipped surrogate minus the KL penalty, averaged over steps."""
    _, terms, kls = _objective_terms(policy, reference, steps, clip_eps)
    return float(terms.mean() - kl_coeff * kls.mean())


def objective_and_gradient(
    policy: SoftmaxPolicy, reference: SoftmaxPolicy, steps, clip_eps: float, kl_coeff: float
):
    """The penalized objective and its exact gradient w.r.t. the logits.

    For a softmax with temperature T, d log p(a) / d logit_b =
    (1[a=b] - p_b) / T; the clipped branch contributes zero gradient when
    the ratio sits outside the clip interval on the losing side of the
    min.  The KL term's gradient is p * (log(p/q) - KL) / T per state.
    """
    if policy.temperature != reference.temperature:
        raise ValueError("policy and reference temperatures differ")
    tau = policy.temperature
    n_steps = len(steps)
    grads: dict[tuple, np.ndarray] = {}
    total = 0.0
    lo, hi = 1.0 - clip_eps, 1.0 + clip_eps
    for step in steps:
        p = policy.probs(step.state, step.n_actions)
        q = reference.probs(step.state, step.n_actions)
        a = step.action
        adv = step.advantage
        r = p[a] / q[a]
        clipped = min(max(r, lo), hi)
        unclipped_term = r * adv
        clipped_term = clipped * adv
        total += min(unclipped_term, clipped_term)

        grad = grads.setdefault(step.state, np.zeros(step.n_actions))
        if unclipped_term <= clipped_term:
            coeff = adv * r / (tau * n_steps)
            grad -= coeff * p
            grad[a] += coeff
        # else: the clipped branch is active and saturated; zero gradient.

        log_ratio, kl = _log_ratio_and_kl(p, q)
        total -= kl_coeff * kl
        if kl_coeff:
            with np.errstate(invalid="ignore"):
                kl_grad = np.where(p > 0, p * (log_ratio - kl), 0.0)
            grad -= kl_coeff * kl_grad / (tau * n_steps)
    return total / n_steps, grads


def _apply_step(snapshot: SoftmaxPolicy, grads: dict, step_size: float) -> SoftmaxPolicy:
    candidate = snapshot.copy()
    for state, grad in grads.items():
        candidate.logits[state] = snapshot.logits[state] + step_size * grad
    return candidate


def train(
    tasks: list[SyntheticTask],
    policy: SoftmaxPolicy,
    cfg: PpoConfig,
    loop_cfg: LoopConfig,
    n_updates: int,
    seed: int = 0,
    curve_path: str | Path | None = None,
) -> TrainingResult:
    """Run PPO updates over the synthetic tasks, mutating the policy.

    Episodes are scheduled round-robin over the tasks; every episode draws
    its own RNG from (seed, update, episode) so results are independent of
    scheduling order and bit-reproducible for a given seed.
    """
    if not tasks:
        raise ValueError("tasks must be non-empty")
    if seed < 0:
        raise ValueError("seed must be >= 0")
    if policy.temperature != cfg.rollout_temperature:
        policy.temperature = cfg.rollout_temperature

    baselines = {task.qid: synthetic_baseline_accuracy(task, loop_cfg) for task in tasks}
    records: list[UpdateRecord] = []
    episode_rewards: list[float] = []
    curve_file = open(curve_path, "w", encoding="utf-8") if curve_path else None

    try:
        for update in range(n_updates):
            batch_steps: list[BatchStep] = []
            batch_rewards: list[float] = []
            state_targets: dict[tuple, list[float]] = {}

            for episode in range(cfg.batch_size):
                task = tasks[(update * cfg.batch_size + episode) % len(tasks)]
                rng = np.random.default_rng([seed, update, episode])
                steps, final_keys, _ = rollout_episode(task, loop_cfg, policy, rng)
                gbr = float(oracle_accuracy(final_keys, task) - baselines[task.qid])
                batch_rewards.append(gbr)

                rewards = np.zeros(len(steps))
                rewards[-1] = gbr
                values = np.array([policy.value(s[0]) for s in steps])
                advantages = compute_advantages(rewards, values, cfg.discount, cfg.gae_lambda)
                for (state, n_actions, action, logp), adv, value, reward in zip(
                    steps, advantages, values, rewards
                ):
                    batch_steps.append(
                        BatchStep(
                            state,
                            n_actions,
                            action,
                            float(adv),
                            log_prob_old=float(logp),
                            reward=float(reward),
                            value=float(value),
                        )
                    )
                    state_targets.setdefault(state, []).append(float(adv) + float(value))

            batch = RolloutBatch(steps=batch_steps, episode_rewards=batch_rewards)
            snapshot = PolicySnapshot(current=policy, reference=policy.copy())
            reference = snapshot.reference
            base_objective, grads = objective_and_gradient(
                reference, reference, batch.steps, cfg.clip_eps, cfg.kl_coeff
            )

            accepted = None
            step_size = cfg.actor_lr
            for _ in range(_MAX_BACKTRACKS):
                candidate = _apply_step(reference, grads, step_size)
                if (
                    objective_value(candidate, reference, batch.steps, cfg.clip_eps, cfg.kl_coeff)
                    > base_objective
                ):
                    accepted = candidate
                    break
                step_size /= 2.0
            if accepted is not None:
                policy.logits = accepted.logits

            # Critic: blend each visited state's value toward its mean target.
            for state, targets in state_targets.items():
                current = policy.value(state)
                policy.values[state] = current + cfg.critic_lr * (
                    sum(targets) / len(targets) - current
                )

            ratios, terms, kls = _objective_terms(policy, reference, batch.steps, cfg.clip_eps)
            mean_gap = float(np.mean(np.abs(ratios - 1.0)))
            if mean_gap > _DIVERGENCE_RATIO_GAP:
                raise DivergenceError(
                    f"update {update}: mean |ratio - 1| = {mean_gap:.3f} exceeds "
                    f"{_DIVERGENCE_RATIO_GAP} (step_size={step_size}, "
                    f"mean_ratio={float(ratios.mean()):.3f})"
                )

            record = UpdateRecord(
                update=update,
                mean_gbr=float(np.mean(batch_rewards)),
                mean_ratio=float(ratios.mean()),
                kl=float(kls.mean()),
                surrogate=float(terms.mean()),
            )
            records.append(record)
            episode_rewards.extend(batch_rewards)
            if curve_file:
                curve_file.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
    finally:
        if curve_file:
            curve_file.close()

    return TrainingResult(records=records, episode_rewards=episode_rewards, policy=policy)
