"""Clipped-surrogate policy-gradient router with a value baseline."""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from loguru import logger

from srpmoe.errors import ContractError, DivergenceError
from srpmoe.nn_core import AdamState, optimizer_step
from srpmoe.router import RouterNetwork, head_outputs, observed_experts, router_backward
from srpmoe.routing_env import Observation
from srpmoe.schema import PGConfig


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over valid entries along the last axis; invalid entries get exactly 0."""
    if not mask.any(axis=-1).all():
        raise ContractError("No valid action")
    shifted = np.where(mask, logits, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    weights = np.where(mask, np.exp(shifted), 0.0)
    return weights / weights.sum(axis=-1, keepdims=True)


def action_distribution(
    net: RouterNetwork, observation: Observation, mask: np.ndarray
) -> np.ndarray:
    outputs, _ = head_outputs(net, [observation])
    return masked_softmax(outputs["policy"][0], mask)


def state_values(net: RouterNetwork, observations: list[Observation]) -> np.ndarray:
    outputs, _ = head_outputs(net, observations)
    return outputs["value"][:, 0]


def compute_advantages(
    rewards: list[float], values: np.ndarray, gamma: float
) -> tuple[np.ndarray, np.ndarray]:
    """Discounted returns G_t of one complete episode and advantages G_t - V(o_t)."""
    returns = np.zeros(len(rewards))
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        running = rewards[t] + gamma * running
        returns[t] = running
    return returns - np.asarray(values, dtype=np.float64), returns


@dataclass
class PGSample:
    observation: Observation
    mask: np.ndarray
    action: int
    old_log_prob: float
    advantage: float
    ret: float


class PGUpdate(NamedTuple):
    policy_loss: float
    value_loss: float
    anomalies: int


def pg_loss(
    net: RouterNetwork, batch: list[PGSample], cfg: PGConfig
) -> tuple[float, PGUpdate, list[np.ndarray]]:
    """Total loss = -surrogate + value_coef * value MSE - entropy_coef * entropy.

    Samples whose probability ratio is not finite are dropped and counted.
    """
    outputs, cache = head_outputs(net, [s.observation for s in batch])
    masks = np.stack([s.mask for s in batch])
    actions = np.array([s.action for s in batch])
    advantages = np.array([s.advantage for s in batch])
    returns = np.array([s.ret for s in batch])
    old_log_probs = np.array([s.old_log_prob for s in batch])
    rows = np.arange(len(batch))

    probs = masked_softmax(outputs["policy"], masks)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        log_probs = np.where(masks, np.log(np.where(masks, probs, 1.0)), 0.0)
        ratio = np.exp(log_probs[rows, actions] - old_log_probs)
    keep = np.isfinite(ratio) & masks[rows, actions]
    anomalies = int((~keep).sum())
    n = int(keep.sum())
    if n == 0:
        raise DivergenceError("Every sample in the batch had a non-finite ratio")

    ratio = np.where(keep, ratio, 1.0)
    clipped = np.clip(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio)
    surrogate = np.minimum(ratio * advantages, clipped * advantages)
    unclipped = keep & (ratio * advantages <= clipped * advantages)
    entropy = -(probs * log_probs).sum(axis=1)
    values = outputs["value"][:, 0]

    policy_loss = -float(surrogate[keep].sum()) / n
    value_loss = float(((values - returns) ** 2)[keep].sum()) / n
    mean_entropy = float(entropy[keep].sum()) / n
    total = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * mean_entropy
    if not np.isfinite(total):
        raise DivergenceError(f"Non-finite policy-gradient loss {total}")

    onehot = np.zeros_like(probs)
    onehot[rows, actions] = 1.0
    scale = np.where(unclipped, advantages * ratio, 0.0)[:, None]
    grad_logits = -scale * (onehot - probs) / n
    grad_logits += cfg.entropy_coef * probs * (log_probs + entropy[:, None]) / n
    grad_logits[~keep] = 0.0
    grad_values = np.where(keep, cfg.value_coef * 2.0 * (values - returns) / n, 0.0)

    grads = router_backward(
        net, cache, {"policy": grad_logits, "value": grad_values[:, None]}
    )
    return total, PGUpdate(policy_loss, value_loss, anomalies), grads


def update(
    net: RouterNetwork, batch: list[PGSample], cfg: PGConfig, optimizer: AdamState
) -> PGUpdate:
    """cfg.epochs full-batch optimizer passes over one rollout batch."""
    active = net.active_parameters(observed_experts([s.observation for s in batch], net.mode))
    anomalies = 0
    stats = None
    for _ in range(cfg.epochs):
        _, stats, grads = pg_loss(net, batch, cfg)
        anomalies += stats.anomalies
        optimizer_step(net.parameters(), grads, optimizer, active)
    if anomalies:
        logger.warning(f"Skipped {anomalies} samples with non-finite ratios")
    return PGUpdate(stats.policy_loss, stats.value_loss, anomalies)


class PGAgent:
    def __init__(self, net: RouterNetwork, cfg: PGConfig):
        if net.kind != "policy":
            raise ValueError("PGAgent needs a policy router")
        self.net = net
        self.cfg = cfg
        self.optimizer = AdamState.for_parameters(net.parameters(), cfg.learning_rate)
        self.rollout: list[PGSample] = []
        self.episodes_in_rollout = 0
        self.anomalies = 0

    def act(
        self, observation: Observation, mask: np.ndarray, rng: np.random.Generator
    ) -> tuple[int, float]:
        probs = action_distribution(self.net, observation, mask)
        action = int(rng.choice(probs.shape[0], p=probs))
        return action, float(np.log(probs[action]))

    def finish_episode(
        self,
        observations: list[Observation],
        masks: list[np.ndarray],
        actions: list[int],
        log_probs: list[float],
        rewards: list[float],
    ) -> PGUpdate | None:
        """Append an episode to the rollout; update once the rollout is full."""
        values = state_values(self.net, observations)
        advantages, returns = compute_advantages(rewards, values, self.cfg.gamma)
        for t in range(len(actions)):
            self.rollout.append(
                PGSample(
                    observations[t], masks[t], actions[t], log_probs[t], advantages[t], returns[t]
                )
            )
        self.episodes_in_rollout += 1
        if self.episodes_in_rollout < self.cfg.rollout_episodes:
            return None
        return self.flush()

    def flush(self) -> PGUpdate | None:
        """Update on whatever the rollout holds, full or not; None if it is empty."""
        if not self.rollout:
            return None
        stats = update(self.net, self.rollout, self.cfg, self.optimizer)
        self.anomalies += stats.anomalies
        self.rollout = []
        self.episodes_in_rollout = 0
        return stats
