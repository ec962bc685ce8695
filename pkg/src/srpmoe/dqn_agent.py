"""Double dueling DQN router with uniform experience replay."""

from dataclasses import dataclass

import numpy as np
from loguru import logger

from srpmoe.errors import ContractError, DivergenceError
from srpmoe.nn_core import AdamState, optimizer_step
from srpmoe.router import (
    RouterNetwork,
    dueling_backward,
    dueling_combine,
    head_outputs,
    masked_argmax,
    observed_experts,
    router_backward,
)
from srpmoe.routing_env import Observation
from srpmoe.schema import AgentConfig


@dataclass
class Transition:
    observation: Observation
    action: int
    reward: float
    next_observation: Observation
    done: bool
    next_mask: np.ndarray


class ReplayMemory:
    """Fixed-capacity ring buffer; oldest transitions are overwritten first."""

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.buffer: list[Transition] = []
        self.position = 0

    def __len__(self) -> int:
        return len(self.buffer)

    def push(self, transition: Transition) -> None:
        if not np.isfinite(transition.reward):
            raise ContractError(f"Non-finite reward {transition.reward}")
        if len(self.buffer) < self.capacity:
            self.buffer.append(transition)
        else:
            self.buffer[self.position] = transition
        self.position = (self.position + 1) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        idx = rng.integers(len(self.buffer), size=batch_size)
        return [self.buffer[i] for i in idx]


def batch_q_values(net: RouterNetwork, observations: list[Observation]) -> np.ndarray:
    outputs, _ = head_outputs(net, observations)
    return dueling_combine(outputs["value"], outputs["advantage"])


def q_values(net: RouterNetwork, observation: Observation) -> np.ndarray:
    return batch_q_values(net, [observation])[0]


def select_action(
    net: RouterNetwork,
    observation: Observation,
    mask: np.ndarray,
    epsilon: float,
    rng: np.random.Generator,
) -> int:
    """Epsilon-greedy over valid actions; greedy ties go to the lowest index."""
    valid = np.flatnonzero(mask)
    if valid.size == 0:
        raise ContractError("No valid action")
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.choice(valid))
    return masked_argmax(q_values(net, observation), mask)


def td_target(rewards, next_q, gamma: float, dones) -> np.ndarray:
    return np.where(dones, rewards, rewards + gamma * np.where(dones, 0.0, next_q))


def q_update(
    q: float, reward: float, next_q: float, alpha: float, gamma: float, done: bool = False
) -> float:
    """Tabular form of the Q-learning update."""
    return q + alpha * (float(td_target(reward, next_q, gamma, done)) - q)


def double_q_targets(
    net: RouterNetwork, target_net: RouterNetwork, batch: list[Transition], gamma: float
) -> np.ndarray:
    """r + gamma * Q_target(o', argmax over valid a' of Q_online(o', a'))."""
    rewards = np.array([t.reward for t in batch])
    dones = np.array([t.done for t in batch])
    next_q = np.zeros(len(batch))
    live = np.flatnonzero(~dones)
    if live.size:
        next_obs = [batch[i].next_observation for i in live]
        masks = np.stack([batch[i].next_mask for i in live])
        online = np.where(masks, batch_q_values(net, next_obs), -np.inf)
        best = np.argmax(online, axis=1)
        evaluated = batch_q_values(target_net, next_obs)
        next_q[live] = evaluated[np.arange(live.size), best]
    return td_target(rewards, next_q, gamma, dones)


def td_loss(
    net: RouterNetwork, target_net: RouterNetwork, batch: list[Transition], gamma: float
) -> tuple[float, list[np.ndarray]]:
    """Mean squared TD error and its gradient w.r.t. net.parameters()."""
    targets = double_q_targets(net, target_net, batch, gamma)
    actions = np.array([t.action for t in batch])
    outputs, cache = head_outputs(net, [t.observation for t in batch])
    q = dueling_combine(outputs["value"], outputs["advantage"])
    rows = np.arange(len(batch))
    errors = q[rows, actions] - targets
    loss = float(np.mean(errors**2))
    if not np.isfinite(loss):
        raise DivergenceError(f"Non-finite TD loss {loss}")

    grad_q = np.zeros_like(q)
    grad_q[rows, actions] = 2.0 * errors / len(batch)
    grad_value, grad_advantage = dueling_backward(grad_q)
    grads = router_backward(net, cache, {"value": grad_value, "advantage": grad_advantage})
    return loss, grads


def learn_step(
    net: RouterNetwork,
    target_net: RouterNetwork,
    batch: list[Transition],
    cfg: AgentConfig,
    optimizer: AdamState,
) -> float:
    loss, grads = td_loss(net, target_net, batch, cfg.gamma)
    # projections of experts absent from the batch keep their parameters and moments
    active = net.active_parameters(observed_experts([t.observation for t in batch], net.mode))
    optimizer_step(net.parameters(), grads, optimizer, active)
    return loss


def sync_target(net: RouterNetwork, target_net: RouterNetwork) -> None:
    target_net.load_from(net)


class DQNAgent:
    def __init__(self, net: RouterNetwork, cfg: AgentConfig):
        if net.kind != "dueling":
            raise ValueError("DQNAgent needs a dueling router")
        self.net = net
        self.target_net = net.copy()
        self.cfg = cfg
        self.memory = ReplayMemory(cfg.replay_capacity)
        self.optimizer = AdamState.for_parameters(net.parameters(), cfg.learning_rate)
        self.learn_steps = 0
        self.last_loss: float | None = None

    def act(
        self, observation: Observation, mask: np.ndarray, epsilon: float, rng: np.random.Generator
    ) -> int:
        return select_action(self.net, observation, mask, epsilon, rng)

    def remember(self, transition: Transition) -> None:
        self.memory.push(transition)

    def learn(self, rng: np.random.Generator) -> float | None:
        """One learn step once the warm-up is filled; syncs the target on schedule."""
        if len(self.memory) < max(self.cfg.warmup, self.cfg.batch_size):
            return None
        batch = self.memory.sample(self.cfg.batch_size, rng)
        self.last_loss = learn_step(self.net, self.target_net, batch, self.cfg, self.optimizer)
        self.learn_steps += 1
        if self.learn_steps % self.cfg.target_sync_interval == 0:
            sync_target(self.net, self.target_net)
            logger.debug(f"Target synced at learn step {self.learn_steps}")
        return self.last_loss
