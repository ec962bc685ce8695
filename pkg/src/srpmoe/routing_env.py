"""Episode dynamics of the recurrent router.

An episode starts with the initial expert's embedding already computed. Each
decision either activates one more expert (paying its normalised cost, scaled
by the cost coefficient) or emits a class label, which ends the episode.

Action indices: 0 = classify non-fight, 1 = classify fight, 2 + e = activate e.
"""

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from srpmoe.errors import ContractError
from srpmoe.expert_bank import EmbeddingBank
from srpmoe.schema import ExpertSpec, RouterConfig

NUM_CLASSES = 2

# (expert id, embedding) for every activated expert, in activation order
Observation = tuple[tuple[int, np.ndarray], ...]
Lookup = Callable[[int, int], np.ndarray]


@dataclass(frozen=True)
class Action:
    label: int | None = None
    expert: int | None = None

    @classmethod
    def classify(cls, label: int) -> "Action":
        return cls(label=label)

    @classmethod
    def activate(cls, expert: int) -> "Action":
        return cls(expert=expert)

    @classmethod
    def from_index(cls, index: int) -> "Action":
        if index < NUM_CLASSES:
            return cls.classify(index)
        return cls.activate(index - NUM_CLASSES)

    @property
    def is_classify(self) -> bool:
        return self.label is not None

    @property
    def index(self) -> int:
        if self.is_classify:
            return self.label
        return NUM_CLASSES + self.expert


@dataclass(frozen=True)
class EnvState:
    sample: int
    activated: int  # bitmask over expert ids
    step: int
    accumulated_cost: float
    observation: Observation = field(repr=False)
    done: bool = False

    @property
    def order(self) -> tuple[int, ...]:
        return tuple(expert for expert, _ in self.observation)


@dataclass
class StepResult:
    state: EnvState
    reward: float
    next_observation: Observation
    done: bool
    valid_action_mask: np.ndarray


def num_actions(num_experts: int) -> int:
    return NUM_CLASSES + num_experts


def classification_reward(action: Action, true_label: int) -> float:
    if not action.is_classify:
        return 0.0
    return 1.0 if action.label == true_label else -1.0


def expert_cost_reward(expert: int, experts: list[ExpertSpec]) -> float:
    total = sum(e.cost_tflops for e in experts)
    return -experts[expert].cost_tflops / total


def total_reward(
    action: Action, true_label: int, lam: float, experts: list[ExpertSpec]
) -> float:
    # classifying selects no expert, so it carries no cost term
    cost = 0.0 if action.is_classify else expert_cost_reward(action.expert, experts)
    return classification_reward(action, true_label) + lam * cost


def valid_action_mask(state: EnvState, cfg: RouterConfig, num_experts: int) -> np.ndarray:
    mask = np.zeros(num_actions(num_experts), dtype=bool)
    if state.done:
        return mask
    mask[:NUM_CLASSES] = True
    # leave room for the final classify decision
    if state.step + 1 < cfg.horizon(num_experts):
        for e in range(num_experts):
            if not state.activated >> e & 1:
                mask[NUM_CLASSES + e] = True
    return mask


def reset(
    bank: EmbeddingBank, cfg: RouterConfig, sample: int, lookup: Lookup | None = None
) -> tuple[EnvState, Observation]:
    if not 0 <= sample < bank.num_samples:
        raise ContractError(f"Sample index {sample} outside 0..{bank.num_samples - 1}")
    lookup = lookup or bank.embedding
    first = cfg.initial_expert
    observation = ((first, lookup(sample, first)),)
    state = EnvState(
        sample=sample,
        activated=1 << first,
        step=0,
        accumulated_cost=bank.expert(first).cost_tflops,
        observation=observation,
    )
    return state, observation


def step(
    state: EnvState,
    action: Action,
    bank: EmbeddingBank,
    cfg: RouterConfig,
    lookup: Lookup | None = None,
) -> StepResult:
    if state.done:
        raise ContractError("Episode already finished")
    mask = valid_action_mask(state, cfg, bank.num_experts)
    if action.is_classify and action.label not in range(NUM_CLASSES):
        raise ContractError(f"Unknown class label {action.label}")
    if not 0 <= action.index < mask.shape[0] or not mask[action.index]:
        raise ContractError(f"Invalid action {action} in state {state}")

    true_label = int(bank.labels[state.sample])
    reward = total_reward(action, true_label, cfg.cost_coefficient, bank.experts)
    if action.is_classify:
        next_state = EnvState(
            sample=state.sample,
            activated=state.activated,
            step=state.step + 1,
            accumulated_cost=state.accumulated_cost,
            observation=state.observation,
            done=True,
        )
    else:
        lookup = lookup or bank.embedding
        e = action.expert
        next_state = EnvState(
            sample=state.sample,
            activated=state.activated | 1 << e,
            step=state.step + 1,
            accumulated_cost=state.accumulated_cost + bank.expert(e).cost_tflops,
            observation=state.observation + ((e, lookup(state.sample, e)),),
        )
    return StepResult(
        state=next_state,
        reward=reward,
        next_observation=next_state.observation,
        done=next_state.done,
        valid_action_mask=valid_action_mask(next_state, cfg, bank.num_experts),
    )


def episode_cost(state: EnvState) -> float:
    return state.accumulated_cost


class RoutingEnv:
    """Stateful reset/step wrapper over the functional dynamics above."""

    def __init__(self, bank: EmbeddingBank, cfg: RouterConfig, lookup: Lookup | None = None):
        cfg.validate(bank.num_experts)
        self.bank = bank
        self.cfg = cfg
        self.lookup = lookup
        self.state: EnvState | None = None

    @property
    def mask(self) -> np.ndarray:
        if self.state is None:
            raise ContractError("reset() must be called first")
        return valid_action_mask(self.state, self.cfg, self.bank.num_experts)

    def reset(self, sample: int) -> Observation:
        self.state, observation = reset(self.bank, self.cfg, sample, self.lookup)
        return observation

    def step(self, action: Action | int) -> StepResult:
        if self.state is None:
            raise ContractError("reset() must be called first")
        if not isinstance(action, Action):
            action = Action.from_index(int(action))
        result = step(self.state, action, self.bank, self.cfg, self.lookup)
        self.state = result.state
        return result
