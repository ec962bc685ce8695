"""Exact solver for a quantized routing MDP.

The 2D latent is projected onto the class-discriminant axis u = (z1 + z2) / sqrt(2),
where the two classes are N(-mu*sqrt(2), sigma^2) and N(+mu*sqrt(2), sigma^2). The
axis is cut into K equal-mass bins; each expert sees a bin only through its
partition, which merges adjacent bins into ceil(K * fidelity) contiguous cells.
"""

import argparse
import json
import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from loguru import logger
from scipy.optimize import brentq
from scipy.stats import norm

from srpmoe.errors import ConfigError, ContractError
from srpmoe.expert_bank import EmbeddingBank, default_expert_triple, validate_experts
from srpmoe.router import RouterNetwork, greedy_action
from srpmoe.routing_env import NUM_CLASSES, expert_cost_reward
from srpmoe.schema import ExpertSpec, SyntheticConfig, TrainRunConfig
from srpmoe.trainer import train

# bins finer than this are below the resolution of the edge search
MAX_BINS = 1 << 16


@dataclass
class QuantizedMDP:
    experts: list[ExpertSpec]
    edges: np.ndarray  # (K + 1,), -inf and +inf at the ends
    priors: np.ndarray  # (K,) bin probabilities
    posteriors: np.ndarray  # (K,) p(fight | bin)
    partitions: dict[int, np.ndarray]  # expert id -> (K,) cell index of every bin
    lam: float = 0.0
    initial_expert: int = 0

    @property
    def num_bins(self) -> int:
        return self.priors.shape[0]

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def num_cells(self, expert: int) -> int:
        return int(self.partitions[expert].max()) + 1


@dataclass(frozen=True)
class InfoState:
    # (expert, observed cell) in activation order
    cells: tuple[tuple[int, int], ...]

    @property
    def activated(self) -> int:
        mask = 0
        for expert, _ in self.cells:
            mask |= 1 << expert
        return mask

    @property
    def key(self) -> tuple[tuple[int, int], ...]:
        return tuple(sorted(self.cells))

    def extend(self, expert: int, cell: int) -> "InfoState":
        return InfoState(self.cells + ((expert, cell),))


Policy = Callable[[InfoState], int]


def cells_for(k: int, fidelity: float) -> int:
    return min(k, max(1, math.ceil(round(k * fidelity, 9))))


def _mixture_cdf(u: float, mean: float, sigma: float) -> float:
    return 0.5 * norm.cdf((u - mean) / sigma) + 0.5 * norm.cdf((u + mean) / sigma)


def build_quantized(
    cfg: SyntheticConfig,
    experts: list[ExpertSpec],
    k: int,
    lam: float = 0.0,
    initial_expert: int = 0,
) -> QuantizedMDP:
    if k < 2:
        raise ConfigError(f"K must be >= 2, got {k}")
    if k > MAX_BINS:
        raise ConfigError(f"K={k} bins exceed the numeric resolution (max {MAX_BINS})")
    cfg.validate()
    validate_experts(experts, synthetic=True)
    experts = sorted(experts, key=lambda e: e.id)
    if not 0 <= initial_expert < len(experts):
        raise ConfigError(f"initial_expert {initial_expert} outside 0..{len(experts) - 1}")
    if not lam >= 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")

    mean = cfg.class_separation * math.sqrt(2.0)
    sigma = cfg.latent_noise
    lo, hi = -mean - 40.0 * sigma, mean + 40.0 * sigma
    inner = [
        brentq(lambda u, q=q: _mixture_cdf(u, mean, sigma) - q, lo, hi, xtol=1e-14)
        for q in np.arange(1, k) / k
    ]
    edges = np.array([-np.inf, *inner, np.inf])
    if not np.all(np.diff(edges) > 0):
        raise ConfigError(f"K={k} bins exceed the numeric resolution of the latent axis")

    fight = 0.5 * np.diff(norm.cdf((edges - mean) / sigma))
    non_fight = 0.5 * np.diff(norm.cdf((edges + mean) / sigma))
    masses = fight + non_fight
    if not np.all(masses > 0) or not np.allclose(masses, 1.0 / k, rtol=1e-6, atol=0):
        raise ConfigError(f"K={k} bins exceed the numeric resolution of the latent axis")
    priors = masses / masses.sum()
    posteriors = np.clip(fight / masses, 0.0, 1.0)

    bins = np.arange(k)
    partitions = {e.id: bins * cells_for(k, e.fidelity) // k for e in experts}
    logger.info(
        f"Quantized MDP: K={k}, cells per expert "
        f"{[cells_for(k, e.fidelity) for e in experts]}, lambda={lam}"
    )
    return QuantizedMDP(experts, edges, priors, posteriors, partitions, lam, initial_expert)


def consistent_bins(mdp: QuantizedMDP, state: InfoState) -> np.ndarray:
    keep = np.ones(mdp.num_bins, dtype=bool)
    for expert, cell in state.cells:
        keep &= mdp.partitions[expert] == cell
    return np.flatnonzero(keep)


def classify_values(mdp: QuantizedMDP, state: InfoState) -> list[float]:
    """Expected classification reward of labels 0 and 1 in this state."""
    bins = consistent_bins(mdp, state)
    weights = mdp.priors[bins]
    p = float(np.dot(weights, mdp.posteriors[bins]) / weights.sum())
    return [2.0 * (1.0 - p) - 1.0, 2.0 * p - 1.0]


def branches(mdp: QuantizedMDP, state: InfoState, expert: int) -> list[tuple[float, InfoState]]:
    """(probability, successor) over the cells expert may reveal."""
    bins = consistent_bins(mdp, state)
    weights = mdp.priors[bins]
    cells = mdp.partitions[expert][bins]
    total = weights.sum()
    return [
        (float(weights[cells == c].sum() / total), state.extend(expert, int(c)))
        for c in np.unique(cells)
    ]


def initial_branches(mdp: QuantizedMDP) -> list[tuple[float, InfoState]]:
    return branches(mdp, InfoState(()), mdp.initial_expert)


def valid_actions(mdp: QuantizedMDP, state: InfoState) -> list[int]:
    activated = state.activated
    return list(range(NUM_CLASSES)) + [
        NUM_CLASSES + e for e in range(mdp.num_experts) if not activated >> e & 1
    ]


def action_value(
    mdp: QuantizedMDP, state: InfoState, action: int, value: Callable[[InfoState], float]
) -> float:
    if action < NUM_CLASSES:
        return classify_values(mdp, state)[action]
    expert = action - NUM_CLASSES
    cost = mdp.lam * expert_cost_reward(expert, mdp.experts)
    return cost + sum(p * value(nxt) for p, nxt in branches(mdp, state, expert))


@dataclass
class OracleSolution:
    value: float
    # canonical info state -> optimal action index
    policy: dict[tuple[tuple[int, int], ...], int]


def solve_optimal(mdp: QuantizedMDP) -> OracleSolution:
    """Backward induction over every reachable info state."""
    values: dict[tuple, float] = {}
    policy: dict[tuple, int] = {}

    def value(state: InfoState) -> float:
        key = state.key
        if key not in values:
            best_action, best = None, -math.inf
            for action in valid_actions(mdp, state):
                q = action_value(mdp, state, action, value)
                # strict comparison keeps the lowest index among ties
                if q > best:
                    best_action, best = action, q
            values[key] = best
            policy[key] = best_action
        return values[key]

    total = sum(p * value(state) for p, state in initial_branches(mdp))
    logger.info(f"Optimal value {total:.6f} over {len(values)} info states")
    return OracleSolution(total, policy)


def table_policy(solution: OracleSolution) -> Policy:
    def policy(state: InfoState) -> int:
        try:
            return solution.policy[state.key]
        except KeyError as e:
            raise ContractError(f"Policy undefined on info state {state.cells}") from e

    return policy


def policy_value(mdp: QuantizedMDP, policy: Policy) -> float:
    """Exact expected episode reward of a deterministic policy."""

    def value(state: InfoState) -> float:
        action = policy(state)
        if action is None or action not in valid_actions(mdp, state):
            raise ContractError(f"Policy gave invalid action {action} in {state.cells}")
        return action_value(mdp, state, action, value)

    return sum(p * value(state) for p, state in initial_branches(mdp))


def one_hot_codes(mdp: QuantizedMDP, expert: int) -> np.ndarray:
    return np.eye(mdp.num_cells(expert), dtype=np.float32)


def router_policy(net: RouterNetwork, mdp: QuantizedMDP) -> Policy:
    """Wrap a router trained on quantized_bank(mdp) as an info-state policy."""
    codes = {e.id: one_hot_codes(mdp, e.id) for e in mdp.experts}

    def policy(state: InfoState) -> int:
        observation = tuple((e, codes[e][c]) for e, c in state.cells)
        mask = np.zeros(NUM_CLASSES + mdp.num_experts, dtype=bool)
        mask[valid_actions(mdp, state)] = True
        return greedy_action(net, observation, mask)

    return policy


def largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to total, proportional to weights; ties go to lower indices."""
    raw = np.asarray(weights, dtype=np.float64) / np.sum(weights) * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def exact_samples(
    mdp: QuantizedMDP, n: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """(bins, labels) of n samples whose bin and per-bin fight frequencies match the
    priors and posteriors up to rounding, in shuffled order."""
    counts = largest_remainder(mdp.priors, n)
    bins, labels = [], []
    for b, count in enumerate(counts):
        fights = int(np.floor(count * mdp.posteriors[b] + 0.5))
        bins.append(np.full(count, b))
        labels.append((np.arange(count) < fights).astype(np.int64))
    order = rng.permutation(n)
    return np.concatenate(bins)[order], np.concatenate(labels)[order]


def quantized_bank(
    mdp: QuantizedMDP, num_train: int = 2000, num_test: int = 500, seed: int = 0
) -> EmbeddingBank:
    """Samples of the quantized MDP with one-hot cell codes as expert embeddings.

    Each split reproduces the bin priors and fight posteriors exactly up to rounding,
    so a router fit on it sees the MDP's statistics rather than a noisy draw of them.
    """
    rng = np.random.default_rng(seed)
    train_bins, train_labels = exact_samples(mdp, num_train, rng)
    test_bins, test_labels = exact_samples(mdp, num_test, rng)
    bins = np.concatenate([train_bins, test_bins])
    labels = np.concatenate([train_labels, test_labels])
    split = np.array(["train"] * num_train + ["test"] * num_test)
    experts = [
        ExpertSpec(
            id=e.id,
            name=f"{e.name}-q",
            dim=mdp.num_cells(e.id),
            cost_tflops=e.cost_tflops,
            fidelity=e.fidelity,
        )
        for e in mdp.experts
    ]
    embeddings = {e.id: one_hot_codes(mdp, e.id)[mdp.partitions[e.id][bins]] for e in experts}
    return EmbeddingBank(experts=experts, labels=labels, split=split, embeddings=embeddings)


def oracle_run_config(template: TrainRunConfig) -> TrainRunConfig:
    """DQN settings under which the router targets the undiscounted MDP optimum.

    Aggregated observations keep every revealed cell; the direct mode forgets all
    but the last. Gamma is 1 as in the exact solver. The learning rate decays to
    zero unless the template sets its own end value.
    """
    dqn = replace(
        template.dqn,
        gamma=1.0,
        learning_rate_end=(
            0.0 if template.dqn.learning_rate_end is None else template.dqn.learning_rate_end
        ),
    )
    return replace(
        template, agent="dqn", mode="aggregated", augment=False, aug_sigma=0.0, dqn=dqn
    )


def learned_value(
    mdp: QuantizedMDP, cfg: TrainRunConfig, num_train: int = 4000, seed: int = 0
) -> float:
    """Train a router on samples of the MDP and return its exact expected reward.

    The template is adapted with oracle_run_config first.
    """
    bank = quantized_bank(mdp, num_train, max(1, num_train // 4), seed)
    result = train(oracle_run_config(cfg), bank, progress=False)
    if result.failed:
        logger.error(f"Router training on the quantized MDP failed: {result.error}")
        return math.nan
    return policy_value(mdp, router_policy(result.net, mdp))


def oracle_report(
    path: str, optimal_value: float, learned: float, k: int, lam: float
) -> dict:
    ratio = learned / optimal_value if optimal_value != 0 else None
    report = {
        "optimal_value": optimal_value,
        "learned_value": None if math.isnan(learned) else learned,
        "ratio": None if ratio is None or math.isnan(ratio) else ratio,
        "K": k,
        "lambda": lam,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, ensure_ascii=False, indent=4)
    logger.info(f"Wrote oracle report to {path}")
    return report


def parse_args():
    parser = argparse.ArgumentParser("Solve a quantized routing MDP exactly")
    parser.add_argument("--bins", type=int, default=8)
    parser.add_argument("--lambda", dest="lam", type=float, default=0.0)
    return parser.parse_args()


if __name__ == "__main__":
    args = parse_args()
    mdp = build_quantized(SyntheticConfig(), default_expert_triple(), args.bins, args.lam)
    solution = solve_optimal(mdp)
    print(json.dumps({"optimal_value": solution.value, "K": args.bins, "lambda": args.lam}))
