import argparse
import math
import os
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace

import numpy as np
import polars as pl
from loguru import logger
from tqdm import tqdm

from srpmoe.dqn_agent import DQNAgent, Transition
from srpmoe.errors import ConfigError, DivergenceError, SrpmoeError
from srpmoe.evaluator import evaluate, expert_usage, greedy_policy
from srpmoe.expert_bank import EmbeddingBank, default_expert_triple, generate_synthetic
from srpmoe.pg_agent import PGAgent
from srpmoe.router import RouterNetwork, fit_scalers
from srpmoe.routing_env import Action, Lookup, RoutingEnv
from srpmoe.schema import (
    AssignmentRecord,
    MetricsRecord,
    SweepGrid,
    SyntheticConfig,
    TrainRunConfig,
)

LOG_SCHEMA = {
    "episode": pl.Int64,
    "mean_reward": pl.Float64,
    "train_acc_window": pl.Float64,
    "mean_cost_tflops": pl.Float64,
}
DEFAULT_AUG_SIGMA = 0.1

# design variants compared against the default double dueling DQN router
ABLATIONS = {
    "dqn": {},
    "pg": {"agent": "pg"},
    "aggregated": {"mode": "aggregated"},
    "no_augment": {"augment": False, "aug_sigma": 0.0},
    "overfit": {},
}
OVERFIT_VARIANTS = {"overfit"}


def augment_embedding(
    embedding: np.ndarray, train_std: np.ndarray, aug_sigma: float, rng: np.random.Generator
) -> np.ndarray:
    """Add N(0, (aug_sigma * train_std)^2) noise per dimension; returns a new array."""
    if aug_sigma == 0:
        return embedding
    noise = rng.standard_normal(embedding.shape) * (aug_sigma * train_std)
    return (embedding + noise).astype(embedding.dtype)


def make_lookup(
    bank: EmbeddingBank, aug_sigma: float, rng: np.random.Generator
) -> Lookup:
    stds = {e.id: bank.train_std(e.id) for e in bank.experts}

    def lookup(sample: int, expert: int) -> np.ndarray:
        return augment_embedding(bank.embedding(sample, expert), stds[expert], aug_sigma, rng)

    return lookup


@dataclass
class TrainResult:
    net: RouterNetwork
    log: pl.DataFrame
    failed: bool = False
    error: str | None = None


def _window_row(episode: int, rewards: list, correct: list, costs: list) -> dict:
    return {
        "episode": episode,
        "mean_reward": float(np.mean(rewards)),
        "train_acc_window": 100.0 * float(np.mean(correct)),
        "mean_cost_tflops": float(np.mean(costs)),
    }


def train(cfg: TrainRunConfig, bank: EmbeddingBank, progress: bool = True) -> TrainResult:
    """Train one router on the train split of the bank.

    Every random draw comes from streams spawned off SeedSequence(cfg.seed), so a
    (cfg, bank) pair always produces the same parameters.
    """
    cfg.validate(bank.num_experts)
    init_rng, sample_rng, explore_rng, replay_rng, aug_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(5)
    )
    kind = "dueling" if cfg.agent == "dqn" else "policy"
    net = RouterNetwork.create(
        bank.experts, cfg.router.obs_dim, init_rng, cfg.hidden_size, kind, cfg.mode
    )
    # before the agent is built, so the DQN target copy shares the scalers
    if cfg.standardize:
        net.scalers = fit_scalers(bank)
    net.meta = {
        "agent": cfg.agent,
        "lambda": cfg.router.cost_coefficient,
        "seed": cfg.seed,
        "augment": cfg.augment,
        "episodes": cfg.episodes,
    }
    lookup = make_lookup(bank, cfg.aug_sigma, aug_rng) if cfg.augment else None
    env = RoutingEnv(bank, cfg.router, lookup)
    train_idx = bank.indices("train")
    if cfg.agent == "dqn":
        agent = DQNAgent(net, cfg.dqn)
    else:
        agent = PGAgent(net, cfg.pg)

    lam = cfg.router.cost_coefficient
    logger.info(
        f"Training {cfg.agent}/{cfg.mode} router: lambda={lam}, seed={cfg.seed}, "
        f"{cfg.episodes} episodes, augment={cfg.augment}"
    )
    rows = []
    rewards, correct, costs = [], [], []
    try:
        for episode in tqdm(
            range(cfg.episodes),
            desc=f"{cfg.agent} lambda={lam} seed={cfg.seed}",
            disable=not progress,
        ):
            agent.optimizer.learning_rate = cfg.agent_config.learning_rate_at(episode)
            sample = int(sample_rng.choice(train_idx))
            observation = env.reset(sample)
            mask = env.mask
            total = 0.0
            if cfg.agent == "dqn":
                epsilon = cfg.dqn.epsilon_at(episode)
                while True:
                    action = agent.act(observation, mask, epsilon, explore_rng)
                    result = env.step(action)
                    agent.remember(
                        Transition(
                            observation,
                            action,
                            result.reward,
                            result.next_observation,
                            result.done,
                            result.valid_action_mask,
                        )
                    )
                    agent.learn(replay_rng)
                    total += result.reward
                    if result.done:
                        break
                    observation, mask = result.next_observation, result.valid_action_mask
            else:
                observations, masks, actions, log_probs, episode_rewards = [], [], [], [], []
                while True:
                    action, log_prob = agent.act(observation, mask, explore_rng)
                    result = env.step(action)
                    observations.append(observation)
                    masks.append(mask)
                    actions.append(action)
                    log_probs.append(log_prob)
                    episode_rewards.append(result.reward)
                    total += result.reward
                    if result.done:
                        break
                    observation, mask = result.next_observation, result.valid_action_mask
                agent.finish_episode(observations, masks, actions, log_probs, episode_rewards)

            rewards.append(total)
            correct.append(Action.from_index(action).label == int(bank.labels[sample]))
            costs.append(env.state.accumulated_cost)
            if (episode + 1) % cfg.log_interval == 0 or episode + 1 == cfg.episodes:
                row = _window_row(episode + 1, rewards, correct, costs)
                rows.append(row)
                logger.debug(
                    f"episode {row['episode']}: reward {row['mean_reward']:.3f}, "
                    f"acc {row['train_acc_window']:.1f}%, cost {row['mean_cost_tflops']:.2f}"
                )
                rewards, correct, costs = [], [], []
        if cfg.agent == "pg":
            # episodes past the last full rollout
            agent.flush()
    except DivergenceError as e:
        logger.error(f"Run lambda={lam} seed={cfg.seed} diverged: {e}")
        return TrainResult(net, pl.DataFrame(rows, schema=LOG_SCHEMA), failed=True, error=str(e))

    logger.info(f"Finished lambda={lam} seed={cfg.seed}")
    return TrainResult(net, pl.DataFrame(rows, schema=LOG_SCHEMA))


def save_log(log: pl.DataFrame, path: str) -> None:
    log.write_csv(path)
    logger.info(f"Wrote training log ({log.height} windows) to {path}")


@dataclass
class CellResult:
    record: MetricsRecord
    net: RouterNetwork | None = None
    assignments: list[AssignmentRecord] = field(default_factory=list)
    log: pl.DataFrame | None = None


def run_cell(cfg: TrainRunConfig, bank: EmbeddingBank, progress: bool = False) -> CellResult:
    """Train, then evaluate the greedy router on both splits."""
    result = train(cfg, bank, progress=progress)
    if result.failed:
        return CellResult(MetricsRecord.failed_cell(cfg, bank.overfit), result.net, [], result.log)

    policy = greedy_policy(result.net)
    train_acc, _, _ = evaluate(policy, bank, "train", cfg.router)
    test_acc, avg_tflops, assignments = evaluate(policy, bank, "test", cfg.router)
    record = MetricsRecord(
        lam=cfg.router.cost_coefficient,
        seed=cfg.seed,
        agent=cfg.agent,
        mode=cfg.mode,
        augment=cfg.augment,
        overfit=bank.overfit,
        train_acc=train_acc,
        test_acc=test_acc,
        avg_tflops=avg_tflops,
        acc_per_tflop=math.nan,
        episodes=cfg.episodes,
    )
    record.acc_per_tflop = record.test_acc / record.avg_tflops
    usage = expert_usage(assignments, bank.num_experts)
    logger.info(
        f"Cell lambda={record.lam} seed={record.seed}: train {train_acc}%, test {test_acc}%, "
        f"{avg_tflops:.3f} TFLOPs, usage {np.round(usage, 3).tolist()}"
    )
    return CellResult(record, result.net, assignments, result.log)


def cell_config(template: TrainRunConfig, lam: float, seed: int) -> TrainRunConfig:
    return replace(template, seed=seed, router=replace(template.router, cost_coefficient=lam))


def _run_cell_safe(cfg: TrainRunConfig, bank: EmbeddingBank) -> CellResult:
    try:
        return run_cell(cfg, bank)
    except SrpmoeError as e:
        logger.error(f"Cell lambda={cfg.router.cost_coefficient} seed={cfg.seed} failed: {e}")
        return CellResult(MetricsRecord.failed_cell(cfg, bank.overfit))


def sweep_cells(grid: SweepGrid, bank: EmbeddingBank, jobs: int = 1) -> list[CellResult]:
    """One train + evaluate per (lambda, seed) cell, ordered by (lambda, seed)."""
    grid.validate()
    if jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {jobs}")
    cells = sorted((lam, seed) for lam in grid.lambdas for seed in grid.seeds)
    configs = [cell_config(grid.template, lam, seed) for lam, seed in cells]
    for cfg in configs:
        cfg.validate(bank.num_experts)

    results: dict[int, CellResult] = {}
    with ThreadPoolExecutor(max_workers=jobs) as executor:
        futures = {executor.submit(_run_cell_safe, cfg, bank): i for i, cfg in enumerate(configs)}
        for future in tqdm(as_completed(futures), total=len(futures), desc="Sweep cells"):
            results[futures[future]] = future.result()

    failed = sum(results[i].record.failed for i in results)
    if failed:
        logger.warning(f"{failed} of {len(configs)} cells failed")
    return [results[i] for i in range(len(configs))]


def sweep(grid: SweepGrid, bank: EmbeddingBank, jobs: int = 1) -> list[MetricsRecord]:
    return [cell.record for cell in sweep_cells(grid, bank, jobs)]


def ablation_config(template: TrainRunConfig, variant: str) -> TrainRunConfig:
    if variant not in ABLATIONS:
        raise ConfigError(f"Unknown ablation variant {variant}; choose from {list(ABLATIONS)}")
    base = replace(
        template,
        agent="dqn",
        mode="direct",
        augment=True,
        aug_sigma=template.aug_sigma or DEFAULT_AUG_SIGMA,
    )
    return replace(base, **ABLATIONS[variant])


def ablation_study(
    grid: SweepGrid,
    bank: EmbeddingBank,
    overfit_bank: EmbeddingBank | None = None,
    variants: list[str] | None = None,
    jobs: int = 1,
) -> dict[str, list[MetricsRecord]]:
    """Run the sweep grid once per design variant."""
    variants = list(ABLATIONS) if variants is None else variants
    if OVERFIT_VARIANTS & set(variants):
        if overfit_bank is None or not overfit_bank.overfit:
            raise ConfigError("The overfit variant needs a bank generated with overfit_gap < 1")
    results = {}
    for variant in variants:
        variant_grid = replace(grid, template=ablation_config(grid.template, variant))
        variant_bank = overfit_bank if variant in OVERFIT_VARIANTS else bank
        logger.info(f"Ablation variant {variant}")
        results[variant] = sweep(variant_grid, variant_bank, jobs)
    return results


def parse_args():
    parser = argparse.ArgumentParser("Train one router on a synthetic bank")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--lambda", dest="lam", type=float, default=0.0)
    parser.add_argument("--agent", type=str, default="dqn", choices=["dqn", "pg"])
    parser.add_argument("--episodes", type=int, default=50_000)
    parser.add_argument("--out", type=str, default="run")
    return parser.parse_args()


if __name__ == "__main__":
    args = parse_args()
    bank = generate_synthetic(SyntheticConfig(seed=args.seed), default_expert_triple())
    cfg = TrainRunConfig(agent=args.agent, seed=args.seed)
    cfg.router.cost_coefficient = args.lam
    cfg.dqn.train_episodes = cfg.pg.train_episodes = args.episodes
    result = train(cfg, bank)
    os.makedirs(args.out, exist_ok=True)
    result.net.save(os.path.join(args.out, "router.ckpt"))
    save_log(result.log, os.path.join(args.out, "train_log.csv"))
