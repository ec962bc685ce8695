import numpy as np
import pytest

from srpmoe.expert_bank import EmbeddingBank, generate_synthetic
from srpmoe.schema import (
    AgentConfig,
    ExpertSpec,
    PGConfig,
    RouterConfig,
    SyntheticConfig,
    TrainRunConfig,
)


def make_experts(dims=(6, 6, 8), fidelities=(0.55, 0.8, 0.95)):
    costs = (0.59, 2.7, 8.9)
    names = ("tsf-b", "vmae-b", "vmae-l")
    return [
        ExpertSpec(id=i, name=names[i], dim=dims[i], cost_tflops=costs[i], fidelity=fidelities[i])
        for i in range(len(dims))
    ]


def make_run_config(agent="dqn", lam=0.0, seed=0, episodes=200, **kwargs) -> TrainRunConfig:
    cfg = TrainRunConfig(
        agent=agent,
        router=RouterConfig(cost_coefficient=lam, obs_dim=8),
        dqn=AgentConfig(
            learning_rate=3e-3,
            replay_capacity=5_000,
            batch_size=16,
            target_sync_interval=100,
            warmup=50,
            train_episodes=episodes,
            hidden_size=16,
        ),
        pg=PGConfig(
            learning_rate=3e-3, rollout_episodes=16, train_episodes=episodes, hidden_size=16
        ),
        seed=seed,
        log_interval=100,
    )
    for key, value in kwargs.items():
        setattr(cfg, key, value)
    return cfg


@pytest.fixture
def experts():
    return make_experts()


@pytest.fixture
def small_bank(experts):
    return generate_synthetic(SyntheticConfig(num_train=120, num_test=60, seed=3), experts)


@pytest.fixture
def label_bank():
    """Expert 0's single embedding dimension is the label itself."""
    experts = make_experts(dims=(1, 2, 2))
    n_train, n_test = 20, 10
    rng = np.random.default_rng(0)
    labels = np.array([0, 1] * ((n_train + n_test) // 2))
    split = np.array(["train"] * n_train + ["test"] * n_test)
    embeddings = {
        0: labels[:, None].astype(np.float32),
        1: rng.standard_normal((n_train + n_test, 2)).astype(np.float32),
        2: rng.standard_normal((n_train + n_test, 2)).astype(np.float32),
    }
    return EmbeddingBank(experts=experts, labels=labels, split=split, embeddings=embeddings)
