import math
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass

from srpmoe.errors import ConfigError

AGENT_KINDS = ("dqn", "pg")
OBSERVATION_MODES = ("direct", "aggregated")
DEFAULT_LAMBDAS = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]


def from_dict(cls, data: dict):
    """Build a (possibly nested) config dataclass, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{cls.__name__} expects a JSON object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"Unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if is_dataclass(hint) and isinstance(value, dict):
            value = from_dict(hint, value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"Invalid {cls.__name__}: {e}") from e


def merge_dict(base: dict, override: dict) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_dict(merged[key], value)
        else:
            merged[key] = value
    return merged


def linear_schedule(start: float, end: float, episode: int, episodes: float) -> float:
    """Linear interpolation from start to end over episodes, then constant at end."""
    if episodes <= 0 or episode >= episodes:
        return end
    return start + (episode / episodes) * (end - start)


@dataclass
class ExpertSpec:
    id: int
    name: str
    dim: int
    cost_tflops: float
    fidelity: float = 1.0

    def to_dict(self):
        return asdict(self)


@dataclass
class SyntheticConfig:
    num_train: int = 1600
    num_test: int = 400
    class_separation: float = 1.0
    latent_noise: float = 1.0
    # 1.0 disables the overfit-expert emulation
    overfit_gap: float = 1.0
    # None: the most expensive expert
    overfit_experts: list[int] | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.num_train <= 0 or self.num_test <= 0:
            raise ConfigError(
                f"num_train and num_test must be positive, got {self.num_train}/{self.num_test}"
            )
        if not self.class_separation > 0 or not self.latent_noise > 0:
            raise ConfigError(
                "class_separation and latent_noise must be > 0, got "
                f"{self.class_separation}/{self.latent_noise}"
            )
        if not 0 < self.overfit_gap <= 1:
            raise ConfigError(f"overfit_gap must be in (0, 1], got {self.overfit_gap}")

    def to_dict(self):
        return asdict(self)


@dataclass
class RouterConfig:
    cost_coefficient: float = 0.0
    initial_expert: int = 0
    obs_dim: int = 768
    # None: number of experts + 1
    max_steps: int | None = None

    def validate(self, num_experts: int) -> None:
        if not self.cost_coefficient >= 0:
            raise ConfigError(f"cost_coefficient must be >= 0, got {self.cost_coefficient}")
        if not 0 <= self.initial_expert < num_experts:
            raise ConfigError(
                f"initial_expert {self.initial_expert} outside 0..{num_experts - 1}"
            )
        if self.obs_dim <= 0:
            raise ConfigError(f"obs_dim must be positive, got {self.obs_dim}")
        if self.max_steps is not None and self.max_steps <= 0:
            raise ConfigError(f"max_steps must be positive, got {self.max_steps}")

    def horizon(self, num_experts: int) -> int:
        return self.max_steps if self.max_steps is not None else num_experts + 1


@dataclass
class AgentConfig:
    learning_rate: float = 1e-3
    # None keeps the learning rate constant; otherwise it decays linearly to this value
    learning_rate_end: float | None = None
    gamma: float = 0.99
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    # fraction of train_episodes over which epsilon decays linearly
    epsilon_decay_fraction: float = 0.4
    replay_capacity: int = 50_000
    batch_size: int = 64
    target_sync_interval: int = 1_000
    warmup: int = 1_000
    train_episodes: int = 50_000
    hidden_size: int = 64

    def validate(self) -> None:
        if self.replay_capacity < self.batch_size:
            raise ConfigError(
                f"replay_capacity {self.replay_capacity} < batch_size {self.batch_size}"
            )
        if not 0 <= self.gamma <= 1:
            raise ConfigError(f"gamma must be in [0, 1], got {self.gamma}")
        for name in ("epsilon_start", "epsilon_end", "epsilon_decay_fraction"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ConfigError(f"{name} must be in [0, 1], got {value}")
        if self.learning_rate <= 0 or self.train_episodes <= 0:
            raise ConfigError("learning_rate and train_episodes must be positive")
        if self.learning_rate_end is not None and self.learning_rate_end < 0:
            raise ConfigError(f"learning_rate_end must be >= 0, got {self.learning_rate_end}")

    def epsilon_at(self, episode: int) -> float:
        decay_episodes = self.epsilon_decay_fraction * self.train_episodes
        return linear_schedule(self.epsilon_start, self.epsilon_end, episode, decay_episodes)

    def learning_rate_at(self, episode: int) -> float:
        if self.learning_rate_end is None:
            return self.learning_rate
        return linear_schedule(
            self.learning_rate, self.learning_rate_end, episode, self.train_episodes
        )


@dataclass
class PGConfig:
    learning_rate: float = 1e-3
    learning_rate_end: float | None = None
    clip_ratio: float = 0.2
    epochs: int = 4
    rollout_episodes: int = 64
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    gamma: float = 0.99
    train_episodes: int = 50_000
    hidden_size: int = 64

    def validate(self) -> None:
        if not 0 < self.clip_ratio < 1:
            raise ConfigError(f"clip_ratio must be in (0, 1), got {self.clip_ratio}")
        if not 0 <= self.gamma <= 1:
            raise ConfigError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.epochs <= 0 or self.rollout_episodes <= 0 or self.train_episodes <= 0:
            raise ConfigError("epochs, rollout_episodes and train_episodes must be positive")
        if self.learning_rate_end is not None and self.learning_rate_end < 0:
            raise ConfigError(f"learning_rate_end must be >= 0, got {self.learning_rate_end}")

    def learning_rate_at(self, episode: int) -> float:
        if self.learning_rate_end is None:
            return self.learning_rate
        return linear_schedule(
            self.learning_rate, self.learning_rate_end, episode, self.train_episodes
        )


@dataclass
class TrainRunConfig:
    agent: str = "dqn"
    router: RouterConfig = field(default_factory=RouterConfig)
    dqn: AgentConfig = field(default_factory=AgentConfig)
    pg: PGConfig = field(default_factory=PGConfig)
    mode: str = "direct"
    augment: bool = True
    aug_sigma: float = 0.1
    # standardize each expert's embedding with its train-split mean and std
    standardize: bool = True
    seed: int = 0
    log_interval: int = 1_000
    # manifest path; None means a synthetic bank built from the CLI config
    bank: str | None = None

    @property
    def episodes(self) -> int:
        return self.dqn.train_episodes if self.agent == "dqn" else self.pg.train_episodes

    @property
    def hidden_size(self) -> int:
        return self.dqn.hidden_size if self.agent == "dqn" else self.pg.hidden_size

    @property
    def agent_config(self) -> AgentConfig | PGConfig:
        return self.dqn if self.agent == "dqn" else self.pg

    def validate(self, num_experts: int) -> None:
        if self.agent not in AGENT_KINDS:
            raise ConfigError(f"agent must be one of {AGENT_KINDS}, got {self.agent}")
        if self.mode not in OBSERVATION_MODES:
            raise ConfigError(f"mode must be one of {OBSERVATION_MODES}, got {self.mode}")
        if self.aug_sigma < 0:
            raise ConfigError(f"aug_sigma must be >= 0, got {self.aug_sigma}")
        if self.augment != (self.aug_sigma > 0):
            raise ConfigError(
                f"augment={self.augment} inconsistent with aug_sigma={self.aug_sigma}"
            )
        if self.log_interval <= 0:
            raise ConfigError(f"log_interval must be positive, got {self.log_interval}")
        self.router.validate(num_experts)
        if self.agent == "dqn":
            self.dqn.validate()
        else:
            self.pg.validate()

    def to_dict(self):
        return asdict(self)


@dataclass
class SweepGrid:
    lambdas: list[float] = field(default_factory=lambda: list(DEFAULT_LAMBDAS))
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3])
    template: TrainRunConfig = field(default_factory=TrainRunConfig)

    def validate(self) -> None:
        if not self.lambdas or not self.seeds:
            raise ConfigError("Sweep grid needs at least one lambda and one seed")


METRICS_COLUMNS = [
    "lambda",
    "seed",
    "agent",
    "mode",
    "augment",
    "overfit",
    "train_acc",
    "test_acc",
    "avg_tflops",
    "acc_per_tflop",
    "episodes",
]


@dataclass
class MetricsRecord:
    lam: float
    seed: int
    agent: str
    mode: str
    augment: bool
    overfit: bool
    train_acc: float
    test_acc: float
    avg_tflops: float
    acc_per_tflop: float
    episodes: int
    failed: bool = False

    def to_row(self) -> dict:
        row = asdict(self)
        row["lambda"] = row.pop("lam")
        row.pop("failed")
        return {key: row[key] for key in METRICS_COLUMNS}

    @classmethod
    def failed_cell(cls, cfg: TrainRunConfig, overfit: bool) -> "MetricsRecord":
        return cls(
            lam=cfg.router.cost_coefficient,
            seed=cfg.seed,
            agent=cfg.agent,
            mode=cfg.mode,
            augment=cfg.augment,
            overfit=overfit,
            train_acc=math.nan,
            test_acc=math.nan,
            avg_tflops=math.nan,
            acc_per_tflop=math.nan,
            episodes=cfg.episodes,
            failed=True,
        )


ASSIGNMENT_COLUMNS = ["sample_id", "x", "y", "label", "pred", "experts", "cost"]


@dataclass
class AssignmentRecord:
    sample_id: int
    x: float | None
    y: float | None
    label: int
    pred: int
    # bitmask over expert ids
    experts: int
    cost: float

    def to_dict(self):
        return asdict(self)


@dataclass
class CliConfig:
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    run: TrainRunConfig = field(default_factory=TrainRunConfig)
    lambdas: list[float] = field(default_factory=lambda: list(DEFAULT_LAMBDAS))
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3])
    jobs: int = 1
    # oracle quantization
    bins: int = 8
    out: str = "out"
    bank: str | None = None
    checkpoint: str | None = None
    metrics: str | None = None

    def grid(self) -> SweepGrid:
        return SweepGrid(lambdas=list(self.lambdas), seeds=list(self.seeds), template=self.run)

    def to_dict(self):
        return asdict(self)
