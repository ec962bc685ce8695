"""Router network: per-expert projections into a shared observation space, a
tanh trunk, and either dueling (value/advantage) or policy/value heads.
"""

import json
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from loguru import logger

from srpmoe.errors import ContractError, FormatError, ShapeError
from srpmoe.expert_bank import EmbeddingBank
from srpmoe.nn_core import DenseNet, backward, decode_net, encode_net, forward
from srpmoe.routing_env import NUM_CLASSES, Observation
from srpmoe.schema import OBSERVATION_MODES, ExpertSpec

HEADS = {"dueling": ("value", "advantage"), "policy": ("policy", "value")}
ROUTER_MAGIC = b"SRPRT1"


@dataclass
class InputScaler:
    mean: np.ndarray  # (d_e,)
    std: np.ndarray  # (d_e,), strictly positive

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.ndim != 1 or self.mean.shape != self.std.shape:
            raise ShapeError(f"Scaler mean {self.mean.shape} and std {self.std.shape} disagree")
        if not (self.std > 0).all():
            raise ShapeError("Scaler std must be positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


def fit_scalers(bank: EmbeddingBank, min_std: float = 1e-8) -> dict[int, InputScaler]:
    """Per-expert scalers from the train split; constant dimensions keep std 1."""
    scalers = {}
    for e in bank.experts:
        std = bank.train_std(e.id)
        scalers[e.id] = InputScaler(bank.train_mean(e.id), np.where(std < min_std, 1.0, std))
    return scalers


@dataclass
class RouterNetwork:
    projections: dict[int, DenseNet]
    trunk: DenseNet
    heads: dict[str, DenseNet]
    kind: str = "dueling"
    mode: str = "direct"
    # expert id -> input standardisation; experts without one are fed raw
    scalers: dict[int, InputScaler] = field(default_factory=dict)
    # training provenance (agent, lambda, seed, augment, episodes), carried in checkpoints
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in HEADS:
            raise ValueError(f"Unknown head kind: {self.kind}")
        if self.mode not in OBSERVATION_MODES:
            raise ValueError(f"Unknown observation mode: {self.mode}")
        if set(self.heads) != set(HEADS[self.kind]):
            raise ShapeError(f"{self.kind} router needs heads {HEADS[self.kind]}")
        for expert, projection in self.projections.items():
            if projection.output_dim != self.obs_dim:
                raise ShapeError(f"Projection of expert {expert} does not emit obs_dim")
        for expert, scaler in self.scalers.items():
            if expert not in self.projections:
                raise ShapeError(f"Scaler for unknown expert {expert}")
            if scaler.dim != self.projections[expert].input_dim:
                raise ShapeError(f"Scaler of expert {expert} does not match its input dim")

    @classmethod
    def create(
        cls,
        experts: list[ExpertSpec],
        obs_dim: int,
        rng: np.random.Generator,
        hidden_size: int = 64,
        kind: str = "dueling",
        mode: str = "direct",
    ) -> "RouterNetwork":
        n_actions = NUM_CLASSES + len(experts)
        projections = {
            e.id: DenseNet.create([e.dim, obs_dim], ["linear"], rng)
            for e in sorted(experts, key=lambda e: e.id)
        }
        trunk = DenseNet.create([obs_dim, hidden_size, hidden_size], ["tanh", "tanh"], rng)
        if kind == "dueling":
            heads = {
                "value": DenseNet.create([hidden_size, 1], ["linear"], rng),
                "advantage": DenseNet.create([hidden_size, n_actions], ["linear"], rng),
            }
        else:
            heads = {
                "policy": DenseNet.create([hidden_size, n_actions], ["linear"], rng),
                "value": DenseNet.create([hidden_size, 1], ["linear"], rng),
            }
        return cls(projections, trunk, heads, kind, mode)

    @property
    def obs_dim(self) -> int:
        return self.trunk.input_dim

    @property
    def num_actions(self) -> int:
        name = "advantage" if self.kind == "dueling" else "policy"
        return self.heads[name].output_dim

    def nets(self) -> list[tuple[str, DenseNet]]:
        """Sections in checkpoint/parameter order."""
        sections = [(f"projection:{e}", self.projections[e]) for e in sorted(self.projections)]
        sections.append(("trunk", self.trunk))
        sections.extend((f"head:{name}", self.heads[name]) for name in HEADS[self.kind])
        return sections

    def parameters(self) -> list[np.ndarray]:
        params = []
        for _, net in self.nets():
            params.extend(net.parameters())
        return params

    def active_parameters(self, experts) -> list[bool]:
        """Flags aligned with parameters(): projections of experts outside the given
        set are off, the trunk and heads are always on."""
        flags = []
        for name, net in self.nets():
            on = not name.startswith("projection:") or int(name.split(":")[1]) in experts
            flags.extend([on] * len(net.parameters()))
        return flags

    def copy(self) -> "RouterNetwork":
        return RouterNetwork(
            {e: p.copy() for e, p in self.projections.items()},
            self.trunk.copy(),
            {name: head.copy() for name, head in self.heads.items()},
            self.kind,
            self.mode,
            {e: InputScaler(s.mean.copy(), s.std.copy()) for e, s in self.scalers.items()},
            dict(self.meta),
        )

    def load_from(self, other: "RouterNetwork") -> None:
        """Copy parameters only; scalers and meta are fixed at creation."""
        for (_, mine), (_, theirs) in zip(self.nets(), other.nets(), strict=True):
            mine.load_from(theirs)

    def save(self, path: str) -> None:
        with open(path, "wb") as f:
            f.write(encode_router(self))
        logger.info(f"Saved {self.kind} router checkpoint to {path}")

    @classmethod
    def load(cls, path: str) -> "RouterNetwork":
        with open(path, "rb") as f:
            return decode_router(f.read())


def encode_router(net: RouterNetwork) -> bytes:
    header = {
        "obs_dim": net.obs_dim,
        "experts": [[e, net.projections[e].input_dim] for e in sorted(net.projections)],
        "mode": net.mode,
        "kind": net.kind,
        "sections": [name for name, _ in net.nets()],
        "scalers": sorted(net.scalers),
        "meta": net.meta,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [ROUTER_MAGIC, struct.pack("<I", len(header_bytes)), header_bytes]
    chunks.extend(encode_net(section) for _, section in net.nets())
    for e in sorted(net.scalers):
        chunks.append(np.ascontiguousarray(net.scalers[e].mean, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(net.scalers[e].std, dtype="<f8").tobytes())
    return b"".join(chunks)


def decode_router(buf: bytes) -> RouterNetwork:
    if buf[: len(ROUTER_MAGIC)] != ROUTER_MAGIC:
        raise FormatError("Not a router checkpoint (bad magic)")
    offset = len(ROUTER_MAGIC)
    try:
        (length,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        header = json.loads(buf[offset : offset + length].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"Corrupt router header: {e}") from e
    offset += length
    sections = {}
    for name in header["sections"]:
        sections[name], offset = decode_net(buf, offset)
    dims = {int(e): int(d) for e, d in header["experts"]}
    scalers = {}
    for e in header.get("scalers", []):
        if int(e) not in dims:
            raise FormatError(f"Scaler for unknown expert {e}")
        dim = dims[int(e)]
        try:
            mean = np.frombuffer(buf, dtype="<f8", count=dim, offset=offset)
            std = np.frombuffer(buf, dtype="<f8", count=dim, offset=offset + 8 * dim)
        except ValueError as err:
            raise FormatError(f"Truncated scaler for expert {e}: {err}") from err
        offset += 16 * dim
        try:
            scalers[int(e)] = InputScaler(mean.copy(), std.copy())
        except ShapeError as err:
            raise FormatError(f"Invalid scaler for expert {e}: {err}") from err
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after router sections")
    projections = {int(e): sections[f"projection:{e}"] for e, _ in header["experts"]}
    for e, dim in header["experts"]:
        if projections[int(e)].input_dim != dim:
            raise FormatError(f"Projection {e} input dim disagrees with header")
    heads = {name: sections[f"head:{name}"] for name in HEADS[header["kind"]]}
    net = RouterNetwork(
        projections,
        sections["trunk"],
        heads,
        header["kind"],
        header["mode"],
        scalers,
        header.get("meta", {}),
    )
    if net.obs_dim != header["obs_dim"]:
        raise FormatError("Trunk input dim disagrees with header obs_dim")
    return net


@dataclass
class EncodeCache:
    # expert id -> (batch rows, stacked (scaled) embeddings, per-row weights)
    rows: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]]
    batch_size: int


def encode(
    net: RouterNetwork, observations: Sequence[Observation], mode: str
) -> tuple[np.ndarray, EncodeCache]:
    """Map observations to (B, obs_dim) router inputs.

    direct: projection of the most recently activated expert's embedding.
    aggregated: mean of the projections of every activated expert.
    """
    if mode not in OBSERVATION_MODES:
        raise ValueError(f"Unknown observation mode: {mode}")
    grouped: dict[int, tuple[list[int], list[np.ndarray], list[float]]] = {}
    for b, observation in enumerate(observations):
        if not observation:
            raise ContractError("Empty observation")
        items = observation[-1:] if mode == "direct" else observation
        weight = 1.0 / len(items)
        for expert, embedding in items:
            if expert not in net.projections:
                raise ContractError(f"Unknown expert id {expert}")
            rows, embeddings, weights = grouped.setdefault(expert, ([], [], []))
            rows.append(b)
            embeddings.append(embedding)
            weights.append(weight)

    h = np.zeros((len(observations), net.obs_dim))
    cache = EncodeCache({}, len(observations))
    for expert in sorted(grouped):
        rows, embeddings, weights = grouped[expert]
        idx = np.array(rows)
        x = np.stack(embeddings).astype(np.float64)
        if expert in net.scalers:
            x = net.scalers[expert].apply(x)
        w = np.array(weights)
        np.add.at(h, idx, forward(net.projections[expert], x) * w[:, None])
        cache.rows[expert] = (idx, x, w)
    return h, cache


def observed_experts(observations: Sequence[Observation], mode: str) -> set[int]:
    """Experts whose projection encode() feeds for these observations."""
    if mode == "direct":
        return {observation[-1][0] for observation in observations if observation}
    return {expert for observation in observations for expert, _ in observation}


def encode_backward(
    net: RouterNetwork, cache: EncodeCache, grad_h: np.ndarray
) -> dict[int, list[np.ndarray]]:
    grads = {}
    for expert, (idx, x, w) in cache.rows.items():
        upstream = grad_h[idx] * w[:, None]
        grads[expert], _ = backward(net.projections[expert], x, upstream, input_grad=False)
    return grads


def observe(net: RouterNetwork, observation: Observation, mode: str) -> np.ndarray:
    h, _ = encode(net, [observation], mode)
    return h[0]


@dataclass
class RouterCache:
    encode: EncodeCache
    h: np.ndarray
    features: np.ndarray


def head_outputs(
    net: RouterNetwork, observations: Sequence[Observation]
) -> tuple[dict[str, np.ndarray], RouterCache]:
    h, encode_cache = encode(net, observations, net.mode)
    features = forward(net.trunk, h)
    outputs = {name: forward(head, features) for name, head in net.heads.items()}
    return outputs, RouterCache(encode_cache, h, features)


def router_backward(
    net: RouterNetwork, cache: RouterCache, head_grads: dict[str, np.ndarray]
) -> list[np.ndarray]:
    """Gradients aligned with net.parameters() given d loss / d head outputs."""
    grad_features = np.zeros_like(cache.features)
    head_param_grads = {}
    for name, head in net.heads.items():
        upstream = head_grads.get(name)
        if upstream is None:
            upstream = np.zeros((cache.features.shape[0], head.output_dim))
        head_param_grads[name], g = backward(head, cache.features, upstream)
        grad_features += g
    trunk_grads, grad_h = backward(net.trunk, cache.h, grad_features)
    projection_grads = encode_backward(net, cache.encode, grad_h)

    grads = []
    for e in sorted(net.projections):
        if e in projection_grads:
            grads.extend(projection_grads[e])
        else:
            grads.extend(np.zeros_like(p) for p in net.projections[e].parameters())
    grads.extend(trunk_grads)
    for name in HEADS[net.kind]:
        grads.extend(head_param_grads[name])
    return grads


def dueling_combine(value: np.ndarray, advantage: np.ndarray) -> np.ndarray:
    """Q = V + A - mean(A) over the action axis."""
    return value + advantage - advantage.mean(axis=-1, keepdims=True)


def dueling_backward(grad_q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    grad_value = grad_q.sum(axis=-1, keepdims=True)
    grad_advantage = grad_q - grad_q.mean(axis=-1, keepdims=True)
    return grad_value, grad_advantage


def masked_argmax(scores: np.ndarray, mask: np.ndarray) -> int:
    if not mask.any():
        raise ContractError("No valid action")
    # argmax returns the lowest index among ties
    return int(np.argmax(np.where(mask, scores, -np.inf)))


def action_scores(net: RouterNetwork, observation: Observation) -> np.ndarray:
    """Q-values for a dueling router, policy logits for a policy router."""
    outputs, _ = head_outputs(net, [observation])
    if net.kind == "dueling":
        return dueling_combine(outputs["value"], outputs["advantage"])[0]
    return outputs["policy"][0]


def greedy_action(net: RouterNetwork, observation: Observation, mask: np.ndarray) -> int:
    return masked_argmax(action_scores(net, observation), mask)
