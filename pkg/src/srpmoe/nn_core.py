"""Dense network substrate shared by the DQN and policy-gradient routers.

Everything runs in float64 with hand-written reverse mode; the only layer type
is affine followed by tanh or identity.
"""

import argparse
import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np
from loguru import logger

from srpmoe.errors import DivergenceError, FormatError, ShapeError

ACTIVATION_CODES = {"tanh": 0, "linear": 1}
CHECKPOINT_MAGIC = b"SRPNN1"


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "tanh"

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class DenseNet:
    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("DenseNet needs at least one layer")
        for k, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATION_CODES:
                raise ValueError(f"Unknown activation: {layer.activation}")
            if layer.bias.shape != (layer.out_dim,):
                raise ShapeError(
                    f"Layer {k}: bias shape {layer.bias.shape} != ({layer.out_dim},)"
                )
            if k > 0 and self.layers[k - 1].out_dim != layer.in_dim:
                raise ShapeError(
                    f"Layer {k} expects {layer.in_dim} inputs, "
                    f"previous layer emits {self.layers[k - 1].out_dim}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @classmethod
    def create(
        cls, sizes: list[int], activations: list[str], rng: np.random.Generator
    ) -> "DenseNet":
        """Uniform init in +-sqrt(6/(fan_in+fan_out)), zero bias."""
        if len(activations) != len(sizes) - 1:
            raise ShapeError(
                f"{len(sizes) - 1} layers but {len(activations)} activations"
            )
        layers = []
        for fan_in, fan_out, activation in zip(sizes[:-1], sizes[1:], activations):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weight = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            layers.append(Layer(weight, np.zeros(fan_out), activation))
        return cls(layers)

    def parameters(self) -> list[np.ndarray]:
        params = []
        for layer in self.layers:
            params.extend([layer.weight, layer.bias])
        return params

    def copy(self) -> "DenseNet":
        return DenseNet(
            [
                Layer(layer.weight.copy(), layer.bias.copy(), layer.activation)
                for layer in self.layers
            ]
        )

    def load_from(self, other: "DenseNet") -> None:
        """Overwrite parameters in place with a bitwise copy of other's."""
        for mine, theirs in zip(self.parameters(), other.parameters(), strict=True):
            np.copyto(mine, theirs)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return np.tanh(z)
    return z


def _forward_cache(net: DenseNet, x) -> tuple[list[np.ndarray], list[np.ndarray]]:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim not in (1, 2) or a.shape[-1] != net.input_dim:
        raise ShapeError(f"Input shape {a.shape} does not match input_dim {net.input_dim}")
    inputs, outputs = [], []
    for layer in net.layers:
        inputs.append(a)
        a = _activate(a @ layer.weight.T + layer.bias, layer.activation)
        outputs.append(a)
    return inputs, outputs


def forward(net: DenseNet, x) -> np.ndarray:
    """x is a single vector (input_dim,) or a batch (B, input_dim)."""
    _, outputs = _forward_cache(net, x)
    return outputs[-1]


def backward(
    net: DenseNet, x, upstream_grad, input_grad: bool = True
) -> tuple[list[np.ndarray], np.ndarray | None]:
    """Return (gradients aligned with net.parameters(), gradient w.r.t. x).

    With input_grad=False the gradient w.r.t. x is not computed and None is returned.
    """
    inputs, outputs = _forward_cache(net, x)
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != outputs[-1].shape:
        raise ShapeError(
            f"Upstream gradient shape {g.shape} != output shape {outputs[-1].shape}"
        )
    grads: list[np.ndarray] = [np.empty(0)] * (2 * len(net.layers))
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        if layer.activation == "tanh":
            g = g * (1.0 - outputs[k] ** 2)
        a_in = inputs[k]
        if a_in.ndim == 1:
            grads[2 * k] = np.outer(g, a_in)
            grads[2 * k + 1] = g.copy()
        else:
            grads[2 * k] = g.T @ a_in
            grads[2 * k + 1] = g.sum(axis=0)
        if k > 0 or input_grad:
            g = g @ layer.weight
    return grads, g if input_grad else None


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0

    @classmethod
    def for_parameters(
        cls, params: list[np.ndarray], learning_rate: float = 1e-3, **kwargs
    ) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            learning_rate=learning_rate,
            **kwargs,
        )


def optimizer_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    active: list[bool] | None = None,
) -> tuple[list[np.ndarray], AdamState]:
    """Bias-corrected adaptive-moment update, applied to params in place.

    Entries flagged False in active are skipped: their parameters and moments are
    left untouched, as in lazy (sparse) Adam. The step counter is shared.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError(
            f"{len(params)} parameters, {len(grads)} gradients, {len(state.m)} moments"
        )
    if active is None:
        active = [True] * len(params)
    elif len(active) != len(params):
        raise ShapeError(f"{len(active)} active flags for {len(params)} parameters")
    for p, g, on in zip(params, grads, active):
        if not on:
            continue
        if p.shape != g.shape:
            raise ShapeError(f"Gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            raise DivergenceError("Non-finite gradient, update rejected")

    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    root_correction2 = np.sqrt(1.0 - state.beta2**state.step)
    step_size = state.learning_rate / correction1
    for p, g, m, v, on in zip(params, grads, state.m, state.v, active):
        if not on:
            continue
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        denom = np.sqrt(v)
        denom /= root_correction2
        denom += state.epsilon
        update = np.divide(m, denom, out=denom)
        update *= step_size
        p -= update
    return params, state


Loss = Callable[[np.ndarray], tuple[float, np.ndarray]]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-2) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries.

    Entries whose magnitude is at least floor are compared relatively. Smaller
    entries are compared against floor, so a bound tol on the result is an
    absolute bound of floor * tol there (1e-6 for the default floor and tol 1e-4).
    """
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def grad_check(net: DenseNet, x, loss: Loss, eps: float = 1e-4) -> float:
    """Max relative error between backward() and central differences.

    loss maps the network output to (value, d value / d output).
    """
    _, upstream = loss(forward(net, x))
    analytic, _ = backward(net, x, upstream)
    worst = 0.0
    for param, grad in zip(net.parameters(), analytic):
        numeric = np.zeros_like(param)
        for idx in np.ndindex(param.shape):
            original = param[idx]
            param[idx] = original + eps
            plus, _ = loss(forward(net, x))
            param[idx] = original - eps
            minus, _ = loss(forward(net, x))
            param[idx] = original
            numeric[idx] = (plus - minus) / (2 * eps)
        worst = max(worst, relative_error(grad, numeric))
    return worst


def encode_net(net: DenseNet) -> bytes:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(net.layers))]
    for layer in net.layers:
        chunks.append(
            struct.pack(
                "<IIB", layer.in_dim, layer.out_dim, ACTIVATION_CODES[layer.activation]
            )
        )
        chunks.append(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    return b"".join(chunks)


def decode_net(buf: bytes, offset: int = 0) -> tuple[DenseNet, int]:
    """Decode one network starting at offset; return it and the offset after it."""
    codes = {code: name for name, code in ACTIVATION_CODES.items()}
    try:
        if buf[offset : offset + len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
            raise FormatError(f"Bad network magic at offset {offset}")
        offset += len(CHECKPOINT_MAGIC)
        (count,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        layers = []
        for _ in range(count):
            in_dim, out_dim, code = struct.unpack_from("<IIB", buf, offset)
            offset += 9
            if code not in codes:
                raise FormatError(f"Unknown activation code {code}")
            n_weight = in_dim * out_dim
            weight = np.frombuffer(buf, dtype="<f8", count=n_weight, offset=offset)
            offset += 8 * n_weight
            bias = np.frombuffer(buf, dtype="<f8", count=out_dim, offset=offset)
            offset += 8 * out_dim
            layers.append(
                Layer(
                    weight.reshape(out_dim, in_dim).astype(np.float64),
                    bias.astype(np.float64),
                    codes[code],
                )
            )
    except (struct.error, ValueError) as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(f"Truncated network checkpoint: {e}") from e
    return DenseNet(layers), offset


def save_net(net: DenseNet, path: str) -> None:
    with open(path, "wb") as f:
        f.write(encode_net(net))
    logger.info(f"Saved network ({len(net.layers)} layers) to {path}")


def load_net(path: str) -> DenseNet:
    with open(path, "rb") as f:
        buf = f.read()
    net, offset = decode_net(buf)
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes in {path}")
    return net


def parse_args():
    parser = argparse.ArgumentParser("Inspect a network checkpoint")
    parser.add_argument("--checkpoint", type=str, required=True)
    return parser.parse_args()


if __name__ == "__main__":
    args = parse_args()
    net = load_net(args.checkpoint)
    for k, layer in enumerate(net.layers):
        print(f"layer {k}: {layer.in_dim} -> {layer.out_dim} ({layer.activation})")
