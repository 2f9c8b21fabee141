"""Dual-channel early-fusion U-Net built on the numpy autodiff core."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .tensor import GraphError, Parameter, Tensor


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 2
    out_channels: int = 1
    depth: int = 2
    base_channels: int = 8
    input_size: int = 64

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.in_channels < 1 or self.out_channels < 1 or self.base_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.input_size % (2 ** self.depth):
            raise ValueError(f"input_size {self.input_size} not divisible by 2**depth={2 ** self.depth}")

    def encoder_channels(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.depth)]

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * 2**self.depth


# Full-size architecture (224 px input, 64..512 encoder channels).
FULL_PRESET = UNetConfig(depth=4, base_channels=64, input_size=224)
# CPU-scale preset used by tests and the desk experiment.
DESK_PRESET = UNetConfig(depth=2, base_channels=8, input_size=64)


def _block_layout(cfg: UNetConfig) -> list[tuple[str, str, tuple[int, ...]]]:
    """Ordered (name, kind, shape) of every parameter."""
    layout: list[tuple[str, str, tuple[int, ...]]] = []

    def double_conv(prefix: str, cin: int, cout: int):
        for i, (a, b) in enumerate(((cin, cout), (cout, cout)), start=1):
            layout.append((f"{prefix}.conv{i}.weight", "conv", (b, a, 3, 3)))
            layout.append((f"{prefix}.conv{i}.bias", "bias", (b,)))
            layout.append((f"{prefix}.bn{i}.gamma", "gamma", (b,)))
            layout.append((f"{prefix}.bn{i}.beta", "beta", (b,)))

    enc = cfg.encoder_channels()
    cin = cfg.in_channels
    for i, c in enumerate(enc):
        double_conv(f"enc{i}", cin, c)
        cin = c
    double_conv("bottleneck", cin, cfg.bottleneck_channels)
    cin = cfg.bottleneck_channels
    for i in reversed(range(cfg.depth)):
        c = enc[i]
        layout.append((f"up{i}.weight", "tconv", (cin, c, 2, 2)))
        layout.append((f"up{i}.bias", "bias", (c,)))
        double_conv(f"dec{i}", 2 * c, c)
        cin = c
    layout.append(("head.weight", "head", (cfg.out_channels, cin, 1, 1)))
    layout.append(("head.bias", "bias", (cfg.out_channels,)))
    return layout


def fan_in(kind: str, shape: tuple[int, ...]) -> int:
    if kind in ("conv", "head"):
        return int(np.prod(shape[1:]))
    if kind == "tconv":
        # each output pixel of a stride-2 2x2 transposed conv sees one tap per input channel
        return shape[0]
    raise ValueError(kind)


class UNetModel:
    """Parameters, batch-norm buffers and the forward pass of the U-Net.

    A model is single-writer: forward/backward/update on one instance must be
    serialized by the caller.
    """

    def __init__(self, config: UNetConfig = DESK_PRESET, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.training = True
        self.params: dict[str, Parameter] = {}
        self.kinds: dict[str, str] = {}
        for name, kind, shape in _block_layout(config):
            self.params[name] = Parameter(np.zeros(shape, dtype=self.dtype), name)
            self.kinds[name] = kind
        self.buffers: dict[str, np.ndarray] = {}
        for name, kind, shape in _block_layout(config):
            if kind == "gamma":
                stem = name[: -len(".gamma")]
                self.buffers[f"{stem}.running_mean"] = np.zeros(shape, dtype=self.dtype)
                self.buffers[f"{stem}.running_var"] = np.ones(shape, dtype=self.dtype)
        init_parameters(self, seed)

    # -- modes -----------------------------------------------------------
    def train(self) -> "UNetModel":
        self.training = True
        return self

    def eval(self) -> "UNetModel":
        self.training = False
        return self

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_copy(self) -> dict[str, np.ndarray]:
        state = {k: p.data.copy() for k, p in self.params.items()}
        state.update({k: v.copy() for k, v in self.buffers.items()})
        return state

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data = np.array(state[k], dtype=self.dtype)
        for k in self.buffers:
            self.buffers[k] = np.array(state[k], dtype=self.dtype)

    def clone(self) -> "UNetModel":
        other = UNetModel.__new__(UNetModel)
        other.config = self.config
        other.dtype = self.dtype
        other.training = self.training
        other.kinds = dict(self.kinds)
        other.params = {k: Parameter(p.data.copy(), k, p.trainable) for k, p in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return other

    # -- forward ---------------------------------------------------------
    def _double_conv(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        for i in (1, 2):
            x = F.conv2d(x, p[f"{prefix}.conv{i}.weight"], p[f"{prefix}.conv{i}.bias"])
            x = F.batchnorm2d(
                x,
                p[f"{prefix}.bn{i}.gamma"],
                p[f"{prefix}.bn{i}.beta"],
                self.buffers[f"{prefix}.bn{i}.running_mean"],
                self.buffers[f"{prefix}.bn{i}.running_var"],
                self.training,
            )
            x = F.relu(x)
        return x

    def forward(self, batch) -> Tensor:
        """Map an N x C x H x W batch to an N x 1 x H x W probability map."""
        cfg = self.config
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=self.dtype))
        if x.data.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2:] != (cfg.input_size, cfg.input_size):
            raise ValueError(
                f"expected batch N x {cfg.in_channels} x {cfg.input_size} x {cfg.input_size}, got {x.shape}"
            )
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype), requires_grad=x.requires_grad)
        skips = []
        for i in range(cfg.depth):
            x = self._double_conv(f"enc{i}", x)
            skips.append(x)
            x = F.maxpool2x2(x)
        x = self._double_conv("bottleneck", x)
        p = self.params
        for i in reversed(range(cfg.depth)):
            x = F.conv_transpose2x2(x, p[f"up{i}.weight"], p[f"up{i}.bias"])
            x = F.concat(skips[i], x)
            x = self._double_conv(f"dec{i}", x)
        logits = F.conv1x1(x, p["head.weight"], p["head.bias"])
        return F.sigmoid(logits)

    __call__ = forward

    def predict(self, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
        """Eval-mode probabilities for an N x C x H x W array, without recording a graph."""
        was_training = self.training
        self.eval()
        saved = {k: p.requires_grad for k, p in self.params.items()}
        for p in self.params.values():
            p.requires_grad = False
        try:
            outs = [self.forward(images[i : i + batch_size]).data for i in range(0, len(images), batch_size)]
        finally:
            for k, p in self.params.items():
                p.requires_grad = saved[k]
            self.training = was_training
        return np.concatenate(outs, axis=0)


def init_parameters(model: UNetModel, seed: int) -> None:
    """Uniform(+-sqrt(6/fan_in)) convolution weights, zero biases, unit gamma, zero beta."""
    rng = np.random.default_rng(seed)
    for name, p in model.params.items():
        kind = model.kinds[name]
        if kind in ("conv", "tconv", "head"):
            bound = np.sqrt(6.0 / fan_in(kind, p.shape))
            p.data = rng.uniform(-bound, bound, size=p.shape).astype(model.dtype)
        elif kind == "gamma":
            p.data = np.ones(p.shape, dtype=model.dtype)
        else:
            p.data = np.zeros(p.shape, dtype=model.dtype)
        p.grad = None
    for k, v in model.buffers.items():
        v[...] = 1.0 if k.endswith("running_var") else 0.0


def backward(model: UNetModel, loss: Tensor, upstream: float | None = None) -> None:
    """Populate ``.grad`` on every trainable parameter of ``model`` from ``loss``."""
    if not loss.has_graph:
        raise GraphError("no recorded forward pass to differentiate")
    model.zero_grad()
    loss.backward(upstream)
    for p in model.params.values():
        if p.trainable and p.grad is None:
            p.grad = np.zeros_like(p.data)
