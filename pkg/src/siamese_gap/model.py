"""The Siamese-GAP twin network: shared backbone, per-block pooling taps,
element-wise fusion of the two branch vectors and a softmax head."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, replace
from typing import Iterator, NamedTuple

import numpy as np

from . import ops
from .errors import ConfigurationError
from .ops import RunningStats
from .tensor import Tensor

POOLINGS = ("gap", "gmp")
CLASS_NAMES = ("KL0", "KL2")


@dataclass(frozen=True)
class BlockSpec:
    layer_count: int
    channels: int
    first_layer_stride: int


CANONICAL_BLOCKS = (
    BlockSpec(2, 32, 1),
    BlockSpec(3, 64, 2),
    BlockSpec(4, 128, 2),
    BlockSpec(4, 256, 2),
)

# Rows of the GAP/GMP ablation, in table order.
ABLATION_TAPS = (
    (4,),
    (1, 4),
    (2, 4),
    (3, 4),
    (1, 2, 4),
    (1, 2, 3, 4),
)


def parse_taps(value) -> tuple[int, ...]:
    """Accept ``"p1,p4"``, ``"1,4"`` or an iterable of ints."""
    if isinstance(value, str):
        items = [v.strip().lower().lstrip("p") for v in value.split(",") if v.strip()]
        try:
            value = [int(v) for v in items]
        except ValueError as exc:
            raise ConfigurationError(f"cannot parse tap list {value!r}") from exc
    return tuple(sorted(set(int(v) for v in value)))


@dataclass(frozen=True)
class ModelConfig:
    pooling: str = "gap"
    taps: tuple[int, ...] = (1, 2, 3, 4)
    dropout_p: float = 0.2
    num_classes: int = 2
    input_size: int = 128
    in_channels: int = 1
    blocks: tuple[BlockSpec, ...] = CANONICAL_BLOCKS

    def __post_init__(self):
        object.__setattr__(self, "taps", parse_taps(self.taps))
        object.__setattr__(self, "pooling", str(self.pooling).lower())
        nblocks = len(self.blocks)
        if self.pooling not in POOLINGS:
            raise ConfigurationError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if not self.taps or any(t < 1 or t > nblocks for t in self.taps):
            raise ConfigurationError(f"taps must be a subset of 1..{nblocks}, got {self.taps}")
        if nblocks not in self.taps:
            raise ConfigurationError(f"the last block (P{nblocks}) must always be tapped")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.input_size < 1:
            raise ConfigurationError("input_size must be positive")

    @property
    def fused_width(self) -> int:
        return sum(self.blocks[t - 1].channels for t in self.taps)

    @property
    def tap_label(self) -> str:
        return ",".join(f"p{t}" for t in self.taps)


@dataclass(frozen=True)
class ConvLayer:
    name: str
    block: int
    in_channels: int
    out_channels: int
    stride: int


def layer_plan(config: ModelConfig) -> list[ConvLayer]:
    plan = []
    cin = config.in_channels
    for b, spec in enumerate(config.blocks, start=1):
        for j in range(1, spec.layer_count + 1):
            stride = spec.first_layer_stride if j == 1 else 1
            plan.append(ConvLayer(f"block{b}.layer{j}", b, cin, spec.channels, stride))
            cin = spec.channels
    return plan


def block_output_sizes(config: ModelConfig) -> list[int]:
    size, sizes = config.input_size, []
    for spec in config.blocks:
        size = ops.conv_output_size(size, spec.first_layer_stride, 1)
        sizes.append(size)
    return sizes


class BranchOutput(NamedTuple):
    activations: list[Tensor]  # final ReLU output of every block, (N, H, W, C)
    pooled: list[Tensor]  # pooled features of the tapped blocks, P1 -> P4
    vector: Tensor  # concatenation of ``pooled``


class PairOutput(NamedTuple):
    logits: Tensor
    probabilities: Tensor
    lateral: BranchOutput
    medial: BranchOutput


class SiameseGapNetwork:
    """One backbone parameter store evaluated on both patches of a pair.

    Parameters live in ``self.params`` (name -> Tensor) and batch-norm
    running statistics in ``self.running``; there is no second copy for
    the medial branch.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.layers = layer_plan(config)
        self.params: dict[str, Tensor] = {}
        self.running: dict[str, RunningStats] = {}
        for layer in self.layers:
            self._param(f"{layer.name}.conv.weight", (layer.out_channels, layer.in_channels, 3, 3))
            self._param(f"{layer.name}.bn.gamma", (layer.out_channels,), fill=1.0)
            self._param(f"{layer.name}.bn.beta", (layer.out_channels,))
            self.running[f"{layer.name}.bn"] = RunningStats.initial(layer.out_channels)
        self._param("head.weight", (config.fused_width, config.num_classes))
        self._param("head.bias", (config.num_classes,))

    def _param(self, name, shape, fill=0.0):
        self.params[name] = Tensor(np.full(shape, fill), requires_grad=True, name=name)

    # -- parameter management -------------------------------------------

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def count_params(self) -> int:
        return count_params(self)

    @contextlib.contextmanager
    def frozen(self):
        """Temporarily stop parameters from collecting gradients."""
        flags = {n: p.requires_grad for n, p in self.params.items()}
        for p in self.params.values():
            p.requires_grad = False
        try:
            yield self
        finally:
            for n, p in self.params.items():
                p.requires_grad = flags[n]

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and running statistic, keyed by name."""
        state = {n: p.data.copy() for n, p in self.params.items()}
        for n, rs in self.running.items():
            state[f"{n}.running_mean"] = rs.mean.copy()
            state[f"{n}.running_var"] = rs.var.copy()
        return state

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.state_arrays())
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ConfigurationError(f"state mismatch: missing={missing[:3]} extra={extra[:3]}")
        for n, p in self.params.items():
            if state[n].shape != p.shape:
                raise ConfigurationError(f"{n}: shape {state[n].shape} != {p.shape}")
            p.data = np.array(state[n], dtype=p.dtype)
        for n, rs in self.running.items():
            rs.mean = np.array(state[f"{n}.running_mean"], dtype=rs.mean.dtype)
            rs.var = np.array(state[f"{n}.running_var"], dtype=rs.var.dtype)

    def astype(self, dtype) -> "SiameseGapNetwork":
        """Copy of the network with parameters and statistics in ``dtype``."""
        other = SiameseGapNetwork(self.config)
        for n, p in self.params.items():
            other.params[n].data = p.data.astype(dtype)
        for n, rs in self.running.items():
            other.running[n] = RunningStats(rs.mean.astype(dtype), rs.var.astype(dtype), rs.momentum)
        return other

    # -- forward ---------------------------------------------------------

    def _check_input(self, x: Tensor) -> None:
        s, c = self.config.input_size, self.config.in_channels
        if x.ndim != 4 or x.shape[1:] != (c, s, s):
            raise ConfigurationError(f"expected input (N, {c}, {s}, {s}), got {x.shape}")

    def forward_branch(self, x: Tensor, training: bool = False, trace: list | None = None) -> BranchOutput:
        """Run one (N, C, S, S) patch batch through the shared backbone.

        Activations are computed channels-last, so the returned block
        outputs have shape (N, H, W, channels). If ``trace`` is a list, the
        pre-ReLU array of every layer is appended to it.
        """
        self._check_input(x)
        pool = ops.gap if self.config.pooling == "gap" else ops.gmp
        activations, pooled = [], []
        h = ops.transpose(x, (0, 2, 3, 1))
        for i, layer in enumerate(self.layers):
            p = layer.name
            h = ops.conv2d(h, self.params[f"{p}.conv.weight"], layer.stride, 1, channels_last=True)
            h = ops.batchnorm2d(
                h,
                self.params[f"{p}.bn.gamma"],
                self.params[f"{p}.bn.beta"],
                self.running[f"{p}.bn"],
                training=training,
                channels_last=True,
            )
            if trace is not None:
                trace.append(h.data)
            h = ops.relu(h)
            last_in_block = i + 1 == len(self.layers) or self.layers[i + 1].block != layer.block
            if last_in_block:
                activations.append(h)
                if layer.block in self.config.taps:
                    pooled.append(pool(h, channels_last=True))
        vector = pooled[0] if len(pooled) == 1 else ops.concat(pooled)
        return BranchOutput(activations, pooled, vector)

    def forward_pair(
        self,
        x_lat: Tensor,
        x_med: Tensor,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> PairOutput:
        """Logits and class probabilities for a batch of (lateral, medial) pairs."""
        if x_lat.shape != x_med.shape:
            raise ConfigurationError(f"patch shapes differ: {x_lat.shape} vs {x_med.shape}")
        lat = self.forward_branch(x_lat, training)
        med = self.forward_branch(x_med, training)
        fused = ops.add(lat.vector, med.vector)
        fused = ops.dropout(fused, self.config.dropout_p, training, rng)
        logits = ops.linear(fused, self.params["head.weight"], self.params["head.bias"])
        return PairOutput(logits, ops.softmax(logits), lat, med)


def count_params(model: SiameseGapNetwork) -> int:
    """Trainable scalars; the shared backbone counts once, running stats not at all."""
    return int(sum(p.data.size for p in model.params.values()))


def kaiming_init(model: SiameseGapNetwork, seed: int) -> SiameseGapNetwork:
    """He-normal weights (std = sqrt(2 / fan_in)), unit BN scale, zero shifts."""
    rng = np.random.default_rng(seed)
    for name, p in model.params.items():
        if name.endswith("conv.weight"):
            fan_in = p.shape[1] * p.shape[2] * p.shape[3]
            p.data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=p.shape).astype(p.dtype)
        elif name == "head.weight":
            p.data = rng.normal(0.0, np.sqrt(2.0 / p.shape[0]), size=p.shape).astype(p.dtype)
        elif name.endswith("bn.gamma"):
            p.data = np.ones(p.shape, dtype=p.dtype)
        else:
            p.data = np.zeros(p.shape, dtype=p.dtype)
        p.grad = None
    for rs in model.running.values():
        rs.mean[...] = 0.0
        rs.var[...] = 1.0
    return model


def build(config: ModelConfig | None = None, seed: int = 0) -> SiameseGapNetwork:
    """Construct and Kaiming-initialise a network for ``config``."""
    return kaiming_init(SiameseGapNetwork(config or ModelConfig()), seed)


def with_taps(config: ModelConfig, taps, pooling: str | None = None) -> ModelConfig:
    return replace(config, taps=parse_taps(taps), pooling=pooling or config.pooling)
