"""Residual connection variants, stage wiring and network assembly.

Block layouts (F is the branch between the identity operations, F' the
interblock modules after the addition)::

    origin / danet-c   F = conv-BN-SN-conv-BN        F' = SN
    tdbn               F = conv-tdBN-SN-conv-tdBN    F' = SN
    baa / danet-d      F = conv-BN-SN-conv           F' = BN-SN
    sew                F = conv-BN-SN-conv-BN-SN     F' = (none)
    danet-a  (PA-A)    F = SN-conv-BN-SN-conv-BN     F' = (none)
    danet-b  (PA-B)    F = BN-SN-conv-BN-SN-conv     F' = (none)

danet-c and danet-d reuse the origin and baa blocks; they differ only in
that their stages are densely additive.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Tensor, add, concat_channels_n, global_avgpool, mean_time, repeat_time
from .layers import (
    BatchNorm,
    Conv2d,
    Identity,
    Linear,
    Module,
    Sequential,
    SpikingNeuron,
)
from .neuron import NeuronConfig


class ConnectionVariant(str, enum.Enum):
    ORIGIN = "origin"
    TDBN = "tdbn"
    BAA = "baa"
    SEW = "sew"
    DANET_A = "danet-a"
    DANET_B = "danet-b"
    DANET_C = "danet-c"
    DANET_D = "danet-d"

    @classmethod
    def parse(cls, value) -> "ConnectionVariant":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {"pa-a": "danet-a", "pa-b": "danet-b", "danet-a": "danet-a", "daneta": "danet-a",
                   "danetb": "danet-b", "danetc": "danet-c", "danetd": "danet-d"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown connection variant {value!r}") from None

    @property
    def trunk(self) -> str:
        """'spike', 'integer' or 'analog': what travels between blocks."""
        if self is ConnectionVariant.SEW:
            return "integer"
        if self in (ConnectionVariant.DANET_A, ConnectionVariant.DANET_B):
            return "analog"
        return "spike"

    @property
    def dense(self) -> bool:
        return self in (ConnectionVariant.DANET_C, ConnectionVariant.DANET_D)

    @property
    def layout(self) -> "ConnectionVariant":
        """Block layout this variant borrows."""
        return {ConnectionVariant.DANET_C: ConnectionVariant.ORIGIN,
                ConnectionVariant.DANET_D: ConnectionVariant.BAA}.get(self, self)


V = ConnectionVariant


@dataclass
class TopologySpec:
    variant: ConnectionVariant = V.DANET_A
    stages: tuple = ((2, 16), (2, 32), (2, 64))
    time_steps: int = 4
    aggregation: str = "add"
    in_channels: int = 1
    num_classes: int = 10
    zero_init_last_bn: bool = False
    wiring: str | None = None  # None: chain, or dense for danet-c/d

    def __post_init__(self):
        self.variant = V.parse(self.variant)
        self.stages = tuple((int(n), int(c)) for n, c in self.stages)
        self.validate()

    @property
    def stage_wiring(self) -> str:
        if self.wiring is not None:
            return self.wiring
        return "dense" if self.variant.dense else "chain"

    @property
    def depth(self) -> int:
        return sum(n for n, _ in self.stages)

    def validate(self) -> None:
        if not self.stages:
            raise ValueError("at least one stage is required")
        for n, c in self.stages:
            if n < 1 or c < 1:
                raise ValueError(f"invalid stage (blocks={n}, channels={c})")
        if self.time_steps < 1:
            raise ValueError("time_steps must be >= 1")
        if self.aggregation not in ("add", "concat"):
            raise ValueError(f"aggregation must be 'add' or 'concat', got {self.aggregation!r}")
        if self.wiring not in (None, "chain", "dense"):
            raise ValueError(f"wiring must be 'chain' or 'dense', got {self.wiring!r}")
        if self.aggregation == "concat" and self.stage_wiring != "dense":
            raise ValueError("concat aggregation needs densely wired stages")
        if self.in_channels < 1 or self.num_classes < 1:
            raise ValueError("in_channels and num_classes must be >= 1")

    def to_dict(self) -> dict:
        return {"variant": self.variant.value, "stages": [list(s) for s in self.stages],
                "time_steps": self.time_steps, "aggregation": self.aggregation,
                "in_channels": self.in_channels, "num_classes": self.num_classes,
                "zero_init_last_bn": self.zero_init_last_bn, "wiring": self.wiring}

    @classmethod
    def from_dict(cls, d: dict) -> "TopologySpec":
        return cls(**d)


class BlockUnit(Module):
    """One residual block: ``F_prime(F(x) + shortcut(x))``."""

    def __init__(self, variant: ConnectionVariant, F: Sequential, shortcut: Module,
                 F_prime: Sequential, stride: int, in_ch: int, out_ch: int):
        self.variant = variant
        self.F = F
        self.shortcut = shortcut
        self.F_prime = F_prime
        self.stride = stride
        self.in_ch = in_ch
        self.out_ch = out_ch

    @property
    def has_interblock(self) -> bool:
        return len(self.F_prime) > 0

    @property
    def identity_shortcut(self) -> bool:
        return isinstance(self.shortcut, Identity)

    def forward(self, x, T):
        y = add(self.F(x, T), self.shortcut(x, T))
        return self.F_prime(y, T) if self.has_interblock else y

    def batchnorms(self) -> list[BatchNorm]:
        return [m for m in self.F if isinstance(m, BatchNorm)]

    def spiking_neurons(self) -> list[SpikingNeuron]:
        return [m for _, m in self.named_modules() if isinstance(m, SpikingNeuron)]

    def first_neuron(self) -> SpikingNeuron:
        """First SN on the main branch (F, then F')."""
        for m in list(self.F) + list(self.F_prime):
            if isinstance(m, SpikingNeuron):
                return m
        raise LookupError("block has no spiking neuron")


class ResidualBranch(Module):
    """Only the F part of a block (parameters shared with it)."""

    def __init__(self, block: BlockUnit):
        self.block = block

    def forward(self, x, T):
        return self.block.F(x, T)


class ChainStage(Module):
    def __init__(self, blocks):
        if not blocks:
            raise ValueError("a stage needs at least one block")
        self.blocks = list(blocks)
        self.record = False
        self.outputs: list[np.ndarray] = []

    def forward(self, x, T):
        if self.record:
            self.outputs = []
        for block in self.blocks:
            x = block(x, T)
            if self.record:
                self.outputs.append(x.data)
        return x


class DenseStage(Module):
    """Densely additive stage.

    ``features = [layer_0(x)]``; every later layer consumes the sum (or the
    channel concatenation) of all features so far and appends its output;
    the stage returns the sum (or concatenation) of all features. The sum
    is a left fold in feature order.
    """

    def __init__(self, layers, aggregation: str = "add"):
        if not layers:
            raise ValueError("a stage needs at least one layer")
        if aggregation not in ("add", "concat"):
            raise ValueError(f"unknown aggregation {aggregation!r}")
        self.layers = list(layers)
        self.aggregation = aggregation
        self.record = False
        self.outputs: list[np.ndarray] = []

    @property
    def blocks(self):
        return [l.block if isinstance(l, ResidualBranch) else l for l in self.layers
                if isinstance(l, (BlockUnit, ResidualBranch))]

    def forward(self, x, T):
        if self.record:
            self.outputs = []
        first = self.layers[0](x, T)
        features = [first]
        acc = first
        if self.record:
            self.outputs.append(acc.data)
        for layer in self.layers[1:]:
            inp = acc if self.aggregation == "add" else concat_channels_n(features)
            new = layer(inp, T)
            features.append(new)
            if self.aggregation == "add":
                acc = add(acc, new)
            if self.record:
                self.outputs.append(acc.data if self.aggregation == "add" else new.data)
        return acc if self.aggregation == "add" else concat_channels_n(features)


def _bn(variant: ConnectionVariant, ch: int, cfg: NeuronConfig, dtype, feeds_neuron: bool) -> BatchNorm:
    if variant is V.TDBN:
        return BatchNorm(ch, mode="tdbn", v_th=cfg.v_th, dtype=dtype)
    if variant.layout is V.BAA and feeds_neuron:
        # BN-after-addition layout: BNs in front of neurons start at scale v_th
        return BatchNorm(ch, gamma_init=cfg.v_th, dtype=dtype)
    return BatchNorm(ch, dtype=dtype)


def _shortcut(variant: ConnectionVariant, in_ch: int, out_ch: int, stride: int,
              cfg: NeuronConfig, rng, dtype) -> Module:
    if stride == 1 and in_ch == out_ch:
        return Identity()
    conv = Conv2d(in_ch, out_ch, kernel=1, stride=stride, padding=0, rng=rng, dtype=dtype)
    trunk = variant.trunk
    if trunk == "spike":
        return Sequential(conv, _bn(variant.layout, out_ch, cfg, dtype, feeds_neuron=False))
    if variant is V.SEW:
        return Sequential(conv, BatchNorm(out_ch, dtype=dtype), SpikingNeuron(cfg))
    if variant is V.DANET_A:
        return Sequential(SpikingNeuron(cfg), conv, BatchNorm(out_ch, dtype=dtype))
    return Sequential(BatchNorm(in_ch, dtype=dtype), SpikingNeuron(cfg), conv)


def build_block(variant, in_ch: int, out_ch: int, stride: int = 1, neuron: NeuronConfig | None = None,
                rng=None, dtype=np.float32, zero_init_last_bn: bool = False) -> BlockUnit:
    """Build one residual block of the given connection variant.

    A stride of 2 or a channel change gives a 1x1 projection shortcut whose
    ends match the trunk type (spikes in and out for sew, SN first for
    danet-a, BN-SN first for danet-b). ``zero_init_last_bn`` zeroes the
    scale of the last BN inside F, which makes F output zero at init.
    """
    variant = V.parse(variant)
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if in_ch < 1 or out_ch < 1:
        raise ValueError("channel counts must be positive")
    cfg = neuron or NeuronConfig()
    rng = np.random.default_rng(rng)
    lay = variant.layout

    def conv(i, o, s=1):
        return Conv2d(i, o, 3, s, 1, rng=rng, dtype=dtype)

    def sn():
        return SpikingNeuron(cfg)

    if lay in (V.ORIGIN, V.TDBN):
        F = Sequential(conv(in_ch, out_ch, stride), _bn(lay, out_ch, cfg, dtype, True), sn(),
                       conv(out_ch, out_ch), _bn(lay, out_ch, cfg, dtype, False))
        F_prime = Sequential(sn())
    elif lay is V.BAA:
        F = Sequential(conv(in_ch, out_ch, stride), _bn(lay, out_ch, cfg, dtype, True), sn(),
                       conv(out_ch, out_ch))
        F_prime = Sequential(_bn(lay, out_ch, cfg, dtype, True), sn())
    elif lay is V.SEW:
        F = Sequential(conv(in_ch, out_ch, stride), BatchNorm(out_ch, dtype=dtype), sn(),
                       conv(out_ch, out_ch), BatchNorm(out_ch, dtype=dtype), sn())
        F_prime = Sequential()
    elif lay is V.DANET_A:
        F = Sequential(sn(), conv(in_ch, out_ch, stride), BatchNorm(out_ch, dtype=dtype), sn(),
                       conv(out_ch, out_ch), BatchNorm(out_ch, dtype=dtype))
        F_prime = Sequential()
    elif lay is V.DANET_B:
        F = Sequential(BatchNorm(in_ch, dtype=dtype), sn(), conv(in_ch, out_ch, stride),
                       BatchNorm(out_ch, dtype=dtype), sn(), conv(out_ch, out_ch))
        F_prime = Sequential()
    else:  # pragma: no cover - enum is closed
        raise ValueError(variant)

    block = BlockUnit(variant, F, _shortcut(variant, in_ch, out_ch, stride, cfg, rng, dtype),
                      F_prime, stride, in_ch, out_ch)
    if zero_init_last_bn:
        block.batchnorms()[-1].params.gamma.data[:] = 0.0
    return block


def build_stage_chain(blocks) -> ChainStage:
    return ChainStage(blocks)


def build_stage_dense(blocks, aggregation: str = "add") -> DenseStage:
    """Densely additive wiring of full blocks (F then F')."""
    return DenseStage(blocks, aggregation)


def rewrite_chain_as_dense(stage: ChainStage) -> DenseStage:
    """Rewire a stage of blocks without interblock modules as a dense stage.

    The first block is kept whole; later blocks contribute only their F
    branch, since the identity path is carried by the running sum. The
    result shares parameters with ``stage`` and computes the same function.
    """
    blocks = stage.blocks
    for b in blocks:
        if b.variant.trunk == "spike" or b.has_interblock:
            raise ValueError(f"{b.variant.value} blocks have interblock modules; "
                             "dense rewiring would change the function")
    for b in blocks[1:]:
        if not b.identity_shortcut:
            raise ValueError("only the first block of a stage may use a projection shortcut")
    return DenseStage([blocks[0]] + [ResidualBranch(b) for b in blocks[1:]], "add")


class Network(Module):
    """Stem, residual stages and classifier head.

    Images [B,C,H,W] are fed identically at every time step; logits are
    averaged over the T steps.
    """

    def __init__(self, spec: TopologySpec, neuron: NeuronConfig | None = None, seed: int = 0,
                 dtype=np.float32):
        self.spec = spec
        self.neuron = neuron or NeuronConfig()
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        variant = spec.variant
        cfg = self.neuron
        c0 = spec.stages[0][1]

        stem = [Conv2d(spec.in_channels, c0, 3, 1, 1, rng=rng, dtype=dtype),
                _bn(variant.layout, c0, cfg, dtype, feeds_neuron=variant.trunk != "analog")]
        if variant.trunk != "analog":
            stem.append(SpikingNeuron(cfg))
        self.stem = Sequential(*stem)

        self.stages = []
        in_ch = c0
        dense = spec.stage_wiring == "dense"
        concat = spec.aggregation == "concat"
        for si, (n_blocks, ch) in enumerate(spec.stages):
            blocks = []
            for bi in range(n_blocks):
                stride = 2 if (si > 0 and bi == 0) else 1
                bin_ch = in_ch if bi == 0 else (ch * bi if concat else ch)
                blocks.append(build_block(variant, bin_ch, ch, stride, cfg, rng, dtype,
                                          spec.zero_init_last_bn))
            if dense:
                stage = build_stage_dense(blocks, spec.aggregation)
            else:
                stage = build_stage_chain(blocks)
            self.stages.append(stage)
            in_ch = ch * n_blocks if concat else ch

        self.head_neuron = SpikingNeuron(cfg) if variant.trunk == "analog" else None
        self.fc = Linear(in_ch, spec.num_classes, rng=rng, dtype=dtype)

    @property
    def variant(self) -> ConnectionVariant:
        return self.spec.variant

    def forward_features(self, x: Tensor, T: int) -> Tensor:
        x = self.stem(x, T)
        for stage in self.stages:
            x = stage(x, T)
        if self.head_neuron is not None:
            x = self.head_neuron(x, T)
        return global_avgpool(x)

    def forward(self, images: Tensor, T: int | None = None) -> Tensor:
        T = T or self.spec.time_steps
        if images.ndim != 4:
            raise ValueError(f"expected images [B,C,H,W], got {images.shape}")
        x = repeat_time(images, T)
        logits = self.fc(self.forward_features(x, T), T)
        return mean_time(logits, T)

    def __call__(self, images, T=None):
        return self.forward(images, T)

    def spiking_neurons(self) -> list[tuple[str, SpikingNeuron]]:
        return [(n, m) for n, m in self.named_modules() if isinstance(m, SpikingNeuron)]

    def blocks(self) -> list[list[BlockUnit]]:
        return [stage.blocks for stage in self.stages]

    def set_recording(self, on: bool = True) -> None:
        for _, m in self.named_modules():
            if isinstance(m, (SpikingNeuron, ChainStage, DenseStage)):
                m.record = on
                if not on and isinstance(m, SpikingNeuron):
                    m.clear()

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def build_network(spec: TopologySpec, neuron: NeuronConfig | None = None, seed: int = 0,
                  dtype=np.float32) -> Network:
    spec.validate()
    return Network(spec, neuron, seed, dtype)


def depth_ladder(rung: int, channels=(16, 32, 64)) -> tuple:
    """Stage layout (n, n, n) with n = 2, 4, 8, 16 for rung 0..3."""
    n = 2 ** (rung + 1)
    return tuple((n, c) for c in channels)


def stages_for_depth(depth: int, channels=(16, 32)) -> tuple:
    """Split ``depth`` blocks evenly over the given stages."""
    k = len(channels)
    if depth < k:
        raise ValueError(f"depth {depth} is smaller than the number of stages {k}")
    base, extra = divmod(depth, k)
    return tuple((base + (1 if i < extra else 0), c) for i, c in enumerate(channels))


def with_variant(spec: TopologySpec, variant) -> TopologySpec:
    return replace(spec, variant=V.parse(variant))
