"""Frozen convolutional feature extractor with optional channel-gating adapters.

The extractor is a stack of conv blocks (3x3 stride-1 convolution, ReLU, 2x2
average pool) ending in global average pooling, so the feature dimension
equals the last block's channel count.  An adapter attached to block ``i``
reads the block input, squeezes it through a two-layer bottleneck MLP, and
gates the block output channel-wise:

    b_i = sigmoid(W2 . relu(W1 . gap(f_prev)))
    f_i = g_i(f_prev) * b_i

Backbone weights are frozen at creation; adapters and everything downstream
decide their own trainability.  With no adapter attached the forward path is
bit-identical to a backbone that never had adapter machinery.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Parameter, ParamRegistry, Tensor, functional as F
from .errors import ConfigError, ShapeMismatchError
from .rng import derive_rng, he_init
from .validation import check_patch_stack


@dataclass(frozen=True)
class BackboneConfig:
    """Architecture knobs for the feature extractor.

    ``adapter_positions=None`` means the last block only.  Each block halves
    the spatial size, so ``input_size`` must be at least ``4 * n_blocks`` for
    the final map to stay non-empty.
    """

    block_channels: tuple[int, ...] = (16, 32, 64)
    input_size: int = 32
    input_channels: int = 3
    adapter_positions: tuple[int, ...] | None = None
    adapter_bottleneck_ratio: int = 4

    @property
    def n_blocks(self) -> int:
        return len(self.block_channels)

    @property
    def feature_dim(self) -> int:
        return self.block_channels[-1]

    def positions(self) -> tuple[int, ...]:
        if self.adapter_positions is None:
            return (self.n_blocks - 1,)
        return tuple(sorted(set(int(p) for p in self.adapter_positions)))

    def validate(self) -> None:
        if self.n_blocks < 1:
            raise ConfigError("at least one block is required")
        if any(c < 1 for c in self.block_channels):
            raise ConfigError(f"block channel counts must be positive: {self.block_channels}")
        if self.input_channels < 1:
            raise ConfigError("input_channels must be positive")
        if self.input_size < 4 * self.n_blocks:
            raise ConfigError(
                f"input_size {self.input_size} too small for {self.n_blocks} halving "
                f"blocks (needs >= {4 * self.n_blocks})"
            )
        bad = [p for p in self.positions() if not 0 <= p < self.n_blocks]
        if bad:
            raise ConfigError(f"adapter positions {bad} outside blocks 0..{self.n_blocks - 1}")
        if self.adapter_bottleneck_ratio < 1:
            raise ConfigError("adapter_bottleneck_ratio must be a positive integer")


@dataclass
class ConvBlock:
    weight: Parameter
    bias: Parameter

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


@dataclass
class AdapterBlock:
    W1: Parameter
    W2: Parameter

    @property
    def in_channels(self) -> int:
        return self.W1.shape[1]

    @property
    def out_channels(self) -> int:
        return self.W2.shape[0]


@dataclass
class Backbone:
    config: BackboneConfig
    registry: ParamRegistry
    blocks: list[ConvBlock]
    adapters: dict[int, AdapterBlock] = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim


def init_backbone(config: BackboneConfig, seed: int,
                  registry: ParamRegistry | None = None,
                  with_adapters: bool = False) -> Backbone:
    """Build a frozen backbone with deterministic He-style weights.

    Weights come from a generator derived from (seed, block index, role), so
    the same (config, seed) is bit-identical regardless of construction order
    elsewhere.  Conv parameters are frozen; adapters, if requested, start
    trainable with a zero second layer (gate exactly 0.5 everywhere).
    """
    config.validate()
    if registry is None:
        registry = ParamRegistry()
    blocks: list[ConvBlock] = []
    cin = config.input_channels
    for i, cout in enumerate(config.block_channels):
        rng = derive_rng(seed, "backbone", i)
        fan_in = cin * 9
        weight = registry.create(f"backbone.{i}.conv.weight",
                                 he_init(rng, (cout, cin, 3, 3), fan_in),
                                 trainable=False)
        bias = registry.create(f"backbone.{i}.conv.bias", np.zeros(cout), trainable=False)
        blocks.append(ConvBlock(weight, bias))
        cin = cout
    backbone = Backbone(config, registry, blocks)
    if with_adapters:
        attach_adapters(backbone, seed)
    return backbone


def attach_adapters(backbone: Backbone, seed: int) -> None:
    """Create trainable adapters at the configured block positions."""
    config = backbone.config
    for pos in config.positions():
        cin = config.input_channels if pos == 0 else config.block_channels[pos - 1]
        cout = config.block_channels[pos]
        hidden = max(1, cin // config.adapter_bottleneck_ratio)
        rng = derive_rng(seed, "adapter", pos)
        w1 = backbone.registry.create(f"adapter.{pos}.W1", he_init(rng, (hidden, cin), cin))
        w2 = backbone.registry.create(f"adapter.{pos}.W2", np.zeros((cout, hidden)))
        backbone.adapters[pos] = AdapterBlock(w1, w2)


def adapter_gate(feature_map: Tensor, adapter: AdapterBlock) -> Tensor:
    """Gate vector in (0,1) per output channel, from the block input map.

    Accepts (N, C, H, W) and returns (N, C_out); a single (C, H, W) map
    returns a flat (C_out,) vector.
    """
    single = feature_map.ndim == 3
    fmap = F.reshape(feature_map, (1, *feature_map.shape)) if single else feature_map
    if fmap.ndim != 4 or fmap.shape[1] != adapter.in_channels:
        raise ShapeMismatchError("adapter_gate", feature_map.shape, adapter.W1.shape,
                                 detail="channel count must match W1 columns")
    pooled = F.global_avg_pool(fmap)                         # (N, C_in)
    hidden = F.relu(F.matmul(pooled, F.transpose(adapter.W1)))
    gate = F.sigmoid(F.matmul(hidden, F.transpose(adapter.W2)))
    return F.reshape(gate, (adapter.out_channels,)) if single else gate


def block_forward(f_prev: Tensor, block: ConvBlock,
                  adapter: AdapterBlock | None = None) -> Tensor:
    """One stage: conv, ReLU, 2x2 average pool, then optional channel gating.

    The gate reads the stage input, not its output.  Without an adapter the
    result is exactly the plain stage output.
    """
    out = F.avg_pool2d(F.relu(F.conv2d(f_prev, block.weight, block.bias, stride=1, padding=1)))
    if adapter is None:
        return out
    return F.scale_channels(out, adapter_gate(f_prev, adapter))


def extract_features(patches, backbone: Backbone, use_adapters: bool = True) -> Tensor:
    """Feature matrix (M, D) for a stack of patches, in input row order.

    ``patches`` is a Tensor (kept in the graph, so gradients can flow back
    into prompt parameters) or an array, which enters as a constant.
    """
    if not isinstance(patches, Tensor):
        patches = Tensor(check_patch_stack(patches))
    if patches.ndim != 4:
        raise ShapeMismatchError("extract_features", patches.shape, detail="expects (M, C, H, W)")
    if patches.shape[1] != backbone.config.input_channels:
        raise ShapeMismatchError("extract_features", patches.shape,
                                 detail=f"expected {backbone.config.input_channels} channels")
    h = patches
    for i, block in enumerate(backbone.blocks):
        adapter = backbone.adapters.get(i) if use_adapters else None
        h = block_forward(h, block, adapter)
    return F.global_avg_pool(h)
