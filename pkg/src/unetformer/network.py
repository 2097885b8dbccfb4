"""The segmentation network: ResNet18-style encoder, transformer decoder.

The encoder downsamples 32x over a stem and four residual stages. The
decoder projects each of the last three encoder features to a common width,
runs a global-local transformer block per scale, and fuses upward with
learnable-weighted skip connections. A feature refinement head (or a plain
classifier head) restores full resolution; an auxiliary head over the three
decoder scales is used during training only.

`estimate_macs` computes multiply-accumulate counts analytically from the
configuration; `measure_macs` counts the same convention during a real
forward pass. The two must agree exactly, which the test suite checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from . import ops, tensor
from .attention import GLTB, AttentionConfig
from .errors import ConfigError, ShapeError
from .nn import Conv2d, ConvBN, ConvBNReLU, Module, Parameter, init_model
from .tensor import Tensor

import numpy as np

# Encoder stage widths (stem plus four stages) per preset. The decoder and
# attention defaults for each preset live in _PRESET_ATTENTION.
PRESET_WIDTHS: dict[str, tuple[int, int, int, int, int]] = {
    "full": (64, 64, 128, 256, 512),
    "tiny": (16, 16, 32, 64, 128),
}

_PRESET_ATTENTION: dict[str, AttentionConfig] = {
    "full": AttentionConfig(channels=64, window_size=8, num_heads=8),
    "tiny": AttentionConfig(channels=32, window_size=4, num_heads=4),
}


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    width_preset: str = "full"
    use_frh: bool = True
    use_aux_head: bool = True
    input_channels: int = 3

    def validate(self) -> "ModelConfig":
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.width_preset not in PRESET_WIDTHS:
            raise ConfigError(f"width_preset must be one of "
                              f"{sorted(PRESET_WIDTHS)}, got {self.width_preset!r}")
        if self.input_channels < 1:
            raise ConfigError(f"input_channels must be >= 1, "
                              f"got {self.input_channels}")
        self.attention.validate()
        return self

    @property
    def encoder_widths(self) -> tuple[int, int, int, int, int]:
        return PRESET_WIDTHS[self.width_preset]

    @property
    def decoder_channels(self) -> int:
        return self.attention.channels

    @classmethod
    def full(cls, num_classes: int = 8, **attention_overrides) -> "ModelConfig":
        att = replace(_PRESET_ATTENTION["full"], **attention_overrides)
        return cls(num_classes=num_classes, attention=att,
                   width_preset="full").validate()

    @classmethod
    def tiny(cls, num_classes: int = 5, **attention_overrides) -> "ModelConfig":
        att = replace(_PRESET_ATTENTION["tiny"], **attention_overrides)
        return cls(num_classes=num_classes, attention=att,
                   width_preset="tiny").validate()


# ---------------------------------------------------------------------------
# encoder


class BasicBlock(Module):
    """Two 3x3 convolutions with a residual shortcut."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.body1 = ConvBN(in_channels, out_channels, 3, stride=stride, padding=1)
        self.body2 = ConvBN(out_channels, out_channels, 3, padding=1)
        if stride != 1 or in_channels != out_channels:
            self.down = ConvBN(in_channels, out_channels, 1, stride=stride)
        else:
            self.down = None

    def forward(self, x: Tensor) -> Tensor:
        y = self.body2(tensor.relu(self.body1(x)))
        shortcut = x if self.down is None else self.down(x)
        return tensor.relu(y + shortcut)


class _Stage(Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int):
        super().__init__()
        self.block1 = BasicBlock(in_channels, out_channels, stride)
        self.block2 = BasicBlock(out_channels, out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.block2(self.block1(x))


class ResNetEncoder(Module):
    """Stem (7x7 stride 2, max pool) plus four two-block residual stages."""

    def __init__(self, widths: tuple[int, int, int, int, int],
                 in_channels: int = 3):
        super().__init__()
        w0, w1, w2, w3, w4 = widths
        self.stem = ConvBNReLU(in_channels, w0, 7, stride=2, padding=3)
        self.layer1 = _Stage(w0, w1, 1)
        self.layer2 = _Stage(w1, w2, 2)
        self.layer3 = _Stage(w2, w3, 2)
        self.layer4 = _Stage(w3, w4, 2)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        x = self.stem(x)
        x = ops.max_pool2d(x, 3, stride=2, padding=1)
        e1 = self.layer1(x)
        e2 = self.layer2(e1)
        e3 = self.layer3(e2)
        e4 = self.layer4(e3)
        return e1, e2, e3, e4


# ---------------------------------------------------------------------------
# decoder pieces


class SkipFusion(Module):
    """Weighted sum of a skip feature and an upsampled decoder feature.

    The mixing weight is sigmoid(raw_alpha) with raw_alpha learnable and
    initialized to zero, so fusion starts as an even 0.5/0.5 blend.
    """

    def __init__(self):
        super().__init__()
        self.raw_alpha = Parameter(np.zeros(()))

    def forward(self, skip: Tensor, up: Tensor) -> Tensor:
        if skip.shape != up.shape:
            raise ShapeError(f"fusion shapes differ: {skip.shape} vs {up.shape}")
        alpha = tensor.sigmoid(self.raw_alpha)
        return alpha * skip + (1.0 - alpha) * up


class FeatureRefinementHead(Module):
    """Fuses the stride-4 skip, reweights channels and positions, classifies.

    The channel path squeezes with global average pooling through a
    bottleneck (reduction 4); the spatial path averages a depthwise 3x3
    response over channels. Both produce sigmoid gates applied as residual
    corrections before the classifier and 4x upsampling.
    """

    def __init__(self, channels: int, num_classes: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fuse = SkipFusion()
        self.reduce = Conv2d(channels, hidden, 1, bias=True)
        self.expand = Conv2d(hidden, channels, 1, bias=True)
        self.spatial = Conv2d(channels, channels, 3, padding=1,
                              groups=channels, bias=False)
        self.classify = Conv2d(channels, num_classes, 1, bias=True)

    def forward(self, skip: Tensor, d2: Tensor) -> Tensor:
        f = self.fuse(skip, ops.bilinear_upsample(d2, 2))
        squeezed = tensor.relu(self.reduce(ops.global_avg_pool(f)))
        channel_gate = tensor.sigmoid(self.expand(squeezed))
        spatial_gate = tensor.sigmoid(tensor.mean(self.spatial(f), axis=1,
                                                  keepdims=True))
        refined = f + f * channel_gate + f * spatial_gate
        return ops.bilinear_upsample(self.classify(refined), 4)


class SimpleHead(Module):
    """Fusion and classifier only; used when feature refinement is off."""

    def __init__(self, channels: int, num_classes: int):
        super().__init__()
        self.fuse = SkipFusion()
        self.classify = Conv2d(channels, num_classes, 1, bias=True)

    def forward(self, skip: Tensor, d2: Tensor) -> Tensor:
        f = self.fuse(skip, ops.bilinear_upsample(d2, 2))
        return ops.bilinear_upsample(self.classify(f), 4)


class AuxHead(Module):
    """Training-time head over the sum of all three decoder scales."""

    def __init__(self, channels: int, num_classes: int):
        super().__init__()
        self.conv = ConvBN(channels, channels, 3, padding=1)
        self.classify = Conv2d(channels, num_classes, 1, bias=True)

    def forward(self, d2: Tensor, d3: Tensor, d4: Tensor) -> Tensor:
        a = d2 + ops.bilinear_upsample(d3, 2) + ops.bilinear_upsample(d4, 4)
        return ops.bilinear_upsample(self.classify(tensor.relu(self.conv(a))), 8)


# ---------------------------------------------------------------------------
# full model


class UNetFormer(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        _, w1, w2, w3, w4 = cfg.encoder_widths
        d = cfg.decoder_channels
        att = cfg.attention
        self.encoder = ResNetEncoder(cfg.encoder_widths, cfg.input_channels)
        self.proj4 = Conv2d(w4, d, 1, bias=False)
        self.gltb4 = GLTB(att)
        self.proj3 = Conv2d(w3, d, 1, bias=False)
        self.fuse3 = SkipFusion()
        self.gltb3 = GLTB(att)
        self.proj2 = Conv2d(w2, d, 1, bias=False)
        self.fuse2 = SkipFusion()
        self.gltb2 = GLTB(att)
        self.proj1 = Conv2d(w1, d, 1, bias=False)
        if cfg.use_frh:
            self.head = FeatureRefinementHead(d, cfg.num_classes)
        else:
            self.head = SimpleHead(d, cfg.num_classes)
        self.aux_head = AuxHead(d, cfg.num_classes) if cfg.use_aux_head else None

    def _check_input(self, x: Tensor) -> None:
        cin = self.cfg.input_channels
        if x.ndim != 4 or x.shape[1] != cin:
            raise ShapeError(f"expected (B, {cin}, H, W) input, got {x.shape}")
        _, _, h, w = x.shape
        if h % 32 or w % 32 or h == 0 or w == 0:
            raise ShapeError(f"input size {h}x{w} must be a positive multiple of 32")

    def _decode(self, x: Tensor):
        e1, e2, e3, e4 = self.encoder(x)
        d4 = self.gltb4(self.proj4(e4))
        d3 = self.gltb3(self.fuse3(self.proj3(e3), ops.bilinear_upsample(d4, 2)))
        d2 = self.gltb2(self.fuse2(self.proj2(e2), ops.bilinear_upsample(d3, 2)))
        return e1, d2, d3, d4

    def forward(self, x: Tensor) -> Tensor:
        """Class logits at input resolution: (B, num_classes, H, W)."""
        self._check_input(x)
        e1, d2, _, _ = self._decode(x)
        return self.head(self.proj1(e1), d2)

    def forward_train(self, x: Tensor) -> tuple[Tensor, Tensor | None]:
        """Main logits plus auxiliary logits (None if the aux head is off)."""
        self._check_input(x)
        e1, d2, d3, d4 = self._decode(x)
        logits = self.head(self.proj1(e1), d2)
        aux = self.aux_head(d2, d3, d4) if self.aux_head is not None else None
        return logits, aux


def build_model(cfg: ModelConfig, seed: int) -> UNetFormer:
    """Construct and deterministically initialize a model."""
    return init_model(UNetFormer(cfg), seed)


def count_params(cfg: ModelConfig) -> int:
    """Total learnable parameter count for a configuration."""
    return UNetFormer(cfg).num_parameters()


# ---------------------------------------------------------------------------
# complexity accounting
#
# Conventions: a KxK convolution costs out_elements * (in_channels/groups)*K*K
# multiply-accumulates, an attention matmul costs its full product count,
# bilinear upsampling costs 4 per output element, and normalization, pooling,
# activations, and elementwise arithmetic are free. `measure_macs` applies
# the same conventions while executing, via counters inside the ops. The
# table covers the inference path only; the auxiliary head never runs there.


def _conv_out(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _conv_macs(cin: int, cout: int, k: int, hw: tuple[int, int],
               groups: int = 1) -> int:
    return hw[0] * hw[1] * cout * (cin // groups) * k * k


def _gltb_macs(att: AttentionConfig, hw: tuple[int, int]) -> int:
    c, win = att.channels, att.window_size
    h, w = hw
    n_windows = -(-h // win) * -(-w // win)
    total = _conv_macs(c, c, 3, hw) + _conv_macs(c, c, 1, hw)    # local branch
    total += _conv_macs(c, 3 * c, 1, hw)                         # qkv
    total += 2 * n_windows * win ** 4 * c                        # scores, mix
    total += _conv_macs(c, c, 1, hw)                             # attn proj
    total += _conv_macs(c, c, 3, hw, groups=c)                   # fuse depthwise
    total += _conv_macs(c, c, 1, hw)                             # fuse pointwise
    total += 2 * _conv_macs(c, c * att.mlp_ratio, 1, hw)         # mlp
    return total


def _head_macs(cfg: ModelConfig, hw1: tuple[int, int]) -> int:
    d, k = cfg.decoder_channels, cfg.num_classes
    h1, w1 = hw1
    total = 4 * d * h1 * w1                                      # up2 into fuse
    if cfg.use_frh:
        hidden = max(d // 4, 1)
        total += d * hidden + hidden * d                         # gap bottleneck
        total += _conv_macs(d, d, 3, hw1, groups=d)              # spatial gate
    total += _conv_macs(d, k, 1, hw1)                            # classifier
    total += 4 * k * (h1 * 4) * (w1 * 4)                         # up4 to input
    return total


def estimate_macs_table(cfg: ModelConfig,
                        input_hw: tuple[int, int]) -> dict[str, int]:
    """Analytic per-component MAC table for one image (inference path)."""
    cfg.validate()
    h, w = input_hw
    if h % 32 or w % 32 or h <= 0 or w <= 0:
        raise ConfigError(f"input size {h}x{w} must be a positive multiple of 32")
    w0, w1, w2, w3, w4 = cfg.encoder_widths
    d = cfg.decoder_channels
    att = cfg.attention

    def halve(hw):
        return _conv_out(hw[0], 3, 2, 1), _conv_out(hw[1], 3, 2, 1)

    hw_stem = (_conv_out(h, 7, 2, 3), _conv_out(w, 7, 2, 3))
    hw1 = halve(hw_stem)
    hw2 = halve(hw1)
    hw3 = halve(hw2)
    hw4 = halve(hw3)

    def stage(cin, cout, hw_out, downsample):
        total = _conv_macs(cin, cout, 3, hw_out) + 3 * _conv_macs(cout, cout, 3, hw_out)
        if downsample:
            total += _conv_macs(cin, cout, 1, hw_out)
        return total

    table: dict[str, int] = {}
    table["encoder.stem"] = _conv_macs(cfg.input_channels, w0, 7, hw_stem)
    table["encoder.layer1"] = stage(w0, w1, hw1, downsample=w0 != w1)
    table["encoder.layer2"] = stage(w1, w2, hw2, downsample=True)
    table["encoder.layer3"] = stage(w2, w3, hw3, downsample=True)
    table["encoder.layer4"] = stage(w3, w4, hw4, downsample=True)
    table["proj4"] = _conv_macs(w4, d, 1, hw4)
    table["gltb4"] = _gltb_macs(att, hw4)
    table["proj3"] = _conv_macs(w3, d, 1, hw3)
    table["fuse3"] = 4 * d * hw3[0] * hw3[1]
    table["gltb3"] = _gltb_macs(att, hw3)
    table["proj2"] = _conv_macs(w2, d, 1, hw2)
    table["fuse2"] = 4 * d * hw2[0] * hw2[1]
    table["gltb2"] = _gltb_macs(att, hw2)
    table["proj1"] = _conv_macs(w1, d, 1, hw1)
    table["head"] = _head_macs(cfg, hw1)
    return table


def total_macs(cfg: ModelConfig, input_hw: tuple[int, int]) -> int:
    return sum(estimate_macs_table(cfg, input_hw).values())


def estimate_macs(cfg: ModelConfig, height: int, width: int) -> float:
    """Analytic inference cost in GMACs for one image."""
    return total_macs(cfg, (height, width)) / 1e9


def measure_macs(model: UNetFormer, input_hw: tuple[int, int]) -> int:
    """Count MACs during a real inference forward, same conventions."""
    h, w = input_hw
    x = Tensor(np.zeros((1, model.cfg.input_channels, h, w), dtype=np.float32))
    was_training = model.training
    model.eval()
    tensor.macs_counter.start()
    try:
        with tensor.no_grad():
            model(x)
    finally:
        total = tensor.macs_counter.stop()
        if was_training:
            model.train()
    return total


def params_table(model: UNetFormer) -> dict[str, int]:
    """Per-component parameter counts, keyed like `estimate_macs_table`."""
    groups = list(estimate_macs_table(model.cfg, (32, 32)).keys())
    if model.aux_head is not None:
        groups.append("aux_head")
    table = {g: 0 for g in groups}
    for name, p in model.named_parameters():
        for g in sorted(groups, key=len, reverse=True):
            if name == g or name.startswith(g + "."):
                table[g] += p.size
                break
        else:
            raise ConfigError(f"parameter {name!r} not covered by any table group")
    return table
