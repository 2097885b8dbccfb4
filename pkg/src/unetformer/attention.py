"""Global-local attention blocks.

Each decoder block mixes two branches computed from the same normalized
input: a convolutional local branch, and a windowed multi-head
self-attention branch whose output is optionally spread across window
borders by a pair of strip average pools (one horizontal, one vertical)
with learnable gains. The merged features pass through a depthwise conv,
batch norm, and a pointwise projection; a ReLU6 MLP follows. Both halves
are pre-norm residuals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops, tensor
from .errors import ConfigError
from .nn import BatchNorm2d, Conv2d, ConvBN, Module, Parameter
from .tensor import Tensor


@dataclass(frozen=True)
class AttentionConfig:
    channels: int = 64
    window_size: int = 8
    num_heads: int = 8
    cross_window_interaction: bool = True
    include_identity_term: bool = False
    relative_position_bias: bool = False
    mlp_ratio: int = 4

    def validate(self) -> "AttentionConfig":
        if self.channels < 1:
            raise ConfigError(f"channels must be positive, got {self.channels}")
        if self.num_heads < 1 or self.channels % self.num_heads:
            raise ConfigError(
                f"num_heads {self.num_heads} must divide channels {self.channels}")
        if self.window_size < 1:
            raise ConfigError(f"window_size must be >= 1, got {self.window_size}")
        if self.mlp_ratio < 1:
            raise ConfigError(f"mlp_ratio must be >= 1, got {self.mlp_ratio}")
        return self


@dataclass(frozen=True)
class WindowGrid:
    """Geometry of a window partition: original and padded extents."""

    batch: int
    height: int
    width: int
    window: int

    @property
    def padded_height(self) -> int:
        return -(-self.height // self.window) * self.window

    @property
    def padded_width(self) -> int:
        return -(-self.width // self.window) * self.window

    @property
    def windows_per_image(self) -> int:
        return (self.padded_height // self.window) * (self.padded_width // self.window)


def window_partition(x: Tensor, window: int) -> tuple[Tensor, WindowGrid]:
    """Split (B, C, H, W) into (B*nWins, C, window, window) tiles.

    The map is zero-padded on the bottom/right edges up to a window
    multiple first; `window_reverse` crops the padding back off.
    """
    b, c, h, w = x.shape
    grid = WindowGrid(b, h, w, window)
    hp, wp = grid.padded_height, grid.padded_width
    if (hp, wp) != (h, w):
        x = tensor.pad(x, ((0, 0), (0, 0), (0, hp - h), (0, wp - w)))
    mh, mw = hp // window, wp // window
    x = x.reshape(b, c, mh, window, mw, window)
    x = x.permute(0, 2, 4, 1, 3, 5)
    return x.reshape(b * mh * mw, c, window, window), grid


def window_reverse(wins: Tensor, grid: WindowGrid) -> Tensor:
    """Inverse of `window_partition`, cropping any padding."""
    b, h, w, win = grid.batch, grid.height, grid.width, grid.window
    hp, wp = grid.padded_height, grid.padded_width
    mh, mw = hp // win, wp // win
    c = wins.shape[1]
    x = wins.reshape(b, mh, mw, c, win, win)
    x = x.permute(0, 3, 1, 4, 2, 5)
    x = x.reshape(b, c, hp, wp)
    if (hp, wp) != (h, w):
        x = x[:, :, :h, :w]
    return x


def _relative_index(window: int) -> np.ndarray:
    """Index into a (2w-1)^2 table for every key/query offset pair."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window),
                                  indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (window - 1)
    return rel[0] * (2 * window - 1) + rel[1]


class WindowMHSA(Module):
    """Multi-head self-attention within non-overlapping square windows."""

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c = cfg.channels
        self.qkv = Conv2d(c, 3 * c, 1, bias=False)
        self.proj = Conv2d(c, c, 1, bias=True)
        if cfg.relative_position_bias:
            table = (2 * cfg.window_size - 1) ** 2
            self.rel_bias = Parameter(np.zeros((table, cfg.num_heads)))
            self._rel_index = _relative_index(cfg.window_size)
        else:
            self.rel_bias = None
            self._rel_index = None

    def forward(self, x: Tensor) -> Tensor:
        c = self.cfg.channels
        heads = self.cfg.num_heads
        win = self.cfg.window_size
        d = c // heads
        qkv = self.qkv(x)
        wins, grid = window_partition(qkv, win)
        n = wins.shape[0]
        l = win * win
        wins = wins.reshape(n, 3, heads, d, l)
        q = wins[:, 0].permute(0, 1, 3, 2)          # (n, heads, l, d)
        k = wins[:, 1]                              # (n, heads, d, l)
        v = wins[:, 2].permute(0, 1, 3, 2)          # (n, heads, l, d)
        scores = tensor.matmul(q * (d ** -0.5), k)  # (n, heads, l, l)
        if self.rel_bias is not None:
            bias = tensor.embedding_lookup(self.rel_bias, self._rel_index.reshape(-1))
            bias = bias.reshape(l, l, heads).permute(2, 0, 1).reshape(1, heads, l, l)
            scores = scores + bias
        attn = tensor.softmax(scores, axis=-1)
        out = tensor.matmul(attn, v)                # (n, heads, l, d)
        out = out.permute(0, 1, 3, 2).reshape(n, c, win, win)
        out = window_reverse(out, grid)
        return self.proj(out)


class CrossWindowInteraction(Module):
    """Spreads window-local context along full-width and full-height strips.

    Output is gain_h * strip_h(x) + gain_v * strip_v(x), with both gains
    learnable and starting at one, so at initialization the module is an
    exact sum of the two strip averages (a constant map c becomes 2c,
    bit-exactly). `include_identity_term` adds the untouched input as a
    third term.
    """

    def __init__(self, window: int, include_identity_term: bool = False):
        super().__init__()
        if window < 1:
            raise ConfigError(f"interaction window must be >= 1, got {window}")
        self.window = window
        self.include_identity_term = include_identity_term
        self.gain_h = Parameter(np.ones(()))
        self.gain_v = Parameter(np.ones(()))

    def forward(self, x: Tensor) -> Tensor:
        horizontal = ops.strip_avg_pool(x, self.window, along="w")
        vertical = ops.strip_avg_pool(x, self.window, along="h")
        out = self.gain_h * horizontal + self.gain_v * vertical
        if self.include_identity_term:
            out = out + x
        return out


class LocalBranch(Module):
    """Parallel 3x3 and 1x1 convolutions (each batch-normalized), summed."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv3 = ConvBN(channels, channels, 3, padding=1)
        self.conv1 = ConvBN(channels, channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv3(x) + self.conv1(x)


class GlobalLocalAttention(Module):
    """Local conv branch + windowed attention branch, fused depthwise."""

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c = cfg.channels
        self.local = LocalBranch(c)
        self.mhsa = WindowMHSA(cfg)
        if cfg.cross_window_interaction:
            self.interaction = CrossWindowInteraction(cfg.window_size,
                                                      cfg.include_identity_term)
        else:
            self.interaction = None
        self.fuse_dw = Conv2d(c, c, 3, padding=1, groups=c, bias=False)
        self.fuse_bn = BatchNorm2d(c)
        self.fuse_pw = Conv2d(c, c, 1, bias=True)

    def forward(self, x: Tensor) -> Tensor:
        ctx = self.mhsa(x)
        if self.interaction is not None:
            ctx = self.interaction(ctx)
        y = self.local(x) + ctx
        return self.fuse_pw(self.fuse_bn(self.fuse_dw(y)))


class MLP(Module):
    """Pointwise expansion with ReLU6, then pointwise projection."""

    def __init__(self, channels: int, ratio: int = 4):
        super().__init__()
        hidden = channels * ratio
        self.fc1 = Conv2d(channels, hidden, 1, bias=True)
        self.fc2 = Conv2d(hidden, channels, 1, bias=True)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(tensor.relu6(self.fc1(x)))


class GLTB(Module):
    """Global-local transformer block: two pre-norm residual halves."""

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.norm1 = BatchNorm2d(cfg.channels)
        self.attn = GlobalLocalAttention(cfg)
        self.norm2 = BatchNorm2d(cfg.channels)
        self.mlp = MLP(cfg.channels, cfg.mlp_ratio)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x
