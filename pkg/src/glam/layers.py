"""Module wrappers around :mod:`glam.diffcore` used by both backbones."""
from __future__ import annotations

import math

import torch
from torch import nn

from glam import diffcore as dc


class Conv2d(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1,
                 padding: int = 0, bias: bool = False):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = nn.Parameter(torch.empty(c_out, c_in, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(c_out)) if bias else None
        # He initialisation for ReLU networks
        nn.init.normal_(self.weight, 0.0, math.sqrt(2.0 / (c_in * kernel * kernel)))

    def forward(self, x):
        return dc.conv2d(x, self.weight, self.stride, self.padding, self.bias)


class ChannelNorm(nn.Module):
    def __init__(self, channels: int, mode: str = "instance", eps: float = 1e-5):
        super().__init__()
        if mode not in ("instance", "batch"):
            raise ValueError(f"unknown norm mode {mode!r}")
        self.mode = mode
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(channels))
        self.shift = nn.Parameter(torch.zeros(channels))
        if mode == "batch":
            self.register_buffer("running_mean", torch.zeros(channels))
            self.register_buffer("running_var", torch.ones(channels))
        else:
            self.running_mean = None
            self.running_var = None

    def forward(self, x):
        return dc.channel_norm(x, self.gain, self.shift, self.mode, self.eps,
                               self.running_mean, self.running_var, self.training)


class BasicBlock(nn.Module):
    """Two 3x3 convolutions with an identity (or projected) shortcut."""

    def __init__(self, c_in: int, c_out: int, stride: int = 1, norm: str = "batch"):
        super().__init__()
        self.conv1 = Conv2d(c_in, c_out, 3, stride, 1)
        self.norm1 = ChannelNorm(c_out, norm)
        self.conv2 = Conv2d(c_out, c_out, 3, 1, 1)
        self.norm2 = ChannelNorm(c_out, norm)
        if stride != 1 or c_in != c_out:
            self.proj = Conv2d(c_in, c_out, 1, stride, 0)
            self.proj_norm = ChannelNorm(c_out, norm)
        else:
            self.proj = None

    def forward(self, x):
        out = dc.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        shortcut = x if self.proj is None else self.proj_norm(self.proj(x))
        return dc.relu(dc.add(out, shortcut))


class Stem(nn.Module):
    """7x7 stride-2 convolution and 3x3 stride-2 max-pool: exact /4 on even dims."""

    def __init__(self, c_out: int, norm: str = "batch"):
        super().__init__()
        self.conv = Conv2d(1, c_out, 7, 2, 3)
        self.norm = ChannelNorm(c_out, norm)

    def forward(self, x):
        return dc.max_pool2d(dc.relu(self.norm(self.conv(x))), 3, 2, 1)


class SaliencyHead(nn.Module):
    """1x1 convolution to one channel per class, then a sigmoid."""

    def __init__(self, c_in: int, n_classes: int = 2):
        super().__init__()
        self.conv = Conv2d(c_in, n_classes, 1, bias=True)
        nn.init.uniform_(self.conv.weight, -1 / math.sqrt(c_in), 1 / math.sqrt(c_in))

    def forward(self, x):
        return dc.sigmoid(self.conv(x))


def make_stage(c_in: int, c_out: int, blocks: int, downsample: int, norm: str) -> nn.Sequential:
    """Residual stage reducing resolution by ``downsample`` (a power of two).

    Each halving is carried by one stride-2 block at the start of the stage;
    a stage gets extra blocks if it has fewer than it needs for that.
    """
    halvings = int(round(math.log2(downsample))) if downsample > 1 else 0
    if 2 ** halvings != downsample:
        raise ValueError(f"stage downsample factor {downsample} is not a power of two")
    layers = []
    for i in range(max(blocks, halvings)):
        stride = 2 if i < halvings else 1
        layers.append(BasicBlock(c_in if i == 0 else c_out, c_out, stride, norm))
    return nn.Sequential(*layers)
