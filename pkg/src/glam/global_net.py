"""Global module: multi-scale saliency maps over the whole image."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from glam import diffcore as dc
from glam.layers import SaliencyHead, Stem, make_stage
from glam.maps import SaliencyMap


class ConfigError(ValueError):
    """A model or data configuration is internally inconsistent."""


@dataclass
class GlobalConfig:
    input_h: int = 768
    input_w: int = 512
    channels: tuple[int, int, int] = (64, 128, 256)
    downsample: tuple[int, int, int] = (16, 32, 64)
    blocks: tuple[int, int, int] = (2, 2, 2)
    stem_channels: int = 16
    t_global: float = 3.0
    gamma: tuple[float, float, float] = (0.2, 0.6, 0.2)
    norm: str = "batch"

    def validate(self) -> None:
        deepest = max(self.downsample)
        if self.input_h % deepest or self.input_w % deepest:
            raise ConfigError(
                f"input {self.input_h}x{self.input_w} not divisible by {deepest}")
        if len(self.gamma) != 3 or min(self.gamma) < 0 or abs(sum(self.gamma) - 1) > 1e-9:
            raise ConfigError(f"gamma {self.gamma} must be nonnegative and sum to 1")
        if not 0 < self.t_global <= 100:
            raise ConfigError(f"t_global={self.t_global} outside (0, 100]")
        prev = 4
        for f in self.downsample:
            ratio = f // prev
            if f % prev or ratio & (ratio - 1):
                raise ConfigError(
                    f"downsample factors {self.downsample} must grow by powers of two from the /4 stem")
            prev = f

    @property
    def grids(self) -> list[tuple[int, int]]:
        return [(self.input_h // f, self.input_w // f) for f in self.downsample]


def top_t_pool(map: torch.Tensor, t_percent: float) -> torch.Tensor:
    """Mean of the largest ``t_percent`` percent of entries of each ``[h, w]`` map.

    Works over the trailing two dims. ``k = max(1, round(t/100 * h*w))``;
    among equal values at the cutoff the earlier row-major entries win.
    """
    if not 0 < t_percent <= 100:
        raise dc.PreconditionError(f"t_percent={t_percent} outside (0, 100]")
    h, w = map.shape[-2:]
    n = h * w
    if n == 0:
        raise dc.PreconditionError("empty map")
    k = max(1, dc.round_half_up(t_percent / 100.0 * n))
    flat = map.flatten(-2)
    # stable descending sort keeps row-major order among ties
    order = torch.sort(flat.detach(), dim=-1, descending=True, stable=True).indices[..., :k]
    return flat.gather(-1, order).mean(-1)


def combine_scales(maps: list[torch.Tensor], gamma, target_grid: tuple[int, int]) -> torch.Tensor:
    """Convex combination of per-scale maps after nearest resampling to ``target_grid``."""
    if len(maps) != len(gamma):
        raise dc.PreconditionError("one gamma weight per scale required")
    h, w = target_grid
    out = None
    for g, m in zip(gamma, maps):
        term = dc.resample_nearest(m, h, w) * g
        out = term if out is None else out + term
    return out


@dataclass
class GlobalOutput:
    """Batched outputs; saliency tensors are ``[N, 2, h, w]``."""

    s0: torch.Tensor
    s1: torch.Tensor
    s2: torch.Tensor
    sg: torch.Tensor
    y_tilde: torch.Tensor  # [N, 3, 2]
    y_hat_g: torch.Tensor  # [N, 2]
    z_g: torch.Tensor      # [N, 256]
    scales: tuple[float, float, float, float] = field(default=(16.0, 32.0, 64.0, 16.0))

    def saliency(self, name: str, index: int = 0) -> SaliencyMap:
        tensor = getattr(self, name)
        scale = self.scales[("s0", "s1", "s2", "sg").index(name)]
        return SaliencyMap(tensor[index], scale)


class GlobalNet(nn.Module):
    """ResNet-style backbone with saliency heads on three pyramid levels."""

    def __init__(self, config: GlobalConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.stem = Stem(config.stem_channels, config.norm)
        ins = (config.stem_channels,) + tuple(config.channels[:-1])
        prev = 4
        stages = []
        for c_in, c_out, blocks, f in zip(ins, config.channels, config.blocks, config.downsample):
            stages.append(make_stage(c_in, c_out, blocks, f // prev, config.norm))
            prev = f
        self.stage1, self.stage2, self.stage3 = stages
        self.head0 = SaliencyHead(config.channels[0])
        self.head1 = SaliencyHead(config.channels[1])
        self.head2 = SaliencyHead(config.channels[2])

    def forward(self, image: torch.Tensor) -> GlobalOutput:
        if image.dim() == 3:
            image = image.unsqueeze(0)
        cfg = self.config
        if tuple(image.shape[-2:]) != (cfg.input_h, cfg.input_w):
            raise ConfigError(
                f"image {tuple(image.shape[-2:])} does not match config {(cfg.input_h, cfg.input_w)}")
        h0 = self.stage1(self.stem(image))
        h1 = self.stage2(h0)
        h2 = self.stage3(h1)
        s0, s1, s2 = self.head0(h0), self.head1(h1), self.head2(h2)
        t = cfg.t_global
        y_tilde = torch.stack([top_t_pool(s, t) for s in (s0, s1, s2)], dim=1)
        y_hat_g = (y_tilde[:, 0] + y_tilde[:, 1] + y_tilde[:, 2]) / 3
        sg = combine_scales([s0, s1, s2], cfg.gamma, tuple(s0.shape[-2:]))
        z_g = dc.spatial_max(h2)
        f = cfg.downsample
        return GlobalOutput(s0, s1, s2, sg, y_tilde, y_hat_g, z_g,
                            (float(f[0]), float(f[1]), float(f[2]), float(f[0])))


def full_resolution_config() -> GlobalConfig:
    """Full-resolution mammography geometry."""
    return GlobalConfig(input_h=2944, input_w=1920)

