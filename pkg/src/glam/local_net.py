"""Local module: high-resolution patch network and patch aggregation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from glam import diffcore as dc
from glam.global_net import ConfigError, top_t_pool
from glam.layers import SaliencyHead, Stem, make_stage
from glam.maps import SaliencyMap
from glam.patches import PatchLocation

# blocks per stage and per-stage downsampling after the /4 stem
BACKBONES = {
    "hr34": ((3, 4, 6, 3), (1, 1, 1, 1)),
    "hr18": ((2, 2, 2, 2), (1, 1, 1, 1)),
    "plain34": ((3, 4, 6, 3), (1, 2, 2, 2)),
}


@dataclass
class LocalConfig:
    patch_h: int = 128
    patch_w: int = 128
    backbone: str = "hr34"
    width: int = 64
    t_local: float = 20.0
    aggregation: str = "concat"
    attention_dim: int = 128
    norm: str = "batch"

    def validate(self) -> None:
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.aggregation not in ("concat", "attention"):
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        if not 0 < self.t_local <= 100:
            raise ConfigError(f"t_local={self.t_local} outside (0, 100]")
        _, strides = BACKBONES[self.backbone]
        total = 4 * math.prod(strides)
        if self.patch_h % total or self.patch_w % total:
            raise ConfigError(
                f"patch {self.patch_h}x{self.patch_w} not divisible by {total} ({self.backbone})")

    @property
    def patch_px(self) -> tuple[int, int]:
        return (self.patch_h, self.patch_w)

    @property
    def feature_dim(self) -> int:
        return 8 * self.width


@dataclass
class PatchOutput:
    """Batched patch outputs: ``a`` is ``[N, 2, h_c/4, w_c/4]``."""

    a: torch.Tensor
    y_hat: torch.Tensor  # [N, 2]
    z: torch.Tensor      # [N, 8 * width]


class LocalNet(nn.Module):
    """ResNet backbone whose residual stages keep the stem's /4 resolution."""

    def __init__(self, config: LocalConfig):
        super().__init__()
        config.validate()
        self.config = config
        blocks, strides = BACKBONES[config.backbone]
        w = config.width
        self.stem = Stem(w, config.norm)
        widths = (w, 2 * w, 4 * w, 8 * w)
        ins = (w,) + widths[:-1]
        self.stages = nn.Sequential(*[
            make_stage(c_in, c_out, n, s, config.norm)
            for c_in, c_out, n, s in zip(ins, widths, blocks, strides)])
        self.head = SaliencyHead(widths[-1])

    def forward(self, patches: torch.Tensor) -> PatchOutput:
        if patches.dim() == 3:
            patches = patches.unsqueeze(0)
        cfg = self.config
        if patches.shape[-2] % 4 or patches.shape[-1] % 4:
            raise ConfigError(f"patch dims {tuple(patches.shape[-2:])} not divisible by 4")
        feats = self.stages(self.stem(patches))
        a = self.head(feats)
        target = (patches.shape[-2] // 4, patches.shape[-1] // 4)
        if tuple(a.shape[-2:]) != target:
            a = dc.resample_nearest(a, *target)
        return PatchOutput(a, top_t_pool(a, cfg.t_local), dc.spatial_max(feats))


class AttentionHead(nn.Module):
    """Gated attention scores ``w . (tanh(V z) * sigmoid(U z))``."""

    def __init__(self, feature_dim: int, attention_dim: int = 128):
        super().__init__()
        bound = 1 / math.sqrt(feature_dim)
        self.V = nn.Parameter(torch.empty(attention_dim, feature_dim).uniform_(-bound, bound))
        self.U = nn.Parameter(torch.empty(attention_dim, feature_dim).uniform_(-bound, bound))
        bound = 1 / math.sqrt(attention_dim)
        self.w = nn.Parameter(torch.empty(attention_dim).uniform_(-bound, bound))

    def scores(self, z: torch.Tensor) -> torch.Tensor:
        """One score per row of ``z`` ``[K, D]``.

        Rows are scored one at a time: batched kernels may round a row
        differently depending on its position, which would make the
        weights depend on instance order.
        """
        return torch.stack([self._score(row) for row in z])

    def _score(self, z: torch.Tensor) -> torch.Tensor:
        gate = dc.tanh(self.V @ z) * dc.sigmoid(self.U @ z)
        return gate @ self.w


def _ordered_sum(x: torch.Tensor, dim: int) -> torch.Tensor:
    # summing in sorted order makes the result independent of instance order
    return torch.sort(x, dim=dim).values.sum(dim)


def aggregate_attention(preds: torch.Tensor, vecs: torch.Tensor, head: AttentionHead):
    """Attention-weighted bag prediction and representation.

    ``preds`` is ``[K, C]`` and ``vecs`` is ``[K, D]`` for one bag. Returns
    ``(y_hat_l [C], z_l [D], alphas [K])``.
    """
    if preds.shape[0] != vecs.shape[0] or preds.shape[0] < 1:
        raise dc.PreconditionError("need matching, non-empty prediction and vector lists")
    s = head.scores(vecs)
    e = torch.exp(s - s.max())
    alphas = e / _ordered_sum(e, 0)
    y = _ordered_sum(alphas[:, None] * preds, 0)
    z = _ordered_sum(alphas[:, None] * vecs, 0)
    return y, z, alphas


def aggregate_concat(maps: torch.Tensor, t_percent: float) -> torch.Tensor:
    """Top-t% pooling over the bag's patch maps concatenated along rows.

    ``maps`` is ``[K, C, h, w]``; returns ``[C]``.
    """
    if maps.dim() != 4 or maps.shape[0] < 1:
        raise dc.PreconditionError(f"expected [K, C, h, w] maps, got {tuple(maps.shape)}")
    k, c, h, w = maps.shape
    tall = maps.permute(1, 0, 2, 3).reshape(c, k * h, w)
    return top_t_pool(tall, t_percent)


def assemble_local_map(maps, locations: list[PatchLocation],
                       image_dims: tuple[int, int]) -> SaliencyMap:
    """Paste patch maps into a zero ``(H/4, W/4)`` canvas, taking the max on overlaps."""
    H, W = image_dims
    maps = list(maps)
    if len(maps) != len(locations):
        raise dc.PreconditionError("one map per location required")
    c = maps[0].shape[0] if maps else 2
    ref = maps[0] if maps else torch.zeros(())
    canvas = torch.zeros(c, H // 4, W // 4, dtype=ref.dtype, device=ref.device)
    for a, loc in zip(maps, locations):
        if not loc.inside(H, W):
            raise dc.PreconditionError(f"{loc} is outside the {H}x{W} image")
        r, col = loc.row // 4, loc.col // 4
        h, w = a.shape[-2:]
        h, w = min(h, canvas.shape[1] - r), min(w, canvas.shape[2] - col)
        region = canvas[:, r:r + h, col:col + w]
        canvas[:, r:r + h, col:col + w] = torch.maximum(region, a[:, :h, :w])
    return SaliencyMap(canvas, 4.0)
