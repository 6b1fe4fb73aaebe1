"""Fusion classifier over global and local representations, and map combination."""
from __future__ import annotations

import math

import torch
from torch import nn

from glam import diffcore as dc
from glam.maps import SaliencyMap


class FusionHead(nn.Module):
    """One fully connected layer over ``[z_g, z_l]`` followed by a sigmoid."""

    def __init__(self, global_dim: int, local_dim: int, n_classes: int = 2):
        super().__init__()
        fan_in = global_dim + local_dim
        bound = 1 / math.sqrt(fan_in)
        self.global_dim = global_dim
        self.local_dim = local_dim
        self.weight = nn.Parameter(torch.empty(n_classes, fan_in).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(n_classes))

    def forward(self, z_g: torch.Tensor, z_l: torch.Tensor) -> torch.Tensor:
        return fuse(z_g, z_l, self.weight, self.bias)


def fuse(z_g: torch.Tensor, z_l: torch.Tensor, weight: torch.Tensor,
         bias: torch.Tensor) -> torch.Tensor:
    """``sigmoid(w_f . [z_g, z_l] + b_f)`` per class; inputs may carry a batch dim."""
    z = torch.cat([z_g, z_l], dim=-1)
    if z.shape[-1] != weight.shape[1]:
        raise dc.PreconditionError(
            f"[z_g, z_l] has {z.shape[-1]} features, fusion weights expect {weight.shape[1]}")
    return dc.sigmoid(z @ weight.T + bias)


def combine_saliency(sg: SaliencyMap, sl: SaliencyMap, gamma_c: float = 0.5) -> SaliencyMap:
    """``gamma_c * S_g + (1 - gamma_c) * S_l`` on the local map's grid."""
    if not 0.0 <= gamma_c <= 1.0:
        raise dc.PreconditionError(f"gamma_c={gamma_c} outside [0, 1]")
    h, w = sl.grid
    g = dc.resample_nearest(sg.values, h, w)
    return SaliencyMap(gamma_c * g + (1.0 - gamma_c) * sl.values, sl.scale)
