"""Full pipeline: global saliency, patch selection, local saliency and fusion."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from glam.config import GlamConfig
from glam.fusion import FusionHead, combine_saliency
from glam.global_net import GlobalNet, GlobalOutput
from glam.io import module_registry
from glam.local_net import AttentionHead, LocalNet, aggregate_attention, aggregate_concat, assemble_local_map
from glam.maps import SaliencyMap
from glam.patches import PatchLocation, extract_patches, select_patches

# which sub-networks each checkpoint stage carries
STAGE_PARTS = {
    "stage1": ("global",),
    "stage3": ("local",),
    "stage4": ("global", "local", "attention", "fusion"),
}


@dataclass
class LocalResult:
    y_hat_l: torch.Tensor           # [2]
    z_l: Optional[torch.Tensor]     # [D], attention only
    alphas: Optional[torch.Tensor]  # [K], attention only
    maps: torch.Tensor              # [K, 2, h_c/4, w_c/4]
    locations: list[PatchLocation]

    def saliency(self, image_dims: tuple[int, int]) -> SaliencyMap:
        return assemble_local_map(self.maps, self.locations, image_dims)


@dataclass
class Inference:
    """Everything the pipeline produces for one image."""

    glob: GlobalOutput
    local: LocalResult
    sl: SaliencyMap
    sc: SaliencyMap
    y_hat_f: Optional[torch.Tensor]

    @property
    def y_hat_g(self) -> torch.Tensor:
        return self.glob.y_hat_g[0]

    @property
    def sg(self) -> SaliencyMap:
        return self.glob.saliency("sg")

    def to_record(self) -> dict:
        def vec(t):
            return None if t is None else [float(v) for v in t.detach().flatten()]
        return {
            "y_hat_g": vec(self.y_hat_g),
            "y_hat_l": vec(self.local.y_hat_l),
            "y_hat_f": vec(self.y_hat_f),
            "alphas": vec(self.local.alphas),
            "locations": [loc.to_dict() for loc in self.local.locations],
        }


class GLAM(nn.Module):
    def __init__(self, config: GlamConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.global_net = GlobalNet(config.global_)
        self.local_net = LocalNet(config.local)
        self.attention = AttentionHead(config.local.feature_dim, config.local.attention_dim)
        self.fusion = FusionHead(config.global_.channels[-1], config.local.feature_dim)
        self.use_attention = config.local.aggregation == "attention"
        # stage tags whose weights are trained or loaded
        self.completed: set[str] = set()

    def parts(self) -> dict:
        return {"global": self.global_net, "local": self.local_net,
                "attention": self.attention, "fusion": self.fusion}

    def registry(self, stage: str):
        parts = self.parts()
        return module_registry({name: parts[name] for name in STAGE_PARTS[stage]})

    def local_forward(self, image: torch.Tensor, locations: list[PatchLocation],
                      attention: Optional[bool] = None) -> LocalResult:
        """Run the local net on crops of one ``[1, H, W]`` image and aggregate them."""
        attention = self.use_attention if attention is None else attention
        crops = torch.stack(extract_patches(image, locations))
        out = self.local_net(crops)
        if attention:
            y, z, alphas = aggregate_attention(out.y_hat, out.z, self.attention)
            return LocalResult(y, z, alphas, out.a, locations)
        y = aggregate_concat(out.a, self.config.local.t_local)
        return LocalResult(y, None, None, out.a, locations)

    def propose(self, glob: GlobalOutput, count: int, index: int = 0) -> list[PatchLocation]:
        return select_patches(glob.sg[index].detach(), count, self.config.local.patch_px,
                              self.config.image_dims)

    def infer(self, image: torch.Tensor, M: Optional[int] = None,
              gamma_c: Optional[float] = None, attention: Optional[bool] = None,
              fuse: bool = True) -> Inference:
        """Forward pass on one image with ``M`` local patches."""
        M = self.config.train.M if M is None else M
        if M < 1:
            raise ValueError(f"M must be >= 1, got {M}")
        gamma_c = self.config.gamma_c if gamma_c is None else gamma_c
        if image.dim() == 2:
            image = image[None]
        glob = self.global_net(image[None])
        locations = self.propose(glob, M)
        local = self.local_forward(image, locations, attention)
        sl = local.saliency(self.config.image_dims)
        sc = combine_saliency(glob.saliency("sg"), sl, gamma_c)
        y_f = None
        if fuse and local.z_l is not None:
            y_f = self.fusion(glob.z_g[0], local.z_l)
        return Inference(glob, local, sl, sc, y_f)
