"""Saliency map container shared by every stage of the pipeline."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from glam.diffcore import resample_nearest

CLASSES = ("malignant", "benign")


@dataclass
class SaliencyMap:
    """Per-class grid of values in [0, 1].

    ``values`` is ``[C, h, w]`` (classes ordered as :data:`CLASSES`) and
    ``scale`` is the number of input-image pixels per grid cell.
    """

    values: torch.Tensor
    scale: float

    @property
    def grid(self) -> tuple[int, int]:
        return tuple(self.values.shape[-2:])

    def resampled(self, h: int, w: int) -> "SaliencyMap":
        gh, _ = self.grid
        return SaliencyMap(resample_nearest(self.values, h, w), self.scale * gh / h)

    def numpy(self) -> np.ndarray:
        return self.values.detach().cpu().double().numpy()
