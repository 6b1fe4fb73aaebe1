"""Greedy selection of rectangular regions of interest from a coarse saliency map."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from glam.diffcore import PreconditionError, round_half_up
from glam.global_net import ConfigError
from glam.maps import SaliencyMap


@dataclass(frozen=True)
class PatchLocation:
    """Top-left corner and size of a crop, in input-image pixels."""

    row: int
    col: int
    h: int
    w: int

    def inside(self, image_h: int, image_w: int) -> bool:
        return 0 <= self.row <= image_h - self.h and 0 <= self.col <= image_w - self.w

    def to_dict(self) -> dict:
        return {"row": self.row, "col": self.col, "h": self.h, "w": self.w}


def minmax_normalize(values: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1]; a constant map becomes all zeros."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def window_dims(patch_px: tuple[int, int], grid: tuple[int, int],
                image_dims: tuple[int, int]) -> tuple[int, int]:
    (hc, wc), (h, w), (H, W) = patch_px, grid, image_dims
    wh = round_half_up(hc * h / H)
    ww = round_half_up(wc * w / W)
    if not (1 <= wh <= h and 1 <= ww <= w):
        raise ConfigError(
            f"patch {hc}x{wc} maps to a {wh}x{ww} window, which does not fit the {h}x{w} grid")
    return wh, ww


def _window_sum(grid: np.ndarray, r: int, c: int, wh: int, ww: int) -> float:
    # correctly rounded, so equal windows tie exactly regardless of position
    return math.fsum(grid[r:r + wh, c:c + ww].ravel().tolist())


def _class_summed(saliency) -> np.ndarray:
    if isinstance(saliency, SaliencyMap):
        values = saliency.numpy()
    elif isinstance(saliency, torch.Tensor):
        values = saliency.detach().cpu().double().numpy()
    else:
        values = np.asarray(saliency, dtype=np.float64)
    if values.ndim == 2:
        values = values[None]
    return sum(minmax_normalize(v) for v in values)


def select_patches(saliency, K: int, patch_px: tuple[int, int],
                   image_dims: tuple[int, int]) -> list[PatchLocation]:
    """Pick ``K`` windows of maximal summed saliency, zeroing each pick.

    ``saliency`` is ``[C, h, w]`` (a :class:`SaliencyMap`, tensor or array).
    Classes are min-max normalised and summed; ties between windows go to
    the smallest (row, col), and a window position is never picked twice.
    Grid positions are mapped to pixels by the grid-to-image ratio and
    clamped so every crop lies inside the image.
    """
    if K < 1:
        raise PreconditionError("K must be >= 1")
    grid = _class_summed(saliency)
    h, w = grid.shape
    H, W = image_dims
    hc, wc = patch_px
    if hc > H or wc > W:
        raise ConfigError(f"patch {hc}x{wc} larger than image {H}x{W}")
    wh, ww = window_dims(patch_px, (h, w), image_dims)
    nh, nw = h - wh + 1, w - ww + 1
    sums = np.empty((nh, nw))
    for r in range(nh):
        for c in range(nw):
            sums[r, c] = _window_sum(grid, r, c, wh, ww)

    if K > nh * nw:
        raise PreconditionError(f"K={K} exceeds the {nh * nw} distinct window positions")

    out = []
    taken = np.zeros((nh, nw), dtype=bool)
    for _ in range(K):
        # np.argmax returns the first maximum in row-major order
        r, c = divmod(int(np.argmax(sums)), nw)
        row = min(max(r * H // h, 0), H - hc)
        col = min(max(c * W // w, 0), W - wc)
        out.append(PatchLocation(row, col, hc, wc))
        taken[r, c] = True
        grid[r:r + wh, c:c + ww] = 0.0
        for rr in range(max(0, r - wh + 1), min(nh, r + wh)):
            for cc in range(max(0, c - ww + 1), min(nw, c + ww)):
                sums[rr, cc] = -np.inf if taken[rr, cc] else _window_sum(grid, rr, cc, wh, ww)
    return out


def random_locations(rng: np.random.Generator, K: int, patch_px: tuple[int, int],
                     image_dims: tuple[int, int]) -> list[PatchLocation]:
    """``K`` crops with top-left corners uniform over all valid positions."""
    (hc, wc), (H, W) = patch_px, image_dims
    rows = rng.integers(0, H - hc + 1, size=K)
    cols = rng.integers(0, W - wc + 1, size=K)
    return [PatchLocation(int(r), int(c), hc, wc) for r, c in zip(rows, cols)]


def extract_patches(image, locations: list[PatchLocation]) -> list:
    """Pixel-exact crops of a ``[1, H, W]`` (or ``[H, W]``) image."""
    H, W = image.shape[-2:]
    crops = []
    for loc in locations:
        if not loc.inside(H, W):
            raise PreconditionError(f"{loc} is outside the {H}x{W} image")
        crops.append(image[..., loc.row:loc.row + loc.h, loc.col:loc.col + loc.w])
    return crops
