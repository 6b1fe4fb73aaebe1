"""Deterministic synthetic lesion images with exact ground-truth masks.

Images imitate a screening view: smooth multi-octave texture inside a
half-ellipse "breast" attached to the left or right border. Benign lesions
are smooth low-contrast Gaussian bumps; malignant ones are brighter, tighter
bumps with radial spikes. Every example draws from its own generator seeded
by ``(seed, index)``, so examples can be produced in any order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from glam.global_net import ConfigError

SPLITS = ("train", "val", "test")


@dataclass
class SynthConfig:
    height: int = 768
    width: int = 512
    n_train: int = 600
    n_val: int = 150
    n_test: int = 150
    p_malignant: float = 0.3
    p_benign: float = 0.3
    lesion_count: tuple[int, int] = (1, 2)
    radius_frac: tuple[float, float] = (0.018, 0.03)
    area_budget: float = 0.01
    noise_octaves: int = 3
    noise_amplitude: float = 0.15
    contrast_malignant: tuple[float, float] = (0.35, 0.5)
    contrast_benign: tuple[float, float] = (0.2, 0.3)
    seed: int = 0

    def radius_px(self) -> tuple[float, float]:
        m = min(self.height, self.width)
        return self.radius_frac[0] * m, self.radius_frac[1] * m

    def validate(self) -> None:
        if self.height < 8 or self.width < 8:
            raise ConfigError("images must be at least 8x8")
        if not (0 <= self.p_malignant <= 1 and 0 <= self.p_benign <= 1):
            raise ConfigError("positive fractions must lie in [0, 1]")
        lo, hi = self.lesion_count
        if lo < 1 or hi < lo:
            raise ConfigError(f"invalid lesion_count {self.lesion_count}")
        r_lo, r_hi = self.radius_px()
        if r_lo < 1.0 or r_hi < r_lo:
            raise ConfigError(f"lesion radius range {r_lo:.2f}-{r_hi:.2f}px is invalid")
        budget = self.area_budget * self.height * self.width
        classes = (self.p_malignant > 0) + (self.p_benign > 0)
        if classes * lo * math.pi * r_lo ** 2 > budget:
            raise ConfigError(
                f"smallest lesion set ({lo} x r={r_lo:.1f}px) exceeds the area budget of {budget:.0f}px")


@dataclass
class Example:
    id: str
    pixels: np.ndarray                      # uint8 [H, W]
    labels: tuple[int, int]                 # (malignant, benign)
    masks: tuple[Optional[np.ndarray], Optional[np.ndarray]]  # bool [H, W] or None
    split: str = "train"

    @property
    def image(self) -> np.ndarray:
        """Float image ``[1, H, W]`` in [0, 1]."""
        return (self.pixels.astype(np.float32) / 255.0)[None]

    @property
    def positive(self) -> bool:
        return any(self.labels)

    def mask_array(self) -> Optional[np.ndarray]:
        """``[2, H, W]`` uint8 masks, or ``None`` when the image has no lesion."""
        if not self.positive:
            return None
        H, W = self.pixels.shape
        return np.stack([m if m is not None else np.zeros((H, W), bool)
                         for m in self.masks]).astype(np.uint8)


def _value_noise(rng: np.random.Generator, H: int, W: int, octaves: int) -> np.ndarray:
    total = np.zeros((H, W))
    amp = 1.0
    for o in range(octaves):
        gh, gw = 3 * 2 ** o + 1, 2 * 2 ** o + 1
        coarse = rng.uniform(-1.0, 1.0, size=(gh, gw))
        total += amp * ndimage.zoom(coarse, (H / gh, W / gw), order=3, mode="nearest",
                                    grid_mode=True)[:H, :W]
        amp *= 0.5
    total = ndimage.gaussian_filter(total, sigma=min(H, W) / 100)
    return total / max(np.abs(total).max(), 1e-12)


def _breast(rng: np.random.Generator, H: int, W: int):
    left = rng.random() < 0.5
    cy = H * rng.uniform(0.45, 0.55)
    cx = 0.0 if left else W - 1.0
    ay = H * rng.uniform(0.42, 0.5)
    ax = W * rng.uniform(0.75, 0.95)
    y, x = np.mgrid[0:H, 0:W]
    d = np.sqrt(((y - cy) / ay) ** 2 + ((x - cx) / ax) ** 2)
    return np.clip(1.0 - d ** 2, 0.0, 1.0) ** 0.3, d


def _render_lesion(rng, kind: str, r: float, contrast: float, center, shape):
    """Intensity bump and mask for one lesion, both on the full ``shape`` grid."""
    H, W = shape
    cy, cx = center
    reach = int(math.ceil(2.8 * r + 2))
    y0, y1 = max(0, int(cy) - reach), min(H, int(cy) + reach + 1)
    x0, x1 = max(0, int(cx) - reach), min(W, int(cx) + reach + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    d2 = dy ** 2 + dx ** 2
    if kind == "benign":
        sigma = r / 1.8
        bump = contrast * np.exp(-d2 / (2 * sigma ** 2))
        mask = d2 <= r ** 2
    else:
        core = 0.75 * r
        sigma = core / 1.6
        bump = contrast * np.exp(-d2 / (2 * sigma ** 2))
        mask = d2 <= core ** 2
        half_width = max(0.7, r / 7)
        for _ in range(int(rng.integers(4, 9))):
            theta = rng.uniform(0, 2 * math.pi)
            length = rng.uniform(1.6, 2.6) * r
            along = dx * math.cos(theta) + dy * math.sin(theta)
            across = np.abs(-dx * math.sin(theta) + dy * math.cos(theta))
            frac = np.clip(along / length, 0.0, 1.0)
            spike = (along >= 0) & (along <= length) & (across <= half_width * (1 - 0.6 * frac) + 0.5)
            bump = np.where(spike, np.maximum(bump, contrast * (0.95 - 0.45 * frac)), bump)
            mask |= spike
    full_bump = np.zeros(shape)
    full_mask = np.zeros(shape, bool)
    full_bump[y0:y1, x0:x1] = bump
    full_mask[y0:y1, x0:x1] = mask
    return full_bump, full_mask


def _draw_lesions(rng, config: SynthConfig, kinds: list[str], tissue_d: np.ndarray):
    H, W = config.height, config.width
    r_lo, r_hi = config.radius_px()
    budget = config.area_budget * H * W
    inner = np.argwhere(tissue_d < 0.75)
    # shrink to one smallest lesion per class if random draws keep busting the budget
    for attempt in range(200):
        fallback = attempt >= 100
        drawn = list(dict.fromkeys(kinds)) if fallback else kinds
        bump = np.zeros((H, W))
        masks = {"malignant": np.zeros((H, W), bool), "benign": np.zeros((H, W), bool)}
        for kind in drawn:
            r = r_lo if fallback else rng.uniform(r_lo, r_hi)
            lo, hi = config.contrast_malignant if kind == "malignant" else config.contrast_benign
            cy, cx = inner[rng.integers(len(inner))]
            b, m = _render_lesion(rng, kind, r, rng.uniform(lo, hi), (float(cy), float(cx)), (H, W))
            bump = np.maximum(bump, b)
            masks[kind] |= m
        if (masks["malignant"] | masks["benign"]).sum() <= budget:
            return bump, masks
    raise ConfigError(f"could not place lesions {kinds} within the area budget of {budget:.0f}px")


def generate_example(config: SynthConfig, index: int, split: str = "train") -> Example:
    rng = np.random.default_rng([config.seed, index])
    H, W = config.height, config.width
    tissue, d = _breast(rng, H, W)
    noise = _value_noise(rng, H, W, config.noise_octaves)
    base = rng.uniform(0.45, 0.55)
    image = tissue * (base + config.noise_amplitude * noise)
    labels = (int(rng.random() < config.p_malignant), int(rng.random() < config.p_benign))
    kinds = []
    lo, hi = config.lesion_count
    for kind, positive in zip(("malignant", "benign"), labels):
        if positive:
            kinds += [kind] * int(rng.integers(lo, hi + 1))
    masks: tuple = (None, None)
    if kinds:
        bump, m = _draw_lesions(rng, config, kinds, d)
        image = image + bump * (tissue > 0)
        inside = tissue > 0
        masks = tuple(m[k] & inside if lab else None
                      for k, lab in zip(("malignant", "benign"), labels))
    image = image + rng.normal(0.0, 0.01, size=(H, W)) * (tissue > 0)
    pixels = np.floor(np.clip(image, 0.0, 1.0) * 255 + 0.5).astype(np.uint8)
    return Example(f"{split}-{index:05d}", pixels, labels, masks, split)


def generate(config: SynthConfig) -> dict[str, list[Example]]:
    """Train/val/test splits; example indices are disjoint across splits."""
    config.validate()
    counts = (config.n_train, config.n_val, config.n_test)
    out, start = {}, 0
    for split, n in zip(SPLITS, counts):
        out[split] = [generate_example(config, start + i, split) for i in range(n)]
        start += n
    return out
