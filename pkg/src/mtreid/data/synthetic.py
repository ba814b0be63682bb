"""Procedural pedestrian-like images for desk-scale experiments.

Pixel values are multiples of 1/255 so PNG export is lossless.

Each identity gets a fixed outfit (top/bottom colors, sleeve and leg length,
bags, hair, build, stripe pattern). Attribute labels are read off that outfit,
so they are learnable from pixels. Cameras change brightness, background and
horizontal placement; every image adds its own jitter and noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .manifest import to_uint8, to_unit
from .types import (
    BOTTOM_COLORS,
    TOP_COLORS,
    AttributeAnnotation,
    DataError,
    DatasetDescriptor,
    Sample,
)

MIN_HEIGHT = 16
MIN_WIDTH = 8

PALETTE = {
    "black": (0.08, 0.08, 0.08),
    "blue": (0.15, 0.25, 0.85),
    "brown": (0.45, 0.28, 0.12),
    "green": (0.15, 0.65, 0.20),
    "grey": (0.50, 0.50, 0.50),
    "pink": (0.95, 0.55, 0.70),
    "purple": (0.50, 0.15, 0.60),
    "red": (0.85, 0.12, 0.12),
    "white": (0.95, 0.95, 0.95),
    "yellow": (0.95, 0.85, 0.15),
}


@dataclass
class SyntheticConfig:
    num_datasets: int = 3
    identities_per_dataset: Union[int, list[int]] = 10
    images_per_identity: int = 10
    image_size: tuple[int, int] = (32, 16)
    cameras: int = 2
    attribute_fraction: float = 1.0 / 3.0
    test_fraction: float = 0.3
    noise: float = 0.03
    color_jitter: float = 0.05

    def identity_counts(self) -> list[int]:
        if isinstance(self.identities_per_dataset, int):
            return [self.identities_per_dataset] * self.num_datasets
        counts = list(self.identities_per_dataset)
        if len(counts) != self.num_datasets:
            raise DataError("identities_per_dataset list must have num_datasets entries")
        return counts

    def annotated_datasets(self) -> list[int]:
        """Indices of datasets that carry attribute labels (the last ones)."""
        k = int(np.floor(self.attribute_fraction * self.num_datasets + 0.5))
        if self.attribute_fraction > 0:
            k = max(k, 1)
        return list(range(self.num_datasets - k, self.num_datasets))

    def validate(self) -> None:
        if min(self.num_datasets, self.images_per_identity, self.cameras) <= 0:
            raise DataError("synthetic counts must be positive")
        if min(self.identity_counts()) <= 0:
            raise DataError("identities_per_dataset must be positive")
        if not 0.0 <= self.attribute_fraction <= 1.0:
            raise DataError("attribute_fraction must lie in [0, 1]")
        if not 0.0 <= self.test_fraction < 1.0:
            raise DataError("test_fraction must lie in [0, 1)")
        h, w = self.image_size
        if h < MIN_HEIGHT or w < MIN_WIDTH:
            raise DataError(
                f"image size {h}x{w} too small to render a figure (need >= {MIN_HEIGHT}x{MIN_WIDTH})"
            )


@dataclass
class Outfit:
    gender: int
    top_color: int
    bottom_color: int
    top_length: int
    bottom_length: int
    backpack: int
    hand_bag: int
    other_bag: int
    hair_length: int
    top_rgb: np.ndarray = field(repr=False)
    bottom_rgb: np.ndarray = field(repr=False)
    skin_rgb: np.ndarray = field(repr=False)
    hair_rgb: np.ndarray = field(repr=False)
    stripe_period: int = 0

    def annotation(self) -> AttributeAnnotation:
        return AttributeAnnotation(
            (
                self.gender,
                self.top_color,
                self.bottom_color,
                self.top_length,
                self.bottom_length,
                self.backpack,
                self.hand_bag,
                self.other_bag,
                self.hair_length,
            )
        )


def _draw_outfits(n: int, rng: np.random.Generator, jitter: float) -> list[Outfit]:
    combos = [(t, b) for t in range(len(TOP_COLORS)) for b in range(len(BOTTOM_COLORS))]
    order = np.concatenate([rng.permutation(len(combos)) for _ in range(n // len(combos) + 1)])
    outfits = []
    for i in range(n):
        t, b = combos[order[i]]
        flags = rng.integers(0, 2, size=7)
        top = np.array(PALETTE[TOP_COLORS[t]]) + rng.uniform(-jitter, jitter, 3)
        bottom = np.array(PALETTE[BOTTOM_COLORS[b]]) + rng.uniform(-jitter, jitter, 3)
        skin = np.array([0.85, 0.65, 0.50]) * rng.uniform(0.6, 1.05)
        hair = np.array([0.25, 0.15, 0.05]) * rng.uniform(0.3, 2.2)
        outfits.append(
            Outfit(
                gender=int(flags[0]),
                top_color=t,
                bottom_color=b,
                top_length=int(flags[1]),
                bottom_length=int(flags[2]),
                backpack=int(flags[3]),
                hand_bag=int(flags[4]),
                other_bag=int(flags[5]),
                hair_length=int(flags[6]),
                top_rgb=np.clip(top, 0, 1),
                bottom_rgb=np.clip(bottom, 0, 1),
                skin_rgb=np.clip(skin, 0, 1),
                hair_rgb=np.clip(hair, 0, 1),
                stripe_period=int(rng.choice([0, 0, 2, 3])),
            )
        )
    return outfits


def _fill(img: np.ndarray, r0: float, r1: float, c0: float, c1: float, rgb) -> None:
    h, w, _ = img.shape
    a, b = int(round(r0 * h)), int(round(r1 * h))
    c, d = int(round(c0 * w)), int(round(c1 * w))
    a, c = max(a, 0), max(c, 0)
    b, d = min(max(b, a + 1), h), min(max(d, c + 1), w)
    img[a:b, c:d] = rgb


def render(outfit: Outfit, size: tuple[int, int], camera_bg, shift: float) -> np.ndarray:
    """Draw the figure on a camera background; ``shift`` is in image-width units."""
    h, w = size
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = camera_bg
    cx = 0.5 + shift
    half = 0.30 if outfit.gender == 0 else 0.22
    # legs
    leg_rows = (0.55, 0.98)
    knee = 0.74 if outfit.bottom_length else leg_rows[1]
    for lo, hi in ((cx - 0.22, cx - 0.03), (cx + 0.03, cx + 0.22)):
        _fill(img, leg_rows[0], knee, lo, hi, outfit.bottom_rgb)
        if outfit.bottom_length:
            _fill(img, knee, leg_rows[1], lo, hi, outfit.skin_rgb)
    _fill(img, 0.55, 0.62, cx - 0.22, cx + 0.22, outfit.bottom_rgb)
    # torso with optional stripes
    _fill(img, 0.18, 0.56, cx - half, cx + half, outfit.top_rgb)
    if outfit.stripe_period:
        a, b = int(round(0.18 * h)), int(round(0.56 * h))
        c, d = max(int(round((cx - half) * w)), 0), min(int(round((cx + half) * w)), w)
        img[a:b:outfit.stripe_period, c:d] *= 0.55
    # arms
    elbow = 0.32 if outfit.top_length else 0.52
    for lo, hi in ((cx - half - 0.12, cx - half), (cx + half, cx + half + 0.12)):
        _fill(img, 0.19, elbow, lo, hi, outfit.top_rgb)
        if outfit.top_length:
            _fill(img, elbow, 0.52, lo, hi, outfit.skin_rgb)
    # head and hair
    _fill(img, 0.03, 0.17, cx - 0.17, cx + 0.17, outfit.skin_rgb)
    _fill(img, 0.01, 0.06, cx - 0.19, cx + 0.19, outfit.hair_rgb)
    if outfit.hair_length:
        _fill(img, 0.05, 0.30, cx - 0.24, cx - 0.13, outfit.hair_rgb)
        _fill(img, 0.05, 0.30, cx + 0.13, cx + 0.24, outfit.hair_rgb)
    # carried items
    if outfit.backpack:
        _fill(img, 0.20, 0.46, cx + half - 0.02, cx + half + 0.16, (0.30, 0.20, 0.10))
    if outfit.hand_bag:
        _fill(img, 0.48, 0.64, cx - half - 0.20, cx - half - 0.04, (0.75, 0.35, 0.10))
    if outfit.other_bag:
        _fill(img, 0.60, 0.80, cx + half + 0.02, cx + half + 0.20, (0.20, 0.30, 0.55))
    return img


def _camera_look(dataset: int, camera: int) -> tuple[np.ndarray, float, float]:
    rng = np.random.default_rng([7919, dataset, camera])
    background = rng.uniform(0.25, 0.75, size=3)
    brightness = 1.0 - 0.12 * (camera % 3) + rng.uniform(-0.05, 0.05)
    shift = (-0.06, 0.06, 0.0)[camera % 3]
    return background, brightness, shift


def generate_synthetic(config: SyntheticConfig, seed: int) -> list[tuple[DatasetDescriptor, list[Sample]]]:
    """Build deterministic synthetic datasets; identical seeds give identical pixels."""
    config.validate()
    counts = config.identity_counts()
    annotated = set(config.annotated_datasets())
    rng = np.random.default_rng([seed, 1])
    outfits = _draw_outfits(sum(counts), rng, config.color_jitter)
    h, w = config.image_size
    per_cam = np.array_split(np.arange(config.images_per_identity), config.cameras)
    out = []
    g = 0
    for d, n_ids in enumerate(counts):
        desc = DatasetDescriptor(
            dataset_id=d,
            name=f"synth{d}",
            num_identities=n_ids,
            has_attributes=d in annotated,
            camera_count=config.cameras,
        )
        samples: list[Sample] = []
        for ident in range(n_ids):
            outfit = outfits[g]
            g += 1
            for cam, images in enumerate(per_cam):
                bg, brightness, shift = _camera_look(d, cam)
                n_test = int(round(len(images) * config.test_fraction))
                for j, k in enumerate(images):
                    img_rng = np.random.default_rng([seed, 2, d, ident, int(k)])
                    jitter = img_rng.integers(-1, 2) / w
                    img = render(outfit, (h, w), bg + img_rng.normal(0, 0.03, 3), shift + jitter)
                    img *= brightness * img_rng.uniform(0.95, 1.05)
                    img += img_rng.normal(0.0, config.noise, img.shape)
                    img = np.roll(img, img_rng.integers(-1, 2), axis=0)
                    samples.append(
                        Sample(
                            image=to_unit(to_uint8(img)),
                            local_identity=ident,
                            dataset_id=d,
                            camera_id=cam,
                            global_identity=ident,
                            attributes=outfit.annotation() if desc.has_attributes else None,
                            split="test" if j >= len(images) - n_test else "train",
                        )
                    )
        out.append((desc, samples))
    return out
