"""Procedural image dataset with visually separable classes.

Each class owns a base RGB colour taken from a regular lattice plus an
oriented sinusoidal stripe texture. Images vary by stripe phase, a small
brightness jitter and pixel noise. Lattice spacing is the guaranteed
separation between any two class colours in at least one channel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetError

SIZE = 84
LOW, HIGH = 56.0, 224.0
STRIPE_AMPLITUDE = 24.0
BRIGHTNESS_JITTER = 8.0
NOISE_STD = 6.0


@dataclass(frozen=True)
class ClassStyle:
    name: str
    color: tuple[float, float, float]
    angle: float
    frequency: float


def lattice_levels(n_classes: int) -> np.ndarray:
    per_axis = max(2, math.ceil(round(n_classes ** (1 / 3), 9)))
    while per_axis ** 3 < n_classes:
        per_axis += 1
    return np.linspace(LOW, HIGH, per_axis)


def separation_margin(n_classes: int) -> float:
    """Minimum per-channel gap between the base colours of two classes."""
    levels = lattice_levels(n_classes)
    return float(levels[1] - levels[0])


def class_styles(n_classes: int, seed: int) -> list[ClassStyle]:
    rng = np.random.default_rng(seed)
    levels = lattice_levels(n_classes)
    grid = np.stack(np.meshgrid(levels, levels, levels, indexing="ij"), -1).reshape(-1, 3)
    picks = rng.permutation(len(grid))[:n_classes]
    styles = []
    for i, g in enumerate(picks):
        styles.append(ClassStyle(
            name=f"class_{i:03d}",
            color=tuple(float(c) for c in grid[g]),
            angle=float(rng.uniform(0, math.pi)),
            frequency=float(rng.uniform(0.08, 0.35)),
        ))
    return styles


def render(style: ClassStyle, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    phase = rng.uniform(0, 2 * math.pi)
    u = xx * math.cos(style.angle) + yy * math.sin(style.angle)
    stripes = STRIPE_AMPLITUDE * np.sin(style.frequency * u + phase)
    jitter = rng.uniform(-BRIGHTNESS_JITTER, BRIGHTNESS_JITTER, size=3)
    noise = rng.normal(0.0, NOISE_STD, size=(SIZE, SIZE, 3))
    img = np.asarray(style.color) + jitter + stripes[..., None] + noise
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate(out_dir, classes: int = 25, images_per_class: int = 40, seed: int = 0,
             force: bool = False) -> list[ClassStyle]:
    """Write ``classes`` x ``images_per_class`` PNG files under ``out_dir``."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise DatasetError(f"output directory {out} is not empty (use force to overwrite)")
    if classes < 1 or images_per_class < 1:
        raise ValueError("classes and images_per_class must be positive")
    styles = class_styles(classes, seed)
    for ci, style in enumerate(styles):
        cdir = out / style.name
        cdir.mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng([seed, ci])
        for j in range(images_per_class):
            Image.fromarray(render(style, rng)).save(cdir / f"{j:04d}.png")
    return styles
