"""
Procedural "shapes" images: each class is a distinct (shape, colour, texture)
combination drawn at a jittered position and size over a noisy dark
background.
"""

from __future__ import annotations

import itertools

import numpy as np

from ..numerics import seeded_rng
from .dataset import Dataset

SHAPES = ("circle", "square", "triangle", "cross", "ring", "diamond", "hbar", "vbar")
COLORS = {
    "red": (0.9, 0.15, 0.1),
    "green": (0.15, 0.8, 0.2),
    "blue": (0.15, 0.3, 0.95),
    "yellow": (0.95, 0.9, 0.15),
    "magenta": (0.9, 0.2, 0.85),
    "cyan": (0.15, 0.85, 0.9),
    "orange": (1.0, 0.55, 0.1),
    "white": (0.95, 0.95, 0.95),
}
TEXTURES = ("solid", "stripes", "checker")


def _mask(shape: str, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    d = np.hypot(dx, dy)
    adx, ady = np.abs(dx), np.abs(dy)
    if shape == "circle":
        return d <= r
    if shape == "square":
        return np.maximum(adx, ady) <= 0.8 * r
    if shape == "triangle":
        return (dy >= -r) & (dy <= 0.8 * r) & (adx <= 0.6 * (dy + r))
    if shape == "cross":
        return ((adx <= 0.3 * r) & (ady <= r)) | ((ady <= 0.3 * r) & (adx <= r))
    if shape == "ring":
        return (d <= r) & (d >= 0.55 * r)
    if shape == "diamond":
        return adx + ady <= r
    if shape == "hbar":
        return (ady <= 0.35 * r) & (adx <= r)
    if shape == "vbar":
        return (adx <= 0.35 * r) & (ady <= r)
    raise ValueError(f"unknown shape {shape!r}")


def _texture(kind: str, xx: np.ndarray, yy: np.ndarray, phase: int) -> np.ndarray:
    if kind == "solid":
        return np.ones_like(xx, dtype=np.float64)
    if kind == "stripes":
        return np.where(((xx + yy + phase) % 4) < 2, 1.0, 0.3)
    return np.where(((xx // 2 + yy // 2 + phase) % 2) == 0, 1.0, 0.3)


def class_combos(n_classes: int, seed: int) -> list[tuple[str, str, str]]:
    combos = list(itertools.product(SHAPES, COLORS, TEXTURES))
    if n_classes > len(combos):
        raise ValueError(f"at most {len(combos)} shape classes available, asked for {n_classes}")
    order = seeded_rng(seed, "shapes/classes").permutation(len(combos))
    return [combos[i] for i in order[:n_classes]]


def render(combo, size: int, rng: np.random.Generator) -> np.ndarray:
    shape, color, texture = combo
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r = size * rng.uniform(0.26, 0.36)
    cx = (size - 1) / 2 + rng.uniform(-0.15, 0.15) * size
    cy = (size - 1) / 2 + rng.uniform(-0.15, 0.15) * size
    mask = _mask(shape, xx - cx, yy - cy, r)
    tex = _texture(texture, xx.astype(int), yy.astype(int), int(rng.integers(0, 4)))
    rgb = np.clip(np.array(COLORS[color]) + rng.normal(0, 0.06, 3), 0, 1)
    bg = rng.uniform(0.0, 0.25) + rng.normal(0, 0.05, (3, size, size))
    img = np.where(mask[None], rgb[:, None, None] * tex[None], bg)
    img = img + rng.normal(0, 0.03, img.shape)
    return np.clip(img, 0.0, 1.0)


def shapes_dataset(
    seed: int,
    n_classes: int,
    samples_per_class: int,
    image_size: int = 16,
    test_fraction: float = 0.2,
) -> Dataset:
    """``n_classes * samples_per_class`` RGB images; the last ``test_fraction`` of each class is test."""
    if n_classes < 2:
        raise ValueError(f"shapes dataset needs at least 2 classes, got {n_classes}")
    combos = class_combos(n_classes, seed)
    x = np.empty((n_classes * samples_per_class, 3, image_size, image_size), dtype=np.float32)
    y = np.repeat(np.arange(n_classes, dtype=np.int64), samples_per_class)
    test = np.zeros(len(y), dtype=bool)
    n_test = int(round(test_fraction * samples_per_class))
    for c, combo in enumerate(combos):
        rng = seeded_rng(seed, f"shapes/render/{c}")
        base = c * samples_per_class
        for j in range(samples_per_class):
            x[base + j] = render(combo, image_size, rng)
        test[base + samples_per_class - n_test : base + samples_per_class] = True
    return Dataset(x, y, test, n_classes, name="shapes")
