"""Dead-leaves style structured image, used as a stand-in natural image."""

from __future__ import annotations

import numpy as np

from ..numerics import seeded_rng


def dead_leaves_image(seed: int = 0, size: int = 128, n_leaves: int = 5000, radius_scale: float = 0.01) -> np.ndarray:
    """
    Occluding random discs, boxes and wedges with flat, gradient or striped fills.

    Leaf radii follow a power law starting at ``radius_scale * size``.
    """
    rng = seeded_rng(seed, "dead-leaves")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((3, size, size))
    filled = np.zeros((size, size), dtype=bool)
    # painted front to back: a leaf only covers pixels nobody in front of it owns
    for _ in range(n_leaves):
        r = size * radius_scale / rng.uniform(0.02, 1.0) ** 0.7
        r = min(r, size * 0.25)
        cx, cy = rng.uniform(0, size, 2)
        kind = rng.integers(0, 3)
        dx, dy = xx - cx, yy - cy
        if kind == 0:
            mask = dx * dx + dy * dy <= r * r
        elif kind == 1:
            th = rng.uniform(0, np.pi)
            u = np.cos(th) * dx + np.sin(th) * dy
            v = -np.sin(th) * dx + np.cos(th) * dy
            mask = (np.abs(u) <= r) & (np.abs(v) <= r * rng.uniform(0.3, 1.0))
        else:
            ang = np.arctan2(dy, dx)
            a0 = rng.uniform(-np.pi, np.pi)
            mask = (dx * dx + dy * dy <= r * r) & (np.cos(ang - a0) > rng.uniform(-0.2, 0.6))
        mask &= ~filled
        if not mask.any():
            continue
        c1 = rng.uniform(0, 1, 3) * rng.uniform(0.1, 1.0)
        c2 = rng.uniform(0, 1, 3) * rng.uniform(0.1, 1.0)
        fill = rng.integers(0, 3)
        if fill == 0:
            t = np.zeros_like(xx)
        elif fill == 1:
            th = rng.uniform(0, 2 * np.pi)
            t = np.clip(0.5 + (np.cos(th) * dx + np.sin(th) * dy) / (2 * r + 1e-9), 0, 1)
        else:
            period = rng.uniform(2, 6)
            th = rng.uniform(0, np.pi)
            t = (np.floor((np.cos(th) * xx + np.sin(th) * yy) / period) % 2).astype(float)
        for ch in range(3):
            img[ch][mask] = (c1[ch] * (1 - t) + c2[ch] * t)[mask]
        filled |= mask
        if filled.all():
            break
    img[:, ~filled] = rng.uniform(0, 1, 3)[:, None]
    return img.astype(np.float32)
