"""
Stochastic augmentation of consolidation samples.

Per item, in order: random crop (area fraction and aspect ratio) -> resize to
the output size -> horizontal flip -> rotation about the centre (zero fill)
-> colour jitter (brightness, contrast, saturation) -> optional CutMix with
the item's partner. Crop, resize, flip and rotation are composed into a
single inverse coordinate map and resolved with one bilinear lookup, reading
from a 2x box-filtered pyramid level close to the crop/output scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError


@dataclass(frozen=True)
class AugConfig:
    out_size: tuple[int, int] = (16, 16)
    channels: int = 3
    crop_scale: tuple[float, float] = (0.08, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    rotation: float = 30.0
    flip_p: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    cutmix: bool = True
    cutmix_beta: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "out_size", tuple(int(v) for v in self.out_size))
        object.__setattr__(self, "crop_scale", tuple(float(v) for v in self.crop_scale))
        object.__setattr__(self, "crop_ratio", tuple(float(v) for v in self.crop_ratio))
        lo, hi = self.crop_scale
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"crop_scale must lie in (0, 1], got {self.crop_scale}")
        if not (0 < self.crop_ratio[0] <= self.crop_ratio[1]):
            raise ValueError(f"crop_ratio must be positive and ordered, got {self.crop_ratio}")
        if not 0 <= self.flip_p <= 1:
            raise ValueError(f"flip_p must lie in [0, 1], got {self.flip_p}")
        for name in ("rotation", "brightness", "contrast", "saturation"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.cutmix_beta <= 0:
            raise ValueError(f"cutmix_beta must be > 0, got {self.cutmix_beta}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")

    @classmethod
    def identity(cls, out_size=(16, 16), channels: int = 3) -> AugConfig:
        return cls(
            out_size=out_size, channels=channels, crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0),
            rotation=0.0, flip_p=0.0, brightness=0.0, contrast=0.0, saturation=0.0, cutmix=False,
        )


class Pyramid:
    """An image (C, H, W) plus successively 2x box-downsampled copies."""

    def __init__(self, image: np.ndarray, min_size: int = 8):
        levels = [np.asarray(image, dtype=np.float32)]
        while min(levels[-1].shape[1:]) >= 2 * min_size:
            im = levels[-1]
            h, w = (im.shape[1] // 2) * 2, (im.shape[2] // 2) * 2
            im = im[:, :h, :w]
            levels.append(0.25 * (im[:, 0::2, 0::2] + im[:, 1::2, 0::2] + im[:, 0::2, 1::2] + im[:, 1::2, 1::2]))
        self.levels = levels

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.levels[0].shape


def _bilinear(img: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    _, h, w = img.shape
    sx = np.clip(sx, 0, w - 1)
    sy = np.clip(sy, 0, h - 1)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0).astype(np.float32)
    fy = (sy - y0).astype(np.float32)
    top = img[:, y0, x0] * (1 - fx) + img[:, y0, x1] * fx
    bot = img[:, y1, x0] * (1 - fx) + img[:, y1, x1] * fx
    return top * (1 - fy) + bot * fy


@dataclass
class ViewParams:
    """Random draws for one item's geometric and colour transforms."""

    crop: tuple[float, float, float, float]  # x0, y0, width, height in source pixels
    flip: bool
    angle: float
    jitter: tuple[float, float, float]  # brightness, contrast, saturation factors


def draw_view_params(src_shape: tuple[int, int], aug: AugConfig, rng: np.random.Generator) -> ViewParams:
    H, W = src_shape
    lo, hi = aug.crop_scale
    area = rng.uniform(lo, hi) if hi > lo else lo
    r0, r1 = aug.crop_ratio
    ratio = math.exp(rng.uniform(math.log(r0), math.log(r1))) if r1 > r0 else r0
    cw = min(W * math.sqrt(area * ratio), W)
    ch = min(H * math.sqrt(area / ratio), H)
    x0 = rng.uniform(0, W - cw) if W > cw else 0.0
    y0 = rng.uniform(0, H - ch) if H > ch else 0.0
    flip = bool(aug.flip_p > 0 and rng.uniform() < aug.flip_p)
    angle = rng.uniform(-aug.rotation, aug.rotation) if aug.rotation > 0 else 0.0
    jitter = tuple(
        rng.uniform(1 - s, 1 + s) if s > 0 else 1.0 for s in (aug.brightness, aug.contrast, aug.saturation)
    )
    return ViewParams((x0, y0, cw, ch), flip, angle, jitter)


def _pyramid_level(pyr: Pyramid, p: ViewParams, out_size) -> int:
    oh, ow = out_size
    scale = min(p.crop[2] / ow, p.crop[3] / oh)
    return min(int(math.floor(math.log2(scale))) if scale >= 2 else 0, len(pyr.levels) - 1)


def render_views(pyrs: list[Pyramid], which: list[int], params: list[ViewParams], aug: AugConfig) -> np.ndarray:
    """Resolve crop, resize, flip and rotation for a batch of items in one gather per pyramid level."""
    oh, ow = aug.out_size
    n = len(params)
    x0, y0, cw, ch = (np.array([p.crop[k] for p in params])[:, None, None] for k in range(4))
    th = np.radians([p.angle for p in params])[:, None, None]
    flip = np.array([p.flip for p in params])[:, None, None]
    v, u = np.mgrid[0:oh, 0:ow].astype(np.float64)
    u = np.broadcast_to(u, (n, oh, ow))
    v = np.broadcast_to(v, (n, oh, ow))
    rotated = th != 0
    inside = np.ones((n, oh, ow), dtype=bool)
    if rotated.any():
        cu, cv = (ow - 1) / 2, (oh - 1) / 2
        du, dv = u - cu, v - cv
        cos, sin = np.cos(th), np.sin(th)
        ru = cos * du + sin * dv + cu
        rv = -sin * du + cos * dv + cv
        u = np.where(rotated, ru, u)
        v = np.where(rotated, rv, v)
        inside = (u >= -0.5) & (u <= ow - 0.5) & (v >= -0.5) & (v <= oh - 0.5)
    u = np.where(flip, (ow - 1) - u, u)
    sx_full = x0 + (u + 0.5) * cw / ow
    sy_full = y0 + (v + 0.5) * ch / oh
    channels = pyrs[which[0]].shape[0]
    out = np.empty((n, channels, oh, ow), dtype=np.float32)
    groups: dict[tuple[int, int], list[int]] = {}
    for k, (b, p) in enumerate(zip(which, params)):
        groups.setdefault((b, _pyramid_level(pyrs[b], p, aug.out_size)), []).append(k)
    for (b, level), ks in groups.items():
        img = pyrs[b].levels[level]
        f = 2.0**level
        ks = np.array(ks)
        sx = sx_full[ks] / f - 0.5
        sy = sy_full[ks] / f - 0.5
        out[ks] = _bilinear(img, sx, sy).transpose(1, 0, 2, 3)
    return out * inside[:, None]


def geometric_view(pyr: Pyramid, aug: AugConfig, rng: np.random.Generator) -> np.ndarray:
    params = draw_view_params(pyr.shape[1:], aug, rng)
    return render_views([pyr], [0], [params], aug)[0]


def _gray(imgs: np.ndarray) -> np.ndarray:
    """Luma of a batch (B, C, H, W), keeping a channel axis."""
    if imgs.shape[1] == 1:
        return imgs
    return (0.299 * imgs[:, 0] + 0.587 * imgs[:, 1] + 0.114 * imgs[:, 2])[:, None]


def color_jitter(imgs: np.ndarray, factors: np.ndarray) -> np.ndarray:
    """Brightness, contrast, saturation for a batch (B, C, H, W); ``factors`` is (B, 3)."""
    f = factors[:, :, None, None, None].astype(np.float32)
    if np.any(f[:, 0] != 1):
        imgs = np.clip(imgs * f[:, 0], 0, 1)
    if np.any(f[:, 1] != 1):
        m = _gray(imgs).mean(axis=(1, 2, 3), keepdims=True)
        imgs = np.clip((imgs - m) * f[:, 1] + m, 0, 1)
    if np.any(f[:, 2] != 1) and imgs.shape[1] == 3:
        g = _gray(imgs)
        imgs = np.clip((imgs - g) * f[:, 2] + g, 0, 1)
    return imgs


def cutmix_box(shape: tuple[int, int], lam: float, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Box (top, left, height, width) of area fraction ~ 1 - lam, fully inside the image."""
    h, w = shape
    cut = math.sqrt(max(0.0, 1.0 - lam))
    bh, bw = int(round(cut * h)), int(round(cut * w))
    top = int(rng.integers(0, h - bh + 1))
    left = int(rng.integers(0, w - bw + 1))
    return top, left, bh, bw


def cutmix(x1: np.ndarray, x2: np.ndarray, rng: np.random.Generator, beta: float = 1.0, lam: float | None = None) -> np.ndarray:
    """Paste a box of ``x2`` into ``x1``; ``lam`` ~ Beta(beta, beta) unless given."""
    if x1.shape != x2.shape:
        raise ShapeError(f"cutmix: shapes {x1.shape} and {x2.shape} differ")
    if lam is None:
        lam = float(rng.beta(beta, beta))
    top, left, bh, bw = cutmix_box(x1.shape[-2:], lam, rng)
    out = x1.copy()
    out[..., top : top + bh, left : left + bw] = x2[..., top : top + bh, left : left + bw]
    return out


def match_channels(imgs: np.ndarray, channels: int) -> np.ndarray:
    """Convert a batch (B, C, H, W) to 1 or 3 channels."""
    if imgs.shape[1] == channels:
        return imgs
    if channels == 1:
        return _gray(imgs)
    return np.repeat(imgs[:, :1], 3, axis=1)
