"""
Consolidation data supply.

Source kinds:

``single_image``  one PNG or binary PPM image (``path``)
``image_folder``  every PNG/PPM file in ``path``, sorted by name
``noise``         one fixed image of i.i.d. uniform pixels (``noise_size``
                  square, seeded by ``noise_seed``), no assets
``real_data``     the images of an experience (``images`` array)
``patch_cache``   precomputed augmented patches (``path``), used as-is

Items are identified by a global index. Item ``j`` is rendered from its own
generator, and CutMix pairs it with item ``j ^ 1``, so a sample never depends
on the batch it lands in.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import container
from ..errors import FormatError
from ..numerics import ItemStream, Tensor, seeded_rng
from .augment import AugConfig, Pyramid, color_jitter, cutmix, draw_view_params, match_channels, render_views

KINDS = ("single_image", "image_folder", "noise", "real_data", "patch_cache")
IMAGE_SUFFIXES = (".png", ".ppm")


def load_image(path) -> np.ndarray:
    """Decode an 8-bit PNG or binary PPM into float32 (3, H, W) in [0, 1]."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from None
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(path, img: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.round(np.asarray(img).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)


@dataclass
class OODSource:
    kind: str
    path: str | None = None
    images: np.ndarray | None = field(default=None, repr=False)
    noise_size: int = 128
    noise_seed: int = 0
    _pyramids: list | None = field(default=None, init=False, repr=False, compare=False)
    _patches: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown OOD source kind {self.kind!r}; expected one of {KINDS}")
        if self.kind in ("single_image", "image_folder", "patch_cache") and not self.path:
            raise ValueError(f"{self.kind} source needs a path")
        if self.kind == "real_data" and (self.images is None or len(self.images) == 0):
            raise ValueError("real_data source needs a non-empty image array")

    @classmethod
    def single_image(cls, path) -> OODSource:
        return cls("single_image", str(path))

    @classmethod
    def noise(cls, size: int = 128, seed: int = 0) -> OODSource:
        return cls("noise", noise_size=size, noise_seed=seed)

    @classmethod
    def real_data(cls, images: np.ndarray) -> OODSource:
        return cls("real_data", images=np.asarray(images, dtype=np.float32))

    def describe(self) -> dict:
        d = {"kind": self.kind}
        if self.path:
            d["path"] = self.path
        if self.kind == "noise":
            d.update(noise_size=self.noise_size, noise_seed=self.noise_seed)
        if self.images is not None:
            d["n_images"] = int(len(self.images))
        return d

    def pyramids(self) -> list[Pyramid]:
        if self._pyramids is None:
            if self.kind == "single_image":
                imgs = [load_image(self.path)]
            elif self.kind == "image_folder":
                folder = Path(self.path)
                files = sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES) if folder.is_dir() else []
                if not files:
                    raise FormatError(f"image folder {folder} has no PNG/PPM images")
                imgs = [load_image(p) for p in files]
            elif self.kind == "real_data":
                imgs = list(self.images)
            elif self.kind == "noise":
                rng = seeded_rng(self.noise_seed, "ood/noise")
                imgs = [rng.uniform(0.0, 1.0, size=(3, self.noise_size, self.noise_size)).astype(np.float32)]
            else:
                imgs = []
            self._pyramids = [Pyramid(im) for im in imgs]
        return self._pyramids

    def patches(self) -> np.ndarray:
        if self._patches is None:
            manifest, arrays = container.read(self.path)
            if manifest.get("format") != "daclab-patches" or "patches" not in arrays:
                raise FormatError(f"{self.path} is not a patch cache")
            self._patches = arrays["patches"]
        return self._patches


def sample_items(source: OODSource, aug: AugConfig, indices, stream: ItemStream) -> np.ndarray:
    """Render the given item indices of ``stream`` as a (n, C, H, W) array in [0, 1]."""
    indices = list(indices)
    if source.kind == "patch_cache":
        patches = source.patches()
        return np.stack([patches[j % len(patches)] for j in indices]).astype(np.float32)

    needed = sorted(set(indices) | ({j ^ 1 for j in indices} if aug.cutmix else set()))
    pyrs = source.pyramids()
    which, params, rngs = [], [], {}
    for j in needed:
        rng = stream.item_rng(j)
        b = int(rng.integers(0, len(pyrs))) if len(pyrs) > 1 else 0
        which.append(b)
        params.append(draw_view_params(pyrs[b].shape[1:], aug, rng))
        rngs[j] = rng
    views = render_views(pyrs, which, params, aug)
    views = match_channels(views, aug.channels)
    views = color_jitter(views, np.array([p.jitter for p in params]))
    pos = {j: k for k, j in enumerate(needed)}

    out = np.empty((len(indices), aug.channels, *aug.out_size), dtype=np.float32)
    for k, j in enumerate(indices):
        img = views[pos[j]]
        if aug.cutmix:
            img = cutmix(img, views[pos[j ^ 1]], rngs[j], aug.cutmix_beta)
        out[k] = img
    return np.clip(out, 0.0, 1.0)


def sample_ood_batch(source: OODSource, aug: AugConfig, batch: int, stream: ItemStream, dtype=np.float32) -> Tensor:
    """Next ``batch`` items of ``stream`` as a (batch, C, H, W) tensor in [0, 1]."""
    return Tensor(sample_items(source, aug, stream.take(batch), stream), dtype=dtype)


def write_patch_cache(path, source: OODSource, aug: AugConfig, n: int, seed: int) -> None:
    """Precompute ``n`` augmented patches, trading disk for augmentation time."""
    stream = ItemStream(seed, "patch-cache")
    patches = sample_items(source, aug, range(n), stream)
    manifest = {"format": "daclab-patches", "version": 1, "source": source.describe(), "seed": int(seed), "count": n}
    container.write(path, manifest, {"patches": patches})
