from .augment import AugConfig, cutmix, cutmix_box
from .dataset import Dataset, Experience, make_split_stream
from .idx import load_idx, write_idx
from .shapes import shapes_dataset
from .sources import OODSource, load_image, sample_ood_batch, save_image, write_patch_cache

__all__ = [
    "AugConfig",
    "Dataset",
    "Experience",
    "OODSource",
    "cutmix",
    "cutmix_box",
    "load_idx",
    "load_image",
    "make_split_stream",
    "sample_ood_batch",
    "save_image",
    "shapes_dataset",
    "write_idx",
    "write_patch_cache",
]
