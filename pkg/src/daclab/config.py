"""
YAML experiment configs.

Top-level keys (all optional except ``stream``):

    name, scheme, seeds, output_dir, eval_mode, workers,
    stream:        dataset (shapes|idx), n_tasks, classes_per_task, seed,
                   shapes: samples_per_class, image_size, n_classes
                   idx: train_images, train_labels, test_images, test_labels
    arch:          kind, hidden, dense, kernel, taps
    adapt:         AdaptConfig fields
    consolidation: ConsolidationConfig fields
    source:        kind, path
    aug:           AugConfig fields (out_size/channels default to the data)

Relative paths inside the file are resolved against the file's directory.
``DACLAB_SEED`` in the environment replaces ``seeds`` with that one value.
"""

from __future__ import annotations

import dataclasses
import gzip
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .datagen import AugConfig, Dataset, Experience, OODSource, load_idx, make_split_stream, shapes_dataset
from .dcl import AdaptConfig
from .errors import ConfigError
from .eval import MODES
from .losses import ConsolidationConfig
from .models import ArchSpec

SCHEMES = ("sequential", "independent", "rehearsal_free_naive")
DATASETS = ("shapes", "idx")
SOURCE_KINDS = ("single_image", "image_folder", "noise", "real_data", "patch_cache")
IDX_FIELDS = ("train_images", "train_labels", "test_images", "test_labels")


@dataclass
class StreamConfig:
    dataset: str = "shapes"
    n_tasks: int = 5
    classes_per_task: int = 2
    seed: int | None = None  # None: follow the run seed
    samples_per_class: int = 100
    image_size: int = 16
    n_classes: int | None = None  # None: n_tasks * classes_per_task
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ValueError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.n_tasks < 1 or self.classes_per_task < 1:
            raise ValueError("n_tasks and classes_per_task must be >= 1")
        if self.dataset == "idx":
            missing = [k for k in IDX_FIELDS if not getattr(self, k)]
            if missing:
                raise ValueError(f"idx dataset needs {', '.join(missing)}")


@dataclass
class ArchConfig:
    kind: str = "mlp"
    hidden: tuple[int, ...] = (64, 64)
    dense: int = 64
    kernel: int = 3
    taps: tuple[str, ...] | None = None

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.taps is not None:
            self.taps = tuple(self.taps)

    def spec(self, input_shape) -> ArchSpec:
        return ArchSpec(self.kind, tuple(input_shape), tuple(self.hidden), self.dense, self.kernel, taps=self.taps)


@dataclass
class SourceConfig:
    kind: str = "single_image"
    path: str | None = None

    def __post_init__(self):
        if self.kind not in SOURCE_KINDS:
            raise ValueError(f"kind must be one of {SOURCE_KINDS}, got {self.kind!r}")
        if self.kind in ("single_image", "image_folder", "patch_cache") and not self.path:
            raise ValueError(f"{self.kind} needs a path")


@dataclass
class ExperimentConfig:
    stream: StreamConfig
    name: str = "experiment"
    scheme: str = "sequential"
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "runs"
    eval_mode: str = "task_aware"
    workers: int = 1
    arch: ArchConfig = field(default_factory=ArchConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    consolidation: ConsolidationConfig = field(default_factory=ConsolidationConfig)
    source: SourceConfig = field(default_factory=SourceConfig)
    aug: dict = field(default_factory=dict)  # AugConfig overrides; size/channels come from the data

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return _plain(d)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def aug_config(self, input_shape) -> AugConfig:
        kw = dict(self.aug)
        kw.setdefault("out_size", tuple(input_shape[1:]))
        kw.setdefault("channels", input_shape[0])
        return AugConfig(**kw)


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


SECTIONS = {
    "stream": StreamConfig,
    "arch": ArchConfig,
    "adapt": AdaptConfig,
    "consolidation": ConsolidationConfig,
    "source": SourceConfig,
}
TOP_LEVEL = {"name", "scheme", "seeds", "output_dir", "eval_mode", "workers", "aug", *SECTIONS}


def _build_section(name: str, cls, raw, problems: list[str]):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        problems.append(f"{name}: expected a mapping, got {type(raw).__name__}")
        return None
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    for k in sorted(set(raw) - known):
        problems.append(f"{name}.{k}: unknown key (allowed: {', '.join(sorted(known))})")
    kw = {k: v for k, v in raw.items() if k in known}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        problems.append(f"{name}: {exc}")
        return None


def _resolve(path: str | None, base: Path) -> str | None:
    if path is None:
        return None
    p = Path(path)
    return str(p if p.is_absolute() else (base / p))


def config_from_dict(raw: dict, base_dir: Path | str = ".", env: dict | None = None) -> ExperimentConfig:
    """Validate a parsed config; collects every problem before raising ConfigError."""
    env = os.environ if env is None else env
    base = Path(base_dir)
    problems: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    for k in sorted(set(raw) - TOP_LEVEL):
        problems.append(f"{k}: unknown top-level key")
    if "stream" not in raw:
        problems.append("stream: required section is missing")

    sections = {name: _build_section(name, cls, raw.get(name), problems) for name, cls in SECTIONS.items()}

    scheme = raw.get("scheme", "sequential")
    if scheme not in SCHEMES:
        problems.append(f"scheme: must be one of {SCHEMES}, got {scheme!r}")
    eval_mode = raw.get("eval_mode", "task_aware")
    if eval_mode not in MODES:
        problems.append(f"eval_mode: must be one of {MODES}, got {eval_mode!r}")
    workers = raw.get("workers", 1)
    if not isinstance(workers, int) or workers < 1:
        problems.append(f"workers: must be a positive integer, got {workers!r}")

    seeds = raw.get("seeds", [0])
    if "DACLAB_SEED" in env:
        try:
            seeds = [int(env["DACLAB_SEED"])]
        except ValueError:
            problems.append(f"DACLAB_SEED: not an integer: {env['DACLAB_SEED']!r}")
    if isinstance(seeds, int):
        seeds = [seeds]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        problems.append(f"seeds: need a non-empty list of non-negative integers, got {seeds!r}")

    aug = raw.get("aug") or {}
    if not isinstance(aug, dict):
        problems.append("aug: expected a mapping")
        aug = {}
    else:
        try:
            AugConfig(**aug)
        except (TypeError, ValueError) as exc:
            problems.append(f"aug: {exc}")

    stream, source = sections["stream"], sections["source"]
    if stream is not None and stream.dataset == "idx":
        for k in IDX_FIELDS:
            p = _resolve(getattr(stream, k), base)
            setattr(stream, k, p)
            if not Path(p).exists():
                problems.append(f"stream.{k}: file not found: {p}")
    if source is not None and source.path is not None:
        source.path = _resolve(source.path, base)
        if not Path(source.path).exists():
            problems.append(f"source.path: file not found: {source.path}")
    if sections["arch"] is not None and stream is not None and not problems:
        try:
            sections["arch"].spec(_input_shape(stream))
        except (TypeError, ValueError) as exc:
            problems.append(f"arch: {exc}")

    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(
        stream=stream,
        name=str(raw.get("name", "experiment")),
        scheme=scheme,
        seeds=list(seeds),
        output_dir=str(raw.get("output_dir", "runs")),
        eval_mode=eval_mode,
        workers=workers,
        arch=sections["arch"],
        adapt=sections["adapt"],
        consolidation=sections["consolidation"],
        source=source,
        aug=dict(aug),
    )


def load_config(path, env: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: not valid YAML: {exc}") from None
    return config_from_dict(raw, path.parent, env)


def _input_shape(stream: StreamConfig) -> tuple[int, ...]:
    if stream.dataset == "shapes":
        return (3, stream.image_size, stream.image_size)
    opener = gzip.open if str(stream.train_images).endswith(".gz") else open
    with opener(stream.train_images, "rb") as f:
        head = f.read(16)
    rows, cols = int.from_bytes(head[8:12], "big"), int.from_bytes(head[12:16], "big")
    return (1, rows, cols)


def build_stream(cfg: ExperimentConfig, seed: int) -> list[Experience]:
    s = cfg.stream
    data_seed = seed if s.seed is None else s.seed
    if s.dataset == "shapes":
        n_classes = s.n_classes or s.n_tasks * s.classes_per_task
        ds = shapes_dataset(data_seed, n_classes, s.samples_per_class, s.image_size)
    else:
        ds = Dataset.join(load_idx(s.train_images, s.train_labels), load_idx(s.test_images, s.test_labels))
    return make_split_stream(ds, s.n_tasks, s.classes_per_task, data_seed)


def build_source(src: SourceConfig):
    """An OODSource, or a per-experience factory for the rehearsal-free ``real_data`` mode."""
    if src.kind == "real_data":
        return lambda exp: OODSource.real_data(exp.train_x)
    return OODSource(src.kind, src.path)
