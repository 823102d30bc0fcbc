"""
Backbones, per-task heads and model serialization.

Two desk-scale backbones are provided:

``mlp``       flatten -> [dense -> relu] * len(hidden); layers ``fc1..fcK``
``smallcnn``  [conv(same) -> relu -> maxpool2] * len(hidden) -> flatten -> dense -> relu;
              layers ``conv1..convK`` and ``fc``

Every head is a linear map from the last backbone layer to the task's
classes. Activations can be tapped at any backbone layer name and at
``logits`` (the selected heads' logits, concatenated in task order).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from . import container
from .errors import ArchMismatchError, FormatError, ShapeError
from .numerics import ParameterSet, Tensor, concat, conv2d, matmul, max_pool2d, relu, seeded_rng

KINDS = ("mlp", "smallcnn")
LOGITS = "logits"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ArchSpec:
    kind: str
    input_shape: tuple[int, ...]
    hidden: tuple[int, ...] = (64, 64)
    dense: int = 64
    kernel: int = 3
    head_width: int = 2
    taps: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown architecture kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(d) for d in self.hidden))
        if not self.hidden:
            raise ValueError("architecture needs at least one hidden layer")
        if self.kind == "smallcnn" and len(self.input_shape) != 3:
            raise ValueError(f"smallcnn expects input shape (C, H, W), got {self.input_shape}")
        taps = (self.penultimate, LOGITS) if self.taps is None else tuple(self.taps)
        object.__setattr__(self, "taps", taps)
        unknown = [t for t in taps if t not in self.layer_names and t != LOGITS]
        if unknown:
            raise ValueError(f"unknown tap layer(s) {unknown}; layers are {self.layer_names + (LOGITS,)}")

    @property
    def layer_names(self) -> tuple[str, ...]:
        if self.kind == "mlp":
            return tuple(f"fc{i + 1}" for i in range(len(self.hidden)))
        return tuple(f"conv{i + 1}" for i in range(len(self.hidden))) + ("fc",)

    @property
    def penultimate(self) -> str:
        return self.layer_names[-1]

    @property
    def feature_width(self) -> int:
        return self.hidden[-1] if self.kind == "mlp" else self.dense

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["hidden"] = list(self.hidden)
        d["taps"] = list(self.taps)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ArchSpec:
        d = dict(d)
        for k in ("input_shape", "hidden", "taps"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(container.canonical_json(self.to_dict())).hexdigest()[:32]

    def tap_widths(self) -> dict[str, int]:
        """Flattened feature width of every backbone layer."""
        widths = {}
        if self.kind == "mlp":
            for i, w in enumerate(self.hidden):
                widths[f"fc{i + 1}"] = w
            return widths
        c, h, w = self.input_shape
        for i, ch in enumerate(self.hidden):
            h, w = h // 2, w // 2
            widths[f"conv{i + 1}"] = ch * h * w
        widths["fc"] = self.dense
        return widths


def _uniform(rng, fan_in: int, shape, dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


def init_backbone(spec: ArchSpec, seed: int, dtype=np.float32) -> ParameterSet:
    rng = seeded_rng(seed, "init/backbone")
    ps = ParameterSet()
    if spec.kind == "mlp":
        fan_in = int(np.prod(spec.input_shape))
        for name, width in zip(spec.layer_names, spec.hidden):
            ps[f"{name}.weight"] = _uniform(rng, fan_in, (fan_in, width), dtype)
            ps[f"{name}.bias"] = _uniform(rng, fan_in, (width,), dtype)
            fan_in = width
        return ps
    c = spec.input_shape[0]
    k = spec.kernel
    for i, ch in enumerate(spec.hidden):
        fan_in = c * k * k
        ps[f"conv{i + 1}.weight"] = _uniform(rng, fan_in, (ch, c, k, k), dtype)
        ps[f"conv{i + 1}.bias"] = _uniform(rng, fan_in, (ch,), dtype)
        c = ch
    flat = spec.tap_widths()[f"conv{len(spec.hidden)}"]
    if flat == 0:
        raise ValueError(f"input {spec.input_shape} too small for {len(spec.hidden)} pooling stages")
    ps["fc.weight"] = _uniform(rng, flat, (flat, spec.dense), dtype)
    ps["fc.bias"] = _uniform(rng, flat, (spec.dense,), dtype)
    return ps


def init_head(spec: ArchSpec, seed: int, width: int | None = None, dtype=np.float32, label: str = "head") -> ParameterSet:
    rng = seeded_rng(seed, f"init/{label}")
    width = spec.head_width if width is None else width
    fan_in = spec.feature_width
    return ParameterSet(
        {
            "weight": _uniform(rng, fan_in, (fan_in, width), dtype),
            "bias": _uniform(rng, fan_in, (width,), dtype),
        }
    )


def build_model(spec: ArchSpec, seed: int, with_head: bool = True, dtype=np.float32):
    """Return ``(backbone, head)``; ``head`` is None when ``with_head`` is False."""
    backbone = init_backbone(spec, seed, dtype)
    head = init_head(spec, seed, dtype=dtype) if with_head else None
    return backbone, head


@dataclass
class Head:
    task_id: int
    params: ParameterSet
    classes: tuple[int, ...]

    def __post_init__(self):
        self.classes = tuple(int(c) for c in self.classes)
        width = self.params["bias"].shape[0]
        if width != len(self.classes):
            raise ShapeError(f"head {self.task_id}: width {width} != {len(self.classes)} classes")

    def copy(self) -> Head:
        return Head(self.task_id, self.params.copy(), self.classes)


@dataclass
class MultiHeadModel:
    arch: ArchSpec
    backbone: ParameterSet
    heads: list[Head] = field(default_factory=list)

    def __post_init__(self):
        ids = [h.task_id for h in self.heads]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError(f"head task ids must be strictly increasing, got {ids}")

    @property
    def task_ids(self) -> list[int]:
        return [h.task_id for h in self.heads]

    def head(self, task_id: int) -> Head:
        for h in self.heads:
            if h.task_id == task_id:
                return h
        raise KeyError(f"no head for task {task_id}; heads are {self.task_ids}")

    def parameters(self) -> ParameterSet:
        groups = [self.backbone.prefixed("backbone/")]
        groups += [h.params.prefixed(f"head/{h.task_id}/") for h in self.heads]
        return ParameterSet.merge(*groups)

    def copy(self) -> MultiHeadModel:
        return MultiHeadModel(self.arch, self.backbone.copy(), [h.copy() for h in self.heads])


@dataclass
class SCModel:
    """Single-head model produced by a self-centered device."""

    arch: ArchSpec
    backbone: ParameterSet
    head: Head

    @property
    def heads(self) -> list[Head]:
        return [self.head]

    @property
    def task_id(self) -> int:
        return self.head.task_id

    @property
    def classes(self) -> tuple[int, ...]:
        return self.head.classes

    @property
    def task_ids(self) -> list[int]:
        return [self.head.task_id]

    def parameters(self) -> ParameterSet:
        return ParameterSet.merge(self.backbone.prefixed("backbone/"), self.head.params.prefixed("head/"))

    def copy(self) -> SCModel:
        return SCModel(self.arch, self.backbone.copy(), self.head.copy())


AnyModel = Union[MultiHeadModel, SCModel]


def find_head(model: AnyModel, task_id: int) -> Head:
    for h in model.heads:
        if h.task_id == task_id:
            return h
    raise KeyError(f"no head for task {task_id}; heads are {model.task_ids}")


def attach_head(model: MultiHeadModel, head: ParameterSet, task_id: int, classes: Sequence[int]) -> MultiHeadModel:
    if task_id in model.task_ids:
        raise ValueError(f"attach_head: task {task_id} already has a head")
    if model.heads and task_id <= model.heads[-1].task_id:
        raise ValueError(
            f"attach_head: task id {task_id} must exceed existing ids {model.task_ids}"
        )
    return MultiHeadModel(model.arch, model.backbone, list(model.heads) + [Head(task_id, head, classes)])


def backbone_forward(spec: ArchSpec, backbone: ParameterSet, x: Tensor, taps: Sequence[str] = ()):
    """Return the penultimate features and the requested backbone taps (flattened)."""
    if tuple(x.shape[1:]) != spec.input_shape and not (
        spec.kind == "mlp" and int(np.prod(x.shape[1:])) == int(np.prod(spec.input_shape))
    ):
        raise ShapeError(f"forward: input shape {x.shape[1:]} does not match {spec.input_shape}")
    recorded = {}
    if spec.kind == "mlp":
        h = x.reshape(x.shape[0], -1)
        for name in spec.layer_names:
            h = relu(matmul(h, backbone[f"{name}.weight"]) + backbone[f"{name}.bias"])
            if name in taps:
                recorded[name] = h
        return h, recorded
    h = x
    for i in range(len(spec.hidden)):
        name = f"conv{i + 1}"
        h = max_pool2d(relu(conv2d(h, backbone[f"{name}.weight"], backbone[f"{name}.bias"], padding="same")), 2)
        if name in taps:
            recorded[name] = h.flatten()
    h = relu(matmul(h.flatten(), backbone["fc.weight"]) + backbone["fc.bias"])
    if "fc" in taps:
        recorded["fc"] = h
    return h, recorded


def forward(model: AnyModel, x, heads="all", taps: Sequence[str] | None = None):
    """
    Run the backbone once and apply the selected heads.

    ``heads`` is ``"all"``, a task id, or a sequence of task ids. Returns
    ``(logits, activations)``: ``logits`` maps task id to a (batch, |Y_k|)
    tensor in head order; ``activations`` maps each requested tap name to a
    (batch, features) tensor.
    """
    if not isinstance(x, Tensor):
        x = Tensor(x, dtype=model.backbone[next(iter(model.backbone))].dtype)
    taps = model.arch.taps if taps is None else tuple(taps)
    if heads == "all":
        selected = list(model.heads)
    else:
        ids = [heads] if isinstance(heads, (int, np.integer)) else list(heads)
        selected = [find_head(model, int(k)) for k in ids]
    feats, acts = backbone_forward(model.arch, model.backbone, x, taps)
    logits = {h.task_id: matmul(feats, h.params["weight"]) + h.params["bias"] for h in selected}
    if LOGITS in taps and logits:
        acts[LOGITS] = concat(list(logits.values()), axis=-1)
    missing = [t for t in taps if t not in acts and t != LOGITS]
    if missing:
        raise KeyError(f"forward: unknown tap(s) {missing}")
    return logits, acts


# -- serialization ----------------------------------------------------------

def model_manifest(model: AnyModel) -> dict:
    return {
        "format": "daclab-model",
        "version": FORMAT_VERSION,
        "kind": "sc" if isinstance(model, SCModel) else "multihead",
        "arch": model.arch.to_dict(),
        "arch_hash": model.arch.hash(),
        "dtype": "float32",
        "heads": [{"task_id": h.task_id, "classes": list(h.classes)} for h in model.heads],
        "taps": list(model.arch.taps),
    }


def model_arrays(model: AnyModel) -> dict[str, np.ndarray]:
    arrays = {f"backbone/{k}": model.backbone[k].data for k in model.backbone}
    for h in model.heads:
        arrays.update({f"head/{h.task_id}/{k}": h.params[k].data for k in h.params})
    return arrays


def model_to_bytes(model: AnyModel) -> bytes:
    return container.encode(model_manifest(model), model_arrays(model))


def backbone_bytes(model: AnyModel) -> bytes:
    """Raw little-endian f32 bytes of the backbone, in parameter order."""
    return b"".join(np.ascontiguousarray(model.backbone[k].data, dtype="<f4").tobytes() for k in model.backbone)


def model_from_bytes(data: bytes, arch: ArchSpec | None = None) -> AnyModel:
    manifest, arrays = container.decode(data)
    return _model_from_parts(manifest, arrays, arch)


def _model_from_parts(manifest: dict, arrays: dict, arch: ArchSpec | None) -> AnyModel:
    if manifest.get("format") != "daclab-model":
        raise FormatError(f"not a model file (format={manifest.get('format')!r})")
    try:
        stored = ArchSpec.from_dict(manifest["arch"])
        found = manifest["arch_hash"]
        head_meta = manifest["heads"]
        kind = manifest["kind"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"model manifest incomplete: {exc}") from None
    if stored.hash() != found:
        raise ArchMismatchError(stored.hash(), found, what="model file (header corrupted)")
    if arch is not None and arch.hash() != found:
        raise ArchMismatchError(arch.hash(), found)
    backbone = ParameterSet(
        {k[len("backbone/"):]: Tensor(v, dtype=np.float32) for k, v in arrays.items() if k.startswith("backbone/")}
    )
    heads = []
    for meta in head_meta:
        prefix = f"head/{meta['task_id']}/"
        params = ParameterSet({k[len(prefix):]: Tensor(v, dtype=np.float32) for k, v in arrays.items() if k.startswith(prefix)})
        heads.append(Head(meta["task_id"], params, meta["classes"]))
    if kind == "sc":
        if len(heads) != 1:
            raise FormatError(f"SC model file must hold exactly one head, found {len(heads)}")
        return SCModel(stored, backbone, heads[0])
    return MultiHeadModel(stored, backbone, heads)


def save_model(model: AnyModel, path) -> bytes:
    return container.write(path, model_manifest(model), model_arrays(model))


def load_model(path, arch: ArchSpec | None = None) -> AnyModel:
    manifest, arrays = container.read(Path(path))
    return _model_from_parts(manifest, arrays, arch)
