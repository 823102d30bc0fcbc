"""
Protocol engine: adaptation on a device, consolidation on the server, and the
sequential / independent orchestration schemes.

Each device receives one InitMessage and sends back one SCMessage. Both carry
serialized model bytes, never live objects. Consolidation holds at most two
teacher models at a time; ``TeacherResidency`` counts them and refuses a third.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .datagen import AugConfig, Experience, OODSource, sample_ood_batch
from .errors import ArchMismatchError, ProtocolError
from .eval import AccuracyMatrix, task_accuracy
from .losses import ConsolidationConfig, ProjectionPair, dkd_loss, pld_loss, total_loss
from .models import (
    LOGITS,
    ArchSpec,
    Head,
    MultiHeadModel,
    SCModel,
    backbone_bytes,
    forward,
    init_backbone,
    init_head,
    model_from_bytes,
    model_to_bytes,
)
from .numerics import (
    ItemStream,
    OptimizerState,
    ParameterSet,
    Tensor,
    concat,
    derive_seed,
    log_softmax,
    no_grad,
    optimizer_step,
    seeded_rng,
)

SourceSpec = Union[OODSource, Callable[[Experience], OODSource]]


# -- messages ---------------------------------------------------------------

@dataclass(frozen=True)
class InitMessage:
    """Initialization sent from the consolidated model to a device."""

    payload: bytes
    arch_hash: str
    step: int

    @classmethod
    def from_model(cls, model: MultiHeadModel, step: int) -> InitMessage:
        return cls(model_to_bytes(model), model.arch.hash(), step)

    def model(self, arch: ArchSpec | None = None) -> MultiHeadModel:
        m = model_from_bytes(self.payload, arch)
        if m.arch.hash() != self.arch_hash:
            raise ArchMismatchError(self.arch_hash, m.arch.hash(), what="init message")
        return m


@dataclass(frozen=True)
class SCMessage:
    """A trained single-head model sent from a device back to the server."""

    payload: bytes
    task_id: int
    classes: tuple[int, ...]

    @classmethod
    def from_model(cls, model: SCModel) -> SCMessage:
        return cls(model_to_bytes(model), model.task_id, tuple(model.classes))

    def model(self, arch: ArchSpec | None = None) -> SCModel:
        m = model_from_bytes(self.payload, arch)
        if not isinstance(m, SCModel):
            raise ProtocolError("SC message must carry exactly one head")
        if m.task_id != self.task_id or tuple(m.classes) != self.classes:
            raise ProtocolError(
                f"SC message says task {self.task_id} {self.classes}, payload holds task {m.task_id} {m.classes}"
            )
        return m


class MessageLog:
    """Ordered record of every message exchanged during a run."""

    def __init__(self):
        self.records: list[dict] = []

    def record(self, step: int, direction: str, payload: bytes) -> None:
        if direction not in ("init", "sc"):
            raise ValueError(f"unknown message direction {direction!r}")
        self.records.append(
            {"step": int(step), "direction": direction, "bytes": len(payload), "sha256": hashlib.sha256(payload).hexdigest()}
        )

    def check(self, n_devices: int) -> None:
        """Exactly one init and one SC message per device."""
        for step in range(1, n_devices + 1):
            for direction in ("init", "sc"):
                count = sum(1 for r in self.records if r["step"] == step and r["direction"] == direction)
                if count != 1:
                    raise ProtocolError(f"device {step} has {count} {direction} messages, expected 1")
        extra = [r for r in self.records if not 1 <= r["step"] <= n_devices]
        if extra:
            raise ProtocolError(f"messages for unknown devices: {extra}")

    def to_json(self) -> str:
        return json.dumps(self.records, indent=1, sort_keys=True) + "\n"


class TeacherResidency:
    """Counts teacher models held in memory during consolidation."""

    def __init__(self, limit: int = 2):
        self.limit = limit
        self.current = 0
        self.peak = 0

    @contextmanager
    def hold(self, model):
        if model is None:
            yield
            return
        if self.current + 1 > self.limit:
            raise ProtocolError(f"consolidation would hold {self.current + 1} teachers (limit {self.limit})")
        self.current += 1
        self.peak = max(self.peak, self.current)
        try:
            yield
        finally:
            self.current -= 1


# -- adaptation -------------------------------------------------------------

@dataclass
class AdaptConfig:
    iterations: int = 2000
    batch_size: int = 64
    optimizer: str = "adam"
    learning_rate: float = 1e-3

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"adaptation iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ValueError(f"adaptation batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class AdaptResult:
    model: SCModel
    train_accuracy: float
    test_accuracy: float


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    onehot = np.eye(logits.shape[1], dtype=logits.dtype)[targets]
    return (log_softmax(logits) * onehot).sum() * (-1.0 / logits.shape[0])


def train_task(backbone: ParameterSet, arch: ArchSpec, exp: Experience, cfg: AdaptConfig, seed: int) -> Head:
    """Fit ``backbone`` (in place) and a fresh head to ``exp`` with cross-entropy; return the head."""
    targets = exp.local_labels(exp.train_y)
    if len(targets) == 0:
        raise ValueError(f"task {exp.task_id} has no training samples")
    dtype = backbone[next(iter(backbone))].dtype
    head = Head(exp.task_id, init_head(arch, seed, len(exp.classes), dtype, label=f"head/{exp.task_id}"), exp.classes)
    model = SCModel(arch, backbone, head)
    params = model.parameters()
    state = OptimizerState(cfg.optimizer, cfg.learning_rate)
    rng = seeded_rng(seed, f"adapt/{exp.task_id}/batches")
    x_all = exp.train_x.astype(dtype, copy=False)
    for _ in range(cfg.iterations):
        idx = rng.integers(0, len(targets), size=min(cfg.batch_size, len(targets)))
        logits, _ = forward(model, x_all[idx], taps=())
        cross_entropy(logits[exp.task_id], targets[idx]).backward()
        optimizer_step(params, state)
        params.zero_grad()
    return head


def adapt(init: InitMessage, exp: Experience, cfg: AdaptConfig, arch: ArchSpec, seed: int) -> AdaptResult:
    """Fine-tune the received initialization on the device's own data, local loss only."""
    start = init.model(arch)
    backbone = start.backbone.copy()
    head = train_task(backbone, arch, exp, cfg, seed)
    sc = SCModel(arch, backbone, head)
    train_acc = task_accuracy(sc, exp, split="train")
    test_acc = task_accuracy(sc, exp, split="test") if len(exp.test_y) else float("nan")
    return AdaptResult(sc, train_acc, test_acc)


# -- consolidation ----------------------------------------------------------

@dataclass
class ConsolidationResult:
    model: MultiHeadModel
    losses: list[tuple[int, float, float, float]] = field(default_factory=list)  # (iteration, total, dkd, pld)
    initial_loss: float = float("nan")
    peak_teachers: int = 0


def _student(prev: MultiHeadModel | None, sc: SCModel, cfg: ConsolidationConfig, seed: int) -> MultiHeadModel:
    arch = sc.arch
    dtype = sc.backbone[next(iter(sc.backbone))].dtype
    old_heads = [h.copy() for h in prev.heads] if prev is not None else []
    if cfg.student_init == "random":
        backbone = init_backbone(arch, derive_seed(seed, "student"), dtype)
        old_heads = [
            Head(h.task_id, init_head(arch, derive_seed(seed, "student"), len(h.classes), dtype, f"head/{h.task_id}"), h.classes)
            for h in old_heads
        ]
        new_head = Head(
            sc.task_id, init_head(arch, derive_seed(seed, "student"), len(sc.classes), dtype, f"head/{sc.task_id}"), sc.classes
        )
    else:
        src = sc if cfg.student_init == "sc" or prev is None else prev
        backbone = src.backbone.copy()
        new_head = sc.head.copy()
    return MultiHeadModel(arch, backbone, old_heads + [new_head])


def _tap_dims(arch: ArchSpec, taps, sc: SCModel, prev: MultiHeadModel | None):
    widths = arch.tap_widths()
    sc_dims, cl_dims = {}, {}
    for t in taps:
        if t == LOGITS:
            sc_dims[t] = len(sc.classes)
            if prev is not None:
                cl_dims[t] = sum(len(h.classes) for h in prev.heads)
        else:
            sc_dims[t] = widths[t]
            if prev is not None:
                cl_dims[t] = widths[t]
    return sc_dims, cl_dims


def consolidate(
    prev_cl: MultiHeadModel | None,
    sc_msg: SCMessage,
    source: OODSource,
    cfg: ConsolidationConfig,
    seed: int,
    aug: AugConfig | None = None,
    residency: TeacherResidency | None = None,
) -> ConsolidationResult:
    """
    Distill the previous consolidated model and a new SC model into a student
    with one more head, using only samples drawn from ``source``.

    ``prev_cl`` may be None or a model without heads (the random
    initialization before the first task); either way it is not a teacher.
    """
    sc = sc_msg.model()
    arch = sc.arch
    if prev_cl is not None and prev_cl.arch.hash() != arch.hash():
        raise ArchMismatchError(prev_cl.arch.hash(), arch.hash(), what="teacher")
    if prev_cl is not None and sc.task_id in prev_cl.task_ids:
        raise ProtocolError(f"task {sc.task_id} is already consolidated (heads {prev_cl.task_ids})")
    if prev_cl is not None and prev_cl.heads and sc.task_id <= prev_cl.task_ids[-1]:
        raise ProtocolError(f"task {sc.task_id} arrives after task {prev_cl.task_ids[-1]}")
    teacher = prev_cl if prev_cl is not None and prev_cl.heads else None
    aug = aug or AugConfig(out_size=arch.input_shape[1:], channels=arch.input_shape[0])
    residency = residency or TeacherResidency()

    student = _student(prev_cl if prev_cl is not None and (prev_cl.heads or cfg.student_init == "prev_cl") else None, sc, cfg, seed)
    i = len(student.heads)
    taps = tuple(cfg.taps) if cfg.taps is not None else arch.taps
    use_pld = cfg.lam > 0
    params = student.parameters()
    proj = None
    if use_pld:
        dtype = sc.backbone[next(iter(sc.backbone))].dtype
        proj = ProjectionPair.identity(*_tap_dims(arch, taps, sc, teacher), dtype=dtype)
        params = ParameterSet.merge(params, proj.parameters())
    state = OptimizerState(cfg.optimizer, cfg.learning_rate)
    stream = ItemStream(seed, f"consolidate/{sc.task_id}/samples")
    dtype = sc.backbone[next(iter(sc.backbone))].dtype
    result = ConsolidationResult(student)
    backbone_taps = tuple(t for t in taps if t != LOGITS) if use_pld else ()

    with residency.hold(sc), residency.hold(teacher):
        result.peak_teachers = residency.peak
        for it in range(cfg.iterations):
            x = sample_ood_batch(source, aug, cfg.batch_size, stream, dtype=dtype)
            with no_grad():
                sc_logits, sc_acts = forward(sc, x, taps=taps if use_pld else ())
                if teacher is not None:
                    cl_logits, cl_acts = forward(teacher, x, taps=taps if use_pld else ())
                else:
                    cl_logits, cl_acts = {}, {}
            s_logits, s_acts = forward(student, x, taps=backbone_taps)
            s_outs = [s_logits[k] for k in student.task_ids]
            dkd = dkd_loss(
                s_outs, sc_logits[sc.task_id], [cl_logits[k] for k in student.task_ids[:-1]],
                cfg.temperature, cfg.t_squared_scaling,
            )
            if use_pld:
                h_student = {t: s_acts[t] for t in backbone_taps}
                if LOGITS in taps:
                    old = concat(s_outs[:-1], axis=-1) if i > 1 else None
                    h_student[LOGITS] = (s_outs[-1], old)
                pld = pld_loss(h_student, sc_acts, cl_acts, proj, i)
                loss = total_loss(dkd, pld, cfg.lam)
            else:
                pld = None
                loss = dkd
            if it == 0:
                result.initial_loss = loss.item()
            if cfg.log_every and (it % cfg.log_every == 0 or it == cfg.iterations - 1):
                result.losses.append((it, loss.item(), dkd.item(), pld.item() if pld is not None else 0.0))
            loss.backward()
            optimizer_step(params, state)
            params.zero_grad()
    if residency.current != 0:
        raise ProtocolError("teacher residency counter did not return to zero")
    return result


# -- orchestration ----------------------------------------------------------

@dataclass
class RunResult:
    model: MultiHeadModel
    accuracy: AccuracyMatrix
    snapshots: list[MultiHeadModel]
    sc_models: list[SCModel]
    sc_accuracy: list[float]
    log: MessageLog
    handoff_equal: list[bool] = field(default_factory=list)
    peak_teachers: int = 0
    consolidations: list[ConsolidationResult] = field(default_factory=list)


def _resolve_source(source: SourceSpec, exp: Experience) -> OODSource:
    return source(exp) if callable(source) and not isinstance(source, OODSource) else source


def _evaluate_row(a: AccuracyMatrix, t: int, model: MultiHeadModel, stream: Sequence[Experience], mode: str) -> None:
    for exp in stream[:t]:
        a.set(t, exp.task_id, task_accuracy(model, exp, mode))


def _check_heads(model: MultiHeadModel, step: int) -> None:
    ids = model.task_ids
    if len(ids) != step or any(b <= a for a, b in zip(ids, ids[1:])):
        raise ProtocolError(f"after step {step} the model has heads {ids}")


def _check_stream(stream: Sequence[Experience]) -> None:
    if not stream:
        raise ValueError("stream is empty")
    ids = [e.task_id for e in stream]
    if ids != list(range(1, len(stream) + 1)):
        raise ValueError(f"stream task ids must be 1..{len(stream)}, got {ids}")


def initial_model(arch: ArchSpec, seed: int) -> MultiHeadModel:
    """The shared random initialization f_0 (a backbone without heads)."""
    return MultiHeadModel(arch, init_backbone(arch, derive_seed(seed, "f0")))


def run_sequential(
    stream: Sequence[Experience],
    arch: ArchSpec,
    adapt_cfg: AdaptConfig,
    cons_cfg: ConsolidationConfig,
    source: SourceSpec,
    seed: int,
    aug: AugConfig | None = None,
    eval_mode: str = "task_aware",
) -> RunResult:
    """Each device starts from the current consolidated model; consolidation follows every adaptation."""
    _check_stream(stream)
    current = initial_model(arch, seed)
    log = MessageLog()
    residency = TeacherResidency()
    a = AccuracyMatrix(len(stream))
    res = RunResult(current, a, [], [], [], log)
    for step, exp in enumerate(stream, 1):
        init = InitMessage.from_model(current, step)
        log.record(step, "init", init.payload)
        equal = backbone_bytes(init.model(arch)) == backbone_bytes(current)
        res.handoff_equal.append(equal)
        if not equal:
            raise ProtocolError(f"step {step}: init message backbone differs from the consolidated model")
        ad = adapt(init, exp, adapt_cfg, arch, derive_seed(seed, f"adapt/{step}"))
        sc_msg = SCMessage.from_model(ad.model)
        log.record(step, "sc", sc_msg.payload)
        cons = consolidate(
            current, sc_msg, _resolve_source(source, exp), cons_cfg,
            derive_seed(seed, f"consolidate/{step}"), aug, residency,
        )
        current = cons.model
        _check_heads(current, step)
        _evaluate_row(a, step, current, stream, eval_mode)
        res.snapshots.append(current.copy())
        res.sc_models.append(ad.model)
        res.sc_accuracy.append(ad.test_accuracy)
        res.consolidations.append(cons)
        res.peak_teachers = max(res.peak_teachers, cons.peak_teachers)
    log.check(len(stream))
    res.model = current
    return res


def run_independent(
    stream: Sequence[Experience],
    arch: ArchSpec,
    adapt_cfg: AdaptConfig,
    cons_cfg: ConsolidationConfig,
    source: SourceSpec,
    seed: int,
    aug: AugConfig | None = None,
    eval_mode: str = "task_aware",
    workers: int = 1,
) -> RunResult:
    """Every device adapts the same f_0 (possibly concurrently); consolidation then runs in task order."""
    _check_stream(stream)
    f0 = initial_model(arch, seed)
    inits = [InitMessage.from_model(f0, step) for step in range(1, len(stream) + 1)]
    if len({m.payload for m in inits}) != 1:
        raise ProtocolError("independent devices received different initializations")

    def job(k: int) -> AdaptResult:
        return adapt(inits[k], stream[k], adapt_cfg, arch, derive_seed(seed, f"adapt/{k + 1}"))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            adapted = list(pool.map(job, range(len(stream))))
    else:
        adapted = [job(k) for k in range(len(stream))]

    log = MessageLog()
    residency = TeacherResidency()
    a = AccuracyMatrix(len(stream))
    res = RunResult(f0, a, [], [], [], log)
    current = f0
    for step, (exp, init, ad) in enumerate(zip(stream, inits, adapted), 1):
        log.record(step, "init", init.payload)
        res.handoff_equal.append(init.payload == inits[0].payload)
        sc_msg = SCMessage.from_model(ad.model)
        log.record(step, "sc", sc_msg.payload)
        cons = consolidate(
            current, sc_msg, _resolve_source(source, exp), cons_cfg,
            derive_seed(seed, f"consolidate/{step}"), aug, residency,
        )
        current = cons.model
        _check_heads(current, step)
        _evaluate_row(a, step, current, stream, eval_mode)
        res.snapshots.append(current.copy())
        res.sc_models.append(ad.model)
        res.sc_accuracy.append(ad.test_accuracy)
        res.consolidations.append(cons)
        res.peak_teachers = max(res.peak_teachers, cons.peak_teachers)
    log.check(len(stream))
    res.model = current
    return res


def naive_finetune_run(
    stream: Sequence[Experience],
    arch: ArchSpec,
    adapt_cfg: AdaptConfig,
    seed: int,
    eval_mode: str = "task_aware",
) -> RunResult:
    """
    One multi-head model fine-tuned on each task's raw data in turn, no
    consolidation and no messages. Uses the same f_0 and per-task seeds as the
    DAC runs, so step 1 reproduces the first adaptation exactly.
    """
    _check_stream(stream)
    model = initial_model(arch, seed)
    a = AccuracyMatrix(len(stream))
    res = RunResult(model, a, [], [], [], MessageLog())
    for step, exp in enumerate(stream, 1):
        backbone = model.backbone.copy()
        head = train_task(backbone, arch, exp, adapt_cfg, derive_seed(seed, f"adapt/{step}"))
        model = MultiHeadModel(arch, backbone, [h.copy() for h in model.heads] + [head])
        _evaluate_row(a, step, model, stream, eval_mode)
        res.snapshots.append(model.copy())
        res.sc_accuracy.append(a.get(step, step))
    res.model = model
    return res


def naive_finetune_baseline(
    stream: Sequence[Experience],
    arch: ArchSpec,
    adapt_cfg: AdaptConfig,
    seed: int,
    eval_mode: str = "task_aware",
) -> AccuracyMatrix:
    return naive_finetune_run(stream, arch, adapt_cfg, seed, eval_mode).accuracy
