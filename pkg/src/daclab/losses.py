"""
Distillation objectives for consolidation.

- ``kd_loss``: tempered KL(teacher || student), batch mean, optional T^2 scaling.
- ``dkd_loss``: new head matches the SC teacher, every older head matches the
  previous consolidated model; terms are summed so each task weighs the same.
- ``pld_loss``: student activations are mapped through trainable square
  projections (identity at creation) onto each teacher's activations; the
  previous-model term is weighted by ``i - 1``.
- ``total_loss``: ``dkd + lam * pld``. The ratio is applied here and only here.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

from .errors import ShapeError
from .numerics import ParameterSet, Tensor, log_softmax, log_softmax_np, matmul

STUDENT_INIT = ("prev_cl", "sc", "random")


@dataclass
class ConsolidationConfig:
    lam: float = 0.01
    temperature: float = 0.5
    taps: tuple[str, ...] | None = None  # None: the architecture's default taps
    iterations: int = 5000
    batch_size: int = 64
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    student_init: str = "prev_cl"
    kd_direction: str = "teacher_to_student"
    t_squared_scaling: bool = True
    log_every: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.student_init not in STUDENT_INIT:
            raise ValueError(f"student_init must be one of {STUDENT_INIT}, got {self.student_init!r}")
        if self.kd_direction != "teacher_to_student":
            raise ValueError(f"unsupported kd_direction {self.kd_direction!r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.taps is not None:
            self.taps = tuple(self.taps)


def _teacher_logits(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t)


def kd_loss(student_logits: Tensor, teacher_logits, temperature: float, t_squared: bool = True) -> Tensor:
    """Batch-mean KL(softmax(teacher/T) || softmax(student/T)); the teacher is a constant."""
    teacher = _teacher_logits(teacher_logits)
    if student_logits.shape != teacher.shape or student_logits.ndim != 2:
        raise ShapeError(
            f"kd_loss: student logits {student_logits.shape} vs teacher logits {teacher.shape}"
        )
    if not temperature > 0:
        raise ValueError(f"kd_loss: temperature must be > 0, got {temperature}")
    dt = student_logits.dtype
    inv_t = 1.0 / temperature
    log_p = log_softmax_np(teacher.astype(dt) * dt.type(inv_t))
    p = np.exp(log_p)
    log_q = log_softmax(student_logits * inv_t)
    kl = (p * (log_p - log_q)).sum() * (1.0 / student_logits.shape[0])
    if t_squared:
        kl = kl * (temperature * temperature)
    return kl


def dkd_loss(
    student_outs: Sequence[Tensor],
    sc_out,
    prev_cl_outs: Sequence,
    temperature: float,
    t_squared: bool = True,
) -> Tensor:
    """
    ``student_outs`` holds the student's logits for heads 1..i in task order,
    ``prev_cl_outs`` the previous consolidated model's logits for heads 1..i-1.
    """
    i = len(student_outs)
    if i < 1 or len(prev_cl_outs) != i - 1:
        raise ShapeError(
            f"dkd_loss: student has {i} heads but {len(prev_cl_outs)} previous-model outputs were given"
            f" (need {max(i - 1, 0)})"
        )
    loss = kd_loss(student_outs[-1], sc_out, temperature, t_squared)
    for s, t in zip(student_outs[:-1], prev_cl_outs):
        loss = loss + kd_loss(s, t, temperature, t_squared)
    return loss


@dataclass
class ProjectionPair:
    """Per-tap square projections; ``cl`` entries are absent at the first step."""

    sc: dict[str, Tensor] = field(default_factory=dict)
    cl: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def identity(cls, sc_dims: Mapping[str, int], cl_dims: Mapping[str, int] | None = None, dtype=np.float32):
        pair = cls()
        for tap, d in sc_dims.items():
            pair.sc[tap] = Tensor(np.eye(d), requires_grad=True, dtype=dtype)
        for tap, d in (cl_dims or {}).items():
            pair.cl[tap] = Tensor(np.eye(d), requires_grad=True, dtype=dtype)
        return pair

    def parameters(self) -> ParameterSet:
        ps = ParameterSet()
        for tap, w in self.sc.items():
            ps[f"pld/{tap}/sc"] = w
        for tap, w in self.cl.items():
            ps[f"pld/{tap}/cl"] = w
        return ps


StudentActivation = Union[Tensor, tuple]


def _sq_dist(h: Tensor, w: Tensor, target, what: str) -> Tensor:
    target = _teacher_logits(target)
    d = w.shape[0]
    if w.shape != (d, d) or h.ndim != 2 or h.shape[1] != d or target.shape != h.shape:
        raise ShapeError(
            f"pld_loss[{what}]: student {h.shape}, projection {w.shape}, teacher {target.shape}"
        )
    # row-vector batch: (W h)^T = h^T W^T
    diff = matmul(h, w.T) - target.astype(h.dtype)
    return diff.square().sum() * (1.0 / h.shape[0])


def pld_loss(
    h_student: Mapping[str, StudentActivation],
    h_sc: Mapping,
    h_cl: Mapping,
    proj: ProjectionPair,
    i: int,
) -> Tensor:
    """
    Projected latent distillation summed over taps.

    ``h_student[tap]`` is either one tensor shared by both terms or a
    ``(view_for_sc, view_for_cl)`` pair (used for the logits tap, where the
    student's new head faces the SC teacher and its old heads face the
    previous consolidated model). For ``i == 1`` only the SC term exists.
    """
    if i < 1:
        raise ValueError(f"pld_loss: task index must be >= 1, got {i}")
    taps = set(h_student)
    if taps != set(h_sc) or (i > 1 and taps != set(h_cl)):
        raise ShapeError(
            f"pld_loss: tap sets differ (student {sorted(h_student)}, sc {sorted(h_sc)}, cl {sorted(h_cl)})"
        )
    loss = None
    for tap in sorted(taps):
        h = h_student[tap]
        h_for_sc, h_for_cl = h if isinstance(h, tuple) else (h, h)
        term = _sq_dist(h_for_sc, proj.sc[tap], h_sc[tap], f"{tap}/sc")
        if i > 1:
            term = term + _sq_dist(h_for_cl, proj.cl[tap], h_cl[tap], f"{tap}/cl") * float(i - 1)
        loss = term if loss is None else loss + term
    if loss is None:
        raise ShapeError("pld_loss: no taps given")
    return loss


def total_loss(dkd: Tensor, pld: Tensor, lam: float) -> Tensor:
    if lam < 0:
        raise ValueError(f"total_loss: lam must be >= 0, got {lam}")
    return dkd + pld * float(lam)

