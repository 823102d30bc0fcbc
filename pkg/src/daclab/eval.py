"""Stream metrics, task-aware/agnostic inference, linear probing and CKA."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datagen import Experience
from .errors import ShapeError
from .models import AnyModel, find_head, forward
from .numerics import Tensor, no_grad, seeded_rng, softmax_np

MODES = ("task_aware", "agnostic_avg", "agnostic_concat")


class AccuracyMatrix:
    """Lower-triangular A[t][i] (1-based): accuracy on task i after step t."""

    def __init__(self, n_tasks: int):
        self.n = n_tasks
        self._a = np.full((n_tasks, n_tasks), np.nan)

    def set(self, t: int, i: int, value: float) -> None:
        if not (1 <= i <= t <= self.n):
            raise IndexError(f"A[{t}][{i}] outside the lower triangle of a {self.n}-task matrix")
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"accuracy must lie in [0, 1], got {value}")
        self._a[t - 1, i - 1] = value

    def get(self, t: int, i: int) -> float:
        if not (1 <= i <= t <= self.n) or np.isnan(self._a[t - 1, i - 1]):
            raise KeyError(f"A[{t}][{i}] is not defined")
        return float(self._a[t - 1, i - 1])

    def row(self, t: int) -> list[float]:
        return [self.get(t, i) for i in range(1, t + 1)]

    def as_array(self) -> np.ndarray:
        return self._a.copy()

    def __eq__(self, other) -> bool:
        return isinstance(other, AccuracyMatrix) and np.array_equal(self._a, other._a, equal_nan=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "i", "accuracy"])
        for t in range(1, self.n + 1):
            for i in range(1, t + 1):
                if not np.isnan(self._a[t - 1, i - 1]):
                    w.writerow([t, i, f"{self._a[t - 1, i - 1]:.6f}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> AccuracyMatrix:
        rows = list(csv.DictReader(io.StringIO(text)))
        n = max((int(r["t"]) for r in rows), default=0)
        a = cls(n)
        for r in rows:
            a.set(int(r["t"]), int(r["i"]), float(r["accuracy"]))
        return a


def average_accuracy(a: AccuracyMatrix, t: int) -> float:
    return float(np.mean(a.row(t)))


def forgetting(a: AccuracyMatrix, i: int, t_final: int) -> float:
    if i > t_final:
        raise ValueError(f"forgetting: task {i} comes after step {t_final}")
    return a.get(i, i) - a.get(t_final, i)


def predict_logits(model: AnyModel, x: np.ndarray, heads="all", batch: int = 512) -> dict[int, np.ndarray]:
    """Per-head logits as arrays, evaluated without a graph in chunks."""
    out: dict[int, list[np.ndarray]] = {}
    with no_grad():
        for s in range(0, len(x), batch):
            logits, _ = forward(model, x[s : s + batch], heads=heads, taps=())
            for k, v in logits.items():
                out.setdefault(k, []).append(v.data)
    return {k: np.concatenate(v) for k, v in out.items()}


def features(model: AnyModel, x: np.ndarray, tap: str, batch: int = 512) -> np.ndarray:
    chunks = []
    with no_grad():
        for s in range(0, len(x), batch):
            _, acts = forward(model, x[s : s + batch], heads="all", taps=(tap,))
            chunks.append(acts[tap].data)
    return np.concatenate(chunks).astype(np.float64)


def predict(model: AnyModel, x: np.ndarray, mode: str = "task_aware", task_id: int | None = None) -> np.ndarray:
    """Global-label predictions."""
    if mode not in MODES:
        raise ValueError(f"unknown inference mode {mode!r}; expected one of {MODES}")
    if not model.heads:
        raise ValueError("model has no heads")
    if mode == "task_aware":
        head = find_head(model, task_id)
        logits = predict_logits(model, x, heads=task_id)[task_id]
        return np.asarray(head.classes)[logits.argmax(axis=1)]
    logits = predict_logits(model, x)
    if mode == "agnostic_avg":
        class_sets = {h.classes for h in model.heads}
        if len(class_sets) != 1:
            raise ValueError(
                "agnostic_avg needs every head to predict the same classes; "
                "heads here predict disjoint sets, use agnostic_concat"
            )
        probs = np.mean([softmax_np(logits[h.task_id]) for h in model.heads], axis=0)
        return np.asarray(model.heads[0].classes)[probs.argmax(axis=1)]
    labels = np.concatenate([np.asarray(h.classes) for h in model.heads])
    stacked = np.concatenate([logits[h.task_id] for h in model.heads], axis=1)
    return labels[stacked.argmax(axis=1)]


def task_accuracy(model: AnyModel, exp: Experience, mode: str = "task_aware", split: str = "test") -> float:
    x, y = (exp.test_x, exp.test_y) if split == "test" else (exp.train_x, exp.train_y)
    if len(y) == 0:
        raise ValueError(f"task {exp.task_id} has no {split} samples")
    pred = predict(model, x, mode, task_id=exp.task_id)
    return float(np.mean(pred == y))


def agreement(model_a: AnyModel, head_a: int, model_b: AnyModel, head_b: int, x: np.ndarray) -> float:
    """Fraction of inputs on which two heads pick the same class."""
    la = predict_logits(model_a, x, heads=head_a)[head_a]
    lb = predict_logits(model_b, x, heads=head_b)[head_b]
    return float(np.mean(la.argmax(axis=1) == lb.argmax(axis=1)))


# -- linear probe -----------------------------------------------------------

@dataclass
class ProbeConfig:
    learning_rate: float = 0.5
    max_iters: int = 3000
    tol: float = 1e-6
    weight_decay: float = 1e-4


def fit_softmax_probe(feats: np.ndarray, labels: np.ndarray, n_classes: int, cfg: ProbeConfig, rng=None):
    """Full-batch gradient descent on multinomial logistic regression (standardized features)."""
    mu = feats.mean(axis=0)
    sd = feats.std(axis=0) + 1e-8
    z = (feats - mu) / sd
    n, d = z.shape
    w = np.zeros((d, n_classes)) if rng is None else rng.normal(0, 1e-3, (d, n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[labels]
    prev = np.inf
    for _ in range(cfg.max_iters):
        logits = z @ w + b
        logp = logits - logits.max(axis=1, keepdims=True)
        logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
        loss = -(onehot * logp).sum() / n + 0.5 * cfg.weight_decay * (w * w).sum()
        if prev - loss < cfg.tol and np.isfinite(prev):
            break
        prev = loss
        g = (np.exp(logp) - onehot) / n
        w -= cfg.learning_rate * (z.T @ g + cfg.weight_decay * w)
        b -= cfg.learning_rate * g.sum(axis=0)

    def classify(f: np.ndarray) -> np.ndarray:
        return (((f - mu) / sd) @ w + b).argmax(axis=1)

    return classify


def linear_probe(
    model: AnyModel,
    tap: str,
    experiences: Sequence[Experience],
    cfg: ProbeConfig | None = None,
    seed: int = 0,
) -> float:
    """Freeze ``model``, fit one linear classifier over all classes on ``tap`` features, report test accuracy."""
    cfg = cfg or ProbeConfig()
    if tap not in model.arch.layer_names and tap != "logits":
        raise KeyError(f"linear_probe: unknown tap {tap!r}")
    train_x = np.concatenate([e.train_x for e in experiences]) if experiences else np.empty((0,))
    if len(train_x) == 0:
        raise ValueError("linear_probe: no training samples to extract features from")
    train_y = np.concatenate([e.train_y for e in experiences])
    test_x = np.concatenate([e.test_x for e in experiences])
    test_y = np.concatenate([e.test_y for e in experiences])
    classes = np.unique(np.concatenate([train_y, test_y]))
    lut = {c: k for k, c in enumerate(classes)}
    ytr = np.array([lut[c] for c in train_y])
    yte = np.array([lut[c] for c in test_y])
    clf = fit_softmax_probe(features(model, train_x, tap), ytr, len(classes), cfg, seeded_rng(seed, "probe"))
    return float(np.mean(clf(features(model, test_x, tap)) == yte))


# -- CKA --------------------------------------------------------------------

@dataclass(frozen=True)
class CKAResult:
    value: float
    layer: str = ""
    models: tuple = ()


def cka(x, y, layer: str = "", models: tuple = ()) -> CKAResult:
    """Linear CKA between two feature matrices with the same number of rows."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64).reshape(len(y), -1)
    if x.shape[0] != y.shape[0] or x.shape[0] < 2:
        raise ShapeError(f"cka: need the same number (>= 2) of samples, got {x.shape} and {y.shape}")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    num = np.linalg.norm(yc.T @ xc) ** 2
    den = np.linalg.norm(xc.T @ xc) * np.linalg.norm(yc.T @ yc)
    if den <= 0 or not np.isfinite(den):
        raise ValueError("cka: an input has zero variance")
    return CKAResult(float(min(max(num / den, 0.0), 1.0)), layer, models)


def cka_stream_report(
    models: Sequence[AnyModel],
    reference_index: int,
    exp: Experience,
    taps: Sequence[str],
) -> dict[str, list[CKAResult]]:
    """Per layer, CKA between the reference model and every model on ``exp``'s test inputs."""
    if len(models) < 2:
        raise ValueError("cka_stream_report needs at least two models")
    ref_hash = models[reference_index].arch.hash()
    for k, m in enumerate(models):
        if m.arch.hash() != ref_hash:
            raise ValueError(f"cka_stream_report: model {k} has a different architecture")
    report = {}
    for tap in taps:
        ref = features(models[reference_index], exp.test_x, tap)
        report[tap] = [
            cka(ref, features(m, exp.test_x, tap), layer=tap, models=(reference_index, k))
            for k, m in enumerate(models)
        ]
    return report


def cka_report_csv(report: dict[str, list[CKAResult]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "model_index", "cka"])
    for layer, row in report.items():
        for k, r in enumerate(row):
            w.writerow([layer, k, f"{r.value:.6f}"])
    return buf.getvalue()
