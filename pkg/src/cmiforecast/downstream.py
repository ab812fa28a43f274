"""Logistic head on frozen context vectors, and classification metrics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractViolation, DegenerateData, ShapeError


@dataclass
class LogisticModel:
    weights: np.ndarray
    bias: float
    l2: float = 1e-4
    loss_history: list[float] = field(default_factory=list, repr=False)


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def logistic_loss(model: LogisticModel, x: np.ndarray, y: np.ndarray) -> float:
    z = x @ model.weights + model.bias
    # mean of log(1 + e^z) - y z, plus the ridge term
    nll = np.mean(np.logaddexp(0.0, z) - y * z)
    return float(nll + 0.5 * model.l2 * np.dot(model.weights, model.weights))


def train_logistic(contexts, labels, epochs: int = 1000, lr: float | None = None, l2: float = 1e-4,
                   seed: int = 0) -> LogisticModel:
    """Full-batch gradient descent on L2-regularised cross-entropy.

    With ``lr=None`` the step is ``1 / L`` for the loss's smoothness
    constant ``L``, which makes every step non-increasing. The bias is not
    regularised. ``seed`` draws a tiny initial weight vector.
    """
    x = np.asarray(contexts, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(y):
        raise ShapeError(f"contexts {x.shape} and labels {y.shape} do not align")
    if len(y) == 0:
        raise DegenerateData("cannot fit a classifier on zero samples")
    if np.all(y == y[0]):
        raise DegenerateData("training labels contain a single class")
    n, dim = x.shape
    if lr is None:
        aug = np.hstack([x, np.ones((n, 1))])
        top = np.linalg.eigvalsh(aug.T @ aug / n)[-1]
        lr = 1.0 / (0.25 * top + l2)
    rng = np.random.default_rng(seed)
    model = LogisticModel(weights=1e-6 * rng.standard_normal(dim), bias=0.0, l2=l2)
    for _ in range(epochs):
        model.loss_history.append(logistic_loss(model, x, y))
        p = _sigmoid(x @ model.weights + model.bias)
        r = p - y
        grad_w = x.T @ r / n + l2 * model.weights
        grad_b = float(np.mean(r))
        model.weights = model.weights - lr * grad_w
        model.bias = model.bias - lr * grad_b
    model.loss_history.append(logistic_loss(model, x, y))
    return model


def predict_proba(model: LogisticModel, contexts) -> np.ndarray:
    c = np.asarray(contexts, dtype=np.float64)
    if c.shape[-1] != model.weights.shape[0]:
        raise ShapeError(f"context dimension {c.shape[-1]} but model expects {model.weights.shape[0]}")
    return _sigmoid(c @ model.weights + model.bias)


def predict(model: LogisticModel, contexts, threshold: float = 0.5) -> np.ndarray:
    return (predict_proba(model, contexts) >= threshold).astype(np.int64)


@dataclass
class EvalReport:
    """Accuracies are percentages; the gap is in percentage points.

    ``accuracy`` and ``mcc`` are ``None`` when there was nothing to evaluate.
    """

    accuracy: float | None
    mcc: float | None
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    train_accuracy: float | None = None
    generalization_gap: float | None = None
    name: str = ""

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def undefined(cls, name: str = "") -> "EvalReport":
        return cls(accuracy=None, mcc=None, name=name)


def confusion_counts(preds, labels) -> tuple[int, int, int, int]:
    p = np.asarray(preds).astype(np.int64)
    y = np.asarray(labels).astype(np.int64)
    tp = int(np.sum((p == 1) & (y == 1)))
    fp = int(np.sum((p == 1) & (y == 0)))
    tn = int(np.sum((p == 0) & (y == 0)))
    fn = int(np.sum((p == 0) & (y == 1)))
    return tp, fp, tn, fn


def matthews_corrcoef(tp: int, fp: int, tn: int, fn: int) -> float:
    """MCC from confusion counts; 0 when any marginal is empty."""
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(denom)


def evaluate(preds, labels, name: str = "") -> EvalReport:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ContractViolation(f"{preds.shape} predictions for {labels.shape} labels")
    if preds.size == 0:
        raise ContractViolation("nothing to evaluate")
    tp, fp, tn, fn = confusion_counts(preds, labels)
    acc = 100.0 * (tp + tn) / (tp + fp + tn + fn)
    return EvalReport(accuracy=acc, mcc=matthews_corrcoef(tp, fp, tn, fn), tp=tp, fp=fp, tn=tn, fn=fn, name=name)


def generalization_gap(train_report: EvalReport, test_report: EvalReport) -> float | None:
    """Train minus test accuracy, in percentage points."""
    if train_report.accuracy is None or test_report.accuracy is None:
        return None
    return train_report.accuracy - test_report.accuracy
