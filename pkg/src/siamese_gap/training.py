"""Adam with L2 weight decay, the training loop, metrics and the tap ablation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import checkpoint, ops
from .data import AugmentConfig, DatasetSplit, KneeSample, augment, oversample, parallel_map, stack, stream
from .errors import ConfigurationError, DataError, TrainingDiverged
from .model import ABLATION_TAPS, ModelConfig, SiameseGapNetwork, build, count_params
from .tensor import Tape, Tensor

# stream tags for the per-epoch generators
_SHUFFLE, _AUGMENT, _DROPOUT = 1, 2, 3


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 32
    weight_decay: float = 3e-4
    dropout_p: float = 0.2
    seed: int = 0
    oversample: bool = True
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_batch_size: int = 32

    def __post_init__(self):
        for name in ("learning_rate", "weight_decay", "adam_eps"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigurationError(f"{name} must be finite and non-negative, got {v}")
        if self.epochs < 1 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigurationError("epochs and batch sizes must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigurationError("Adam betas must lie in [0, 1)")


# -- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        m = {n: np.zeros_like(p.data) for n, p in params.items()}
        v = {n: np.zeros_like(p.data) for n, p in params.items()}
        return cls(m, v, 0, beta1, beta2, eps)


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float, weight_decay: float = 0.0) -> None:
    """One Adam update in place; weight decay is added to the gradient as L2."""
    for name, p in params.items():
        if p.grad is None:
            raise ConfigurationError(f"no gradient for parameter {name!r}")
        if not np.all(np.isfinite(p.grad)):
            raise TrainingDiverged(f"non-finite gradient in {name!r}")
    state.t += 1
    b1, b2, t = state.beta1, state.beta2, state.t
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, p in params.items():
        g = p.grad + weight_decay * p.data if weight_decay else p.grad
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= (lr * step).astype(p.dtype, copy=False)


# -- metrics ------------------------------------------------------------------


@dataclass(frozen=True)
class Metrics:
    confusion: np.ndarray  # confusion[true][pred], KL0 row/column first
    accuracy: float
    f1: float
    n: int

    @classmethod
    def from_predictions(cls, labels, predictions) -> "Metrics":
        labels = np.asarray(labels, dtype=np.int64)
        predictions = np.asarray(predictions, dtype=np.int64)
        if labels.shape != predictions.shape:
            raise DataError("labels and predictions differ in length")
        cm = np.zeros((2, 2), dtype=np.int64)
        np.add.at(cm, (labels, predictions), 1)
        return cls.from_confusion(cm)

    @classmethod
    def from_confusion(cls, cm) -> "Metrics":
        cm = np.asarray(cm, dtype=np.int64)
        support = cm.sum(axis=1)
        present = support > 0
        recalls = np.diag(cm)[present] / support[present]
        accuracy = float(recalls.mean()) if recalls.size else 0.0
        tp, fp, fn = cm[1, 1], cm[0, 1], cm[1, 0]
        denom = 2 * tp + fp + fn
        f1 = float(2 * tp / denom) if denom else 0.0
        return cls(cm, accuracy, f1, int(cm.sum()))

    def as_dict(self) -> dict:
        return {
            "n": self.n,
            "accuracy": self.accuracy,
            "f1": self.f1,
            "confusion": self.confusion.tolist(),
        }


def predict(logits: np.ndarray) -> np.ndarray:
    """Argmax over two classes; exact ties go to KL0."""
    return (logits[:, 1] > logits[:, 0]).astype(np.int64)


def infer(model: SiameseGapNetwork, samples: Sequence[KneeSample], batch_size: int = 32) -> np.ndarray:
    """Eval-mode logits for ``samples``, shape (N, num_classes)."""
    out = []
    for start in range(0, len(samples), batch_size):
        lat, med, _ = stack(samples[start : start + batch_size])
        res = model.forward_pair(Tensor._wrap(lat), Tensor._wrap(med), training=False)
        out.append(res.logits.data)
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes), np.float32)


def evaluate(model: SiameseGapNetwork, samples: Sequence[KneeSample], batch_size: int = 32) -> Metrics:
    if not samples:
        raise DataError("cannot evaluate an empty sample list")
    logits = infer(model, samples, batch_size)
    return Metrics.from_predictions([s.label for s in samples], predict(logits))


# -- training loop --------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_acc: float
    val_f1: float


@dataclass
class TrainResult:
    best: checkpoint.Checkpoint
    history: list[EpochRecord]
    best_epoch: int
    model: SiameseGapNetwork  # holds the best weights on return

    def history_csv(self) -> str:
        return history_csv(self.history)


def history_csv(history: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_acc", "val_f1"])
    for r in history:
        w.writerow([r.epoch, repr(r.train_loss), repr(r.val_acc), repr(r.val_f1)])
    return buf.getvalue()


def _epoch_samples(train: Sequence[KneeSample], config: TrainConfig, epoch: int) -> list[KneeSample]:
    rng = stream(config.seed, _SHUFFLE, epoch)
    if config.oversample:
        order = oversample(train, rng)
    else:
        order = [train[i] for i in rng.permutation(len(train))]
    if config.augment is None:
        return order
    jobs = list(enumerate(order))
    return parallel_map(
        lambda job: augment(job[1], config.augment, stream(config.seed, _AUGMENT, epoch, job[0])), jobs
    )


def train_step(model, lat, med, labels, state: AdamState, config: TrainConfig, rng) -> float:
    """Forward, backward and one Adam update on a single batch; returns the loss."""
    model.zero_grad()
    with Tape() as tape:
        out = model.forward_pair(Tensor._wrap(lat), Tensor._wrap(med), training=True, rng=rng)
        loss = ops.cross_entropy(out.logits, labels)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDiverged(f"loss became {value}")
    tape.backward(loss)
    adam_step(model.params, state, config.learning_rate, config.weight_decay)
    return value


def train(
    model: SiameseGapNetwork,
    data: DatasetSplit,
    config: TrainConfig,
    log: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Train for ``config.epochs`` epochs, keeping the best validation checkpoint.

    The best epoch is the one with the highest validation accuracy; ties
    keep the earlier epoch. The model is left holding the best weights.
    """
    if not data.train or not data.validation:
        raise DataError("training needs non-empty train and validation splits")
    if model.config.dropout_p != config.dropout_p:
        model.config = replace(model.config, dropout_p=config.dropout_p)
    state = AdamState.zeros_like(model.params, config.beta1, config.beta2, config.adam_eps)
    history: list[EpochRecord] = []
    best, best_epoch, best_acc = None, 0, -1.0
    for epoch in range(1, config.epochs + 1):
        samples = _epoch_samples(data.train, config, epoch)
        drop_rng = stream(config.seed, _DROPOUT, epoch)
        total = 0.0
        try:
            for start in range(0, len(samples), config.batch_size):
                lat, med, labels = stack(samples[start : start + config.batch_size])
                total += train_step(model, lat, med, labels, state, config, drop_rng) * len(labels)
        except TrainingDiverged as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}", epoch=epoch) from exc
        val = evaluate(model, data.validation, config.eval_batch_size)
        record = EpochRecord(epoch, total / len(samples), val.accuracy, val.f1)
        history.append(record)
        if log is not None:
            log(record)
        if val.accuracy > best_acc:
            best_acc, best_epoch = val.accuracy, epoch
            best = checkpoint.capture(model, seed=config.seed, epoch=epoch, adam=state)
    model.load_state_arrays(best.state)
    return TrainResult(best, history, best_epoch, model)


# -- ablation -------------------------------------------------------------------


ABLATION_FIELDS = ["p1", "p2", "p3", "p4", "pooling", "accuracy", "f1", "params", "width", "status"]


@dataclass
class AblationRow:
    taps: tuple[int, ...]
    pooling: str
    accuracy: float | None
    f1: float | None
    params: int
    width: int
    status: str = "ok"

    def as_csv_row(self) -> list:
        marks = ["x" if b in self.taps else "" for b in (1, 2, 3, 4)]
        fmt = lambda v: "" if v is None else repr(v)
        return marks + [self.pooling, fmt(self.accuracy), fmt(self.f1), self.params, self.width, self.status]


def ablation_grid(base: ModelConfig | None = None) -> list[ModelConfig]:
    """The 6 tap sets x {GAP, GMP}, row by row with GAP before GMP."""
    base = base or ModelConfig()
    return [replace(base, taps=taps, pooling=pool) for taps in ABLATION_TAPS for pool in ("gap", "gmp")]


def ablate(
    data: DatasetSplit,
    base: TrainConfig,
    model_base: ModelConfig | None = None,
    eval_split: str = "test",
    log: Callable[[AblationRow], None] | None = None,
) -> list[AblationRow]:
    """Train and score every tap-set configuration from the same seed and data.

    A run that fails is recorded with its error in ``status`` and the
    remaining runs continue.
    """
    model_base = replace(model_base or ModelConfig(), dropout_p=base.dropout_p)
    rows = []
    for cfg in ablation_grid(model_base):
        model = build(cfg, seed=base.seed)
        row = AblationRow(cfg.taps, cfg.pooling, None, None, count_params(model), cfg.fused_width)
        try:
            train(model, data, base)
            m = evaluate(model, data.part(eval_split), base.eval_batch_size)
            row.accuracy, row.f1 = m.accuracy, m.f1
        except (TrainingDiverged, DataError, ConfigurationError) as exc:
            row.status = f"failed: {type(exc).__name__}: {exc}".replace(",", ";")
        rows.append(row)
        if log is not None:
            log(row)
    return rows


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_FIELDS)
    for r in rows:
        w.writerow(r.as_csv_row())
    return buf.getvalue()
