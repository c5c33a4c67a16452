"""Training loop for the synthetic task."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ..core import NonFiniteError, Tensor, backward, no_grad, philox
from ..core import functional as F
from ..models import FcaFormer, save_model
from .data import Split, SynthTask
from .optim import AdamW, cosine_lr

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_steps: int = 100
    label_smoothing: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0 or self.weight_decay < 0:
            raise ValueError("epochs, batch size, lr and weight decay must be non-negative (batch >= 1)")
        if self.warmup_steps < 0 or not 0 <= self.label_smoothing < 1:
            raise ValueError("invalid warmup or label smoothing")

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls(**json.load(fh))


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_acc: float
    val_acc: float


@dataclass
class History:
    records: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "train_acc", "val_acc"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.loss), repr(r.train_acc), repr(r.val_acc)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "History":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls([EpochRecord(int(r["epoch"]), float(r["loss"]), float(r["train_acc"]), float(r["val_acc"]))
                    for r in rows])

    @property
    def final(self) -> EpochRecord:
        return self.records[-1]


def cross_entropy(logits: Tensor, labels: np.ndarray, smoothing: float = 0.0) -> Tensor:
    k = logits.shape[-1]
    target = np.full(logits.shape, smoothing / k, dtype=logits.dtype)
    target[np.arange(len(labels)), labels] += 1.0 - smoothing
    return -(F.log_softmax_lastdim(logits) * target).sum(axis=-1).mean()


def evaluate(model: FcaFormer, split: Split, batch_size: int = 128, smoothing: float = 0.0) -> tuple[float, float]:
    """Mean loss and accuracy over ``split`` in fixed order."""
    total_loss = 0.0
    correct = 0
    with no_grad():
        for lo in range(0, len(split), batch_size):
            xb = Tensor(split.images[lo:lo + batch_size])
            yb = split.labels[lo:lo + batch_size]
            logits = model(xb)
            total_loss += cross_entropy(logits, yb, smoothing).item() * len(yb)
            correct += int((logits.data.argmax(axis=-1) == yb).sum())
    return total_loss / len(split), correct / len(split)


def train(model: FcaFormer, task: SynthTask, cfg: TrainConfig, out_dir: Optional[str] = None) -> History:
    """Train ``model`` on ``task``; after each epoch record the training-set loss and both accuracies.

    Metrics are evaluated in inference mode over the full splits in fixed order,
    so the history depends only on the parameters, not on batch composition.
    """
    if model.cfg.input_size != task.image_size or model.cfg.num_classes != task.num_classes:
        raise ValueError("model input size / classes do not match the task")
    data = task.train
    if data.images.dtype != model.cfg.np_dtype:
        raise TypeError("task dtype does not match model dtype")
    opt = AdamW(list(model.named_parameters()), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = philox(cfg.seed, "shuffle")
    steps_per_epoch = -(-len(data) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    history = History()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(data))
        for lo in range(0, len(data), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            try:
                loss = cross_entropy(model(Tensor(data.images[idx])), data.labels[idx], cfg.label_smoothing)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch} step {step}: {exc}") from exc
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"epoch {epoch} step {step}: loss {loss.item()}")
            opt.zero_grad()
            backward(loss)
            opt.step(cosine_lr(step, total_steps, cfg.lr, cfg.warmup_steps))
            step += 1
        try:
            train_loss, train_acc = evaluate(model, data, smoothing=cfg.label_smoothing)
            _, val_acc = evaluate(model, task.val)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
        history.records.append(EpochRecord(epoch, train_loss, train_acc, val_acc))
        log.info("epoch %d loss %.4f train %.3f val %.3f", epoch, train_loss, train_acc, val_acc)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_model(os.path.join(out_dir, "model.ckpt"), model)
        with open(os.path.join(out_dir, "history.csv"), "w") as fh:
            fh.write(history.to_csv())
        with open(os.path.join(out_dir, "train_config.json"), "w") as fh:
            json.dump(asdict(cfg), fh, indent=2)
    return history
