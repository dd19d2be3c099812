"""Window-level activity classification: fine-tuning and evaluation."""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergedError
from .model import (
    classification_forward,
    forward_hidden,
    init_model,
    swap_pretrain_head_for_classifier,
)
from .optim import AdamW
from .tensor import Tensor, backward, cross_entropy_from_logits


@dataclass
class LabeledWindowSet:
    """Fixed-length windows with one activity label each."""

    windows: np.ndarray   # (N, L, n) scaled values
    labels: np.ndarray    # (N,) ints in [0, num_classes)

    def __post_init__(self):
        self.windows = np.asarray(self.windows)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.windows):
            raise ConfigError("labels length must equal window count")

    def __len__(self):
        return len(self.windows)


@dataclass
class FinetuneConfig:
    lr: float = 5e-5
    batch_size: int = 25
    max_epochs: int = 30
    patience: int = 5
    weight_decay: float = 0.01
    seed: int = 0


@dataclass
class Metrics:
    accuracy: float
    weighted_f1: float
    confusion: np.ndarray               # rows = truth, cols = prediction
    per_class: list = field(default_factory=list)

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "weighted_f1": self.weighted_f1,
            "per_class": self.per_class,
            "confusion": self.confusion.tolist(),
        }


def predict(model, windows, batch_size=64):
    """Argmax class per window; ties resolve to the lowest class id."""
    preds = []
    for start in range(0, len(windows), batch_size):
        chunk = windows[start: start + batch_size]
        logits = classification_forward(forward_hidden(chunk, model), model)
        preds.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def confusion_matrix(truth, preds, num_classes):
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(truth, preds):
        cm[t, p] += 1
    return cm


def metrics_from_confusion(cm):
    """Accuracy, support-weighted F1 and per-class stats from a confusion
    matrix. Classes whose precision+recall denominator is zero get F1 = 0."""
    total = int(cm.sum())
    if total == 0:
        raise ConfigError("cannot evaluate an empty set")
    accuracy = float(np.trace(cm)) / total
    num_classes = cm.shape[0]
    per_class = []
    weighted = 0.0
    for c in range(num_classes):
        tp = int(cm[c, c])
        support = int(cm[c].sum())
        pred_c = int(cm[:, c].sum())
        precision = tp / pred_c if pred_c > 0 else 0.0
        recall = tp / support if support > 0 else 0.0
        f1 = (2 * precision * recall / (precision + recall)
              if precision + recall > 0 else 0.0)
        per_class.append(
            {"precision": precision, "recall": recall, "f1": f1, "support": support}
        )
        weighted += (support / total) * f1
    return accuracy, weighted, per_class


def evaluate(model, dataset):
    """Accuracy, weighted F1, and the confusion matrix on a labeled set."""
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate an empty set")
    num_classes = model.config.num_classes
    preds = predict(model, dataset.windows)
    cm = confusion_matrix(dataset.labels, preds, num_classes)
    accuracy, weighted, per_class = metrics_from_confusion(cm)
    return Metrics(accuracy=accuracy, weighted_f1=weighted, confusion=cm,
                   per_class=per_class)


def emit_confusion_csv(metrics, path):
    """Header row of class ids, one row per true class."""
    num_classes = metrics.confusion.shape[0]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["true\\pred"] + [str(c) for c in range(num_classes)])
        for c in range(num_classes):
            writer.writerow([str(c)] + [str(int(x)) for x in metrics.confusion[c]])


def _clone_params(model):
    return {name: t.data.copy() for name, t in model.params.items()}


def _restore_params(model, snapshot):
    for name, t in model.params.items():
        t.data[...] = snapshot[name]


def run_finetune(splits, num_classes, config=None, pretrained=None, model_config=None):
    """Fine-tune for classification and return (model, Metrics, loss_curve).

    Pass ``pretrained`` (a pretrain-mode ModelParams; the head swap is
    applied) or ``model_config`` for the from-scratch path. ``splits`` maps
    "train"/"validation"/"test" to LabeledWindowSet. Early stopping tracks
    validation accuracy with the configured patience; the best-validation
    parameters are restored before the test evaluation.
    """
    config = config or FinetuneConfig()
    for name in ("train", "validation", "test"):
        if name not in splits or len(splits[name]) == 0:
            raise ConfigError(f"missing or empty split {name!r}")
    train, val, test = splits["train"], splits["validation"], splits["test"]
    for s in (train, val, test):
        if s.labels.min() < 0 or s.labels.max() >= num_classes:
            raise ConfigError("class label out of range for num_classes")

    if pretrained is not None:
        if (pretrained.config.L != train.windows.shape[1]
                or pretrained.config.n != train.windows.shape[2]):
            raise ConfigError("checkpoint L/n do not match the dataset windows")
        model = swap_pretrain_head_for_classifier(pretrained, num_classes, config.seed)
    elif model_config is not None:
        from dataclasses import asdict

        from .model import ModelConfig

        cfg = ModelConfig(**{**asdict(model_config), "num_classes": num_classes})
        model = init_model(cfg, mode="classify")
    else:
        raise ConfigError("run_finetune needs a pretrained model or a model_config")

    return _finetune_model(model, train, val, test, config)


def _finetune_model(model, train, val, test, config):
    opt = AdamW(model.params, lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)

    curve = []
    step = 0
    best_acc = -1.0
    best_snapshot = _clone_params(model)
    epochs_since_best = 0

    for epoch in range(config.max_epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(order), config.batch_size):
            idx = order[start: start + config.batch_size]
            logits = classification_forward(
                forward_hidden(train.windows[idx], model), model
            )
            loss = cross_entropy_from_logits(logits, train.labels[idx])
            value = float(loss.data)
            if not np.isfinite(value):
                raise DivergedError(f"fine-tune loss diverged at step {step}")
            opt.zero_grad()
            backward(loss)
            opt.step()
            step += 1
            curve.append((step, "train", value))

        val_preds = predict(model, val.windows)
        val_acc = float(np.mean(val_preds == val.labels))
        curve.append((step, "val_accuracy", val_acc))
        if val_acc > best_acc:
            best_acc = val_acc
            best_snapshot = _clone_params(model)
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= config.patience:
                break

    _restore_params(model, best_snapshot)
    metrics = evaluate(model, test)
    return model, metrics, curve
