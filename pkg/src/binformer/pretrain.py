"""Self-supervised pretraining: task example builders and the training loop.

Three tasks share one model: reconstruction (predict every bin label from
the unmasked input), MLM (predict bin labels at masked cells only), and
next-token (causal one-step-ahead bin prediction with the earliest targets
excluded from the loss).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergedError, NoLossPositionsError
from .model import forward_hidden, parallel_heads_forward
from .optim import AdamW
from .preprocess import (
    SensorFrame,
    apply_minmax,
    discretize_bins,
    fit_minmax,
    impute_missing_mean,
    segment_sequences,
    winsorize_percentile,
)
from .tensor import add, backward, cross_entropy_from_logits, scale

TASKS = ("reconstruction", "mlm", "next_token")


@dataclass
class PretrainExample:
    """One task instance: model input, bin targets, and the loss mask.

    Shapes are (L', n) for a single window or (B, L', n) batched; L' is
    L - 1 for next-token (inputs are the context positions 0..L-2).
    """

    input: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray
    task: str


@dataclass
class PretrainRunConfig:
    task: str = "mlm"
    k: int = 100
    batch_size: int = 25
    lr: float = 5e-5
    epochs: int = 1
    mask_ratio: float = 0.25
    mask_value: float = -100.0
    next_token_skip: int = 70
    val_fraction: float = 0.2
    winsor_fraction: float = 0.05
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown pretraining task {self.task!r}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must be in (0, 1)")
        if self.k < 2:
            raise ConfigError("bin count must be >= 2")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")


def build_reconstruction_example(seq, k):
    """Input unchanged, every cell's bin label is a target."""
    seq = np.asarray(seq, dtype=np.float64)
    targets = discretize_bins(seq, k).labels
    return PretrainExample(
        input=seq.copy(),
        targets=targets,
        loss_mask=np.ones(seq.shape, dtype=bool),
        task="reconstruction",
    )


def build_mlm_example(seq, k, ratio=0.25, mask_value=-100.0, rng=None):
    """Mask exactly floor(ratio*L*n) cells of the (L, n) grid.

    Cells are drawn uniformly without replacement; targets at masked cells
    hold the pre-mask bin label and the loss mask is true exactly there.
    """
    seq = np.asarray(seq, dtype=np.float64)
    L, n = seq.shape
    count = int(np.floor(ratio * L * n))
    if count == 0:
        raise ConfigError(f"mask_ratio {ratio} selects zero cells for L={L}, n={n}")
    if rng is None:
        rng = np.random.default_rng()
    flat = rng.choice(L * n, size=count, replace=False)
    mask = np.zeros(L * n, dtype=bool)
    mask[flat] = True
    mask = mask.reshape(L, n)
    targets = discretize_bins(seq, k).labels
    masked = seq.copy()
    masked[mask] = mask_value
    return PretrainExample(input=masked, targets=targets, loss_mask=mask, task="mlm")


def build_next_token_example(seq, k, skip=70):
    """Causal one-step shift: context positions 0..L-2 predict 1..L-1.

    The loss mask excludes every target whose original position index is
    below ``skip``.
    """
    seq = np.asarray(seq, dtype=np.float64)
    L, n = seq.shape
    if skip >= L:
        raise ConfigError(f"next_token skip {skip} must be < sequence length {L}")
    labels = discretize_bins(seq, k).labels
    context = seq[: L - 1].copy()
    targets = labels[1:]
    target_positions = np.arange(1, L)
    mask = np.broadcast_to((target_positions >= skip)[:, None], targets.shape).copy()
    return PretrainExample(input=context, targets=targets, loss_mask=mask, task="next_token")


def build_example(seq, config, rng=None):
    if config.task == "reconstruction":
        return build_reconstruction_example(seq, config.k)
    if config.task == "mlm":
        return build_mlm_example(seq, config.k, config.mask_ratio, config.mask_value, rng)
    return build_next_token_example(seq, config.k, config.next_token_skip)


def stack_examples(examples):
    return PretrainExample(
        input=np.stack([e.input for e in examples]),
        targets=np.stack([e.targets for e in examples]),
        loss_mask=np.stack([e.loss_mask for e in examples]),
        task=examples[0].task,
    )


def compute_pretrain_loss(logits, example):
    """Average over dimensions of the per-dimension masked cross-entropy.

    ``logits`` is the list of n head outputs, each (B, L', k). Dimension i
    uses only the cells where its loss mask is true.
    """
    n = len(logits)
    targets = example.targets
    mask = example.loss_mask
    if targets.ndim == 2:  # single window -> treat as batch of one
        targets = targets[None]
        mask = mask[None]
    total = None
    for i in range(n):
        if not mask[..., i].any():
            raise NoLossPositionsError(f"no loss positions for dimension {i}")
        li = cross_entropy_from_logits(logits[i], targets[..., i], mask[..., i])
        total = li if total is None else add(total, li)
    return scale(total, 1.0 / n)


def pretrain_step_loss(model, example):
    """Forward pass + task loss for one batched example."""
    inp = example.input if example.input.ndim == 3 else example.input[None]
    H = forward_hidden(inp, model)
    logits = parallel_heads_forward(H, model)
    return compute_pretrain_loss(logits, example)


def preprocess_frame(frame, L, winsor_fraction=0.05, scaler=None):
    """Winsorize, fit (unless given), impute, scale, segment."""
    values = winsorize_percentile(frame.values, winsor_fraction)
    if scaler is None:
        scaler = fit_minmax(values, winsor_fraction)
    values = impute_missing_mean(values, scaler)
    scaled = apply_minmax(values, scaler)
    batch, win_labels = segment_sequences(scaled, L, frame.labels)
    return batch, win_labels, scaler


def run_pretraining(frame, config, model_config, on_step=None):
    """Full pretraining run; returns (model, scaler, loss_curve).

    loss_curve rows are (step, split, loss) with split "train" per batch
    and "val" once per epoch. Deterministic for a fixed seed.
    """
    if config.task == "next_token" and model_config.arch != "decoder":
        raise ConfigError("next_token pretraining requires the decoder architecture")

    batch, _, scaler = preprocess_frame(frame, model_config.L, config.winsor_fraction)
    windows = batch.data
    num = windows.shape[0]
    if num == 0:
        raise ConfigError("dataset yields zero windows; need at least one sequence")

    n_val = int(round(config.val_fraction * num))
    n_val = min(n_val, num - 1)
    train_w = windows[: num - n_val]
    val_w = windows[num - n_val:]

    from .model import init_model

    model = init_model(model_config, mode="pretrain")
    opt = AdamW(model.params, lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)

    curve = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_w))
        for start in range(0, len(order), config.batch_size):
            idx = order[start: start + config.batch_size]
            examples = stack_examples([build_example(train_w[i], config, rng) for i in idx])
            loss = pretrain_step_loss(model, examples)
            value = float(loss.data)
            if not np.isfinite(value):
                raise DivergedError(f"training loss diverged at step {step}")
            opt.zero_grad()
            backward(loss)
            opt.step()
            step += 1
            curve.append((step, "train", value))
            if on_step is not None:
                on_step(step, value)
        if len(val_w) > 0:
            val_rng = np.random.default_rng((config.seed, epoch, 917))
            losses = []
            weights = []
            for start in range(0, len(val_w), config.batch_size):
                chunk = val_w[start: start + config.batch_size]
                examples = stack_examples([build_example(w, config, val_rng) for w in chunk])
                losses.append(float(pretrain_step_loss(model, examples).data))
                weights.append(len(chunk))
            val_loss = float(np.average(losses, weights=weights))
            curve.append((step, "val", val_loss))

    return model, scaler, curve
