"""The n-dimensional numerical sequence Transformer.

Linear embedding of each timestep's n sensor values, a learned positional
table, pre-norm encoder (bidirectional) or decoder (causal) blocks, and
either n parallel per-dimension bin-classification heads (pretrain mode)
or a single pooled classification head (downstream mode).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import CheckpointError, ConfigError, ContractError, ShapeError
from .preprocess import Scaler, SequenceBatch
from .tensor import (
    Tensor,
    add,
    layernorm_lastdim,
    matmul,
    mean_axis,
    reshape,
    scale,
    softmax_lastdim,
    take_rows,
    transpose,
)

CHECKPOINT_VERSION = 1
CHECKPOINT_MAGIC = "binformer-checkpoint"


@dataclass
class ModelConfig:
    n: int
    d: int
    L: int
    layers: int
    heads: int
    k: int
    ff_mult: int = 4
    arch: str = "encoder"
    num_classes: int | None = None
    pooling: str = "mean"
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.L < 1:
            raise ConfigError("n and L must be >= 1")
        if self.layers < 1:
            raise ConfigError("at least one transformer layer is required")
        if self.heads < 1 or self.d % self.heads != 0:
            raise ConfigError(
                f"embedding dim {self.d} must be divisible by head count {self.heads}"
            )
        if self.k < 2:
            raise ConfigError("bin count k must be >= 2")
        if self.arch not in ("encoder", "decoder"):
            raise ConfigError(f"arch must be encoder or decoder, got {self.arch!r}")
        if self.pooling not in ("mean", "first"):
            raise ConfigError(f"pooling must be mean or first, got {self.pooling!r}")


@dataclass
class ModelParams:
    config: ModelConfig
    mode: str                     # "pretrain" | "classify"
    params: dict = field(default_factory=dict)  # name -> Tensor

    def named(self):
        return self.params

    def tensors(self):
        return list(self.params.values())

    def zero_grads(self):
        for p in self.params.values():
            p.zero_grad()


def _param(rng, shape, std, dtype):
    if std == 0.0:
        data = np.zeros(shape, dtype=dtype)
    else:
        data = rng.normal(0.0, std, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


def init_model(config, mode="pretrain", dtype=np.float32):
    """Initialize parameters: weights ~ N(0, 0.02^2), biases 0, LN gain 1.

    Deterministic for a given config.seed.
    """
    if mode not in ("pretrain", "classify"):
        raise ConfigError(f"unknown mode {mode!r}")
    if mode == "classify" and (config.num_classes is None or config.num_classes < 2):
        raise ConfigError("classify mode requires num_classes >= 2")
    rng = np.random.default_rng(config.seed)
    std = 0.02
    p = {}
    p["embed.W"] = _param(rng, (config.d, config.n), std, dtype)
    p["embed.b"] = _param(rng, (config.d,), 0.0, dtype)
    p["pos"] = _param(rng, (config.L, config.d), std, dtype)
    for i in range(config.layers):
        pre = f"layer{i}."
        for name in ("Wq", "Wk", "Wv", "Wo"):
            p[pre + "attn." + name] = _param(rng, (config.d, config.d), std, dtype)
        for name in ("bq", "bk", "bv", "bo"):
            p[pre + "attn." + name] = _param(rng, (config.d,), 0.0, dtype)
        p[pre + "ln1.g"] = Tensor(np.ones(config.d, dtype=dtype), requires_grad=True)
        p[pre + "ln1.b"] = _param(rng, (config.d,), 0.0, dtype)
        p[pre + "ln2.g"] = Tensor(np.ones(config.d, dtype=dtype), requires_grad=True)
        p[pre + "ln2.b"] = _param(rng, (config.d,), 0.0, dtype)
        hidden = config.ff_mult * config.d
        p[pre + "ffn.W1"] = _param(rng, (hidden, config.d), std, dtype)
        p[pre + "ffn.b1"] = _param(rng, (hidden,), 0.0, dtype)
        p[pre + "ffn.W2"] = _param(rng, (config.d, hidden), std, dtype)
        p[pre + "ffn.b2"] = _param(rng, (config.d,), 0.0, dtype)
    p["final_ln.g"] = Tensor(np.ones(config.d, dtype=dtype), requires_grad=True)
    p["final_ln.b"] = _param(rng, (config.d,), 0.0, dtype)
    if mode == "pretrain":
        for i in range(config.n):
            p[f"head{i}.W"] = _param(rng, (config.k, config.d), std, dtype)
            p[f"head{i}.b"] = _param(rng, (config.k,), 0.0, dtype)
    else:
        p["cls.W"] = _param(rng, (config.num_classes, config.d), std, dtype)
        p["cls.b"] = _param(rng, (config.num_classes,), 0.0, dtype)
    return ModelParams(config=config, mode=mode, params=p)


def _gelu(x):
    from .tensor import gelu
    return gelu(x)


def embed_sequence(batch, model):
    """hidden[t] = W x[t] + b + P[t], per timestep, plus positional row."""
    data = batch.data if isinstance(batch, SequenceBatch) else np.asarray(batch)
    if data.ndim != 3:
        raise ShapeError(f"expected (B, L, n) input, got shape {data.shape}")
    B, L, n = data.shape
    cfg = model.config
    if n != cfg.n:
        raise ShapeError(f"input has {n} dimensions, model expects {cfg.n}")
    if L > cfg.L:
        raise ShapeError(f"sequence length {L} exceeds model maximum {cfg.L}")
    p = model.params
    x = Tensor(data.astype(p["embed.W"].dtype))
    h = matmul(x, transpose(p["embed.W"]))
    h = add(h, p["embed.b"])
    h = add(h, take_rows(p["pos"], L))
    return h


def _attention(h, model, layer, causal):
    p = model.params
    cfg = model.config
    B, L, d = h.shape
    nh = cfg.heads
    dh = d // nh
    pre = f"layer{layer}.attn."

    def proj(name):
        out = add(matmul(h_norm, transpose(p[pre + "W" + name])), p[pre + "b" + name])
        out = reshape(out, (B, L, nh, dh))
        return transpose(out, (0, 2, 1, 3))  # (B, nh, L, dh)

    h_norm = layernorm_lastdim(h, p[f"layer{layer}.ln1.g"], p[f"layer{layer}.ln1.b"])
    q, k_, v = proj("q"), proj("k"), proj("v")
    scores = scale(matmul(q, transpose(k_, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    mask = None
    if causal:
        mask = np.tril(np.ones((L, L), dtype=bool))
    att = softmax_lastdim(scores, mask=mask)
    ctx = matmul(att, v)                      # (B, nh, L, dh)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (B, L, d))
    out = add(matmul(ctx, transpose(p[pre + "Wo"])), p[pre + "bo"])
    return add(h, out)


def _ffn(h, model, layer):
    p = model.params
    pre = f"layer{layer}."
    h_norm = layernorm_lastdim(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
    mid = _gelu(add(matmul(h_norm, transpose(p[pre + "ffn.W1"])), p[pre + "ffn.b1"]))
    out = add(matmul(mid, transpose(p[pre + "ffn.W2"])), p[pre + "ffn.b2"])
    return add(h, out)


def encoder_forward(hidden, model, attention=None):
    """Run the pre-norm transformer stack; causal masking in decoder mode."""
    cfg = model.config
    if attention is None:
        attention = "causal" if cfg.arch == "decoder" else "bidirectional"
    causal = attention == "causal"
    h = hidden
    for i in range(cfg.layers):
        h = _attention(h, model, i, causal)
        h = _ffn(h, model, i)
    h = layernorm_lastdim(h, model.params["final_ln.g"], model.params["final_ln.b"])
    return h


def forward_hidden(batch, model):
    """embed_sequence followed by the full block stack."""
    return encoder_forward(embed_sequence(batch, model), model)


def parallel_heads_forward(H, model):
    """Per-dimension bin logits: head i maps H to (B, L, k). Returns a list."""
    if model.mode != "pretrain":
        raise ContractError("parallel heads are only present in pretrain mode")
    p = model.params
    return [
        add(matmul(H, transpose(p[f"head{i}.W"])), p[f"head{i}.b"])
        for i in range(model.config.n)
    ]


def classification_forward(H, model):
    """Pool over positions then apply the classifier head: (B, num_classes)."""
    if model.mode != "classify":
        raise ContractError("classification head is only present in classify mode")
    if model.config.pooling == "mean":
        pooled = mean_axis(H, axis=1)
    else:
        pooled = take_first_position(H)
    p = model.params
    return add(matmul(pooled, transpose(p["cls.W"])), p["cls.b"])


def take_first_position(H):
    from .tensor import _result  # local: simple slice op used only here

    def bwd(g):
        full = np.zeros_like(H.data)
        full[:, 0] = g
        return (full,)

    return _result(H.data[:, 0].copy(), (H,), bwd)


def swap_pretrain_head_for_classifier(model, num_classes, seed):
    """Drop the n parallel heads, keep the body bit-exactly, add a fresh
    classifier initialized from ``seed``."""
    if model.mode != "pretrain":
        raise ContractError("head swap expects a pretrain-mode model")
    if num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    cfg = model.config
    new_cfg = ModelConfig(**{**asdict(cfg), "num_classes": num_classes})
    dtype = model.params["embed.W"].dtype
    rng = np.random.default_rng(seed)
    p = {}
    for name, t in model.params.items():
        if name.startswith("head"):
            continue
        p[name] = Tensor(t.data.copy(), requires_grad=True)
    p["cls.W"] = Tensor(
        rng.normal(0.0, 0.02, size=(num_classes, cfg.d)).astype(dtype),
        requires_grad=True,
    )
    p["cls.b"] = Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True)
    return ModelParams(config=new_cfg, mode="classify", params=p)


def count_parameters(model):
    return int(sum(t.data.size for t in model.params.values()))


# ---------------------------------------------------------------------------
# checkpoint I/O: one JSON metadata line, then a float32 little-endian blob
# ---------------------------------------------------------------------------


def save_checkpoint(model, scaler, path):
    """Write metadata + parameter blob; atomic via temp-file rename."""
    names = list(model.params.keys())
    manifest = []
    offset = 0
    for name in names:
        t = model.params[name]
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.data.size * 4
    meta = {
        "magic": CHECKPOINT_MAGIC,
        "format_version": CHECKPOINT_VERSION,
        "mode": model.mode,
        "config": asdict(model.config),
        "scaler": scaler.to_dict() if scaler is not None else None,
        "blob_bytes": offset,
        "manifest": manifest,
    }
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(json.dumps(meta).encode("utf-8"))
        f.write(b"\n")
        for name in names:
            f.write(model.params[name].data.astype("<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Read a checkpoint; returns (ModelParams, ModelConfig, Scaler|None)."""
    try:
        with open(path, "rb") as f:
            header = f.readline()
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    try:
        meta = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: malformed checkpoint header") from e
    if meta.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {meta.get('format_version')}"
        )
    if len(blob) != meta["blob_bytes"]:
        raise CheckpointError(
            f"{path}: truncated blob ({len(blob)} bytes, expected {meta['blob_bytes']})"
        )
    config = ModelConfig(**meta["config"])
    params = {}
    for entry in meta["manifest"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + size * 4
        if end > len(blob):
            raise CheckpointError(f"{path}: manifest offset out of range for {entry['name']}")
        arr = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape)
        params[entry["name"]] = Tensor(arr.astype(np.float32).copy(), requires_grad=True)
    model = ModelParams(config=config, mode=meta["mode"], params=params)
    scaler = Scaler.from_dict(meta["scaler"]) if meta["scaler"] is not None else None
    return model, config, scaler
