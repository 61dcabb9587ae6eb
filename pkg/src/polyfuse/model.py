"""Multimodal cross-attention classifier.

Pipeline: per-modality conv front-ends with sinusoidal position codes, a
temporal concatenation of all modality sequences, one cross-attention stack
per modality that queries its own stream against the frozen fused sequence,
a shared self-attention stack over the concatenated stream outputs, mean
pooling over time, and a linear class head.

The key structural property: every cross layer's keys and values are
projected from the layer-0 fused sequence. Deeper layers refine queries
only; the fused key/value source is never updated.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import (
    ParamStore,
    Tensor,
    add,
    as_tensor,
    concat,
    conv1d,
    dropout,
    layer_norm,
    linear,
    matmul,
    mean_axis,
    relu,
    reshape,
    scale,
    softmax_rows,
    transpose,
)

# FFN widths are always quoted at this reference model dim; the effective
# hidden width scales with the actual model dim (hidden = alpha * model_dim,
# alpha = ffn_size / FFN_REF_DIM).
FFN_REF_DIM = 30


@dataclass(frozen=True)
class ModalityShape:
    """Channel count and timestep count of one input stream."""

    channels: int
    timesteps: int


@dataclass(frozen=True)
class ModelConfig:
    modalities: tuple[ModalityShape, ...]
    cm_layers: int = 5
    sa_layers: int = 5
    cm_heads: int = 3
    sa_heads: int = 3
    model_dim: int = 30
    ffn_size: int = 120
    dropout: float = 0.1
    num_classes: int = 3
    conv_kernel: int = 3

    @property
    def num_modalities(self) -> int:
        return len(self.modalities)

    @property
    def alpha(self) -> int:
        return self.ffn_size // FFN_REF_DIM

    @property
    def ffn_hidden(self) -> int:
        """Effective FFN hidden width: alpha * model_dim."""
        return self.alpha * self.model_dim

    def validate(self) -> "ModelConfig":
        if self.num_modalities < 1:
            raise ConfigError("config needs at least one modality")
        for i, m in enumerate(self.modalities):
            if m.channels < 1 or m.timesteps < 1:
                raise ConfigError(f"modality {i} has non-positive shape {m}")
        if self.cm_layers < 1 or self.sa_layers < 1:
            raise ConfigError(
                f"layer counts must be >= 1, got cm_layers={self.cm_layers} "
                f"sa_layers={self.sa_layers}"
            )
        if self.cm_heads < 1 or self.sa_heads < 1:
            raise ConfigError(
                f"head counts must be >= 1, got cm_heads={self.cm_heads} "
                f"sa_heads={self.sa_heads}"
            )
        if self.model_dim < 1:
            raise ConfigError(f"model_dim must be >= 1, got {self.model_dim}")
        if self.model_dim % self.cm_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} is not divisible by cm_heads {self.cm_heads}"
            )
        if self.model_dim % self.sa_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} is not divisible by sa_heads {self.sa_heads}"
            )
        if self.ffn_size % FFN_REF_DIM != 0 or self.ffn_size < FFN_REF_DIM:
            raise ConfigError(
                f"ffn_size must be a positive multiple of {FFN_REF_DIM}, got {self.ffn_size}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd and positive, got {self.conv_kernel}")
        return self

    def to_dict(self) -> dict:
        return {
            "modalities": [
                {"channels": m.channels, "timesteps": m.timesteps} for m in self.modalities
            ],
            "cm_layers": self.cm_layers,
            "sa_layers": self.sa_layers,
            "cm_heads": self.cm_heads,
            "sa_heads": self.sa_heads,
            "model_dim": self.model_dim,
            "ffn_size": self.ffn_size,
            "dropout": self.dropout,
            "num_classes": self.num_classes,
            "conv_kernel": self.conv_kernel,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        if not isinstance(doc, dict):
            raise ConfigError("model config document must be a JSON object")
        known = {
            "modalities", "cm_layers", "sa_layers", "cm_heads", "sa_heads",
            "model_dim", "ffn_size", "dropout", "num_classes", "conv_kernel",
        }
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        kwargs = dict(doc)
        mods = kwargs.pop("modalities", None)
        if mods is None:
            raise ConfigError("model config requires a modalities list")
        try:
            shapes = tuple(
                ModalityShape(int(m["channels"]), int(m["timesteps"])) for m in mods
            )
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"malformed modalities entry: {exc}") from exc
        return cls(modalities=shapes, **kwargs).validate()

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"model config is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)


def with_trial_dims(config: ModelConfig, layers: int, heads: int,
                    model_dim: int, ffn_size: int) -> ModelConfig:
    """Apply a joint (layers, heads, model_dim, ffn) setting to both stacks."""
    return replace(
        config,
        cm_layers=layers, sa_layers=layers,
        cm_heads=heads, sa_heads=heads,
        model_dim=model_dim, ffn_size=ffn_size,
    ).validate()


# ---------------------------------------------------------------------------
# Parameter accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamBreakdown:
    per_block: int
    num_blocks: int
    blocks_subtotal: int
    overhead: int
    total: int


def per_block_params(model_dim: int, ffn_hidden: int) -> int:
    """Trainable scalars in one encoder block.

    Four d x d attention projections with biases, a two-layer FFN with
    biases, and two affine layer norms. Head count does not appear: heads
    partition the projections without adding parameters.
    """
    d, f = model_dim, ffn_hidden
    attention = 4 * d * d + 4 * d
    ffn = 2 * d * f + f + d
    norms = 4 * d
    return attention + ffn + norms


def analytic_param_count(config: ModelConfig) -> ParamBreakdown:
    """Closed-form parameter count; matches exact enumeration of a built model."""
    config.validate()
    d = config.model_dim
    per = per_block_params(d, config.ffn_hidden)
    blocks = config.num_modalities * config.cm_layers + config.sa_layers
    overhead = sum(
        d * m.channels * config.conv_kernel + d for m in config.modalities
    ) + d * config.num_classes + config.num_classes
    return ParamBreakdown(
        per_block=per,
        num_blocks=blocks,
        blocks_subtotal=blocks * per,
        overhead=overhead,
        total=blocks * per + overhead,
    )


def count_params(model: "Model") -> int:
    """Exact enumeration over the parameter store."""
    return model.params.total_count


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def positional_encoding(timesteps: int, dim: int) -> Tensor:
    """Sinusoidal position codes, shape (timesteps, dim), no parameters.

    Column 2i holds sin(t / 10000^(2i/dim)), column 2i+1 the matching cos.
    Odd dims drop the final cos column.
    """
    if timesteps < 1 or dim < 1:
        raise ConfigError(f"positional_encoding needs positive dims, got ({timesteps}, {dim})")
    pos = np.arange(timesteps, dtype=np.float64)[:, None]
    even = np.arange(0, dim, 2, dtype=np.float64)
    angles = pos / np.power(10000.0, even / dim)
    pe = np.zeros((timesteps, dim), dtype=np.float64)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles[:, : dim // 2])
    return Tensor(pe)


def _op_id(name: str) -> int:
    # Stable per-site dropout stream id derived from the site name.
    return zlib.crc32(name.encode())


class MultiHeadAttention:
    """Scaled dot-product attention with the model dim split across heads."""

    def __init__(self, store: ParamStore, prefix: str, dim: int, heads: int, seed: int):
        if dim % heads != 0:
            raise ConfigError(f"model_dim {dim} is not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        def proj(tag):
            w = store.register(f"{prefix}.{tag}.weight", (dim, dim), seed=seed, fan_in=dim)
            b = store.register(f"{prefix}.{tag}.bias", (dim,), seed=seed, fan_in=dim)
            return w, b
        self.wq, self.bq = proj("query")
        self.wk, self.bk = proj("key")
        self.wv, self.bv = proj("value")
        self.wo, self.bo = proj("out")

    def _split(self, x: Tensor, batch: int, steps: int) -> Tensor:
        x = reshape(x, (batch, steps, self.heads, self.head_dim))
        return transpose(x, (0, 2, 1, 3))

    def __call__(self, query_in: Tensor, kv_in: Tensor) -> Tensor:
        batch, t_q, _ = query_in.shape
        t_k = kv_in.shape[1]
        q = self._split(linear(query_in, self.wq, self.bq), batch, t_q)
        k = self._split(linear(kv_in, self.wk, self.bk), batch, t_k)
        v = self._split(linear(kv_in, self.wv, self.bv), batch, t_k)
        scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.head_dim))
        weights = softmax_rows(scores)
        context = transpose(matmul(weights, v), (0, 2, 1, 3))
        context = reshape(context, (batch, t_q, self.dim))
        return linear(context, self.wo, self.bo)


class EncoderBlock:
    """One pre-norm encoder block: attention + FFN, two affine layer norms.

    With kv_source given, keys and values are projected from the normalized
    kv_source while queries come from the normalized stream input. Without
    it the block is plain self-attention. Residuals add the normalized
    tensors on both sub-layers.
    """

    def __init__(self, store: ParamStore, prefix: str, dim: int, heads: int,
                 hidden: int, drop_rate: float, seed: int):
        self.attn_gain = store.register(f"{prefix}.attn_norm.gain", (dim,), seed=seed, init="ones")
        self.attn_bias = store.register(f"{prefix}.attn_norm.bias", (dim,), seed=seed, init="zeros")
        self.ffn_gain = store.register(f"{prefix}.ffn_norm.gain", (dim,), seed=seed, init="ones")
        self.ffn_bias = store.register(f"{prefix}.ffn_norm.bias", (dim,), seed=seed, init="zeros")
        self.attention = MultiHeadAttention(store, f"{prefix}.attn", dim, heads, seed)
        self.w1 = store.register(f"{prefix}.ffn.lift.weight", (dim, hidden), seed=seed, fan_in=dim)
        self.b1 = store.register(f"{prefix}.ffn.lift.bias", (hidden,), seed=seed, fan_in=dim)
        self.w2 = store.register(f"{prefix}.ffn.drop.weight", (hidden, dim), seed=seed, fan_in=hidden)
        self.b2 = store.register(f"{prefix}.ffn.drop.bias", (dim,), seed=seed, fan_in=hidden)
        self.drop_rate = drop_rate
        self._attn_drop = _op_id(f"{prefix}.dropout.attn")
        self._ffn_drop = _op_id(f"{prefix}.dropout.ffn")

    def forward(self, x: Tensor, kv_source: Tensor | None = None, *,
                train: bool = False, seed: int = 0, step: int = 0) -> Tensor:
        x_norm = layer_norm(x, self.attn_gain, self.attn_bias)
        if kv_source is None:
            kv_norm = x_norm
        else:
            kv_norm = layer_norm(kv_source, self.attn_gain, self.attn_bias)
        attended = self.attention(x_norm, kv_norm)
        attended = dropout(attended, self.drop_rate, train,
                           seed=seed, op_id=self._attn_drop, step=step)
        mid = add(attended, x_norm)
        mid_norm = layer_norm(mid, self.ffn_gain, self.ffn_bias)
        h = linear(mid_norm, self.w1, self.b1)
        h = relu(h)
        h = linear(h, self.w2, self.b2)
        h = dropout(h, self.drop_rate, train, seed=seed, op_id=self._ffn_drop, step=step)
        return add(h, mid_norm)


class FrontEnd:
    """Conv1d lift of one modality to the model dim, plus position codes."""

    def __init__(self, store: ParamStore, prefix: str, shape: ModalityShape,
                 dim: int, kernel: int, seed: int):
        self.shape = shape
        self.weight = store.register(
            f"{prefix}.conv.weight", (dim, shape.channels, kernel),
            seed=seed, fan_in=shape.channels * kernel,
        )
        self.bias = store.register(
            f"{prefix}.conv.bias", (dim,), seed=seed, fan_in=shape.channels * kernel
        )
        self.pe = positional_encoding(shape.timesteps, dim)

    def forward(self, x: Tensor) -> Tensor:
        h = conv1d(x, self.weight, self.bias)     # (B, dim, T)
        h = transpose(h, (0, 2, 1))               # (B, T, dim)
        return add(h, self.pe)


class Model:
    """Built model: front ends, per-modality cross stacks, fusion stack, head."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.seed = seed
        self.params = ParamStore()
        d = config.model_dim
        hidden = config.ffn_hidden
        self.front_ends = [
            FrontEnd(self.params, f"frontend.{i}", m, d, config.conv_kernel, seed)
            for i, m in enumerate(config.modalities)
        ]
        self.streams = [
            [
                EncoderBlock(self.params, f"stream.{i}.block.{u}", d,
                             config.cm_heads, hidden, config.dropout, seed)
                for u in range(config.cm_layers)
            ]
            for i in range(config.num_modalities)
        ]
        self.fusion = [
            EncoderBlock(self.params, f"fusion.block.{u}", d,
                         config.sa_heads, hidden, config.dropout, seed)
            for u in range(config.sa_layers)
        ]
        self.head_weight = self.params.register(
            "head.weight", (d, config.num_classes), seed=seed, fan_in=d
        )
        self.head_bias = self.params.register(
            "head.bias", (config.num_classes,), seed=seed, fan_in=d
        )

    @property
    def num_blocks(self) -> int:
        return sum(len(s) for s in self.streams) + len(self.fusion)

    def _check_batch(self, batch) -> list[Tensor]:
        if len(batch) != self.config.num_modalities:
            raise ShapeError(
                f"expected {self.config.num_modalities} modality arrays, got {len(batch)}"
            )
        tensors = []
        batch_size = None
        for i, (x, m) in enumerate(zip(batch, self.config.modalities)):
            t = as_tensor(x)
            if t.ndim != 3 or t.shape[1] != m.channels or t.shape[2] != m.timesteps:
                raise ShapeError(
                    f"modality {i} expects (B, {m.channels}, {m.timesteps}), got {t.shape}"
                )
            if batch_size is None:
                batch_size = t.shape[0]
            elif t.shape[0] != batch_size:
                raise ShapeError(
                    f"modality {i} batch size {t.shape[0]} != {batch_size}"
                )
            tensors.append(t)
        return tensors

    def forward(self, batch, train_flag: bool = False, *, seed: int | None = None,
                step: int = 0, trace: dict | None = None) -> Tensor:
        """Class logits of shape (B, num_classes).

        batch: one (B, C_i, T_i) array per modality, common B. ``trace``,
        when given, records the fused sequence and the exact key/value
        source tensor handed to every cross layer.
        """
        seed = self.seed if seed is None else seed
        inputs = self._check_batch(batch)
        lifted = [fe.forward(x) for fe, x in zip(self.front_ends, inputs)]
        fused = concat(lifted, axis=1)            # (B, sum T_i, dim)
        if trace is not None:
            trace["fused"] = fused
            trace["kv_sources"] = []
        outputs = []
        for i, blocks in enumerate(self.streams):
            z = lifted[i]
            for block in blocks:
                if trace is not None:
                    trace["kv_sources"].append((i, fused))
                z = block.forward(z, kv_source=fused, train=train_flag, seed=seed, step=step)
            outputs.append(z)
        merged = concat(outputs, axis=1)
        for block in self.fusion:
            merged = block.forward(merged, kv_source=None, train=train_flag,
                                   seed=seed, step=step)
        pooled = mean_axis(merged, axis=1)        # temporal mean
        return linear(pooled, self.head_weight, self.head_bias)


def build(config: ModelConfig, seed: int = 0) -> Model:
    """Validate the config and construct a deterministically initialized model."""
    return Model(config, seed=seed)
