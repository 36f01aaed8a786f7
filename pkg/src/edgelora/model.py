"""Micro-transformer flow classifier.

Token + position embeddings, ``n_layers`` post-norm blocks (attention with
LoRA-injectable q/v projections, GELU feed-forward), CLS pooling and a
swappable classification head. Linear weights are stored (d_out, d_in).
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import PAD_ID
from .errors import AdapterError, ConfigError, DimensionError, FormatError, InputError, StateError
from .nn import (
    ClsPool,
    Embedding,
    FeedForward,
    LayerNorm,
    Linear,
    LoraLinear,
    MultiHeadAttention,
    Parameter,
)

INIT_STD = 0.02
CHECKPOINT_MAGIC = b"MBKB"
CHECKPOINT_VERSION = 1
_CONFIG_BLOCK = struct.Struct("<HHHHIHQ")


@dataclass(frozen=True)
class BackboneConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 4096
    max_len: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")


# Named after the models they stand in for; only depth and width differ
# (d_ff stays 2 * d_model), ordered by capacity.
PRESETS = {
    "desk": BackboneConfig(),
    "distilbert": BackboneConfig(n_layers=2, d_model=256, d_ff=512),
    "distilgpt2": BackboneConfig(n_layers=2, d_model=128, d_ff=256),
    "tinyt5": BackboneConfig(n_layers=1, d_model=64, d_ff=128),
}


def preset(name: str, **overrides) -> BackboneConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown backbone preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(base, **overrides)


def param_shapes(config: BackboneConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in declaration order."""
    d, f = config.d_model, config.d_ff
    shapes = [("tok_emb", (config.vocab_size, d)), ("pos_emb", (config.max_len, d))]
    for i in range(config.n_layers):
        p = f"layers.{i}."
        for proj in ("q", "k", "v", "o"):
            shapes += [(p + f"attn.{proj}.weight", (d, d)), (p + f"attn.{proj}.bias", (d,))]
        shapes += [(p + "ln1.gain", (d,)), (p + "ln1.bias", (d,))]
        shapes += [(p + "ff.fc1.weight", (f, d)), (p + "ff.fc1.bias", (f,))]
        shapes += [(p + "ff.fc2.weight", (d, f)), (p + "ff.fc2.bias", (d,))]
        shapes += [(p + "ln2.gain", (d,)), (p + "ln2.bias", (d,))]
    return shapes


class Backbone:
    """Named parameters of the shared encoder, in declaration order."""

    def __init__(self, config: BackboneConfig, params: dict[str, Parameter]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: BackboneConfig, dtype=np.float32) -> "Backbone":
        rng = np.random.default_rng(config.seed)
        params = {}
        for name, shape in param_shapes(config):
            if name.endswith(".gain"):
                value = np.ones(shape)
            elif name.endswith(".bias"):
                value = np.zeros(shape)
            else:
                value = rng.normal(0.0, INIT_STD, size=shape)
            params[name] = Parameter(value.astype(dtype))
        return cls(config, params)

    @property
    def frozen(self) -> bool:
        return not any(p.trainable for p in self.params.values())

    def freeze(self):
        for p in self.params.values():
            p.trainable = False
        return self

    def unfreeze(self):
        for p in self.params.values():
            p.trainable = True
        return self

    def copy(self) -> "Backbone":
        return Backbone(self.config, {k: p.astype(p.value.dtype) for k, p in self.params.items()})

    def astype(self, dtype) -> "Backbone":
        return Backbone(self.config, {k: p.astype(dtype) for k, p in self.params.items()})

    def count_params(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def to_bytes(self) -> bytes:
        c = self.config
        body = bytearray(CHECKPOINT_MAGIC)
        body += struct.pack("<H", CHECKPOINT_VERSION)
        body += _CONFIG_BLOCK.pack(
            c.n_layers, c.d_model, c.n_heads, c.d_ff, c.vocab_size, c.max_len, c.seed
        )
        for name, _ in param_shapes(c):
            body += self.params[name].value.astype("<f4").tobytes()
        return bytes(body) + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Backbone":
        head = 6 + _CONFIG_BLOCK.size
        if len(data) < head + 4 or data[:4] != CHECKPOINT_MAGIC:
            raise FormatError("not a backbone checkpoint (bad magic or truncated)")
        (version,) = struct.unpack_from("<H", data, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (crc,) = struct.unpack_from("<I", data, len(data) - 4)
        if zlib.crc32(data[:-4]) != crc:
            raise FormatError("checkpoint CRC mismatch")
        fields = _CONFIG_BLOCK.unpack_from(data, 6)
        config = BackboneConfig(*fields)
        offset = head
        params = {}
        for name, shape in param_shapes(config):
            n = int(np.prod(shape))
            end = offset + 4 * n
            if end > len(data) - 4:
                raise FormatError("checkpoint truncated")
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).astype(np.float32)
            params[name] = Parameter(arr.reshape(shape))
            offset = end
        if offset != len(data) - 4:
            raise FormatError("trailing bytes in checkpoint")
        return cls(config, params)

    def fingerprint(self) -> int:
        """CRC32 of the checkpoint body (the value stored in its trailer)."""
        data = self.to_bytes()
        return struct.unpack("<I", data[-4:])[0]

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Backbone":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def init_backbone(config: BackboneConfig) -> Backbone:
    return Backbone.init(config)


def closed_form_param_count(config: BackboneConfig) -> int:
    d, f, L = config.d_model, config.d_ff, config.n_layers
    per_layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d
    return config.vocab_size * d + config.max_len * d + L * per_layer


@dataclass
class ClassificationHead:
    class_ids: tuple[int, ...]
    weight: Parameter
    bias: Parameter
    frozen_rows: tuple[int, ...] = field(default=())

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)

    def parameters(self):
        return [self.weight, self.bias]

    def copy(self) -> "ClassificationHead":
        return ClassificationHead(
            self.class_ids, self.weight.astype(self.weight.value.dtype),
            self.bias.astype(self.bias.value.dtype), self.frozen_rows,
        )

    def astype(self, dtype) -> "ClassificationHead":
        return ClassificationHead(
            self.class_ids, self.weight.astype(dtype), self.bias.astype(dtype), self.frozen_rows
        )


def _check_class_ids(class_ids) -> tuple[int, ...]:
    ids = tuple(int(c) for c in class_ids)
    if not ids:
        raise ConfigError("a head needs at least one class")
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate class ids {list(ids)}")
    if list(ids) != sorted(ids):
        raise ConfigError(f"class ids must be sorted, got {list(ids)}")
    return ids


def attach_head(class_ids, d_model: int, seed: int, dtype=np.float32) -> ClassificationHead:
    ids = _check_class_ids(class_ids)
    rng = np.random.default_rng(seed)
    weight = rng.normal(0.0, INIT_STD, size=(len(ids), d_model)).astype(dtype)
    return ClassificationHead(ids, Parameter(weight), Parameter(np.zeros(len(ids), dtype=dtype)))


def extend_head(previous: ClassificationHead | None, class_ids, d_model: int, seed: int,
                freeze_inherited: bool = False) -> ClassificationHead:
    """A head over ``class_ids`` whose rows for classes ``previous`` covers are copied.

    With ``freeze_inherited`` the copied rows are masked out of optimizer updates.
    """
    head = attach_head(class_ids, d_model, seed, dtype=(
        np.float32 if previous is None else previous.weight.value.dtype))
    if previous is None:
        return head
    old = {c: i for i, c in enumerate(previous.class_ids)}
    inherited = []
    for row, c in enumerate(head.class_ids):
        if c in old:
            head.weight.value[row] = previous.weight.value[old[c]]
            head.bias.value[row] = previous.bias.value[old[c]]
            inherited.append(row)
    if freeze_inherited and inherited:
        mask = np.ones((head.n_classes, 1), dtype=head.weight.value.dtype)
        mask[inherited] = 0
        head.weight.mask = mask
        head.bias.mask = mask[:, 0].copy()
        head.frozen_rows = tuple(inherited)
    return head


class Classifier:
    """Runtime composition of backbone, optional adapter and head.

    Layer objects are rebuilt per instance but share the underlying
    :class:`Parameter` objects, so gradients land in the backbone/adapter/head.
    ``adapter`` is anything exposing ``entries`` (``{(layer, target): (A, B)}``)
    and ``scaling``.
    """

    def __init__(self, backbone: Backbone, head: ClassificationHead, adapter=None):
        cfg = backbone.config
        P = backbone.params
        if head.weight.shape[1] != cfg.d_model:
            raise DimensionError(f"head width {head.weight.shape} does not match d={cfg.d_model}")
        self.config = cfg
        self.tok = Embedding(P["tok_emb"])
        self.pos = Embedding(P["pos_emb"])
        entries = {} if adapter is None else adapter.entries
        for (layer, target) in entries:
            if not 0 <= layer < cfg.n_layers or target not in ("q", "v"):
                raise AdapterError(f"adapter targets unknown projection ({layer}, {target})")
        self.blocks = []
        for i in range(cfg.n_layers):
            def lin(name):
                return Linear(P[f"layers.{i}.{name}.weight"], P[f"layers.{i}.{name}.bias"])

            projs = {}
            for t in ("q", "k", "v", "o"):
                proj = lin(f"attn.{t}")
                if (i, t) in entries:
                    a, b = entries[(i, t)]
                    try:
                        proj = LoraLinear(proj, a, b, adapter.scaling)
                    except DimensionError as exc:
                        raise AdapterError(str(exc)) from exc
                projs[t] = proj
            attn = MultiHeadAttention(projs["q"], projs["k"], projs["v"], projs["o"], cfg.n_heads)
            ln1 = LayerNorm(P[f"layers.{i}.ln1.gain"], P[f"layers.{i}.ln1.bias"])
            ff = FeedForward(lin("ff.fc1"), lin("ff.fc2"))
            ln2 = LayerNorm(P[f"layers.{i}.ln2.gain"], P[f"layers.{i}.ln2.bias"])
            self.blocks.append((attn, ln1, ff, ln2))
        self.pool = ClsPool()
        self.head_layer = Linear(head.weight, head.bias)
        self.head = head
        self.adapter = adapter
        self._seq = None

    def encode(self, ids) -> np.ndarray:
        """Final-layer token states (batch, seq, d)."""
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        bsz, n = ids.shape
        if n < 1 or n > self.config.max_len:
            raise InputError(f"sequence length {n} outside [1, {self.config.max_len}]")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise InputError(f"token id outside [0, {self.config.vocab_size})")
        mask = ids != PAD_ID
        mask[:, 0] = True
        x = self.tok.forward(ids) + self.pos.forward(np.arange(n))[None]
        for attn, ln1, ff, ln2 in self.blocks:
            x = ln1.forward(x + attn.forward(x, mask))
            x = ln2.forward(x + ff.forward(x))
        self._seq = n
        return x

    def backward_encoder(self, d):
        if self._seq is None:
            raise StateError("Classifier.backward called without a forward pass")
        for attn, ln1, ff, ln2 in reversed(self.blocks):
            d = ln2.backward(d)
            d = d + ff.backward(d)
            d = ln1.backward(d)
            d = d + attn.backward(d)
        self.tok.backward(d)
        self.pos.backward(d.sum(axis=0))

    def forward(self, ids) -> np.ndarray:
        return self.head_layer.forward(self.pool.forward(self.encode(ids)))

    def backward(self, dlogits):
        if self._seq is None:
            raise StateError("Classifier.backward called without a forward pass")
        self.backward_encoder(self.pool.backward(self.head_layer.backward(dlogits)))

    def attention_weights(self):
        return [blk[0].last_weights for blk in self.blocks]


def forward(backbone: Backbone, adapter, head: ClassificationHead, token_ids) -> np.ndarray:
    return Classifier(backbone, head, adapter).forward(token_ids)


def count_params(obj) -> int:
    """Exact parameter count of a backbone, an adapter (LoRA factors only) or ``None``."""
    if obj is None:
        return 0
    if isinstance(obj, Backbone):
        return obj.count_params()
    if isinstance(obj, (list, tuple)):
        return sum(count_params(o) for o in obj)
    return sum(a.value.size + b.value.size for a, b in obj.entries.values())
