"""LoRA adapters: initialisation, the low-rank forward term, merging, parameter
accounting and the bit-exact ``LADP`` file format.

An adapter carries its classification head, so one artifact is everything a
node needs to add a round's classes to its bundle.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import AdapterError, CompatibilityError, ConfigError, FormatError
from .model import Backbone, ClassificationHead, attach_head, count_params
from .nn import Parameter

ADAPTER_MAGIC = b"LADP"
ADAPTER_VERSION = 1
TARGET_TAGS = {"q": 0, "v": 1}
TAG_TARGETS = {v: k for k, v in TARGET_TAGS.items()}


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    targets: tuple[str, ...] = ("q", "v")
    init_std: float = 0.02

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {self.rank}")
        if not self.alpha > 0:
            raise ConfigError(f"LoRA alpha must be > 0, got {self.alpha}")
        bad = [t for t in self.targets if t not in TARGET_TAGS]
        if bad or not self.targets:
            raise ConfigError(f"LoRA targets must be a non-empty subset of q, v; got {self.targets}")
        object.__setattr__(self, "targets", tuple(sorted(set(self.targets), key=TARGET_TAGS.get)))

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


@dataclass
class LoraAdapter:
    round_id: int
    class_ids: tuple[int, ...]
    config: LoraConfig
    entries: dict[tuple[int, str], tuple[Parameter, Parameter]]
    head: ClassificationHead
    fingerprint: int
    source: int = field(default=0, compare=False)

    @property
    def scaling(self) -> float:
        return self.config.scaling

    @property
    def checksum(self) -> int:
        return struct.unpack("<I", serialize(self)[-4:])[0]

    def lora_parameters(self) -> list[Parameter]:
        return [p for ab in self.entries.values() for p in ab]

    def parameters(self) -> list[Parameter]:
        return self.lora_parameters() + self.head.parameters()

    def freeze(self):
        for p in self.parameters():
            p.trainable = False
        return self

    def copy(self) -> "LoraAdapter":
        entries = {k: (a.astype(a.value.dtype), b.astype(b.value.dtype)) for k, (a, b) in self.entries.items()}
        return LoraAdapter(self.round_id, self.class_ids, self.config, entries, self.head.copy(),
                           self.fingerprint, self.source)

    def astype(self, dtype) -> "LoraAdapter":
        entries = {k: (a.astype(dtype), b.astype(dtype)) for k, (a, b) in self.entries.items()}
        return LoraAdapter(self.round_id, self.class_ids, self.config, entries,
                           self.head.astype(dtype), self.fingerprint, self.source)

    def delta_weight(self, layer: int, target: str) -> np.ndarray:
        a, b = self.entries[(layer, target)]
        return self.scaling * (b.value @ a.value)


def init_adapter(config: LoraConfig, backbone: Backbone, round_id: int, class_ids, seed: int,
                 head: ClassificationHead | None = None) -> LoraAdapter:
    """A ~ N(0, init_std^2), B = 0, so the adapter starts as an exact no-op."""
    d = backbone.config.d_model
    if config.rank > d:
        raise ConfigError(f"rank {config.rank} exceeds min(d_in, d_out) = {d}")
    rng = np.random.default_rng(seed)
    dtype = backbone.params["tok_emb"].value.dtype
    entries = {}
    for layer in range(backbone.config.n_layers):
        for target in config.targets:
            a = rng.normal(0.0, config.init_std, size=(config.rank, d)).astype(dtype)
            entries[(layer, target)] = (Parameter(a), Parameter(np.zeros((d, config.rank), dtype=dtype)))
    if head is None:
        head = attach_head(class_ids, d, seed + 1, dtype=dtype)
    if tuple(head.class_ids) != tuple(class_ids):
        raise AdapterError(f"head covers {head.class_ids}, adapter claims {tuple(class_ids)}")
    return LoraAdapter(round_id, tuple(head.class_ids), config, entries, head, backbone.fingerprint())


def lora_delta(x: np.ndarray, w0: np.ndarray, a: np.ndarray, b: np.ndarray, scaling: float) -> np.ndarray:
    """x W0^T + scaling * (x A^T) B^T without forming B A."""
    if a.shape[1] != w0.shape[1] or b.shape[0] != w0.shape[0] or a.shape[0] != b.shape[1]:
        raise AdapterError(f"LoRA factors A{a.shape} B{b.shape} do not fit W0{w0.shape}")
    if x.shape[-1] != w0.shape[1]:
        raise AdapterError(f"input width {x.shape[-1]} does not fit W0{w0.shape}")
    return x @ w0.T + scaling * ((x @ a.T) @ b.T)


def merge(adapter: LoraAdapter, backbone: Backbone) -> Backbone:
    """Backbone copy with W0 + (alpha/r) B A folded into every targeted projection."""
    if backbone.fingerprint() != adapter.fingerprint:
        raise CompatibilityError(
            f"adapter was trained against backbone {adapter.fingerprint:08x}, "
            f"got {backbone.fingerprint():08x}"
        )
    merged = backbone.copy()
    for (layer, target), (a, b) in adapter.entries.items():
        if not np.any(b.value):
            continue
        w = merged.params[f"layers.{layer}.attn.{target}.weight"]
        w.value = (w.value + adapter.scaling * (b.value @ a.value)).astype(w.value.dtype)
    return merged


def footprint_ratio(adapter: LoraAdapter, backbone: Backbone) -> float:
    return count_params(adapter) / count_params(backbone)


# --------------------------------------------------------------------------- #
# LADP format (all fields little-endian)
# --------------------------------------------------------------------------- #
def _f32(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def serialize(adapter: LoraAdapter) -> bytes:
    out = bytearray(ADAPTER_MAGIC)
    out += struct.pack("<HI", ADAPTER_VERSION, adapter.round_id)
    out += struct.pack("<H", len(adapter.class_ids))
    out += struct.pack(f"<{len(adapter.class_ids)}H", *adapter.class_ids)
    out += struct.pack("<Hf", adapter.config.rank, adapter.config.alpha)
    keys = sorted(adapter.entries, key=lambda k: (k[0], TARGET_TAGS[k[1]]))
    out += struct.pack("<H", len(keys))
    for layer, target in keys:
        a, b = adapter.entries[(layer, target)]
        d_out, r = b.shape
        d_in = a.shape[1]
        out += struct.pack("<HBHH", layer, TARGET_TAGS[target], d_in, d_out)
        out += _f32(a.value) + _f32(b.value)
    rows, cols = adapter.head.weight.shape
    out += struct.pack("<HH", rows, cols)
    out += _f32(adapter.head.weight.value) + _f32(adapter.head.bias.value)
    out += struct.pack("<I", adapter.fingerprint)
    return bytes(out) + struct.pack("<I", zlib.crc32(out))


class _Reader:
    def __init__(self, buf, offset):
        self.buf = buf
        self.pos = offset

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise FormatError("adapter truncated")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def floats(self, shape):
        n = int(np.prod(shape))
        if self.pos + 4 * n > len(self.buf):
            raise FormatError("adapter truncated")
        arr = np.frombuffer(self.buf, dtype="<f4", count=n, offset=self.pos)
        self.pos += 4 * n
        return arr.astype(np.float32).reshape(shape)


def read_adapter(buf: bytes, offset: int = 0) -> tuple[LoraAdapter, int]:
    """Parse one adapter starting at ``offset``; returns it and the end offset."""
    rd = _Reader(buf, offset)
    (magic,) = rd.take("<4s")
    if magic != ADAPTER_MAGIC:
        raise FormatError("bad adapter magic")
    version, round_id = rd.take("<HI")
    if version != ADAPTER_VERSION:
        raise FormatError(f"unsupported adapter version {version}")
    (n_cls,) = rd.take("<H")
    class_ids = rd.take(f"<{n_cls}H") if n_cls else ()
    rank, alpha = rd.take("<Hf")
    (n_targets,) = rd.take("<H")
    entries = {}
    targets = set()
    for _ in range(n_targets):
        layer, tag, d_in, d_out = rd.take("<HBHH")
        if tag not in TAG_TARGETS:
            raise FormatError(f"unknown target tag {tag}")
        a = rd.floats((rank, d_in))
        b = rd.floats((d_out, rank))
        entries[(layer, TAG_TARGETS[tag])] = (Parameter(a), Parameter(b))
        targets.add(TAG_TARGETS[tag])
    rows, cols = rd.take("<HH")
    weight = rd.floats((rows, cols))
    bias = rd.floats((rows,))
    (fingerprint,) = rd.take("<I")
    body_end = rd.pos
    (crc,) = rd.take("<I")
    if zlib.crc32(buf[offset:body_end]) != crc:
        raise FormatError("adapter CRC mismatch")
    if rows != n_cls:
        raise FormatError(f"head has {rows} rows for {n_cls} classes")
    try:
        config = LoraConfig(rank=rank, alpha=alpha, targets=tuple(targets) or ("q",))
        head = ClassificationHead(tuple(class_ids), Parameter(weight), Parameter(bias))
    except ConfigError as exc:
        raise FormatError(str(exc)) from exc
    adapter = LoraAdapter(round_id, tuple(class_ids), config, entries, head, fingerprint)
    return adapter, rd.pos


def deserialize(data: bytes) -> LoraAdapter:
    adapter, end = read_adapter(data, 0)
    if end != len(data):
        raise FormatError(f"{len(data) - end} trailing bytes after adapter")
    return adapter


# --------------------------------------------------------------------------- #
# Bundles
# --------------------------------------------------------------------------- #
class AdapterBundle:
    """Adapters ordered by round id, all trained against one backbone.

    Several adapters may share a round id (one per edge node in a global
    round) provided their class sets are disjoint.
    """

    def __init__(self, adapters=(), fingerprint: int | None = None):
        self.adapters: list[LoraAdapter] = []
        self.fingerprint = fingerprint
        for a in adapters:
            self.append(a)

    def __len__(self):
        return len(self.adapters)

    def __iter__(self):
        return iter(self.adapters)

    def append(self, adapter: LoraAdapter):
        if self.fingerprint is None:
            self.fingerprint = adapter.fingerprint
        elif adapter.fingerprint != self.fingerprint:
            raise CompatibilityError(
                f"adapter fingerprint {adapter.fingerprint:08x} != bundle {self.fingerprint:08x}"
            )
        if self.adapters:
            last = self.adapters[-1].round_id
            if adapter.round_id < last:
                raise AdapterError(f"round {adapter.round_id} appended after round {last}")
            for other in self.adapters:
                if other.round_id == adapter.round_id and set(other.class_ids) & set(adapter.class_ids):
                    raise AdapterError(f"two round-{adapter.round_id} adapters share classes")
        self.adapters.append(adapter)

    def known_classes(self) -> tuple[int, ...]:
        return tuple(sorted({c for a in self.adapters for c in a.class_ids}))

    def to_bytes(self) -> bytes:
        return struct.pack("<H", len(self.adapters)) + b"".join(serialize(a) for a in self.adapters)

    @classmethod
    def from_bytes(cls, data: bytes) -> "AdapterBundle":
        if len(data) < 2:
            raise FormatError("bundle truncated")
        (count,) = struct.unpack_from("<H", data, 0)
        pos = 2
        bundle = cls()
        for _ in range(count):
            adapter, pos = read_adapter(data, pos)
            bundle.append(adapter)
        if pos != len(data):
            raise FormatError("trailing bytes after bundle")
        return bundle
