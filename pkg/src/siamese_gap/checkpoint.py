"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"SGAP" | version | config_len | config bytes (utf-8 "key=value" lines)
    | tensor_count | per tensor: name_len | name | rank | dims... | f32 payload

The config record carries the model configuration plus ``seed``,
``epoch`` and the optimizer step counter. Optimizer moments, when
present, are stored as ordinary tensors named ``adam.m.<param>`` and
``adam.v.<param>``.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError
from .model import ModelConfig, SiameseGapNetwork, parse_taps

MAGIC = b"SGAP"
VERSION = 1
_U32 = struct.Struct("<I")


@dataclass
class Checkpoint:
    config: ModelConfig
    state: dict[str, np.ndarray]
    seed: int = 0
    epoch: int = 0
    adam_t: int = 0
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION

    def build(self) -> SiameseGapNetwork:
        model = SiameseGapNetwork(self.config)
        model.load_state_arrays(self.state)
        return model


def _config_record(cp: Checkpoint) -> bytes:
    c = cp.config
    fields = {
        "pooling": c.pooling,
        "taps": ",".join(str(t) for t in c.taps),
        "dropout_p": repr(float(c.dropout_p)),
        "num_classes": str(c.num_classes),
        "input_size": str(c.input_size),
        "in_channels": str(c.in_channels),
        "blocks": ";".join(f"{b.layer_count},{b.channels},{b.first_layer_stride}" for b in c.blocks),
        "seed": str(int(cp.seed)),
        "epoch": str(int(cp.epoch)),
        "adam_t": str(int(cp.adam_t)),
    }
    return "\n".join(f"{k}={v}" for k, v in fields.items()).encode("utf-8")


def _parse_config(raw: bytes) -> tuple[ModelConfig, dict[str, str]]:
    from .model import BlockSpec

    try:
        kv = dict(line.split("=", 1) for line in raw.decode("utf-8").splitlines() if line)
        blocks = tuple(
            BlockSpec(*(int(v) for v in item.split(","))) for item in kv["blocks"].split(";")
        )
        config = ModelConfig(
            pooling=kv["pooling"],
            taps=parse_taps(kv["taps"]),
            dropout_p=float(kv["dropout_p"]),
            num_classes=int(kv["num_classes"]),
            input_size=int(kv["input_size"]),
            in_channels=int(kv["in_channels"]),
            blocks=blocks,
        )
    except (KeyError, ValueError, TypeError, UnicodeDecodeError) as exc:
        raise FormatError(f"bad config record: {exc}") from exc
    return config, kv


def to_bytes(cp: Checkpoint) -> bytes:
    tensors = dict(cp.state)
    for name, arr in cp.adam_m.items():
        tensors[f"adam.m.{name}"] = arr
    for name, arr in cp.adam_v.items():
        tensors[f"adam.v.{name}"] = arr
    record = _config_record(cp)
    out = [MAGIC, _U32.pack(cp.version), _U32.pack(len(record)), record, _U32.pack(len(tensors))]
    for name, arr in tensors.items():
        encoded = name.encode("utf-8")
        arr = np.asarray(arr)
        out += [_U32.pack(len(encoded)), encoded, _U32.pack(arr.ndim)]
        out += [_U32.pack(d) for d in arr.shape]
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint at byte {self.pos} (wanted {n} more)")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    config, kv = _parse_config(r.take(r.u32()))
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8", errors="replace")
        dims = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after last tensor")
    m = {k[len("adam.m."):]: v for k, v in tensors.items() if k.startswith("adam.m.")}
    v = {k[len("adam.v."):]: a for k, a in tensors.items() if k.startswith("adam.v.")}
    state = {k: a for k, a in tensors.items() if not k.startswith("adam.")}
    return Checkpoint(
        config, state, int(kv.get("seed", 0)), int(kv.get("epoch", 0)), int(kv.get("adam_t", 0)), m, v, version
    )


def capture(model: SiameseGapNetwork, seed: int = 0, epoch: int = 0, adam=None) -> Checkpoint:
    """Snapshot a model (and optionally an :class:`AdamState`) into memory."""
    cp = Checkpoint(model.config, model.state_arrays(), seed, epoch)
    if adam is not None:
        cp.adam_t = adam.t
        cp.adam_m = {k: a.copy() for k, a in adam.m.items()}
        cp.adam_v = {k: a.copy() for k, a in adam.v.items()}
    return cp


def save(model_or_checkpoint, path, **kwargs) -> Path:
    """Write a model or :class:`Checkpoint` atomically to ``path``."""
    cp = model_or_checkpoint
    if isinstance(cp, SiameseGapNetwork):
        cp = capture(cp, **kwargs)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(cp))
    os.replace(tmp, path)
    return path


def load(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; raise if it conflicts with ``expected_config``."""
    cp = from_bytes(Path(path).read_bytes())
    if expected_config is not None and expected_config != cp.config:
        raise ConfigurationError(
            f"checkpoint was written for {cp.config.pooling}/{cp.config.tap_label}, "
            f"requested {expected_config.pooling}/{expected_config.tap_label}"
        )
    return cp


def load_model(path, expected_config: ModelConfig | None = None) -> SiameseGapNetwork:
    return load(path, expected_config).build()
