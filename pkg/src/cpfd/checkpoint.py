"""Binary checkpoint format.

All integers are little-endian. Layout::

    magic        4 bytes   b"CPFD"
    version      u32       FORMAT_VERSION
    step         u32       continual step index (1-based)
    config       6 x u32   vocab_size, max_seq_len, layers, heads, d_model, d_ff
    schema_len   u32       byte length of the schema block
    schema       bytes     UTF-8 JSON {"steps": [[type, ...], ...]}
    n_params     u32
    n_params x:
        name_len u16, name (UTF-8)
        ndim     u8, dims ndim x u32
        data     prod(dims) x float32, row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, TaggerModel
from .schema import LabelSchema

MAGIC = b"CPFD"
FORMAT_VERSION = 1
_CONFIG_FIELDS = ("vocab_size", "max_seq_len", "layers", "heads", "d_model", "d_ff")


class CheckpointError(ValueError):
    pass


def dumps(model: TaggerModel, schema: LabelSchema, step: int) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<II", FORMAT_VERSION, step)
    out += struct.pack("<6I", *(getattr(model.config, f) for f in _CONFIG_FIELDS))
    blob = json.dumps(schema.to_dict(), sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(blob)) + blob
    out += struct.pack("<I", len(model.params))
    for name, t in model.params.items():
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", t.data.ndim)
        out += struct.pack(f"<{t.data.ndim}I", *t.data.shape)
        out += t.data.astype("<f4").tobytes()
    return bytes(out)


def loads(buf: bytes) -> tuple[TaggerModel, LabelSchema, int]:
    view = memoryview(buf)
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    def take_bytes(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = bytes(view[pos:pos + n])
        pos += n
        return chunk

    if take_bytes(4) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version, step = take("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    config = ModelConfig(**dict(zip(_CONFIG_FIELDS, take("<6I"))))
    (schema_len,) = take("<I")
    schema = LabelSchema.from_dict(json.loads(take_bytes(schema_len).decode("utf-8")))
    (n_params,) = take("<I")
    state = {}
    for _ in range(n_params):
        (name_len,) = take("<H")
        name = take_bytes(name_len).decode("utf-8")
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        count = int(np.prod(shape)) if shape else 1
        state[name] = np.frombuffer(take_bytes(4 * count), dtype="<f4").reshape(shape).astype(np.float64)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after checkpoint payload")
    if "cls0.w" not in state:
        raise CheckpointError("checkpoint lacks classifier parameters")
    model = TaggerModel(config, state["cls0.w"].shape[1], np.random.Generator(np.random.PCG64(0)))
    missing = {k for k in model.params if not k.startswith("cls")} - set(state)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {sorted(missing)}")
    model.load_state_dict(state)
    return model, schema, step


def save(path, model: TaggerModel, schema: LabelSchema, step: int) -> None:
    Path(path).write_bytes(dumps(model, schema, step))


def load(path) -> tuple[TaggerModel, LabelSchema, int]:
    return loads(Path(path).read_bytes())
