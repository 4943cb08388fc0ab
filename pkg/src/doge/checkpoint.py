"""Binary checkpoint files.

Layout, all little-endian::

    b"DOGE"                       magic
    u32                           format version
    u32 x 7                       n_layers, n_heads, d_model, d_hidden,
                                  context_length, vocab_size, seed
    u64                           step counter
    record*                       until end of file

    record := u32 name length, name bytes (utf-8), u64 element count,
              element count x f64

Parameter records come first, in group enumeration order. Optimizer state
follows in the same record scheme under names prefixed ``optim/``; the
optimizer kind is the record ``optim/<kind>`` holding zero elements.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import Transformer, TransformerConfig

MAGIC = b"DOGE"
VERSION = 1
_CONFIG_FIELDS = ("n_layers", "n_heads", "d_model", "d_hidden", "context_length", "vocab_size", "seed")
_HEADER = struct.Struct("<4sI7IQ")


def _record(name: str, values: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    flat = np.ascontiguousarray(values, dtype="<f8").reshape(-1)
    return struct.pack("<I", len(raw)) + raw + struct.pack("<Q", flat.size) + flat.tobytes()


def save(model: Transformer, path: str | Path) -> None:
    c = model.config
    parts = [_HEADER.pack(MAGIC, VERSION, *(getattr(c, f) for f in _CONFIG_FIELDS), model.step)]
    for g in model.groups:
        for p in g.params:
            parts.append(_record(g.name, p.data))
    state = model.optimizer.state()
    if state:
        parts.append(_record(f"optim/{model.optimizer.name}", np.zeros(0)))
        for key, arr in state.items():
            parts.append(_record(f"optim/{key}", arr))
    Path(path).write_bytes(b"".join(parts))


def read_records(path: str | Path) -> tuple[dict, int, list[tuple[str, np.ndarray]]]:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise DataError(f"{path}: truncated checkpoint header")
    magic, version, *fields, step = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    config = dict(zip(_CONFIG_FIELDS, fields))
    records = []
    pos = _HEADER.size
    while pos < len(blob):
        try:
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (count,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
        except struct.error:
            raise DataError(f"{path}: truncated record at byte {pos}") from None
        end = pos + 8 * count
        if end > len(blob):
            raise DataError(f"{path}: record {name!r} runs past end of file")
        records.append((name, np.frombuffer(blob[pos:end], dtype="<f8").astype(np.float64)))
        pos = end
    return config, step, records


def load(path: str | Path, clip_norm: float | None = 1.0) -> Transformer:
    config_fields, step, records = read_records(path)
    params = [(n, v) for n, v in records if not n.startswith("optim/")]
    optim = {n[len("optim/"):]: v for n, v in records if n.startswith("optim/")}
    kind = next((k for k, v in optim.items() if v.size == 0), "sgd")
    model = Transformer(TransformerConfig(**config_fields), optimizer=kind, clip_norm=clip_norm)
    if len(params) != len(model.groups):
        raise DataError(f"{path}: expected {len(model.groups)} parameter records, found {len(params)}")
    for g, (name, values) in zip(model.groups, params):
        p = g.params[0]
        if name != g.name or values.size != p.size:
            raise DataError(f"{path}: record {name!r} does not match group {g.name!r}")
        p.data = values.reshape(p.shape).copy()
    state = {k: v for k, v in optim.items() if v.size}
    model.optimizer.load_state(state, model.params)
    model.step = step
    return model
