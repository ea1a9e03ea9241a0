"""Binary checkpoint format.

Layout (little-endian)::

    b"UNCD"                    magic
    uint32  version            currently 1
    uint32  n, n bytes         UTF-8 config block, one "key=value" per line
    uint32  count              number of tensor records
    count x record:
        uint32 name_len, name (UTF-8)
        uint32 rank, rank x uint32 dims
        float32 payload, prod(dims) values, row-major

Config keys: the ``UNetConfig`` fields, ``norm.mean`` / ``norm.std``
(comma-separated, omitted when the model has no statistics) and
``history.<series>`` (comma-separated floats). Floats are written with
``repr`` so the round trip is exact.
"""
from __future__ import annotations

import struct
from dataclasses import fields
from pathlib import Path

import numpy as np

from .errors import FormatError
from .synthdata import NormalizationStats
from .unet import UNetConfig, UNetModel, parameter_shapes

MAGIC = b"UNCD"
VERSION = 1
_BUFFER_SUFFIXES = (".running_mean", ".running_var")


def _floats(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def _parse_floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",")] if text else []


def encode_config(model: UNetModel) -> str:
    lines = [f"{f.name}={getattr(model.config, f.name)!r}" for f in fields(UNetConfig)]
    if model.stats is not None:
        lines.append(f"norm.mean={_floats(model.stats.mean)}")
        lines.append(f"norm.std={_floats(model.stats.std)}")
    for key in sorted(model.history):
        lines.append(f"history.{key}={_floats(model.history[key])}")
    return "\n".join(lines) + "\n"


def decode_config(text: str) -> tuple[UNetConfig, NormalizationStats | None, dict[str, list[float]]]:
    kv = {}
    for line in text.splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"malformed config line {line!r}")
        kv[key] = value
    kwargs = {}
    for f in fields(UNetConfig):
        if f.name not in kv:
            raise FormatError(f"config block is missing {f.name!r}")
        kwargs[f.name] = float(kv[f.name]) if f.name == "leaky_slope" else int(kv[f.name])
    stats = None
    if "norm.mean" in kv:
        stats = NormalizationStats(_parse_floats(kv["norm.mean"]), _parse_floats(kv["norm.std"]))
    history = {k[len("history."):]: _parse_floats(v) for k, v in kv.items() if k.startswith("history.")}
    return UNetConfig(**kwargs), stats, history


def save_checkpoint(model: UNetModel, path) -> None:
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    cfg = encode_config(model).encode("utf-8")
    out += struct.pack("<I", len(cfg)) + cfg
    tensors = {**model.params, **model.buffers}
    out += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
        out += arr.tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(out))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated checkpoint (needed {n} bytes at offset {self.pos})")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> UNetModel:
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic bytes)")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{path}: checkpoint format version {version}, this build reads {VERSION}")
    try:
        text = r.take(r.u32()).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: config block is not UTF-8") from exc
    config, stats, history = decode_config(text)
    params, buffers = {}, {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
        (buffers if name.endswith(_BUFFER_SUFFIXES) else params)[name] = arr
    if r.pos != len(data):
        raise FormatError(f"{path}: {len(data) - r.pos} trailing bytes after the last record")
    expected = parameter_shapes(config)
    got = {k: v.shape for k, v in params.items()}
    if got != expected:
        missing = sorted(set(expected) - set(got))
        raise FormatError(f"{path}: parameters do not match the config (missing {missing[:3]}...)")
    return UNetModel(config, params, buffers, stats, history)
