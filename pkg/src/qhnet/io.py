"""File formats: checkpoints, 8-bit PNG images, JSON manifests and logs.

Checkpoint layout (all integers little-endian)::

    b"QHN1" | u32 version | u32 crc32(payload) | u64 len(payload) | payload

    payload = u32 len(text) | text | u32 n_arrays | arrays...
    text    = "key=value" lines (flat config, UTF-8)
    array   = u16 len(name) | name | u8 ndim | u32 dims[ndim] | f32 data
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
import zlib
from dataclasses import fields
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch
from PIL import Image
from torch import nn

from .attack import ToyRestorer
from .network import QHNet, QHNetConfig

__all__ = [
    "MAGIC",
    "VERSION",
    "CheckpointError",
    "Checkpoint",
    "atomic_write",
    "encode_checkpoint",
    "decode_checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "save_model",
    "load_model",
    "write_png",
    "read_png",
    "quantize",
    "list_pngs",
    "write_json",
    "read_json",
    "append_jsonl",
    "read_jsonl",
]

MAGIC = b"QHN1"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")


class CheckpointError(ValueError):
    """Unreadable, corrupt or incompatible checkpoint."""


class Checkpoint:
    def __init__(self, config: Mapping[str, str], arrays: Mapping[str, np.ndarray]):
        self.config = dict(config)
        self.arrays = {k: np.asarray(v, dtype="<f4") for k, v in arrays.items()}

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.config == other.config
            and self.arrays.keys() == other.arrays.keys()
            and all(np.array_equal(v, other.arrays[k]) for k, v in self.arrays.items())
        )


def atomic_write(path, data: bytes) -> None:
    """Write ``data`` to a temp file next to ``path``, then rename over it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    text = str(v)
    if "\n" in text or "=" in text:
        raise ValueError(f"config value {text!r} cannot be stored")
    return text


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    text = "".join(f"{k}={_format_value(v)}\n" for k, v in ckpt.config.items()).encode()
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(ckpt.arrays)))
    for name, arr in ckpt.arrays.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = buf.getvalue()
    return _HEADER.pack(MAGIC, VERSION, zlib.crc32(payload), len(payload)) + payload


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < _HEADER.size:
        raise CheckpointError("checkpoint truncated")
    magic, version, crc, size = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, not a QHN1 checkpoint")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} not supported (expected {VERSION})")
    payload = blob[_HEADER.size :]
    if len(payload) != size:
        raise CheckpointError("checkpoint truncated")
    if zlib.crc32(payload) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(payload):
            raise CheckpointError("checkpoint payload malformed")
        out = payload[pos : pos + n]
        pos += n
        return out

    (n_text,) = struct.unpack("<I", take(4))
    config = {}
    for line in take(n_text).decode().splitlines():
        key, _, value = line.partition("=")
        config[key] = value
    (n_arrays,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(n_arrays):
        (n_name,) = struct.unpack("<H", take(2))
        name = take(n_name).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).copy()
    if pos != len(payload):
        raise CheckpointError("trailing bytes in checkpoint payload")
    return Checkpoint(config, arrays)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write(path, encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(blob)


def _parse_config(cls, raw: Mapping[str, str]):
    kwargs = {}
    for f in fields(cls):
        if f.name not in raw:
            continue
        text = raw[f.name]
        kind = f.type if isinstance(f.type, str) else f.type.__name__
        if kind == "bool":
            if text not in ("true", "false"):
                raise CheckpointError(f"bad boolean {f.name}={text}")
            kwargs[f.name] = text == "true"
        elif kind == "int":
            kwargs[f.name] = int(text)
        elif kind == "float":
            kwargs[f.name] = float(text)
        else:
            kwargs[f.name] = text
    return cls(**kwargs)


def save_model(path, model: nn.Module, extra: Mapping[str, object] | None = None) -> None:
    """Checkpoint a ``QHNet`` or ``ToyRestorer`` with its constructor settings."""
    if isinstance(model, QHNet):
        config = {"kind": "qhnet", **model.config.to_dict()}
    elif isinstance(model, ToyRestorer):
        config = {"kind": "toy_restorer", "width": model.width}
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    for k, v in (extra or {}).items():
        config[f"meta.{k}"] = v
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    save_checkpoint(path, Checkpoint({k: _format_value(v) for k, v in config.items()}, arrays))


def load_model(path) -> nn.Module:
    ckpt = load_checkpoint(path)
    kind = ckpt.config.get("kind")
    if kind == "qhnet":
        model: nn.Module = QHNet(_parse_config(QHNetConfig, ckpt.config))
    elif kind == "toy_restorer":
        model = ToyRestorer(width=int(ckpt.config["width"]))
    else:
        raise CheckpointError(f"unknown model kind {kind!r}")
    state = model.state_dict()
    if set(state) != set(ckpt.arrays):
        raise CheckpointError("checkpoint parameters do not match the model")
    for name, arr in ckpt.arrays.items():
        if tuple(state[name].shape) != arr.shape:
            raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {tuple(state[name].shape)}")
    model.load_state_dict({k: torch.from_numpy(v) for k, v in ckpt.arrays.items()})
    model.eval()
    return model


def quantize(img: np.ndarray) -> np.ndarray:
    """``[0, 1]`` floats to ``uint8`` with round-half-even (``np.rint``)."""
    return np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    """Write a ``(3, H, W)`` float image in ``[0, 1]`` as 8-bit RGB PNG."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (3, H, W), got {img.shape}")
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(quantize(img).transpose(1, 2, 0)), "RGB").save(buf, format="PNG")
    atomic_write(path, buf.getvalue())


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr.transpose(2, 0, 1) / 255.0


def list_pngs(directory) -> list[str]:
    """Sorted basenames of the PNG files in ``directory``."""
    return sorted(p.name for p in Path(directory).glob("*.png"))


def write_json(path, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def read_json(path):
    return json.loads(Path(path).read_text())


def append_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "a") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
