"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic  b"VCKP"
    u32    format version
    u64    header length in bytes
    ...    UTF-8 JSON header: config, tensor index, metadata
    ...    tensor payload: concatenated little-endian float32 arrays

The tensor index maps each name to its shape and byte offset in the payload.
A plain-text ``<file>.manifest.txt`` lists the same index for inspection.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig, train_config_from_dict
from .errors import ConfigError, DataError

MAGIC = b"VCKP"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


@dataclass
class Checkpoint:
    config: TrainConfig
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix/`` with the prefix stripped."""
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def _config_dict(config: TrainConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(config).items()}


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    index = []
    blobs = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        index.append({"name": name, "shape": list(data.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = {
        "format_version": FORMAT_VERSION,
        "config": _config_dict(ckpt.config),
        "tensors": index,
        "meta": ckpt.meta,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)

    lines = [f"format_version {FORMAT_VERSION}", f"step {ckpt.meta.get('step')}", f"epoch {ckpt.meta.get('epoch')}"]
    lines += [f"{e['name']} {'x'.join(map(str, e['shape'])) or 'scalar'} @{e['offset']}" for e in index]
    path.with_name(path.name + ".manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from None
    if len(raw) < _PREFIX.size:
        raise DataError(f"{path}: truncated checkpoint")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(raw[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt header ({exc})") from None
    payload = memoryview(raw)[start + header_len:]
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        off = entry["offset"]
        if off + 4 * count > len(payload):
            raise DataError(f"{path}: tensor {entry['name']} runs past end of file")
        arr = np.frombuffer(payload[off:off + 4 * count], dtype="<f4").reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float32)
    return Checkpoint(train_config_from_dict(header["config"]), tensors, header["meta"])
