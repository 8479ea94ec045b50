"""Binary checkpoint format.

Layout::

    b"E3N1" | u32 LE header length | UTF-8 JSON header | payload

The header holds ``format_version``, the full model ``config`` and a
``tensors`` list of ``{name, dtype: "f32", shape, offset, byte_len}``.
Payload offsets are relative to the payload start and 16-byte aligned;
tensors are little-endian float32 in header order.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ConfigError, ModelConfig, check_params

MAGIC = b"E3N1"
FORMAT_VERSION = 1
ALIGN = 16


class CheckpointError(ValueError):
    code = "checkpoint_error"


class BadMagicError(CheckpointError):
    code = "bad_magic"


class BadHeaderError(CheckpointError):
    code = "bad_header"


class TruncatedDataError(CheckpointError):
    code = "truncated_tensor_data"


class ShapeMismatchError(CheckpointError):
    code = "shape_mismatch"


@dataclass
class Checkpoint:
    params: "OrderedDict[str, np.ndarray]"
    config: ModelConfig
    extra: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    train_state: dict | None = None


def _align(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


def save_checkpoint(params, config: ModelConfig, path, extra=None, train_state=None) -> None:
    """Write params (and optional extra tensors such as optimizer moments)."""
    tensors = list(params.items()) + list((extra or {}).items())
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors:
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        offset = _align(offset)
        entries.append({"name": name, "dtype": "f32", "shape": list(np.shape(arr)),
                        "offset": offset, "byte_len": len(data)})
        blobs.append((offset, data))
        offset += len(data)
    header = {"format_version": FORMAT_VERSION, "config": config.to_dict(), "tensors": entries}
    if train_state is not None:
        header["train_state"] = train_state
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = bytearray(offset)
    for off, data in blobs:
        payload[off:off + len(data)] = data
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    tmp.replace(path)


def read_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 8:
        raise BadHeaderError(f"{path}: missing header length")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if 8 + hlen > len(raw):
        raise BadHeaderError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
        version = header["format_version"]
        config = ModelConfig.from_dict(header["config"])
        entries = header["tensors"]
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise BadHeaderError(f"{path}: malformed header ({exc})") from exc
    if version != FORMAT_VERSION:
        raise BadHeaderError(f"{path}: unsupported format_version {version}")
    payload = memoryview(raw)[8 + hlen:]
    tensors = OrderedDict()
    for e in entries:
        if e.get("dtype") != "f32":
            raise BadHeaderError(f"{path}: tensor {e.get('name')} has dtype {e.get('dtype')}")
        shape = tuple(int(d) for d in e["shape"])
        n = int(np.prod(shape)) if shape else 1
        off, blen = int(e["offset"]), int(e["byte_len"])
        if blen != 4 * n:
            raise ShapeMismatchError(f"{path}: {e['name']} byte_len {blen} does not match shape {shape}")
        if off % ALIGN or off + blen > len(payload):
            raise TruncatedDataError(f"truncated tensor data: {e['name']} needs bytes "
                                     f"[{off}, {off + blen}) of a {len(payload)}-byte payload")
        arr = np.frombuffer(payload[off:off + blen], dtype="<f4").reshape(shape)
        tensors[e["name"]] = arr.astype(np.float32)
    params = OrderedDict((k, v) for k, v in tensors.items() if not k.startswith("optim."))
    extra = OrderedDict((k, v) for k, v in tensors.items() if k.startswith("optim."))
    try:
        check_params(params, config)
    except ConfigError as exc:
        raise ShapeMismatchError(f"{path}: {exc}") from exc
    return Checkpoint(params, config, extra, header.get("train_state"))


def load_checkpoint(path):
    """Return ``(params, config)``."""
    ck = read_checkpoint(path)
    return ck.params, ck.config
