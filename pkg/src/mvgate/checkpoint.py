"""Named-tensor checkpoint container.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"MVGATE\\x00\\x01"
    8       4     uint32 format version (currently 1)
    12      4     uint32 header length H in bytes
    16      H     UTF-8 JSON header, keys sorted:
                    {"format_version": 1,
                     "tensors": [{"name", "dtype": "float32", "shape", "offset", "nbytes"}, ...],
                     "config_text": "<JSON text: model config, featurization, vocab, threshold>"}
    16+H    ...   payloads, row-major float32 ("<f4"), concatenated in directory
                  order; "offset" is relative to the start of the payload area

Tensors are always stored as float32; float64 parameters are narrowed on save.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from .model import ModelConfig, ParamStore

MAGIC = b"MVGATE\x00\x01"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict                      # name -> float32 ndarray
    model_config: ModelConfig
    meta: dict = field(default_factory=dict)   # featurization config, vocab, threshold, ...

    def param_store(self, requires_grad: bool = False) -> ParamStore:
        return ParamStore.from_arrays(self.params, requires_grad=requires_grad)

    def config_text(self) -> str:
        return json.dumps({"model_config": self.model_config.to_dict(), "meta": self.meta},
                          sort_keys=True, indent=1)


def dumps(ckpt: Checkpoint) -> bytes:
    directory, payloads, offset = [], [], 0
    for name, arr in ckpt.params.items():
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "dtype": "float32", "shape": list(np.shape(arr)),
                          "offset": offset, "nbytes": len(buf)})
        payloads.append(buf)
        offset += len(buf)
    header = json.dumps({"format_version": FORMAT_VERSION, "tensors": directory,
                         "config_text": ckpt.config_text()}, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + b"".join(payloads)


def loads(raw: bytes) -> Checkpoint:
    if raw[:8] != MAGIC:
        raise CheckpointError("not an mvgate checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    params = {}
    for entry in header["tensors"]:
        if entry["dtype"] != "float32":
            raise CheckpointError(f"unsupported dtype {entry['dtype']} for {entry['name']}")
        start = base + entry["offset"]
        chunk = raw[start:start + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise CheckpointError(f"truncated payload for {entry['name']}")
        params[entry["name"]] = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(entry["shape"])
    cfg = json.loads(header["config_text"])
    return Checkpoint(params, ModelConfig.from_dict(cfg["model_config"]), cfg["meta"])


def save(ckpt: Checkpoint, fh: BinaryIO | str) -> None:
    data = dumps(ckpt)
    if isinstance(fh, (str, bytes)) or hasattr(fh, "__fspath__"):
        with open(fh, "wb") as out:
            out.write(data)
    else:
        fh.write(data)


def load(fh: BinaryIO | str) -> Checkpoint:
    if isinstance(fh, (str, bytes)) or hasattr(fh, "__fspath__"):
        with open(fh, "rb") as src:
            return loads(src.read())
    return loads(fh.read())
