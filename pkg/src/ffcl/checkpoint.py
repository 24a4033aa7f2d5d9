"""Binary checkpoint format.

Layout::

    b"FFCLCKPT"                magic
    u8                         format version (1)
    u32 little-endian          metadata length in bytes
    metadata                   UTF-8 JSON: model spec, provenance, tensor table
    payload                    little-endian float32 tensors in table order
    u32 little-endian          CRC-32 of the payload

The checkpoint id is a truncated sha256 of the whole file, so identical
parameters and provenance always produce the same id.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointDigestError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    SpecError,
)
from .network import Block, BlockSpec, BlockStack, ClassifierHead, _out_shape
from .tensor import Tensor

MAGIC = b"FFCLCKPT"
VERSION = 1
_HEADER = len(MAGIC) + 1 + 4


@dataclass
class Provenance:
    stage: str
    seed: int | None = None
    parent: str | None = None
    config_digest: str | None = None

    def to_dict(self) -> dict:
        return {"stage": self.stage, "seed": self.seed, "parent": self.parent, "config_digest": self.config_digest}


@dataclass
class Checkpoint:
    model: BlockStack
    provenance: Provenance
    head: ClassifierHead | None = None
    _blob: bytes | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        # snapshot now: the id must not drift if someone keeps training the model
        if self._blob is None:
            self._blob = encode(self.model, self.head, self.provenance)

    def to_bytes(self) -> bytes:
        return self._blob

    @property
    def id(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()[:16]


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode(model: BlockStack, head: ClassifierHead | None, provenance: Provenance) -> bytes:
    named = model.named_parameters()
    if head is not None:
        named += [("head.weight", head.weight), ("head.bias", head.bias)]
    table, chunks, offset = [], [], 0
    for name, t in named:
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    meta = _json({
        "format_version": VERSION,
        "model": model.spec_dict(),
        "provenance": provenance.to_dict(),
        "tensors": table,
    })
    return b"".join([
        MAGIC,
        struct.pack("<B", VERSION),
        struct.pack("<I", len(meta)),
        meta,
        payload,
        struct.pack("<I", zlib.crc32(payload)),
    ])


def decode(blob: bytes) -> Checkpoint:
    if blob[: len(MAGIC)] != MAGIC[: len(blob)]:
        raise CheckpointFormatError("not an FFCL checkpoint (bad magic)")
    if len(blob) < _HEADER:
        raise CheckpointTruncatedError("file ends inside the header")
    version = blob[len(MAGIC)]
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (meta_len,) = struct.unpack_from("<I", blob, len(MAGIC) + 1)
    meta_end = _HEADER + meta_len
    if len(blob) < meta_end:
        raise CheckpointTruncatedError("file ends inside the metadata block")
    try:
        meta = json.loads(blob[_HEADER:meta_end].decode("utf-8"))
        table = meta["tensors"]
        payload_len = sum(entry["nbytes"] for entry in table)
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"malformed checkpoint metadata: {exc}") from exc
    if len(blob) < meta_end + payload_len + 4:
        raise CheckpointTruncatedError(
            f"expected {meta_end + payload_len + 4} bytes, file has {len(blob)}"
        )
    payload = blob[meta_end : meta_end + payload_len]
    (crc,) = struct.unpack_from("<I", blob, meta_end + payload_len)
    if zlib.crc32(payload) != crc:
        raise CheckpointDigestError("payload checksum mismatch")

    tensors = {}
    for entry in table:
        start = entry["offset"]
        arr = np.frombuffer(payload[start : start + entry["nbytes"]], dtype="<f4").astype(np.float32)
        tensors[entry["name"]] = Tensor(arr.reshape(entry["shape"]), requires_grad=True)

    model_meta = meta["model"]
    shape = tuple(model_meta["input_shape"])
    blocks = []
    for i, s in enumerate(model_meta["blocks"]):
        spec = BlockSpec(**s)
        out_shape = _out_shape(spec, shape, i)
        blocks.append(Block(spec, tensors[f"block{i}.weight"], tensors[f"block{i}.bias"], shape, out_shape))
        shape = out_shape
    model = BlockStack(blocks, model_meta["input_shape"], model_meta["embedding"])
    head = None
    if "head.weight" in tensors:
        head = ClassifierHead(tensors["head.weight"], tensors["head.bias"])
    return Checkpoint(model, Provenance(**meta["provenance"]), head, _blob=bytes(blob))


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    """Write ``ckpt`` to ``path`` and return its id."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(ckpt.to_bytes())
    os.replace(tmp, path)
    return ckpt.id


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def check_compatible(ckpt: Checkpoint, specs, input_shape, embedding: str) -> None:
    """Raise SpecError unless the checkpoint's model matches the requested architecture."""
    model = ckpt.model
    if list(model.specs) != list(specs) or model.input_shape != tuple(input_shape) or model.embedding != embedding:
        raise SpecError(
            f"checkpoint model {model.spec_dict()} does not match requested "
            f"blocks={[s.to_dict() for s in specs]} input_shape={list(input_shape)} embedding={embedding}"
        )
