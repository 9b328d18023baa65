"""Binary checkpoint container.

Layout::

    b"CVETCKPT"  | u32 format version | u64 header length | header (UTF-8 JSON)
    | float64 little-endian blobs, one section after another
    | 32-byte SHA-256 of everything before it

The header names each section (student, teacher, adam_m, adam_v) and the
parameter order inside it; every section stores the parameters in the
model's declared order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cvet.model import ModelConfig, ModelState, param_shapes
from cvet.optimizer import AdamState
from cvet.text_pipeline import Vocabulary

MAGIC = b"CVETCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def config_digest(*configs: dict) -> str:
    blob = json.dumps(list(configs), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class Checkpoint:
    model: ModelState
    vocab: Vocabulary
    teacher: ModelState | None = None
    optimizer: AdamState | None = None
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        names = list(param_shapes(self.model.config))
        sections = {"student": self.model.params}
        if self.teacher is not None:
            sections["teacher"] = self.teacher.params
        if self.optimizer is not None:
            sections["adam_m"] = self.optimizer.m
            sections["adam_v"] = self.optimizer.v
        header = {
            "format_version": FORMAT_VERSION,
            "model_config": self.model.config.to_dict(),
            "vocab": {"tokens": list(self.vocab.tokens), "min_frequency": self.vocab.min_frequency,
                      "digest": self.vocab.digest()},
            "params": [[n, list(self.model.params[n].shape)] for n in names],
            "sections": list(sections),
            "adam_t": None if self.optimizer is None else self.optimizer.t,
            "meta": self.meta,
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        body = b"".join(
            np.ascontiguousarray(sections[s][n], dtype="<f8").tobytes() for s in sections for n in names
        )
        payload = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(head)) + head + body
        return payload + hashlib.sha256(payload).digest()

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < len(MAGIC) + 12 + 32 or not data.startswith(MAGIC):
            raise CheckpointError("not a checkpoint file")
        payload, digest = data[:-32], data[-32:]
        if hashlib.sha256(payload).digest() != digest:
            raise CheckpointError("checkpoint checksum mismatch")
        version, head_len = struct.unpack_from("<IQ", payload, len(MAGIC))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        start = len(MAGIC) + 12
        header = json.loads(payload[start:start + head_len].decode("utf-8"))
        config = ModelConfig(**header["model_config"])
        vocab = Vocabulary(tuple(header["vocab"]["tokens"]), header["vocab"]["min_frequency"])
        if vocab.digest() != header["vocab"]["digest"]:
            raise CheckpointError("vocabulary digest mismatch")
        shapes = param_shapes(config)
        if [[n, list(s)] for n, s in shapes.items()] != header["params"]:
            raise CheckpointError("parameter layout does not match the model config")
        offset = start + head_len
        sections = {}
        for section in header["sections"]:
            arrays = {}
            for name, shape in shapes.items():
                count = int(np.prod(shape))
                arrays[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
                offset += 8 * count
            sections[section] = arrays
        if offset != len(payload):
            raise CheckpointError("trailing bytes after parameter blobs")
        model = ModelState(config, sections["student"])
        teacher = ModelState(config, sections["teacher"]) if "teacher" in sections else None
        optimizer = None
        if "adam_m" in sections:
            optimizer = AdamState(sections["adam_m"], sections["adam_v"], header["adam_t"])
        return cls(model, vocab, teacher, optimizer, header["meta"])

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise CheckpointError(str(exc)) from exc
        return cls.from_bytes(data)
