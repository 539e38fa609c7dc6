"""
Checkpoint files ("MSPC").

    0   4s   magic "MSPC"
    4   u32  format version
    8   u64  metadata length L
    16  L    UTF-8 JSON metadata (sorted keys)
    ... raw little-endian float64 arrays, in metadata order

Nothing time-dependent is stored, so equal models give byte-identical files.
"""

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, ClassVar, Dict, Union

import numpy as np

from models import EncoderConfig, MemoryConfig
from network import MemSPMNetwork
from numerics import RealMatrix
from run_artifacts import atomic_write_bytes

logger = logging.getLogger(__name__)


class CheckpointFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte {offset})")


@dataclass
class Checkpoint:
    params: Dict[str, RealMatrix]
    memory: MemoryConfig
    encoder: EncoderConfig
    n_classes: int
    hidden_width: int
    iteration: int = 0
    seed: int = 0

    MAGIC: ClassVar[bytes] = b"MSPC"
    VERSION: ClassVar[int] = 1
    PREFIX: ClassVar[struct.Struct] = struct.Struct("<4sIQ")

    @classmethod
    def from_network(cls, net: MemSPMNetwork, iteration: int = 0) -> "Checkpoint":
        return cls(
            params=net.store.snapshot(),
            memory=net.memory_cfg,
            encoder=net.encoder,
            n_classes=net.n_classes,
            hidden_width=net.hidden_width,
            iteration=iteration,
            seed=net.seed,
        )

    def to_network(self) -> MemSPMNetwork:
        net = MemSPMNetwork(
            self.memory, self.encoder, self.n_classes, self.hidden_width, seed=self.seed
        )
        missing = set(net.store.names()) ^ set(self.params)
        if missing:
            raise CheckpointFormatError(f"parameter set mismatch: {sorted(missing)}", 0)
        net.store.load(self.params)
        return net

    def metadata(self) -> Dict[str, Any]:
        return {
            "version": self.VERSION,
            "iteration": self.iteration,
            "seed": self.seed,
            "n_classes": self.n_classes,
            "hidden_width": self.hidden_width,
            "memory": self.memory.model_dump(mode="json"),
            "encoder": self.encoder.model_dump(mode="json"),
            "arrays": [
                {"name": name, "shape": list(value.shape), "dtype": "<f8"}
                for name, value in self.params.items()
            ],
        }

    def to_bytes(self) -> bytes:
        meta = json.dumps(self.metadata(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts = [self.PREFIX.pack(self.MAGIC, self.VERSION, len(meta)), meta]
        parts.extend(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in self.params.values())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < cls.PREFIX.size:
            raise CheckpointFormatError("file too short for a checkpoint header", len(data))
        magic, version, meta_len = cls.PREFIX.unpack_from(data, 0)
        if magic != cls.MAGIC:
            raise CheckpointFormatError(f"bad magic {magic!r}", 0)
        if version != cls.VERSION:
            raise CheckpointFormatError(f"unsupported version {version}", 4)
        offset = cls.PREFIX.size
        if offset + meta_len > len(data):
            raise CheckpointFormatError("truncated metadata", len(data))
        try:
            meta = json.loads(data[offset : offset + meta_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointFormatError(f"unreadable metadata: {e}", offset)
        offset += meta_len

        params: Dict[str, RealMatrix] = {}
        for entry in meta["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            end = offset + 8 * count
            if end > len(data):
                raise CheckpointFormatError(f"truncated array '{entry['name']}'", len(data))
            params[entry["name"]] = (
                np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
            )
            offset = end
        if offset != len(data):
            raise CheckpointFormatError(f"{len(data) - offset} unexpected trailing bytes", offset)

        return cls(
            params=params,
            memory=MemoryConfig.model_validate(meta["memory"]),
            encoder=EncoderConfig.model_validate(meta["encoder"]),
            n_classes=meta["n_classes"],
            hidden_width=meta["hidden_width"],
            iteration=meta["iteration"],
            seed=meta.get("seed", 0),
        )


def save_checkpoint(net: MemSPMNetwork, path: Union[str, Path], iteration: int = 0) -> Path:
    path = atomic_write_bytes(path, Checkpoint.from_network(net, iteration).to_bytes())
    logger.info(f"✅ Checkpoint saved to {path} (iteration {iteration})")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    with open(path, "rb") as f:
        return Checkpoint.from_bytes(f.read())
