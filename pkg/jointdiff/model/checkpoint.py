# jointdiff/model/checkpoint.py
"""Self-describing checkpoint file ("JDIF").

Layout (little-endian):
    b"JDIF" | u32 version | u32 header length | header (UTF-8 JSON, sorted keys)
    | u32 tensor count | per tensor: u16 name length, name (UTF-8), u32 ndim,
    u32 dims..., float32 values in row-major order.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from jointdiff.diffusion.schedule import DiscreteSchedule, GaussianSchedule, schedule_from_descriptor
from jointdiff.errors import CheckpointError
from jointdiff.nn import autograd as ag
from jointdiff.nn.denoiser import DenoiserConfig, Params

logger = logging.getLogger(__name__)

MAGIC = b"JDIF"
FORMAT_VERSION = 1


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    image_term: float
    age_term: float
    sex_term: float

    def as_dict(self) -> Dict[str, float]:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "image_term": self.image_term,
            "age_term": self.age_term,
            "sex_term": self.sex_term,
        }


@dataclass(eq=False)
class Checkpoint:
    gaussian: GaussianSchedule
    discrete: DiscreteSchedule
    denoiser_config: DenoiserConfig
    params: Dict[str, np.ndarray]
    epoch: int = 0
    val_loss: float = float("nan")
    initial_val_loss: float = float("nan")
    history: List[EpochRecord] = field(default_factory=list)
    seed: Optional[int] = None
    age_range: Tuple[float, float] = (20.0, 90.0)
    image_weight: float = 1.0
    version: int = FORMAT_VERSION

    @classmethod
    def from_params(cls, params: Params, **kwargs) -> "Checkpoint":
        return cls(params={name: np.array(p.value) for name, p in params.items()}, **kwargs)

    def param_nodes(self) -> Params:
        """Trainable leaves in the denoiser's precision."""
        dtype = self.denoiser_config.dtype
        return {name: ag.leaf(value.astype(dtype), name=name) for name, value in self.params.items()}

    def header(self) -> Dict[str, Any]:
        return {
            "schedules": {
                "gaussian": self.gaussian.descriptor(),
                "discrete": self.discrete.descriptor(),
            },
            "denoiser": self.denoiser_config.model_dump(mode="json"),
            "epoch": self.epoch,
            "val_loss": self.val_loss,
            "initial_val_loss": self.initial_val_loss,
            "history": [r.as_dict() for r in self.history],
            "seed": self.seed,
            "age_range": list(self.age_range),
            "image_weight": self.image_weight,
        }

    def to_bytes(self) -> bytes:
        header = json.dumps(self.header(), sort_keys=True).encode("utf-8")
        parts = [MAGIC, struct.pack("<II", self.version, len(header)), header,
                 struct.pack("<I", len(self.params))]
        for name, value in self.params.items():
            encoded = name.encode("utf-8")
            data = np.ascontiguousarray(value, dtype="<f4")
            parts.append(struct.pack("<H", len(encoded)))
            parts.append(encoded)
            parts.append(struct.pack("<I", data.ndim))
            parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
            parts.append(data.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        reader = _Reader(blob)
        if reader.take(4) != MAGIC:
            raise CheckpointError("Not a checkpoint file: bad magic bytes")
        version, header_len = reader.unpack("<II")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"Unsupported checkpoint version {version}; expected {FORMAT_VERSION}")
        try:
            header = json.loads(reader.take(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"Checkpoint header is not valid JSON: {e}") from e

        (count,) = reader.unpack("<I")
        params: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = reader.unpack("<H")
            name = reader.take(name_len).decode("utf-8")
            (ndim,) = reader.unpack("<I")
            shape = reader.unpack(f"<{ndim}I")
            size = int(np.prod(shape)) if ndim else 1
            params[name] = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        if not reader.exhausted:
            raise CheckpointError("Trailing bytes after tensor table")

        try:
            gaussian = schedule_from_descriptor(header["schedules"]["gaussian"])
            discrete = schedule_from_descriptor(header["schedules"]["discrete"])
            config = DenoiserConfig(**header["denoiser"])
            history = [EpochRecord(**r) for r in header.get("history", [])]
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"Checkpoint header is incomplete: {e}") from e

        return cls(
            gaussian=gaussian,
            discrete=discrete,
            denoiser_config=config,
            params=params,
            epoch=int(header.get("epoch", 0)),
            val_loss=float(header.get("val_loss", float("nan"))),
            initial_val_loss=float(header.get("initial_val_loss", float("nan"))),
            history=history,
            seed=header.get("seed"),
            age_range=tuple(header.get("age_range", (20.0, 90.0))),
            image_weight=float(header.get("image_weight", 1.0)),
            version=version,
        )

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        logger.info(f"Saved checkpoint (epoch {self.epoch}, val loss {self.val_loss:.5f}) to {path}")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        path = Path(path)
        checkpoint = cls.from_bytes(path.read_bytes())
        logger.debug(f"Loaded checkpoint from {path}: epoch {checkpoint.epoch}, {len(checkpoint.params)} tensors")
        return checkpoint


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.blob):
            raise CheckpointError("Checkpoint is truncated")
        chunk = self.blob[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def exhausted(self) -> bool:
        return self.offset == len(self.blob)
