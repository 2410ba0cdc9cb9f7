"""
Checkpoint and Run Manifest Persistence

Checkpoint layout (all integers little-endian):

    b"CNVN" | u32 format version | u32 header length | JSON header | payload

The header holds the model config and a manifest of named tensors (name,
shape, dtype, byte offset and length inside the payload). The payload is the
concatenated little-endian tensor data in manifest order.
"""

import hashlib
import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from src.convnova_model import ModelConfig, ModelParams
from src.errors import CheckpointError, ConvNovaError
from src.tensor_engine import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"CNVN"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sII")

PathLike = Union[str, Path]


def _atomic_write(path: PathLike, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as handle:
        handle.write(data)
    os.replace(tmp, path)


def save_checkpoint(params: ModelParams, config: ModelConfig, path: PathLike) -> None:
    """
    Write parameters and their config.

    Args:
        params: Parameters to store
        config: Architecture the parameters belong to
        path: Destination file (replaced atomically)
    """
    entries: List[Dict[str, Any]] = []
    chunks: List[bytes] = []
    offset = 0
    for name, tensor in params.named_tensors().items():
        array = np.ascontiguousarray(tensor.data, dtype=tensor.data.dtype.newbyteorder("<"))
        raw = array.tobytes()
        entries.append({"name": name, "shape": list(array.shape), "dtype": array.dtype.str,
                        "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)

    header = json.dumps(
        {"config": config.to_dict(), "tensors": entries, "payload_length": offset},
        sort_keys=True,
    ).encode("utf-8")
    _atomic_write(path, _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(chunks))
    logger.info("Saved checkpoint with %d tensors (%d payload bytes) to %s", len(entries), offset, path)


def _check_manifest(entries: List[Dict[str, Any]], payload_length: int) -> None:
    expected = 0
    for entry in sorted(entries, key=lambda e: e["offset"]):
        if entry["offset"] != expected:
            raise CheckpointError(f"tensor manifest is not contiguous at {entry['name']!r}")
        size = math.prod(entry["shape"]) * np.dtype(entry["dtype"]).itemsize
        if entry["length"] != size:
            raise CheckpointError(f"tensor {entry['name']!r} declares {entry['length']} bytes, shape needs {size}")
        expected += entry["length"]
    if expected != payload_length:
        raise CheckpointError("tensor manifest does not cover the payload")


def load_checkpoint(path: PathLike) -> Tuple[ModelParams, ModelConfig]:
    """
    Read a checkpoint written by ``save_checkpoint``.

    Args:
        path: Checkpoint file

    Returns:
        (params, config), bit-identical to what was saved
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"not a checkpoint: {path}")
    _, version, header_length = _PREFIX.unpack_from(data)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported version {version} (expected {FORMAT_VERSION})")
    header_end = _PREFIX.size + header_length
    if len(data) < header_end:
        raise CheckpointError("truncated header")
    try:
        header = json.loads(data[_PREFIX.size:header_end].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"corrupt header: {exc}")

    payload = data[header_end:]
    if len(payload) != header["payload_length"]:
        raise CheckpointError(
            f"payload length mismatch: header declares {header['payload_length']} bytes, file has {len(payload)}"
        )
    _check_manifest(header["tensors"], header["payload_length"])

    named: Dict[str, Tensor] = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        array = np.frombuffer(payload, dtype=dtype, count=math.prod(entry["shape"]), offset=entry["offset"])
        named[entry["name"]] = Tensor._wrap(array.reshape(entry["shape"]).astype(dtype.newbyteorder("=")))

    try:
        config = ModelConfig.from_dict(header["config"])
        params = ModelParams.from_named(config, named)
    except ConvNovaError as exc:
        raise CheckpointError(f"checkpoint does not match its config: {exc}")
    logger.info("Loaded checkpoint with %d tensors from %s", len(named), path)
    return params, config


def content_hash(path: PathLike) -> str:
    """Git-style blob hash: sha1 of b'blob <size>\\0' followed by the file bytes."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """What ran, with which resolved config, seed and input files."""

    command: str
    argv: List[str]
    config: Dict[str, Any]
    seed: int
    started_at: str = field(default_factory=_now)
    finished_at: Optional[str] = None
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)

    def add_input(self, path: PathLike) -> None:
        self.inputs[str(path)] = content_hash(path)

    def add_output(self, path: PathLike) -> None:
        self.outputs[str(path)] = content_hash(path)

    def finish(self) -> None:
        self.finished_at = _now()

    def save(self, path: PathLike) -> None:
        _atomic_write(path, (json.dumps(asdict(self), indent=2, sort_keys=True) + "\n").encode("utf-8"))

    @classmethod
    def load(cls, path: PathLike) -> "RunManifest":
        if not os.path.exists(path):
            raise FileNotFoundError(f"Run manifest not found: {path}")
        try:
            values = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls(**values)
        except (ValueError, TypeError) as exc:
            raise CheckpointError(f"invalid run manifest {path}: {exc}")

    def changed_inputs(self) -> List[str]:
        """Inputs whose current content differs from the recorded hash."""
        return [p for p, digest in self.inputs.items() if not os.path.exists(p) or content_hash(p) != digest]
