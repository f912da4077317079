"""
Versioned binary checkpoints.

Layout (little-endian):
    magic b"GTRN" | u32 version | u32 header length | header JSON
    u32 tensor count, then per tensor:
    u32 name length | name (utf-8) | u32 rank | u64 dims... | f32 payload

The header JSON holds ``model`` (ModelConfig fields) and ``meta`` (seed,
kind, task, labels, ...). Readers reject any other version.
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Any, BinaryIO, Dict, Mapping, Optional, Union

import numpy as np

from clinical_lm.constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from clinical_lm.errors import CheckpointError
from clinical_lm.model.config import ModelConfig
from clinical_lm.tensor import Tensor
from clinical_lm.utils import atomic_open

logger = logging.getLogger(__name__)

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_PAYLOAD_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    config: ModelConfig
    params: Dict[str, Tensor]
    meta: Dict[str, Any] = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def _as_array(value: Union[Tensor, np.ndarray]) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def write_checkpoint(
    f: BinaryIO,
    config: ModelConfig,
    params: Mapping[str, Union[Tensor, np.ndarray]],
    meta: Optional[Mapping[str, Any]] = None,
) -> None:
    header = json.dumps(
        {"model": config.to_dict(), "meta": dict(meta or {})},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    f.write(CHECKPOINT_MAGIC)
    f.write(_U32.pack(CHECKPOINT_VERSION))
    f.write(_U32.pack(len(header)))
    f.write(header)
    f.write(_U32.pack(len(params)))
    for name, value in params.items():
        arr = _as_array(value)
        encoded = name.encode("utf-8")
        f.write(_U32.pack(len(encoded)))
        f.write(encoded)
        f.write(_U32.pack(arr.ndim))
        for dim in arr.shape:
            f.write(_U64.pack(dim))
        f.write(np.ascontiguousarray(arr, dtype=_PAYLOAD_DTYPE).tobytes())


def save_checkpoint(
    path: str,
    config: ModelConfig,
    params: Mapping[str, Union[Tensor, np.ndarray]],
    meta: Optional[Mapping[str, Any]] = None,
) -> None:
    """Write atomically; f64 parameters are stored as f32."""
    with atomic_open(path, "wb") as f:
        write_checkpoint(f, config, params, meta)
    logger.info(f"Saved checkpoint path={path} tensors={len(params)}")


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"checkpoint truncated while reading {what}")
    return data


def read_checkpoint(f: BinaryIO, dtype=None, requires_grad: bool = True) -> Checkpoint:
    magic = _read_exact(f, len(CHECKPOINT_MAGIC), "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"not a checkpoint (magic {magic!r})")
    (version,) = _U32.unpack(_read_exact(f, 4, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version}; "
            f"this reader handles {CHECKPOINT_VERSION}"
        )
    (header_len,) = _U32.unpack(_read_exact(f, 4, "header length"))
    try:
        header = json.loads(_read_exact(f, header_len, "header").decode("utf-8"))
        config = ModelConfig.from_dict(header["model"])
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"bad checkpoint header: {e}") from e
    (count,) = _U32.unpack(_read_exact(f, 4, "tensor count"))
    params: Dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = _U32.unpack(_read_exact(f, 4, "name length"))
        name = _read_exact(f, name_len, "name").decode("utf-8")
        (rank,) = _U32.unpack(_read_exact(f, 4, f"rank of {name}"))
        shape = tuple(
            _U64.unpack(_read_exact(f, 8, f"dims of {name}"))[0] for _ in range(rank)
        )
        size = int(np.prod(shape)) if shape else 1
        payload = _read_exact(f, size * _PAYLOAD_DTYPE.itemsize, f"payload of {name}")
        arr = np.frombuffer(payload, dtype=_PAYLOAD_DTYPE).reshape(shape)
        arr = arr.astype(dtype or np.float32)
        params[name] = Tensor(arr, requires_grad=requires_grad, name=name)
    if f.read(1):
        raise CheckpointError("trailing bytes after last tensor")
    return Checkpoint(config, params, dict(header.get("meta") or {}), version)


def load_checkpoint(path: str, dtype=None, requires_grad: bool = True) -> Checkpoint:
    with open(path, "rb") as f:
        return read_checkpoint(f, dtype=dtype, requires_grad=requires_grad)
