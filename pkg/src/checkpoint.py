"""
Checkpoint persistence for cascade stacks and attribute modules

File layout (all integers little-endian u64):
    magic (8 bytes) | metadata length | metadata (UTF-8 JSON, sorted keys)
    | tensor count | per tensor: name length, name, rank, dims..., float64 data
"""
import json
import logging
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from src.cascade import AlphaSchedule, AttributeModule, CascadeStack, assemble, base_fingerprint
from src.envs import AttributeSpec
from src.errors import CheckpointError, ConfigurationError
from src.nncore import (
    Tensors,
    mlp_from_tensors,
    mlp_to_tensors,
    policy_from_tensors,
    policy_to_tensors,
)

logger = logging.getLogger(__name__)

MAGIC = b"CALNETCK"
FORMAT_VERSION = 1
_U64 = struct.Struct("<Q")

Checkpointable = Union[CascadeStack, AttributeModule]


# ---------------------------------------------------------------------------
# Byte-level codec
# ---------------------------------------------------------------------------

def encode(metadata: Dict[str, Any], tensors: Tensors) -> bytes:
    """Serialize metadata and named tensors (tensors written in name order)"""
    meta_bytes = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, _U64.pack(len(meta_bytes)), meta_bytes, _U64.pack(len(tensors))]
    for name in sorted(tensors):
        array = np.ascontiguousarray(tensors[name], dtype="<f8")
        name_bytes = name.encode("utf-8")
        parts.append(_U64.pack(len(name_bytes)))
        parts.append(name_bytes)
        parts.append(_U64.pack(array.ndim))
        parts.extend(_U64.pack(dim) for dim in array.shape)
        parts.append(array.tobytes())
    return b"".join(parts)


class _Reader:
    """Cursor over a byte buffer that reports the offset of any short read"""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if size < 0 or self.offset + size > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}", offset=self.offset)
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u64(self, what: str) -> int:
        return _U64.unpack(self.take(_U64.size, what))[0]


def decode(data: bytes) -> Tuple[Dict[str, Any], Tensors]:
    """
    Parse checkpoint bytes

    Raises:
        CheckpointError: Bad magic, truncation, malformed metadata or trailing bytes
    """
    reader = _Reader(data)
    if reader.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("not a CALNet checkpoint (bad magic)", offset=0)

    meta_len = reader.u64("metadata length")
    meta_offset = reader.offset
    try:
        metadata = json.loads(reader.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed metadata ({exc})", offset=meta_offset) from exc
    if not isinstance(metadata, dict):
        raise CheckpointError("metadata is not an object", offset=meta_offset)

    tensors: Tensors = {}
    count = reader.u64("tensor count")
    for _ in range(count):
        name_offset = reader.offset
        try:
            name = reader.take(reader.u64("tensor name length"), "tensor name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"tensor name is not valid UTF-8 ({exc})", offset=name_offset) from exc
        if name in tensors:
            raise CheckpointError(f"duplicate tensor '{name}'", offset=name_offset)
        rank = reader.u64(f"rank of '{name}'")
        if rank > 8:
            raise CheckpointError(f"implausible rank {rank} for '{name}'", offset=name_offset)
        shape = tuple(reader.u64(f"shape of '{name}'") for _ in range(rank))
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = reader.take(size * 8, f"data of '{name}'")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)

    if reader.offset != len(data):
        raise CheckpointError("trailing bytes after tensor segment", offset=reader.offset)
    return metadata, tensors


def write_atomic(path: Path, payload: bytes):
    """Write via a temporary file in the target directory, then rename"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


# ---------------------------------------------------------------------------
# Object mapping
# ---------------------------------------------------------------------------

def _bound_to_json(bound: float) -> Optional[float]:
    return None if not np.isfinite(bound) else float(bound)


def _module_metadata(module: AttributeModule) -> Dict[str, Any]:
    return {
        "spec": module.spec.describe(),
        "alpha": module.alpha,
        "penalty_coef": module.penalty_coef,
        "trained": module.trained,
        "base_fingerprint": module.base_fingerprint,
        "schedule": {"start": module.schedule.start, "ramp_fraction": module.schedule.ramp_fraction},
    }


def _spec_from_json(entry: Dict[str, Any]) -> AttributeSpec:
    return AttributeSpec(entry["kind"], entry["name"], entry["params"])


def _module_from_json(entry: Dict[str, Any], tensors: Tensors, prefix: str) -> AttributeModule:
    return AttributeModule(
        spec=_spec_from_json(entry["spec"]),
        head=policy_from_tensors(tensors, prefix),
        alpha=float(entry["alpha"]),
        penalty_coef=float(entry["penalty_coef"]),
        trained=bool(entry["trained"]),
        base_fingerprint=str(entry["base_fingerprint"]),
        schedule=AlphaSchedule(**entry["schedule"]),
    )


def to_payload(obj: Checkpointable) -> Tuple[Dict[str, Any], Tensors]:
    """Metadata and tensors for a stack or a module"""
    if isinstance(obj, AttributeModule):
        metadata = {"format_version": FORMAT_VERSION, "object": "module", "module": _module_metadata(obj)}
        return metadata, policy_to_tensors(obj.head, "module")

    if isinstance(obj, CascadeStack):
        tensors = policy_to_tensors(obj.base, "base")
        if obj.value_net is not None:
            tensors.update(mlp_to_tensors(obj.value_net, "value"))
        for k, module in enumerate(obj.modules):
            tensors.update(policy_to_tensors(module.head, f"modules.{k}"))
        metadata = {
            "format_version": FORMAT_VERSION,
            "object": "stack",
            "base_specs": [spec.describe() for spec in obj.base_specs],
            "base_fingerprint": base_fingerprint(obj.base),
            "action_bound": _bound_to_json(obj.action_bound),
            "has_value_net": obj.value_net is not None,
            "modules": [_module_metadata(module) for module in obj.modules],
        }
        return metadata, tensors

    raise ConfigurationError(f"cannot checkpoint object of type {type(obj).__name__}")


def from_payload(metadata: Dict[str, Any], tensors: Tensors) -> Checkpointable:
    """Rebuild a stack or module; any inconsistency is a CheckpointError"""
    if metadata.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {metadata.get('format_version')!r}")
    try:
        if metadata.get("object") == "module":
            return _module_from_json(metadata["module"], tensors, "module")
        if metadata.get("object") == "stack":
            bound = metadata["action_bound"]
            stack = CascadeStack(
                base=policy_from_tensors(tensors, "base"),
                base_specs=tuple(_spec_from_json(entry) for entry in metadata["base_specs"]),
                modules=tuple(
                    _module_from_json(entry, tensors, f"modules.{k}")
                    for k, entry in enumerate(metadata["modules"])
                ),
                value_net=mlp_from_tensors(tensors, "value") if metadata["has_value_net"] else None,
                action_bound=float("inf") if bound is None else float(bound),
            )
            if base_fingerprint(stack.base) != metadata["base_fingerprint"]:
                raise CheckpointError("base tensors do not match the recorded fingerprint")
            return stack
    except (KeyError, TypeError, ValueError, ConfigurationError) as exc:
        raise CheckpointError(f"inconsistent checkpoint contents ({exc})") from exc
    raise CheckpointError(f"unknown checkpoint object {metadata.get('object')!r}")


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------

def save_checkpoint(obj: Checkpointable, path) -> Path:
    """
    Write a stack or module checkpoint atomically

    Args:
        obj: CascadeStack or AttributeModule
        path: Destination file

    Returns:
        Path: The written file
    """
    path = Path(path)
    metadata, tensors = to_payload(obj)
    write_atomic(path, encode(metadata, tensors))
    logger.info(f"Saved {metadata['object']} checkpoint to {path}")
    return path


def read_checkpoint(path) -> Tuple[Dict[str, Any], Tensors]:
    """
    Raw metadata and tensors of a checkpoint file

    Args:
        path: Checkpoint file

    Returns:
        Tuple[Dict[str, Any], Tensors]: Decoded metadata and named tensors

    Raises:
        CheckpointError: Unreadable or malformed file
    """
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(data)


def load_checkpoint(path, base: Optional[CascadeStack] = None, strict_fingerprint: bool = False) -> Checkpointable:
    """
    Read a stack or module checkpoint

    Args:
        path: Checkpoint file
        base: For module checkpoints, the base the module will be used with
        strict_fingerprint: Raise instead of warn on a base mismatch

    Returns:
        CascadeStack or AttributeModule
    """
    obj = from_payload(*read_checkpoint(path))
    if isinstance(obj, AttributeModule) and base is not None:
        assemble(base, [obj], strict_fingerprint)
    return obj


def load_stack(path) -> CascadeStack:
    """
    Read a checkpoint that must hold a stack

    Raises:
        CheckpointError: The file holds an attribute module
    """
    obj = load_checkpoint(path)
    if not isinstance(obj, CascadeStack):
        raise CheckpointError(f"{path} holds an attribute module, expected a stack")
    return obj


def load_modules(paths: List, base: CascadeStack, strict_fingerprint: bool = False) -> List[AttributeModule]:
    """
    Read module checkpoints to be stacked behind `base`, in order

    Args:
        paths: Module checkpoint files
        base: Stack the modules will extend
        strict_fingerprint: Raise instead of warn when a module was trained on another base

    Returns:
        List[AttributeModule]: Loaded modules

    Raises:
        CheckpointError: A file holds a stack
    """
    modules = []
    for path in paths:
        obj = load_checkpoint(path, base, strict_fingerprint)
        if not isinstance(obj, AttributeModule):
            raise CheckpointError(f"{path} holds a stack, expected an attribute module")
        modules.append(obj)
    return modules
