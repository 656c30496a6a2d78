"""Binary tensor container.

Layout (all integers little-endian):

    magic       4 bytes   b"VPAC"
    version     u32       1
    header_len  u64       byte length of the header
    header      UTF-8 JSON array of {"name", "dtype", "shape"}
    payload     raw row-major little-endian tensor bytes, in header order

A container may carry one JSON metadata block as a reserved, zero-sized
header entry ``{"name": "__metadata__", "dtype": "i64", "shape": [0],
"metadata": {...}}``. It adds no payload bytes, so readers that only look
at name, dtype and shape skip it as an empty tensor.
"""

import json
import logging
import os
import struct
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"VPAC"
VERSION = 1
DEFAULT_SIZE_CAP = 1 << 30
DTYPES: Dict[str, np.dtype] = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "i64": np.dtype("<i8"),
}
METADATA_ENTRY = "__metadata__"
_PREAMBLE = struct.Struct("<4sIQ")

PathLike = Union[str, Path]


class ContainerError(Exception):
    """Base exception for container reading and writing."""
    pass


class ContainerIOError(ContainerError):
    """Raised when the file cannot be read or written."""
    pass


class ContainerFormatError(ContainerError):
    """Raised for bad magic bytes or a malformed header."""
    pass


class UnsupportedVersionError(ContainerFormatError):
    """Raised for container versions this reader does not know."""
    pass


class ContainerCorruptionError(ContainerError):
    """Raised when the payload is truncated or has trailing bytes."""
    pass


class ContainerContractError(ContainerError):
    """Raised when the tensors handed to the writer break the format contract."""
    pass


def dtype_code(array: np.ndarray) -> str:
    """Container dtype code for an array.

    Integers and booleans widen to i64. uint64 is refused because values
    above 2**63 - 1 would wrap.

    Raises:
        ContainerContractError: For dtypes the format does not carry
    """
    kind, size = array.dtype.kind, array.dtype.itemsize
    if kind == "f" and size == 4:
        return "f32"
    if kind == "f" and size == 8:
        return "f64"
    if kind == "b" or kind == "i" and size <= 8 or kind == "u" and size < 8:
        return "i64"
    raise ContainerContractError(f"unsupported dtype {array.dtype}")


def encode_header(named: List[Tuple[str, np.ndarray]], metadata: Optional[Dict[str, Any]] = None) -> bytes:
    entries: List[Dict[str, Any]] = [
        {"name": name, "dtype": dtype_code(a), "shape": list(a.shape)} for name, a in named
    ]
    if metadata is not None:
        entries.append({"name": METADATA_ENTRY, "dtype": "i64", "shape": [0], "metadata": metadata})
    try:
        return json.dumps(entries, separators=(",", ":")).encode("utf-8")
    except (TypeError, ValueError) as e:
        raise ContainerContractError(f"metadata is not JSON serializable: {e}")


def save_container(path: PathLike, tensors: Union[Dict[str, np.ndarray], List[Tuple[str, np.ndarray]]],
                   metadata: Optional[Dict[str, Any]] = None) -> None:
    """Write named tensors to ``path`` and fsync before returning.

    Args:
        path: Destination file
        tensors: Mapping or ordered (name, array) pairs
        metadata: Optional JSON object stored in the header

    Raises:
        ContainerContractError: For empty, duplicate or reserved names, unsupported dtypes
            or metadata that is not a JSON object
        ContainerIOError: If the file cannot be written
    """
    named = list(tensors.items()) if isinstance(tensors, dict) else list(tensors)
    seen = set()
    for name, _ in named:
        if not name:
            raise ContainerContractError("tensor names must be non-empty")
        if name == METADATA_ENTRY:
            raise ContainerContractError(f"tensor name '{METADATA_ENTRY}' is reserved for metadata")
        if name in seen:
            raise ContainerContractError(f"duplicate tensor name '{name}'")
        seen.add(name)
    if metadata is not None and not isinstance(metadata, dict):
        raise ContainerContractError("metadata must be a JSON object")

    arrays = [(name, np.asarray(a)) for name, a in named]
    header = encode_header(arrays, metadata)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(_PREAMBLE.pack(MAGIC, VERSION, len(header)))
            f.write(header)
            for _, array in arrays:
                target = DTYPES[dtype_code(array)]
                f.write(np.ascontiguousarray(array, dtype=target).tobytes(order="C"))
            f.flush()
            os.fsync(f.fileno())
    except OSError as e:
        raise ContainerIOError(f"cannot write container {path}: {e}")
    logger.debug(f"Wrote {len(arrays)} tensors to {path}")


def read_header(path: PathLike, size_cap: int = DEFAULT_SIZE_CAP) -> List[Dict]:
    """Parse only the header of a container."""
    path = Path(path)
    try:
        with open(path, "rb") as f:
            return _read_header(f, path, size_cap)
    except OSError as e:
        raise ContainerIOError(f"cannot read container {path}: {e}")


def read_metadata(path: PathLike, size_cap: int = DEFAULT_SIZE_CAP) -> Dict[str, Any]:
    """The metadata block of a container, or ``{}`` when it has none."""
    for entry in read_header(path, size_cap):
        if entry["name"] == METADATA_ENTRY:
            return dict(entry["metadata"])
    return {}


def _payload_bytes(entry: Dict, path: Path, size_cap: int) -> int:
    # Python ints do not overflow; every dimension is bounded first
    count = 1
    for dim in entry["shape"]:
        if dim > size_cap:
            raise ContainerFormatError(f"{path}: dimension {dim} of '{entry['name']}' exceeds the {size_cap}-byte cap")
        count *= dim
    return count * DTYPES[entry["dtype"]].itemsize


def _read_header(f, path: Path, size_cap: int) -> List[Dict]:
    preamble = f.read(_PREAMBLE.size)
    if len(preamble) < _PREAMBLE.size:
        raise ContainerFormatError(f"{path}: file too short for a container preamble")
    magic, version, header_len = _PREAMBLE.unpack(preamble)
    if magic != MAGIC:
        raise ContainerFormatError(f"{path}: bad magic bytes {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: container version {version} is not supported (expected {VERSION})")
    if header_len > size_cap:
        raise ContainerFormatError(f"{path}: header length {header_len} exceeds the {size_cap}-byte cap")
    raw = f.read(header_len)
    if len(raw) != header_len:
        raise ContainerCorruptionError(f"{path}: header truncated ({len(raw)} of {header_len} bytes)")
    try:
        entries = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerFormatError(f"{path}: header is not valid JSON: {e}")
    if not isinstance(entries, list):
        raise ContainerFormatError(f"{path}: header must be a JSON array")
    for entry in entries:
        if (not isinstance(entry, dict) or not isinstance(entry.get("name"), str)
                or entry.get("dtype") not in DTYPES or not isinstance(entry.get("shape"), list)):
            raise ContainerFormatError(f"{path}: malformed header entry {entry!r}")
        if any(not isinstance(s, int) or isinstance(s, bool) or s < 0 for s in entry["shape"]):
            raise ContainerFormatError(f"{path}: bad shape for '{entry.get('name')}'")
        if entry["name"] == METADATA_ENTRY and (entry["shape"] != [0] or not isinstance(entry.get("metadata"), dict)):
            raise ContainerFormatError(f"{path}: malformed metadata entry")
    return entries


def load_container(path: PathLike, size_cap: int = DEFAULT_SIZE_CAP) -> Dict[str, np.ndarray]:
    """Read every tensor of a container, in header order.

    Sizes are checked against the header and ``size_cap`` before any
    payload is allocated. The metadata entry is not returned; see
    ``read_metadata``.

    Raises:
        ContainerIOError: If the file cannot be opened
        ContainerFormatError: For bad magic bytes, a malformed header or sizes above the cap
        UnsupportedVersionError: For unknown versions
        ContainerCorruptionError: For a truncated payload (names the tensor) or trailing bytes
    """
    path = Path(path)
    try:
        with open(path, "rb") as f:
            entries = _read_header(f, path, size_cap)
            sizes = [_payload_bytes(e, path, size_cap) for e in entries]
            if sum(sizes) > size_cap:
                raise ContainerFormatError(f"{path}: payload of {sum(sizes)} bytes exceeds the {size_cap}-byte cap")
            tensors: Dict[str, np.ndarray] = {}
            for entry, nbytes in zip(entries, sizes):
                raw = f.read(nbytes)
                if len(raw) != nbytes:
                    raise ContainerCorruptionError(
                        f"{path}: payload truncated in tensor '{entry['name']}' ({len(raw)} of {nbytes} bytes)"
                    )
                if entry["name"] == METADATA_ENTRY:
                    continue
                dtype = DTYPES[entry["dtype"]]
                array = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"])
                tensors[entry["name"]] = array.astype(dtype.newbyteorder("="), copy=True)
            if f.read(1):
                raise ContainerCorruptionError(f"{path}: trailing bytes after the last tensor")
    except OSError as e:
        raise ContainerIOError(f"cannot read container {path}: {e}")
    return tensors
