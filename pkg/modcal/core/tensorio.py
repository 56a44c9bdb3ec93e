"""
Binary tensor blobs and the parameter container used for checkpoints.

Blob layout (all little-endian):

    offset 0   4 bytes   magic b"MCT1"
    offset 4   uint32    ndim
    offset 8   uint32    dims[ndim]
    ...        float32   payload, C order

Container layout:

    offset 0   4 bytes   magic b"MCKP"
    offset 4   uint32    header length H
    offset 8   H bytes   UTF-8 JSON header {"config": {...}, "tensors": [{"name", "offset", "nbytes"}]}
    ...                  blobs, offsets relative to the end of the header
"""

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Tuple, Union

import numpy as np
import torch

from modcal.core.errors import LoadError

BLOB_MAGIC = b"MCT1"
CONTAINER_MAGIC = b"MCKP"

PathLike = Union[str, Path]


def encode_tensor(tensor: Union[torch.Tensor, np.ndarray]) -> bytes:
    """Serialize a tensor into the blob layout."""
    if isinstance(tensor, torch.Tensor):
        tensor = tensor.detach().cpu().numpy()
    array = np.ascontiguousarray(tensor, dtype="<f4")
    header = BLOB_MAGIC + struct.pack("<I", array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + array.tobytes()


def decode_tensor(payload: bytes) -> torch.Tensor:
    """Parse a blob back into a float32 tensor."""
    if len(payload) < 8 or payload[:4] != BLOB_MAGIC:
        raise LoadError("not a tensor blob (bad magic)")
    (ndim,) = struct.unpack_from("<I", payload, 4)
    header_size = 8 + 4 * ndim
    if len(payload) < header_size:
        raise LoadError("truncated tensor header")
    shape = struct.unpack_from(f"<{ndim}I", payload, 8)
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    if len(payload) - header_size != expected:
        raise LoadError(f"payload size {len(payload) - header_size} does not match shape {tuple(shape)}")
    array = np.frombuffer(payload, dtype="<f4", offset=header_size).reshape(shape)
    return torch.from_numpy(array.astype(np.float32))


def write_tensor(path: PathLike, tensor: Union[torch.Tensor, np.ndarray]) -> None:
    """Write a single tensor blob to disk."""
    Path(path).write_bytes(encode_tensor(tensor))


def read_tensor(path: PathLike) -> torch.Tensor:
    """Read a single tensor blob from disk."""
    return decode_tensor(Path(path).read_bytes())


def save_container(path: PathLike, config: Mapping[str, Any],
                   tensors: Mapping[str, torch.Tensor]) -> None:
    """Save a config plus named tensors into one self-describing file."""
    entries = []
    blobs = []
    offset = 0
    for name in tensors:
        blob = encode_tensor(tensors[name])
        entries.append({"name": name, "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)

    header = json.dumps({"config": dict(config), "tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CONTAINER_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_container(path: PathLike) -> Tuple[Dict[str, Any], Dict[str, torch.Tensor]]:
    """Load a container written by save_container."""
    path = Path(path)
    if not path.exists():
        raise LoadError(f"container not found: {path}")
    payload = path.read_bytes()
    if payload[:4] != CONTAINER_MAGIC:
        raise LoadError(f"{path} is not a parameter container")
    (header_len,) = struct.unpack_from("<I", payload, 4)
    try:
        header = json.loads(payload[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise LoadError(f"corrupt container header in {path}: {e}")

    body = payload[8 + header_len:]
    tensors = {}
    for entry in header["tensors"]:
        start = entry["offset"]
        tensors[entry["name"]] = decode_tensor(body[start:start + entry["nbytes"]])
    return header["config"], tensors


def checksum_tensors(tensors: Iterable[Tuple[str, torch.Tensor]]) -> str:
    """SHA-256 over names and float32 bytes, in the given order."""
    digest = hashlib.sha256()
    for name, tensor in tensors:
        digest.update(name.encode("utf-8"))
        digest.update(encode_tensor(tensor))
    return digest.hexdigest()


def module_checksum(module: torch.nn.Module) -> str:
    """Checksum of a module's parameters and buffers."""
    return checksum_tensors(sorted(module.state_dict().items()))
