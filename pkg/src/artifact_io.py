"""
Versioned binary container shared by every artifact kind.

Layout (all integers little-endian):

    magic      4 bytes   b"DQNT"
    version    uint16
    kind       8 bytes   ASCII tag, NUL padded
    header_len uint32
    header     UTF-8 JSON, sorted keys, no timestamps
    payload    raw bytes (float32 LE tensors, or fixed-size records)

Headers never carry wall-clock data, so rebuilding an artifact from the
same inputs reproduces the file byte for byte.
"""

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple

import numpy as np
import torch


MAGIC = b"DQNT"
FORMAT_VERSION = 1
ARTIFACT_KINDS = ("fpckpt", "fxckpt", "qpack", "qckpt", "tcache", "latents")

_PREAMBLE = struct.Struct("<4sH8sI")
_DTYPES = {"<f4": torch.float32, "<i8": torch.int64, "|u1": torch.uint8}


class ArtifactFormatError(ValueError):
    """File is not a container of the expected kind or version."""


class FingerprintMismatchError(ValueError):
    """Artifacts produced by different models or schedules were mixed."""


def _encode_header(header: Mapping[str, Any]) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_artifact(path: Path, kind: str, header: Mapping[str, Any], payload: bytes) -> Path:
    """Write one container file and return its path."""
    if kind not in ARTIFACT_KINDS:
        raise ValueError(f"Unknown artifact kind: {kind!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    encoded = _encode_header(header)
    preamble = _PREAMBLE.pack(MAGIC, FORMAT_VERSION, kind.encode("ascii"), len(encoded))
    with open(path, "wb") as f:
        f.write(preamble)
        f.write(encoded)
        f.write(payload)
    return path


def read_artifact(path: Path, expected_kind: str) -> Tuple[Dict[str, Any], bytes]:
    """
    Read a container file.

    Returns:
        (header dict, payload bytes)

    Raises:
        FileNotFoundError: If the file does not exist
        ArtifactFormatError: Bad magic, version or kind
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _PREAMBLE.size:
        raise ArtifactFormatError(f"{path} is too short to be an artifact")
    magic, version, kind_raw, header_len = _PREAMBLE.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ArtifactFormatError(f"{path} has bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ArtifactFormatError(f"{path} has format version {version}, expected {FORMAT_VERSION}")
    kind = kind_raw.rstrip(b"\x00").decode("ascii")
    if kind != expected_kind:
        raise ArtifactFormatError(f"{path} holds a {kind!r} artifact, expected {expected_kind!r}")
    start = _PREAMBLE.size
    header = json.loads(raw[start:start + header_len].decode("utf-8"))
    return header, raw[start + header_len:]


def _tensor_to_array(tensor: torch.Tensor) -> Tuple[str, np.ndarray]:
    tensor = tensor.detach().cpu()
    if tensor.dtype == torch.bool:
        return "|u1", tensor.to(torch.uint8).numpy()
    if tensor.dtype in (torch.int32, torch.int64):
        return "<i8", tensor.to(torch.int64).numpy().astype("<i8")
    return "<f4", tensor.to(torch.float32).numpy().astype("<f4")


def write_tensor_artifact(
    path: Path,
    kind: str,
    tensors: Mapping[str, torch.Tensor],
    header: Mapping[str, Any],
) -> Path:
    """
    Write named tensors in name order.

    Floating tensors are stored as float32 LE, integer tensors as int64 LE
    and boolean masks as uint8. The tensor table lands in header["tensors"].
    """
    table = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        dtype, array = _tensor_to_array(tensors[name])
        data = np.ascontiguousarray(array).tobytes()
        table.append({"name": name, "dtype": dtype, "shape": list(array.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    full_header = dict(header)
    full_header["tensors"] = table
    return write_artifact(path, kind, full_header, b"".join(chunks))


def read_tensor_artifact(path: Path, kind: str) -> Tuple[Dict[str, Any], Dict[str, torch.Tensor]]:
    header, payload = read_artifact(path, kind)
    tensors: Dict[str, torch.Tensor] = {}
    for entry in header.get("tensors", []):
        dtype = entry["dtype"]
        if dtype not in _DTYPES:
            raise ArtifactFormatError(f"Unsupported tensor dtype {dtype!r} in {path}")
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        array = np.frombuffer(payload, dtype=np.dtype(dtype), count=count, offset=entry["offset"])
        tensor = torch.from_numpy(array.copy().reshape(entry["shape"]))
        if dtype == "|u1":
            tensor = tensor.to(torch.bool)
        tensors[entry["name"]] = tensor
    return header, tensors


def fingerprint_tensors(tensors: Mapping[str, torch.Tensor]) -> str:
    """Hash of tensor names, shapes and float32 LE contents."""
    digest = hashlib.sha256()
    for name in sorted(tensors):
        _, array = _tensor_to_array(tensors[name])
        digest.update(name.encode("utf-8"))
        digest.update(str(list(array.shape)).encode("ascii"))
        digest.update(np.ascontiguousarray(array).tobytes())
    return digest.hexdigest()[:16]
