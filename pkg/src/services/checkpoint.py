"""
Binary checkpoint format.

Layout: 8-byte magic, little-endian u32 format version, little-endian u32
manifest length, UTF-8 JSON manifest, then every parameter and buffer as raw
little-endian bytes at the offsets recorded in the manifest. Saving a loaded
checkpoint reproduces the original file byte for byte.
"""

import os
import struct
import tempfile
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError

from src.core.exceptions import CheckpointError
from src.core.logging import get_logger
from src.models.schemas import CheckpointManifest, ManifestEntry, NormalizationManifest
from src.services.data import NormalizationStats
from src.services.network import ImpatientNet

logger = get_logger(__name__)

MAGIC = b"IMPCKPT\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<II")

PathLike = Union[str, Path]


def _tensors(net: ImpatientNet):
    for name, param, _ in net.named_parameters():
        yield name, "param", param
    for name, buf in net.named_buffers():
        yield name, "buffer", buf


def _le(array: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<"))


def serialize(net: ImpatientNet, normalization: Optional[NormalizationStats] = None) -> bytes:
    """Encode a network (and optional input normalization) into checkpoint bytes."""
    entries = []
    blobs = []
    offset = 0
    for name, role, array in _tensors(net):
        raw = _le(array).tobytes()
        entries.append(
            ManifestEntry(
                name=name,
                role=role,
                shape=list(array.shape),
                dtype=_le(array).dtype.str,
                offset=offset,
                nbytes=len(raw),
            )
        )
        blobs.append(raw)
        offset += len(raw)

    norm = None
    if normalization is not None:
        norm = NormalizationManifest(
            mean=[float(v) for v in normalization.mean],
            std=[float(v) for v in normalization.std],
        )
    manifest = CheckpointManifest(
        format_version=FORMAT_VERSION,
        architecture=net.architecture,
        entries=entries,
        normalization=norm,
    )
    payload = manifest.model_dump_json().encode("utf-8")
    return MAGIC + _HEADER.pack(FORMAT_VERSION, len(payload)) + payload + b"".join(blobs)


def save_checkpoint(net: ImpatientNet, path: PathLike, normalization: Optional[NormalizationStats] = None) -> Path:
    """Write a checkpoint atomically (temporary file in the target directory, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = serialize(net, normalization)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    logger.info("Saved checkpoint", path=str(path), bytes=len(data))
    return path


def deserialize(data: bytes, dtype=None) -> Tuple[ImpatientNet, CheckpointManifest]:
    """
    Decode checkpoint bytes.

    Raises:
        CheckpointError: bad magic, unsupported version, malformed manifest or
            tensors that do not match the rebuilt architecture
    """
    head = len(MAGIC) + _HEADER.size
    if len(data) < head or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, manifest_len = _HEADER.unpack_from(data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(data) < head + manifest_len:
        raise CheckpointError("truncated manifest")
    try:
        manifest = CheckpointManifest.model_validate_json(data[head:head + manifest_len])
    except ValidationError as e:
        raise CheckpointError(f"malformed manifest: {e}") from e
    block = memoryview(data)[head + manifest_len:]

    first = manifest.entries[0].dtype if manifest.entries else "<f4"
    net = ImpatientNet.build(manifest.architecture, seed=0, dtype=dtype or np.dtype(first).type)
    targets = list(_tensors(net))
    if [(n, r) for n, r, _ in targets] != [(e.name, e.role) for e in manifest.entries]:
        raise CheckpointError("checkpoint tensors do not match the architecture")

    for (name, _, target), entry in zip(targets, manifest.entries):
        if tuple(entry.shape) != target.shape:
            raise CheckpointError(f"{name}: shape {entry.shape} does not match {list(target.shape)}")
        if entry.offset + entry.nbytes > len(block):
            raise CheckpointError(f"{name}: data block truncated")
        values = np.frombuffer(block[entry.offset:entry.offset + entry.nbytes], dtype=np.dtype(entry.dtype))
        if values.size != target.size:
            raise CheckpointError(f"{name}: expected {target.size} values, found {values.size}")
        target[...] = values.reshape(target.shape)

    net.eval()
    return net, manifest


def load_checkpoint(path: PathLike, dtype=None) -> Tuple[ImpatientNet, CheckpointManifest]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    net, manifest = deserialize(path.read_bytes(), dtype)
    logger.info("Loaded checkpoint", path=str(path), heads=net.num_heads)
    return net, manifest


def normalization_from_manifest(manifest: CheckpointManifest) -> Optional[NormalizationStats]:
    if manifest.normalization is None:
        return None
    return NormalizationStats(
        mean=np.asarray(manifest.normalization.mean, dtype=np.float32),
        std=np.asarray(manifest.normalization.std, dtype=np.float32),
    )
