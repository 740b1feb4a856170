"""Named-tensor archives.

The on-disk layout is safetensors: an 8-byte little-endian header length, a
JSON header mapping each name to dtype, shape and byte offsets (plus a
``__metadata__`` string map), then the raw little-endian payload. We add a
``payload_sha256`` metadata entry computed over names, dtypes, shapes and
bytes, and verify it on every load.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from safetensors import SafetensorError
from safetensors.numpy import load_file, save_file

from .errors import ArchiveError, IntegrityError

DIGEST_KEY = "payload_sha256"


def payload_digest(tensors: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], order="C")
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        h.update(name.encode())
        h.update(str(arr.dtype.str).encode())
        h.update(repr(tuple(arr.shape)).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_archive(path, tensors: dict, metadata: dict | None = None) -> str:
    """Atomically write ``tensors`` and return the payload digest."""
    path = os.fspath(path)
    arrays = {name: np.asarray(arr, order="C") for name, arr in tensors.items()}
    meta = {str(k): str(v) for k, v in (metadata or {}).items()}
    digest = payload_digest(arrays)
    meta[DIGEST_KEY] = digest
    tmp = path + ".tmp"
    try:
        save_file(arrays, tmp, metadata=meta)
        os.replace(tmp, path)
    except (OSError, SafetensorError) as exc:
        raise ArchiveError(f"cannot write archive {path}: {exc}") from exc
    return digest


def read_metadata(path) -> dict:
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            size = int.from_bytes(fh.read(8), "little")
            header = json.loads(fh.read(size))
    except (OSError, ValueError) as exc:
        raise ArchiveError(f"cannot read archive header of {path}: {exc}") from exc
    return dict(header.get("__metadata__", {}))


def load_archive(path, verify: bool = True):
    """Return ``(tensors, metadata)``; raises ``IntegrityError`` on digest mismatch."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise ArchiveError(f"archive not found: {path}")
    metadata = read_metadata(path)
    try:
        tensors = load_file(path)
    except (SafetensorError, OSError, ValueError) as exc:
        raise IntegrityError(f"malformed archive {path}: {exc}") from exc
    if verify:
        expected = metadata.get(DIGEST_KEY)
        if expected is None:
            raise IntegrityError(f"archive {path} carries no payload digest")
        actual = payload_digest(tensors)
        if actual != expected:
            raise IntegrityError(f"payload digest mismatch in {path}: expected {expected[:12]}, got {actual[:12]}")
    return tensors, metadata


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class NetworkWeights:
    """Parameter and buffer arrays of one network plus string metadata."""

    entries: dict
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_module(cls, module: torch.nn.Module, **metadata):
        entries = {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}
        return cls(entries, {k: str(v) for k, v in metadata.items()})

    def load_into(self, module: torch.nn.Module) -> None:
        expected = module.state_dict()
        missing = sorted(set(expected) - set(self.entries))
        extra = sorted(set(self.entries) - set(expected))
        if missing or extra:
            raise ArchiveError(f"weights do not match network: missing={missing[:5]} unexpected={extra[:5]}")
        for name, ref in expected.items():
            if tuple(self.entries[name].shape) != tuple(ref.shape):
                raise ArchiveError(
                    f"shape mismatch for {name}: archive {self.entries[name].shape}, network {tuple(ref.shape)}"
                )
        module.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in self.entries.items()})

    def digest(self) -> str:
        return payload_digest(self.entries)

    def save(self, path) -> str:
        return save_archive(path, self.entries, self.metadata)

    @classmethod
    def load(cls, path, verify: bool = True):
        tensors, metadata = load_archive(path, verify)
        return cls(tensors, metadata)


def module_digest(module: torch.nn.Module) -> str:
    return NetworkWeights.from_module(module).digest()
