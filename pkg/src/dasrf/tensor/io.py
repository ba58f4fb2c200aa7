"""Binary tensor dumps ("DAST") and checkpoint containers.

Layout: magic ``b"DAST"``, u32 rank, rank x u32 extents, float32 payload,
all little-endian.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from dasrf.errors import FormatError

MAGIC = b"DAST"


def dumps(array) -> bytes:
    arr = np.asarray(getattr(array, "data", array), dtype="<f4")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def loads(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise FormatError("missing DAST magic bytes")
    (rank,) = struct.unpack_from("<I", blob, 4)
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    payload = blob[offset:]
    if len(payload) != 4 * count:
        raise FormatError(f"payload holds {len(payload)} bytes, expected {4 * count}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def save(path, array) -> None:
    Path(path).write_bytes(dumps(array))


def load(path) -> np.ndarray:
    return loads(Path(path).read_bytes())


def save_checkpoint(directory, tensors: dict, meta: dict | None = None) -> Path:
    """Write one ``.dast`` file per tensor plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"tensors": {}, "meta": meta or {}}
    for i, (name, value) in enumerate(sorted(tensors.items())):
        fname = f"t{i:04d}.dast"
        save(directory / fname, value)
        manifest["tensors"][name] = fname
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_checkpoint(directory) -> tuple[dict, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    tensors = {name: load(directory / fname) for name, fname in manifest["tensors"].items()}
    return tensors, manifest.get("meta", {})
