"""Binary tensor dumps and run-directory artifact helpers.

Dump layout: magic "PABT", version u32, ndim u32, dims as u64, then the
payload as little-endian float32, row-major. The payload precision is fixed:
float64 runs are cast on write, so only float32 round-trips losslessly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ArtifactError

MAGIC = b"PABT"
VERSION = 1

LATENT_FILENAME = "latent.pabt"
MANIFEST_FILENAME = "manifest.json"


def write_tensor(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"tensor dump not found: {path}")
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise ArtifactError(f"not a tensor dump: {path}", kind="malformed-artifact")
    version, ndim = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ArtifactError(f"unsupported dump version {version}", kind="malformed-artifact")
    offset = 12
    if len(data) < offset + 8 * ndim:
        raise ArtifactError(f"truncated dump header: {path}", kind="malformed-artifact")
    dims = struct.unpack_from(f"<{ndim}Q", data, offset)
    offset += 8 * ndim
    count = int(np.prod(dims)) if ndim else 1
    payload = data[offset:]
    if len(payload) != 4 * count:
        raise ArtifactError(
            f"payload length {len(payload)} != 4*{count} for dims {dims}",
            kind="malformed-artifact",
        )
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_run_latent(run_dir) -> np.ndarray:
    return read_tensor(Path(run_dir) / LATENT_FILENAME)
