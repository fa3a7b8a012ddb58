"""On-disk formats: portable tensors, latent grids and checkpoint directories.

Portable tensor (``.ssgt``): b"SSGT", u32 rank, rank × u32 extents, float32
payload, all little-endian and row-major.

Latent grid (``.ssgl``): b"SSGL", u32 codebook size, u32 rank, rank × u32
extents, u16 payload.
"""

from __future__ import annotations

import json
import os
import shutil
import struct
import tempfile
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"SSGT"
LATENT_MAGIC = b"SSGL"


class FormatError(ValueError):
    pass


def tensor_to_bytes(arr) -> bytes:
    arr = np.asarray(arr)
    header = TENSOR_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != TENSOR_MAGIC:
        raise FormatError("not a portable tensor (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 4 * rank
    if len(buf) < off:
        raise FormatError("truncated tensor header")
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    count = int(np.prod(shape)) if rank else 1
    if len(buf) != off + 4 * count:
        raise FormatError(f"payload size mismatch: expected {4 * count} bytes, got {len(buf) - off}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensor(path, arr) -> None:
    _atomic_write_bytes(Path(path), tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def latents_to_bytes(indices, codebook_size: int) -> bytes:
    idx = np.asarray(indices)
    if codebook_size > 65535:
        raise FormatError("codebook too large for u16 latent files")
    if idx.size and (idx.min() < 0 or idx.max() >= codebook_size):
        raise FormatError("latent index out of range")
    header = (LATENT_MAGIC + struct.pack("<II", codebook_size, idx.ndim)
              + struct.pack(f"<{idx.ndim}I", *idx.shape))
    return header + np.ascontiguousarray(idx, dtype="<u2").tobytes()


def latents_from_bytes(buf: bytes) -> tuple[np.ndarray, int]:
    if len(buf) < 12 or buf[:4] != LATENT_MAGIC:
        raise FormatError("not a latent grid file (bad magic)")
    k, rank = struct.unpack_from("<II", buf, 4)
    shape = struct.unpack_from(f"<{rank}I", buf, 12)
    off = 12 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(buf) != off + 2 * count:
        raise FormatError("latent payload size mismatch")
    idx = np.frombuffer(buf, dtype="<u2", count=count, offset=off).reshape(shape).astype(np.int64)
    return idx, k


def save_latents(path, indices, codebook_size: int) -> None:
    _atomic_write_bytes(Path(path), latents_to_bytes(indices, codebook_size))


def load_latents(path) -> tuple[np.ndarray, int]:
    return latents_from_bytes(Path(path).read_bytes())


def save_checkpoint(directory, tensors: dict[str, np.ndarray], manifest: dict,
                    files: dict[str, str] | None = None) -> None:
    """Write ``tensors``, ``manifest.json`` and extra text ``files`` into ``directory`` atomically.

    Everything goes to a sibling temp directory first, which is then renamed
    into place; readers never observe a half-written checkpoint.
    """
    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{directory.name}.", dir=directory.parent))
    try:
        (tmp / "tensors").mkdir()
        names = sorted(tensors)
        for name in names:
            (tmp / "tensors" / f"{name}.ssgt").write_bytes(tensor_to_bytes(tensors[name]))
        full = dict(manifest)
        full["tensors"] = names
        (tmp / "manifest.json").write_text(json.dumps(full, indent=2, sort_keys=True) + "\n")
        for name, text in (files or {}).items():
            (tmp / name).write_text(text)
        if directory.exists():
            old = Path(tempfile.mkdtemp(prefix=f".{directory.name}.old.", dir=directory.parent))
            os.replace(directory, old / "ckpt")
            os.replace(tmp, directory)
            shutil.rmtree(old, ignore_errors=True)
        else:
            os.replace(tmp, directory)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint at {directory}")
    manifest = json.loads(manifest_path.read_text())
    tensors = {name: load_tensor(directory / "tensors" / f"{name}.ssgt")
               for name in manifest.get("tensors", [])}
    return tensors, manifest
