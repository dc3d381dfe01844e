"""Binary tensor files, named-tensor checkpoints and PPM images.

STNT layout (little endian)::

    b"STNT" | u8 version (=1) | u8 ndim | ndim x u32 dims | f32 payload (row-major)

A checkpoint is a sequence of ``u32 name_len | utf-8 name | STNT tensor``
records, read until end of file.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"STNT"
VERSION = 1


class FormatError(ValueError):
    """Raised when a file does not follow the STNT / checkpoint / PPM layout."""


def _tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if not 1 <= arr.ndim <= 255:
        raise ValueError(f"STNT supports 1..255 axes, got {arr.ndim}")
    head = MAGIC + struct.pack("<BB", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated STNT data while reading {what}")
    return buf


def _read_tensor(f: BinaryIO) -> np.ndarray:
    magic = f.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad STNT magic {magic!r}")
    version, ndim = struct.unpack("<BB", _read_exact(f, 2, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported STNT version {version}")
    if ndim == 0:
        raise FormatError("STNT tensor with zero axes")
    dims = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "dims"))
    count = int(np.prod(dims, dtype=np.int64))
    payload = _read_exact(f, 4 * count, "payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def save_tensor(path: str | os.PathLike, arr: np.ndarray) -> None:
    Path(path).write_bytes(_tensor_bytes(arr))


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        arr = _read_tensor(f)
        if f.read(1):
            raise FormatError(f"trailing bytes after tensor in {path}")
    return arr


def save_named(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    parts = []
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw + _tensor_bytes(arr))
    Path(path).write_bytes(b"".join(parts))


def load_named(path: str | os.PathLike) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise FormatError("truncated record header")
            (n,) = struct.unpack("<I", head)
            try:
                name = _read_exact(f, n, "name").decode("utf-8")
            except UnicodeDecodeError as e:
                raise FormatError(f"record name is not utf-8: {e}") from None
            out[name] = _read_tensor(f)
    if not out:
        raise FormatError(f"empty checkpoint {path}")
    return out


def text_to_tensor(text: str) -> np.ndarray:
    """Pack UTF-8 text as a float tensor of byte values (exact in f32)."""
    raw = text.encode("utf-8") or b"\0"
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float32)


def tensor_to_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.uint8).tolist()).rstrip(b"\0").decode("utf-8")


# ---------------------------------------------------------------------------
# images


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a ``[3,H,W]`` (or ``[1,3,H,W]``) float image in [0,1] as binary P6."""
    img = np.asarray(image)
    if img.ndim == 4:
        img = img[0]
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"write_ppm expects a 3-channel image, got {img.shape}")
    _, h, w = img.shape
    px = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + px.tobytes())


def _ppm_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        tokens.append(int(data[start:pos]))
    return tokens, pos + 1  # exactly one whitespace byte precedes the raster


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary P6 file into a float32 ``[3,H,W]`` array in [0,1]."""
    data = Path(path).read_bytes()
    if data[:2] != b"P6":
        raise FormatError(f"{path} is not a binary PPM (P6)")
    try:
        (w, h, maxval), pos = _ppm_tokens(data, 3)
    except ValueError as e:
        raise FormatError(f"bad PPM header in {path}: {e}") from None
    if not 0 < maxval < 65536:
        raise FormatError(f"bad PPM maxval {maxval}")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    n = w * h * 3
    px = np.frombuffer(data, dtype=dtype, count=n, offset=pos)
    return (px.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / np.float32(maxval))


def read_image(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        return read_ppm(path)
    try:
        from PIL import Image
    except ImportError as e:  # pragma: no cover
        raise FormatError(f"reading {path.suffix} needs Pillow") from e
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()
