"""Image I/O, bilinear resizing and the PTF binary tensor format.

Images are plain ``numpy`` arrays of shape ``(H, W, C)`` with values in
``[0, 1]``; tensors are arbitrary float arrays with at most 4 dimensions.

PTF layout (all little-endian)::

    b"PAET" | u32 version=1 | u32 ndim | u32 dims[ndim] | f32 payload (row-major)
"""
from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO

import numpy as np
from PIL import Image as PILImage

from .errors import CorruptFileError, FormatError

PTF_MAGIC = b"PAET"
PTF_VERSION = 1
MAX_DIMS = 4


def as_image(arr) -> np.ndarray:
    """Coerce to an ``(H, W, C)`` float32 array; 2-D input gains a channel axis."""
    a = np.asarray(arr, dtype=np.float32)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3 or a.shape[2] not in (1, 3):
        raise FormatError(f"expected HxWx1 or HxWx3 image, got shape {a.shape}")
    return a


def load_image(path) -> np.ndarray:
    """Read an 8-bit grayscale or RGB PNG as an ``(H, W, C)`` float32 array in [0, 1]."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such image: {path}")
    try:
        with PILImage.open(path) as im:
            fmt = im.format
            mode = im.mode
            im.load()
            data = np.asarray(im)
    except (OSError, SyntaxError) as exc:
        raise FormatError(f"{path}: unreadable image ({exc})") from exc
    if fmt != "PNG":
        raise FormatError(f"{path}: format {fmt!r} is not PNG")
    if mode not in ("L", "RGB"):
        raise FormatError(f"{path}: PNG mode {mode!r} unsupported (need 8-bit 'L' or 'RGB')")
    if data.dtype != np.uint8:
        raise FormatError(f"{path}: bit depth {data.dtype} unsupported (need 8-bit)")
    img = data.astype(np.float32) / np.float32(255.0)
    return as_image(img)


def save_image(img, path) -> None:
    a = as_image(img)
    q = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    mode = "L" if q.shape[2] == 1 else "RGB"
    arr = q[:, :, 0] if mode == "L" else q
    try:
        PILImage.fromarray(arr, mode=mode).save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _resize_axis(a: np.ndarray, out: int, axis: int) -> np.ndarray:
    n = a.shape[axis]
    if n == out:
        return a
    # half-pixel centres, clamped to the valid sample range
    pos = (np.arange(out, dtype=np.float64) + 0.5) * (n / out) - 0.5
    pos = np.clip(pos, 0.0, n - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    a_lo = np.take(a, lo, axis=axis)
    a_hi = np.take(a, hi, axis=axis)
    shape = [1] * a.ndim
    shape[axis] = out
    frac = frac.reshape(shape)
    # a + f*(b - a) keeps constants exact
    return a_lo + frac * (a_hi - a_lo)


def resize_bilinear(img, out_h: int, out_w: int) -> np.ndarray:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    a = as_image(img).astype(np.float64)
    a = _resize_axis(a, out_h, 0)
    a = _resize_axis(a, out_w, 1)
    return np.clip(a, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# PTF tensors


def tensor_to_bytes(t) -> bytes:
    a = np.asarray(t)
    if a.ndim == 0:
        a = a.reshape(1)
    if a.ndim > MAX_DIMS:
        raise ValueError(f"PTF supports at most {MAX_DIMS} dims, got {a.ndim}")
    if any(d < 1 for d in a.shape):
        raise ValueError(f"PTF dims must be positive, got {a.shape}")
    a = np.ascontiguousarray(a, dtype="<f4")
    if not np.all(np.isfinite(a)):
        raise ValueError("PTF tensors must be finite")
    header = PTF_MAGIC + struct.pack(f"<II{a.ndim}I", PTF_VERSION, a.ndim, *a.shape)
    return header + a.tobytes(order="C")


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CorruptFileError(f"truncated PTF block while reading {what}")
    return buf


def read_tensor_from(f: BinaryIO) -> np.ndarray:
    """Read one PTF block from an open binary stream."""
    magic = f.read(4)
    if magic != PTF_MAGIC:
        raise CorruptFileError(f"bad PTF magic {magic!r}")
    version, ndim = struct.unpack("<II", _read_exact(f, 8, "header"))
    if version != PTF_VERSION:
        raise CorruptFileError(f"unsupported PTF version {version}")
    if not 1 <= ndim <= MAX_DIMS:
        raise CorruptFileError(f"invalid PTF ndim {ndim}")
    dims = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "dims"))
    if any(d < 1 for d in dims):
        raise CorruptFileError(f"invalid PTF dims {dims}")
    count = int(np.prod(dims, dtype=np.int64))
    payload = _read_exact(f, 4 * count, "payload")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)


def write_tensor(t, path) -> None:
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(t))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    stream = io.BytesIO(data)
    t = read_tensor_from(stream)
    if stream.tell() != len(data):
        raise CorruptFileError(f"{path}: {len(data) - stream.tell()} trailing bytes after PTF payload")
    return t
