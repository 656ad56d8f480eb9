"""PNG images and the binary model file.

Model file layout, little-endian::

    magic    4s   b"RSMO"
    version  u16  1
    head     u8   0 = RBF, 1 = SMOE
    width    u32
    height   u32
    channels u8
    count    u32
    count records of (mu_x, mu_y, l11, l21, l22, log_pi, m_1..m_C) as f32
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import Head, KernelSet, RsmoeError, as_image

MAGIC = b"RSMO"
VERSION = 1
_HEADER = struct.Struct("<4sHBIIBI")
HEADER_SIZE = _HEADER.size


class UnsupportedFormat(RsmoeError):
    pass


class IoFailure(RsmoeError):
    pass


class BadMagic(RsmoeError):
    pass


class VersionMismatch(RsmoeError):
    pass


class TruncatedFile(RsmoeError):
    pass


_EIGHT_BIT = {"L": "L", "RGB": "RGB", "RGBA": "RGB", "LA": "L", "P": "RGB"}


def load_png(path) -> np.ndarray:
    """Read an 8-bit grayscale or RGB image as float64 (H, W, C) in [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode not in _EIGHT_BIT:
                raise UnsupportedFormat(f"{path}: mode {mode!r} is not 8-bit gray/RGB")
            arr = np.asarray(im.convert(_EIGHT_BIT[mode]))
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    except UnsupportedFormat:
        raise
    except OSError as exc:
        raise UnsupportedFormat(f"{path}: {exc}") from exc
    return as_image(arr.astype(np.float64) / 255.0)


def to_uint8(img) -> np.ndarray:
    img = as_image(img).astype(np.float64)
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_png(img, path):
    q = to_uint8(img)
    q = q[:, :, 0] if q.shape[2] == 1 else q
    try:
        Image.fromarray(q).save(path, format="PNG")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


@dataclass
class ModelFile:
    kernels: KernelSet
    head: Head
    width: int
    height: int

    @property
    def channels(self) -> int:
        return self.kernels.channels


def model_bytes(ks: KernelSet, head, width: int, height: int) -> bytes:
    head = Head.parse(head)
    records = np.concatenate([ks.mu, ks.chol, ks.log_pi[:, None], ks.m], axis=1)
    header = _HEADER.pack(MAGIC, VERSION, int(head), width, height, ks.channels, len(ks))
    return header + records.astype("<f4").tobytes()


def parse_model(buf: bytes) -> ModelFile:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagic(f"bad magic {bytes(buf[:4])!r}")
    if len(buf) < HEADER_SIZE:
        raise TruncatedFile(f"header needs {HEADER_SIZE} bytes, file has {len(buf)}")
    _, version, head, width, height, channels, count = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VersionMismatch(f"file version {version}, reader supports {VERSION}")
    width_rec = 6 + channels
    need = HEADER_SIZE + count * width_rec * 4
    if len(buf) < need:
        raise TruncatedFile(f"expected {need} bytes, got {len(buf)}")
    if len(buf) > need:
        raise RsmoeError(f"{len(buf) - need} trailing bytes after {count} records")
    rec = np.frombuffer(buf, dtype="<f4", offset=HEADER_SIZE).reshape(count, width_rec)
    rec = rec.astype(np.float64)
    ks = KernelSet(rec[:, 0:2], rec[:, 2:5], rec[:, 5], rec[:, 6:])
    return ModelFile(ks, Head(head), width, height)


def save_model(ks: KernelSet, path, head, width: int, height: int):
    try:
        Path(path).write_bytes(model_bytes(ks, head, width, height))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_model(path) -> ModelFile:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return parse_model(buf)
