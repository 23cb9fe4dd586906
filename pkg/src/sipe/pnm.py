"""Binary PPM (P6) and PGM (P5) images with maxval 255."""

from __future__ import annotations

import os
import tempfile

import numpy as np


class FormatError(ValueError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = path
        self.offset = offset


def _tokens(data: bytes, count: int, path):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    pos = 0
    out = []
    while len(out) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise FormatError(path, pos, "truncated header")
        if data[pos : pos + 1] == b"#":
            nl = data.find(b"\n", pos)
            pos = len(data) if nl < 0 else nl + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        out.append((data[start:pos], start))
    if pos >= len(data):
        raise FormatError(path, pos, "missing whitespace after header")
    return out, pos + 1


def decode(data: bytes, path="<bytes>") -> np.ndarray:
    """Decode a P5/P6 image to uint8 [H,W] or [H,W,3]."""
    tokens, offset = _tokens(data, 4, path)
    magic, magic_at = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(path, magic_at, f"unsupported magic {magic!r}")
    values = []
    for tok, at in tokens[1:]:
        if not tok.isdigit():
            raise FormatError(path, at, f"expected an integer, got {tok!r}")
        values.append(int(tok))
    width, height, maxval = values
    if maxval != 255:
        raise FormatError(path, tokens[3][1], f"only maxval 255 is supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    payload = data[offset : offset + need]
    if len(payload) != need:
        raise FormatError(path, offset + len(payload), f"expected {need} pixel bytes, found {len(payload)}")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return img if channels == 3 else img[..., 0]


def encode(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise TypeError(f"expected uint8 pixels, got {img.dtype}")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode image of shape {img.shape}")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes()


def write_atomic(path, payload: bytes) -> None:
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), prefix=".tmp-")
    with os.fdopen(fd, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def read(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode(f.read(), path)


def write(path, img: np.ndarray) -> None:
    write_atomic(path, encode(img))
