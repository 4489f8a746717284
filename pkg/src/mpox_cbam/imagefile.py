"""Minimal PNG (8-bit RGB/RGBA) and binary PPM (P6) reading and writing."""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError, UnsupportedFormat

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_CHANNELS = {2: 3, 6: 4}  # colour type -> samples per pixel


def read_image(path) -> np.ndarray:
    """Decode ``path`` into an ``H x W x 3`` uint8 array.

    Raises :class:`UnsupportedFormat` for anything that is not a PNG or P6 PPM.
    """
    data = Path(path).read_bytes()
    if data.startswith(PNG_SIGNATURE):
        return decode_png(data, path)
    if data[:2] == b"P6":
        return decode_ppm(data)
    raise UnsupportedFormat(path, data[:8])


# ---------------------------------------------------------------------------
# PPM


def _ppm_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed PPM header", offset=pos)
        tokens.append(int(data[start:pos]))
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def decode_ppm(data: bytes) -> np.ndarray:
    (w, h, maxval), start = _ppm_tokens(data, 3)
    if not 0 < maxval < 256:
        raise FormatError(f"PPM maxval {maxval} is not supported (8-bit only)", offset=start)
    need = w * h * 3
    if len(data) - start < need:
        raise FormatError(f"PPM raster truncated: need {need} bytes", offset=len(data))
    img = np.frombuffer(data, dtype=np.uint8, count=need, offset=start).reshape(h, w, 3)
    if maxval != 255:
        img = np.round(img.astype(np.float64) * 255.0 / maxval).astype(np.uint8)
    return img.copy()


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.uint8)
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


# ---------------------------------------------------------------------------
# PNG


def _paeth(a, b, c):
    p = a + b - c
    pa, pb, pc = np.abs(p - a), np.abs(p - b), np.abs(p - c)
    return np.where((pa <= pb) & (pa <= pc), a, np.where(pb <= pc, b, c))


def _unfilter(raw: bytes, h: int, w: int, bpp: int) -> np.ndarray:
    stride = w * bpp
    if len(raw) < h * (stride + 1):
        raise FormatError("PNG image data is truncated")
    rows = np.frombuffer(raw, dtype=np.uint8, count=h * (stride + 1)).reshape(h, stride + 1)
    out = np.zeros((h, stride), dtype=np.int32)
    prev = np.zeros(stride, dtype=np.int32)
    for y in range(h):
        ftype, line = rows[y, 0], rows[y, 1:].astype(np.int32)
        if ftype == 0:
            cur = line
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        elif ftype in (1, 3, 4):
            # left-dependent filters need a sequential pass over pixels
            cur = np.zeros(stride, dtype=np.int32)
            for x in range(0, stride, bpp):
                left = cur[x - bpp : x] if x else np.zeros(bpp, dtype=np.int32)
                up = prev[x : x + bpp]
                if ftype == 1:
                    pred = left
                elif ftype == 3:
                    pred = (left + up) // 2
                else:
                    upleft = prev[x - bpp : x] if x else np.zeros(bpp, dtype=np.int32)
                    pred = _paeth(left, up, upleft)
                cur[x : x + bpp] = (line[x : x + bpp] + pred) & 0xFF
        else:
            raise FormatError(f"unknown PNG filter type {ftype} in row {y}")
        out[y] = cur
        prev = cur
    return out.astype(np.uint8)


def decode_png(data: bytes, path="<bytes>") -> np.ndarray:
    pos = len(PNG_SIGNATURE)
    header = None
    idat = []
    while pos + 8 <= len(data):
        length, ctype = struct.unpack(">I4s", data[pos : pos + 8])
        body = data[pos + 8 : pos + 8 + length]
        if len(body) != length:
            raise FormatError(f"PNG chunk {ctype!r} is truncated", offset=pos)
        if ctype == b"IHDR":
            header = struct.unpack(">IIBBBBB", body)
        elif ctype == b"IDAT":
            idat.append(body)
        elif ctype == b"IEND":
            break
        pos += 12 + length
    if header is None:
        raise FormatError("PNG has no IHDR chunk", offset=len(PNG_SIGNATURE))
    w, h, depth, ctype, _, _, interlace = header
    if depth != 8 or ctype not in _CHANNELS or interlace:
        raise UnsupportedFormat(path, data[:8])
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise FormatError(f"corrupt PNG image data: {exc}") from None
    bpp = _CHANNELS[ctype]
    return _unfilter(raw, h, w, bpp).reshape(h, w, bpp)[:, :, :3].copy()


def _chunk(ctype: bytes, body: bytes) -> bytes:
    return struct.pack(">I", len(body)) + ctype + body + struct.pack(">I", zlib.crc32(ctype + body) & 0xFFFFFFFF)


def encode_png(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.uint8)
    h, w, c = img.shape
    ctype = {3: 2, 4: 6}[c]
    raw = b"".join(b"\x00" + img[y].tobytes() for y in range(h))
    return (
        PNG_SIGNATURE
        + _chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, ctype, 0, 0, 0))
        + _chunk(b"IDAT", zlib.compress(raw))
        + _chunk(b"IEND", b"")
    )
