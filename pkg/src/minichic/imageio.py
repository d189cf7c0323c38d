"""8-bit image files: binary PPM (P6) and a small PNG reader/writer."""

from __future__ import annotations

import logging
import struct
import zlib
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_PNG_CHANNELS = {0: 1, 2: 3, 4: 2, 6: 4}


class ImageFormatError(ValueError):
    pass


# PPM ------------------------------------------------------------------------------

def _ppm_tokens(data: bytes, count: int):
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PPM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_ppm(data: bytes) -> np.ndarray:
    if data[:2] != b"P6":
        raise ImageFormatError("not a binary PPM (P6)")
    tokens, pos = _ppm_tokens(data, 3)
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise ImageFormatError(f"bad PPM header: {exc}") from exc
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit PPM supported (maxval {maxval})")
    n = w * h * 3
    pix = data[pos:pos + n]
    if len(pix) != n:
        raise ImageFormatError("truncated PPM pixel data")
    return np.frombuffer(pix, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(img: np.ndarray) -> bytes:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + img.reshape(h, w, 3).tobytes()


# PNG ------------------------------------------------------------------------------

def _chunk(kind: bytes, body: bytes) -> bytes:
    return struct.pack(">I", len(body)) + kind + body + struct.pack(">I", zlib.crc32(kind + body))


def _paeth(a, b, c):
    p = a + b - c
    pa, pb, pc = np.abs(p - a), np.abs(p - b), np.abs(p - c)
    return np.where((pa <= pb) & (pa <= pc), a, np.where(pb <= pc, b, c))


def _unfilter(raw: bytes, h: int, w: int, ch: int) -> np.ndarray:
    stride = w * ch
    if len(raw) != h * (stride + 1):
        raise ImageFormatError("PNG data size mismatch")
    rows = np.frombuffer(raw, dtype=np.uint8).reshape(h, stride + 1)
    out = np.zeros((h, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.int32)
    for y in range(h):
        ftype, line = rows[y, 0], rows[y, 1:].astype(np.int32)
        if ftype == 0:
            cur = line
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        elif ftype in (1, 3, 4):
            # left-dependent filters are sequential per pixel
            cur = np.zeros(stride, dtype=np.int32)
            for x in range(stride):
                a = cur[x - ch] if x >= ch else 0
                if ftype == 1:
                    pred = a
                elif ftype == 3:
                    pred = (a + prev[x]) >> 1
                else:
                    c = prev[x - ch] if x >= ch else 0
                    pred = int(_paeth(np.int32(a), prev[x], np.int32(c)))
                cur[x] = (line[x] + pred) & 0xFF
        else:
            raise ImageFormatError(f"bad PNG filter type {ftype}")
        out[y] = cur
        prev = cur
    return out.reshape(h, w, ch)


def read_png(data: bytes) -> np.ndarray:
    """8-bit non-interlaced gray/RGB/RGBA PNG -> (H, W, 3) uint8 (alpha dropped)."""
    if data[:8] != PNG_SIGNATURE:
        raise ImageFormatError("not a PNG file")
    pos, idat, hdr = 8, [], None
    while pos < len(data):
        if pos + 8 > len(data):
            raise ImageFormatError("truncated PNG chunk")
        (n,), kind = struct.unpack(">I", data[pos:pos + 4]), data[pos + 4:pos + 8]
        body = data[pos + 8:pos + 8 + n]
        if len(body) != n:
            raise ImageFormatError("truncated PNG chunk")
        pos += 12 + n
        if kind == b"IHDR":
            hdr = struct.unpack(">IIBBBBB", body)
        elif kind == b"IDAT":
            idat.append(body)
        elif kind == b"IEND":
            break
    if hdr is None:
        raise ImageFormatError("PNG without IHDR")
    w, h, depth, ctype, _, _, interlace = hdr
    if depth != 8 or ctype not in _PNG_CHANNELS or interlace:
        raise ImageFormatError(f"unsupported PNG (depth {depth}, color type {ctype}, interlace {interlace})")
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise ImageFormatError(f"corrupt PNG data: {exc}") from exc
    img = _unfilter(raw, h, w, _PNG_CHANNELS[ctype])
    if ctype in (4, 6):
        log.warning("dropping PNG alpha channel")
        img = img[:, :, :-1]
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    return np.ascontiguousarray(img)


def write_png(img: np.ndarray) -> bytes:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w = img.shape[:2]
    rows = np.concatenate([np.zeros((h, 1), dtype=np.uint8), img.reshape(h, w * 3)], axis=1)
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    return (PNG_SIGNATURE + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", zlib.compress(rows.tobytes(), 6))
            + _chunk(b"IEND", b""))


# files ------------------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] == PNG_SIGNATURE:
        return read_png(data)
    if data[:2] == b"P6":
        return read_ppm(data)
    raise ImageFormatError(f"{path}: unrecognised image format (PNG or binary PPM expected)")


def save_image(path, img: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        path.write_bytes(write_png(img))
    elif path.suffix.lower() in (".ppm", ".pnm"):
        path.write_bytes(write_ppm(img))
    else:
        raise ImageFormatError(f"{path}: use a .png or .ppm extension")
