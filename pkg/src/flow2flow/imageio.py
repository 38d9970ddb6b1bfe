"""Minimal image codecs: binary PPM (P6, maxval 255) and 8-bit RGB PNG.

Both directions are byte-deterministic: writing the same array twice produces
identical files. Parse failures raise DataError naming the byte offset or
chunk that broke.
"""

import struct
import zlib

import numpy as np

from .errors import DataError

__all__ = ["read_ppm", "write_ppm", "read_png", "write_png", "read_image", "write_image"]

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _require_rgb_u8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise DataError(f"image writer expects (H, W, 3) uint8, got {img.shape} {img.dtype}")
    return img


# -- PPM ---------------------------------------------------------------------


class _PpmScanner:
    """Header tokenizer that remembers where it is, for error messages."""

    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def fail(self, why: str, at: int | None = None):
        raise DataError(f"PPM parse error at byte {self.pos if at is None else at}: {why}")

    def token(self) -> bytes:
        while self.pos < len(self.blob):
            c = self.blob[self.pos:self.pos + 1]
            if c == b"#":
                while self.pos < len(self.blob) and self.blob[self.pos:self.pos + 1] != b"\n":
                    self.pos += 1
            elif c.isspace():
                self.pos += 1
            else:
                break
        if self.pos >= len(self.blob):
            self.fail("unexpected end of header")
        self.tok_start = self.pos
        while self.pos < len(self.blob) and not self.blob[self.pos:self.pos + 1].isspace():
            self.pos += 1
        return self.blob[self.tok_start:self.pos]

    def int_token(self, what: str) -> int:
        tok = self.token()
        if not tok.isdigit():
            self.fail(f"expected {what}, got {tok!r}", self.tok_start)
        return int(tok)


def decode_ppm(blob: bytes) -> np.ndarray:
    s = _PpmScanner(blob)
    if s.token() != b"P6":
        s.fail("not a binary PPM (magic != P6)", s.tok_start)
    width = s.int_token("width")
    height = s.int_token("height")
    maxval = s.int_token("maxval")
    if maxval != 255:
        s.fail(f"unsupported maxval {maxval}, only 255")
    if width < 1 or height < 1:
        s.fail(f"bad dimensions {width}x{height}")
    s.pos += 1  # exactly one whitespace byte separates header and payload
    need = width * height * 3
    payload = blob[s.pos:s.pos + need]
    if len(payload) != need:
        raise DataError(f"PPM payload truncated at byte {s.pos + len(payload)}: "
                        f"need {need} bytes, have {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def encode_ppm(img: np.ndarray) -> bytes:
    img = _require_rgb_u8(img)
    h, w, _ = img.shape
    return b"P6\n%d %d\n255\n" % (w, h) + img.tobytes()


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_ppm(f.read())


def write_ppm(path, img: np.ndarray):
    with open(path, "wb") as f:
        f.write(encode_ppm(img))


# -- PNG ---------------------------------------------------------------------


def _png_chunk(kind: bytes, payload: bytes) -> bytes:
    body = kind + payload
    return struct.pack(">I", len(payload)) + body + struct.pack(">I", zlib.crc32(body))


def encode_png(img: np.ndarray) -> bytes:
    img = _require_rgb_u8(img)
    h, w, _ = img.shape
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    raw = b"".join(b"\x00" + img[row].tobytes() for row in range(h))
    return (PNG_SIGNATURE
            + _png_chunk(b"IHDR", ihdr)
            + _png_chunk(b"IDAT", zlib.compress(raw, 9))
            + _png_chunk(b"IEND", b""))


def decode_png(blob: bytes) -> np.ndarray:
    if blob[:8] != PNG_SIGNATURE:
        raise DataError("PNG parse error: bad signature")
    pos = 8
    idat = []
    header = None
    while pos < len(blob):
        if pos + 8 > len(blob):
            raise DataError(f"PNG parse error at byte {pos}: truncated chunk header")
        (length,) = struct.unpack(">I", blob[pos:pos + 4])
        kind = blob[pos + 4:pos + 8]
        body = blob[pos + 8:pos + 8 + length]
        if len(body) != length or pos + 12 + length > len(blob):
            raise DataError(f"PNG parse error at byte {pos}: truncated {kind!r} chunk")
        (crc,) = struct.unpack(">I", blob[pos + 8 + length:pos + 12 + length])
        if crc != zlib.crc32(kind + body):
            raise DataError(f"PNG parse error at byte {pos}: CRC mismatch in {kind!r}")
        if kind == b"IHDR":
            header = struct.unpack(">IIBBBBB", body)
        elif kind == b"IDAT":
            idat.append(body)
        elif kind == b"IEND":
            break
        pos += 12 + length
    if header is None:
        raise DataError("PNG parse error: missing IHDR")
    w, h, depth, color, comp, filt, interlace = header
    if depth != 8 or color != 2:
        raise DataError(f"PNG unsupported format: bit depth {depth}, color type {color} (need 8-bit RGB)")
    if comp != 0 or filt != 0 or interlace != 0:
        raise DataError("PNG unsupported format: nonzero compression/filter/interlace method")
    if not idat:
        raise DataError("PNG parse error: no IDAT data")
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as e:
        raise DataError(f"PNG parse error: IDAT inflate failed ({e})")
    stride = w * 3
    if len(raw) != h * (stride + 1):
        raise DataError(f"PNG parse error: scanline data is {len(raw)} bytes, expected {h * (stride + 1)}")
    out = np.zeros((h, stride), dtype=np.uint8)
    bpp = 3
    for row in range(h):
        ftype = raw[row * (stride + 1)]
        line = np.frombuffer(raw, dtype=np.uint8,
                             count=stride, offset=row * (stride + 1) + 1).astype(np.int64)
        prior = out[row - 1].astype(np.int64) if row else np.zeros(stride, dtype=np.int64)
        if ftype == 0:
            recon = line
        elif ftype == 2:
            recon = (line + prior) & 0xFF
        elif ftype in (1, 3, 4):
            recon = np.zeros(stride, dtype=np.int64)
            for i in range(stride):
                a = recon[i - bpp] if i >= bpp else 0
                b = prior[i]
                c = prior[i - bpp] if i >= bpp else 0
                if ftype == 1:
                    pred = a
                elif ftype == 3:
                    pred = (a + b) // 2
                else:
                    p = a + b - c
                    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                    pred = a if pa <= pb and pa <= pc else (b if pb <= pc else c)
                recon[i] = (line[i] + pred) & 0xFF
        else:
            raise DataError(f"PNG parse error: unknown filter type {ftype} on row {row}")
        out[row] = recon.astype(np.uint8)
    return out.reshape(h, w, 3)


def read_png(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_png(f.read())


def write_png(path, img: np.ndarray):
    with open(path, "wb") as f:
        f.write(encode_png(img))


# -- dispatch ----------------------------------------------------------------


def read_image(path) -> np.ndarray:
    name = str(path).lower()
    if name.endswith(".ppm"):
        return read_ppm(path)
    if name.endswith(".png"):
        return read_png(path)
    raise DataError(f"unsupported image extension: {path}")


def write_image(path, img: np.ndarray):
    name = str(path).lower()
    if name.endswith(".ppm"):
        write_ppm(path, img)
    elif name.endswith(".png"):
        write_png(path, img)
    else:
        raise DataError(f"unsupported image extension: {path}")
