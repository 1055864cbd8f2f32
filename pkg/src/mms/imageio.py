"""Binary PPM (P6) / PGM (P5) reading and writing, 8-bit maxval only."""

import os

import numpy as np

from .patches import ImageBuf


def to_bytes(img):
    """Quantise a [0, 1] image to uint8 with round-half-up."""
    return np.floor(np.clip(img.data, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def encode_pnm(img):
    """Encode as P5 when single-channel, P6 otherwise."""
    px = to_bytes(img)
    h, w, c = px.shape
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def write_pnm(path, img):
    with open(path, "wb") as fh:
        fh.write(encode_pnm(img))


def _tokens(buf, count, pos):
    out = []
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated header")
        out.append(buf[start:pos])
    return out, pos + 1


def decode_pnm(buf):
    (magic, w, h, maxval), pos = _tokens(buf, 4, 0)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported PNM magic {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"only maxval 255 is supported, got {maxval}")
    c = 1 if magic == b"P5" else 3
    need = w * h * c
    raw = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos) if len(buf) - pos >= need else None
    if raw is None:
        raise ValueError("truncated pixel data")
    return ImageBuf(raw.reshape(h, w, c).astype(np.float64) / 255.0)


def read_pnm(path):
    try:
        with open(path, "rb") as fh:
            return decode_pnm(fh.read())
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {os.fspath(path)}: {exc}") from exc
