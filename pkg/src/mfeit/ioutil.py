"""Small binary-format helpers: FNV-1a checksums and PGM images."""

import numpy as np

from mfeit.errors import DataFormatError

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data, state=_FNV_OFFSET):
    """64-bit FNV-1a over a bytes-like object; `state` allows chunked use."""
    h = state
    for b in bytes(data):
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def hash_seed(seed, index):
    """Stable per-item RNG seed derived from a run seed and an item index."""
    payload = int(seed).to_bytes(8, "little", signed=False) + int(index).to_bytes(
        8, "little", signed=False
    )
    return fnv1a64(payload)


def write_pgm(path, image):
    """Write a float image with values in [0, 1] as an 8-bit binary PGM."""
    arr = np.asarray(image, dtype=float)
    if arr.ndim != 2:
        raise ValueError(f"PGM image must be 2-D, got shape {arr.shape}")
    level = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = level.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(level.tobytes())


def read_pgm(path):
    """Read a binary PGM written by write_pgm; returns floats in [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(b"P5"):
        raise DataFormatError(f"{path}: not a binary PGM", offset=0)
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError:
        raise DataFormatError(f"{path}: bad PGM header", offset=2) from None
    if maxval != 255 or len(raw) - pos < w * h:
        raise DataFormatError(f"{path}: truncated or non-8-bit PGM", offset=pos)
    data = np.frombuffer(raw[pos : pos + w * h], dtype=np.uint8)
    return data.reshape(h, w).astype(float) / 255.0


def write_csv(path, header, rows):
    """Write rows of scalars as CSV with a header line."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)
