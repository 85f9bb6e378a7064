"""Portable Float Map (PFM) reader/writer.

Depth maps are stored as grayscale 'Pf' files, 32-bit floats, scale -1.0
(little-endian), rows ordered bottom-up per the format. Color 'PF' files are
readable for completeness.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PfmError(ValueError):
    pass


def _read_token(f) -> bytes:
    # tokens separated by any whitespace; comments not part of the spec
    tok = b""
    while True:
        c = f.read(1)
        if c == b"":
            raise PfmError("unexpected end of file in PFM header")
        if c.isspace():
            if tok:
                return tok
            continue
        tok += c


def read_pfm(path) -> tuple[np.ndarray, float]:
    """Returns (data, scale). data is float32, (H, W) for 'Pf' or (H, W, 3) for 'PF',
    row 0 at the top."""
    path = Path(path)
    with open(path, "rb") as f:
        header = _read_token(f)
        if header == b"Pf":
            channels = 1
        elif header == b"PF":
            channels = 3
        else:
            raise PfmError(f"{path}: not a PFM file (header {header!r})")
        try:
            width = int(_read_token(f))
            height = int(_read_token(f))
            scale = float(_read_token(f))
        except ValueError as e:
            raise PfmError(f"{path}: malformed PFM header: {e}") from e
        if width <= 0 or height <= 0:
            raise PfmError(f"{path}: bad dimensions {width}x{height}")
        if scale == 0.0:
            raise PfmError(f"{path}: zero scale")
        endian = "<" if scale < 0 else ">"
        count = width * height * channels
        raw = f.read(count * 4)
        if len(raw) != count * 4:
            raise PfmError(f"{path}: truncated pixel data")
        data = np.frombuffer(raw, dtype=endian + "f4").astype(np.float32)
    if channels == 1:
        data = data.reshape(height, width)
    else:
        data = data.reshape(height, width, 3)
    # PFM stores the bottom row first
    return data[::-1].copy(), abs(scale)


def write_pfm(path, data: np.ndarray, scale: float = 1.0) -> None:
    """Writes grayscale (H, W) or color (H, W, 3) float32 data, little-endian."""
    path = Path(path)
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise PfmError(f"cannot write PFM with shape {data.shape}")
    if scale <= 0:
        raise PfmError("scale must be positive (sign encodes endianness)")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(f"{-scale:g}\n".encode("ascii"))  # negative: little-endian
        f.write(data[::-1].astype("<f4").tobytes())
