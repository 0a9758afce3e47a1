"""Image file I/O: binary PGM (P5) and PNG.

PGM is the canonical interchange format for the pipeline because the round
trip is bit-exact: 1 byte per pixel for maxval <= 255, otherwise 2 bytes
big-endian, exactly as the format specifies.  PNG support covers 8/16-bit
grayscale plus reading 24-bit color for grayscale conversion.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from histostack.image import Image, to_grayscale


def write_pgm(path, img: Image) -> None:
    path = Path(path)
    header = f"P5\n{img.width} {img.height}\n{img.max_gray}\n".encode("ascii")
    if img.max_gray <= 255:
        payload = img.pixels.astype(np.uint8).tobytes()
    else:
        payload = img.pixels.astype(">u2").tobytes()
    path.write_bytes(header + payload)


def _parse_pgm_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` whitespace/comment-separated integer tokens, returning
    them with the offset one byte past the final separator."""
    tokens: list[int] = []
    i = 0
    while len(tokens) < count:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i] == ord("#"):
            while i < len(data) and data[i] != ord("\n"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError("truncated PGM header")
        tokens.append(int(data[i:j]))
        i = j
    return tokens, i + 1  # single whitespace byte after maxval


def read_pgm(path) -> Image:
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise ValueError(f"not a binary PGM (P5) file: {path}")
    (width, height, maxval), offset = _parse_pgm_tokens(data[2:], 3)
    offset += 2
    if not (0 < maxval <= 65535):
        raise ValueError(f"unsupported PGM maxval {maxval}")
    n = width * height
    if maxval <= 255:
        px = np.frombuffer(data, dtype=np.uint8, count=n, offset=offset)
    else:
        px = np.frombuffer(data, dtype=">u2", count=n, offset=offset)
    return Image(px.reshape(height, width).astype(np.uint16), maxval)


def write_png(path, img: Image) -> None:
    if img.max_gray <= 255:
        PILImage.fromarray(img.pixels.astype(np.uint8), mode="L").save(path)
    else:
        # Pillow infers I;16 from the uint16 dtype; passing mode= is deprecated
        PILImage.fromarray(np.ascontiguousarray(img.pixels)).save(path)


def read_png(path) -> Image:
    """Read a PNG; 24-bit color is converted to grayscale on load."""
    with PILImage.open(path) as pim:
        if pim.mode in ("RGB", "RGBA"):
            rgb = np.asarray(pim.convert("RGB"))
            return to_grayscale(rgb)
        if pim.mode == "L":
            return Image(np.asarray(pim, dtype=np.uint16), 255)
        if pim.mode in ("I;16", "I"):
            arr = np.asarray(pim).astype(np.int64)
            if arr.min() < 0 or arr.max() > 65535:
                raise ValueError(f"PNG values out of 16-bit range: {path}")
            return Image(arr.astype(np.uint16), 65535)
        raise ValueError(f"unsupported PNG mode {pim.mode!r}: {path}")


def read_image(path) -> Image:
    """Dispatch on file suffix (.pgm or .png)."""
    suffix = Path(path).suffix.lower()
    if suffix == ".pgm":
        return read_pgm(path)
    if suffix == ".png":
        return read_png(path)
    raise ValueError(f"unsupported image format: {path}")


def write_image(path, img: Image) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".pgm":
        write_pgm(path, img)
    elif suffix == ".png":
        write_png(path, img)
    else:
        raise ValueError(f"unsupported image format: {path}")
