"""Binary PGM (P5) and PPM (P6) readers/writers, maxval 255.

Float images in [0, 1] are quantized with round-to-nearest on write and
mapped back to float32 on read.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ContractViolation

Array = np.ndarray


def _read_header(buf: bytes, magic: bytes) -> tuple[int, int, int]:
    if not buf.startswith(magic):
        raise ContractViolation(f"expected {magic.decode()} file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(buf[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ContractViolation(f"only maxval 255 supported, got {maxval}")
    return w, h, pos


def read_pgm(path: str) -> Array:
    with open(path, "rb") as fh:
        buf = fh.read()
    w, h, pos = _read_header(buf, b"P5")
    data = np.frombuffer(buf, dtype=np.uint8, count=h * w, offset=pos)
    return (data.reshape(h, w).astype(np.float32)) / 255.0


def read_ppm(path: str) -> Array:
    with open(path, "rb") as fh:
        buf = fh.read()
    w, h, pos = _read_header(buf, b"P6")
    data = np.frombuffer(buf, dtype=np.uint8, count=h * w * 3, offset=pos)
    return (data.reshape(h, w, 3).astype(np.float32)) / 255.0


def _quantize(image: Array) -> Array:
    img = np.asarray(image, dtype=np.float64)
    return np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_pgm(path: str, image: Array) -> None:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ContractViolation(f"PGM wants an H×W plane, got shape {img.shape}")
    payload = _quantize(img)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    _atomic_write(path, header + payload.tobytes())


def write_ppm(path: str, image: Array) -> None:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractViolation(f"PPM wants an H×W×3 image, got shape {img.shape}")
    payload = _quantize(img)
    header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    _atomic_write(path, header + payload.tobytes())


def _atomic_write(path: str, blob: bytes) -> None:
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
