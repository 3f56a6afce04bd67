"""Image file I/O: 8-bit PNG (via Pillow) and float PFM."""

from __future__ import annotations

import numpy as np
from PIL import Image


def write_png(path, image: np.ndarray):
    """Save an HxW or HxWx3 float image in [0,1] as 8-bit PNG."""
    arr = (np.clip(image, 0.0, 1.0) * 255).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=float) / 255.0


def write_pfm(path, image: np.ndarray):
    """Save a float32 PFM (little-endian, bottom-up per the format spec)."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        header = b"Pf"
        h, w = image.shape
    elif image.ndim == 3 and image.shape[2] == 3:
        header = b"PF"
        h, w = image.shape[:2]
    else:
        raise ValueError("PFM supports HxW or HxWx3 images")
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")  # negative scale => little-endian
        f.write(np.flipud(image).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise ValueError("not a PFM file")
        w, h = (int(v) for v in f.readline().split())
        scale = float(f.readline())
        channels = 3 if header == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(w * h * channels * 4), dtype=dtype)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float32).copy()
