"""PFM and PNG image files."""
from __future__ import annotations

import numpy as np

from .core import InvalidArgument


def write_pfm(img, path):
    """Little-endian color PFM ("PF", scale -1.0), rows stored bottom to top."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] != 3:
        raise InvalidArgument("expected an (H, W, 3) image")
    if not np.all(np.isfinite(a)):
        raise InvalidArgument("image has non-finite pixels")
    h, w, _ = a.shape
    with open(path, "wb") as f:
        f.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(a[::-1].astype("<f4")).tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        data = f.read()
    parts, pos = [], 0
    while len(parts) < 4:
        end = data.index(b"\n", pos)
        parts += data[pos:end].split()
        pos = end + 1
    kind, w, h, scale = parts[0], int(parts[1]), int(parts[2]), float(parts[3])
    if kind != b"PF":
        raise InvalidArgument("only color PFM is supported")
    dt = "<f4" if scale < 0 else ">f4"
    a = np.frombuffer(data, dt, h * w * 3, pos).reshape(h, w, 3)
    return a[::-1].astype(np.float32)


def to_srgb8(img):
    """Clamp to [0, 1] and apply the sRGB transfer curve (linear toe, 2.4
    power segment; about gamma 2.2 overall). Linear 0.5 maps to 188."""
    a = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    e = np.where(a <= 0.0031308, 12.92 * a, 1.055 * a ** (1.0 / 2.4) - 0.055)
    return np.round(255.0 * e).astype(np.uint8)


def write_png(img, path):
    from PIL import Image

    a = np.asarray(img, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise InvalidArgument("image has non-finite pixels")
    Image.fromarray(to_srgb8(a), "RGB").save(path)


def write_image(img, path, fmt: str | None = None):
    fmt = (fmt or str(path).rsplit(".", 1)[-1]).lower()
    if fmt == "pfm":
        write_pfm(img, path)
    elif fmt == "png":
        write_png(img, path)
    else:
        raise InvalidArgument(f"unknown image format {fmt!r}")
