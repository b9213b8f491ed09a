"""Frame input/output: 8-bit sRGB PNG, 8-bit Y4M (C420 / C444) and raw float dumps.

In memory, frames are linear-RGB float arrays of shape (H, W, 3).
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image


def srgb_to_linear(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(x) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * x ** (1.0 / 2.4) - 0.055)


def to_uint8(linear) -> np.ndarray:
    """Clamp, sRGB-encode and round to 8 bits."""
    return np.round(linear_to_srgb(linear) * 255.0).astype(np.uint8)


def from_uint8(pixels) -> np.ndarray:
    return srgb_to_linear(np.asarray(pixels, dtype=np.float64) / 255.0)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def write_png(path, image) -> None:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) image")
    Image.fromarray(to_uint8(img), mode="RGB").save(path)


def write_raw(path, image) -> None:
    """Dump a float image as little-endian float32 with an 8-byte (H, W) header."""
    img = np.asarray(image, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(np.asarray(img.shape[:2], dtype="<u4").tobytes())
        fh.write(img.tobytes())


def read_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        h, w = np.frombuffer(fh.read(8), dtype="<u4")
        return np.frombuffer(fh.read(), dtype="<f4").reshape(int(h), int(w), 3).astype(np.float64)


def _ycbcr_to_rgb(y, cb, cr) -> np.ndarray:
    """Limited-range BT.601 to (gamma-encoded) RGB in [0, 1]."""
    yy = (y.astype(np.float64) - 16.0) / 219.0
    pb = (cb.astype(np.float64) - 128.0) / 224.0
    pr = (cr.astype(np.float64) - 128.0) / 224.0
    r = yy + 1.402 * pr
    g = yy - (0.299 * 1.402 / 0.587) * pr - (0.114 * 1.772 / 0.587) * pb
    b = yy + 1.772 * pb
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)


def read_y4m(path) -> list[np.ndarray]:
    """Decode an 8-bit 4:2:0 or 4:4:4 YUV4MPEG2 file into linear-RGB frames."""
    data = Path(path).read_bytes()
    end = data.find(b"\n")
    if not data.startswith(b"YUV4MPEG2") or end < 0:
        raise ValueError(f"{path}: not a YUV4MPEG2 file")
    params = {tok[:1].decode(): tok[1:].decode() for tok in data[:end].split()[1:]}
    width, height = int(params["W"]), int(params["H"])
    chroma = params.get("C", "420jpeg")
    if chroma == "444":
        cw, ch = width, height
    elif chroma in ("420", "420jpeg", "420paldv", "420mpeg2"):
        cw, ch = (width + 1) // 2, (height + 1) // 2
    else:
        raise ValueError(f"{path}: unsupported chroma format C{chroma} at frame 0")
    ysize, csize = width * height, cw * ch
    frames = []
    pos = end + 1
    while pos < len(data):
        k = len(frames)
        nl = data.find(b"\n", pos)
        if nl < 0 or not data[pos:nl].startswith(b"FRAME"):
            raise ValueError(f"{path}: bad FRAME marker at frame {k}")
        pos = nl + 1
        if pos + ysize + 2 * csize > len(data):
            raise ValueError(f"{path}: truncated data at frame {k}")
        buf = np.frombuffer(data, dtype=np.uint8, count=ysize + 2 * csize, offset=pos)
        pos += ysize + 2 * csize
        y = buf[:ysize].reshape(height, width)
        cb = buf[ysize:ysize + csize].reshape(ch, cw)
        cr = buf[ysize + csize:].reshape(ch, cw)
        if (cw, ch) != (width, height):
            cb = np.repeat(np.repeat(cb, 2, axis=0), 2, axis=1)[:height, :width]
            cr = np.repeat(np.repeat(cr, 2, axis=0), 2, axis=1)[:height, :width]
        frames.append(srgb_to_linear(_ycbcr_to_rgb(y, cb, cr)))
    return frames


def write_png_sequence(directory, frames, prefix: str = "frame_") -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, f in enumerate(frames):
        p = d / f"{prefix}{k:04d}.png"
        write_png(p, f)
        paths.append(p)
    return paths


def load_frames(source) -> np.ndarray:
    """Frames of a PNG directory (lexicographic file order) or a Y4M file as a (T, H, W, 3) array."""
    source = Path(source)
    if source.is_dir():
        names = sorted(n for n in os.listdir(source) if n.lower().endswith(".png"))
        if not names:
            raise ValueError(f"{source}: no PNG frames")
        frames = [read_png(source / n) for n in names]
    elif source.suffix.lower() == ".y4m":
        frames = read_y4m(source)
    else:
        raise ValueError(f"{source}: expected a directory of PNGs or a .y4m file")
    if not frames:
        raise ValueError(f"{source}: no frames")
    shape = frames[0].shape
    for k, f in enumerate(frames):
        if f.shape != shape:
            raise ValueError(f"{source}: frame {k} has size {f.shape[1]}x{f.shape[0]}, "
                             f"expected {shape[1]}x{shape[0]}")
    return np.stack(frames)
