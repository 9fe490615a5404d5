"""Binary PPM (P6, maxval 255) reading/writing and procedural test textures."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    out, pos, n = [], 0, len(data)
    while len(out) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PPM header")
        out.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    if pos >= n or not data[pos:pos + 1].isspace():
        raise ImageFormatError("malformed PPM header")
    return out, pos + 1


def decode_ppm(data: bytes) -> np.ndarray:
    """P6 bytes to a (3, H, W) float32 array in [0, 1]."""
    magic, w, h, maxval = None, 0, 0, 0
    try:
        (magic, ws, hs, ms), pos = _tokens(data, 4)
        w, h, maxval = int(ws), int(hs), int(ms)
    except ValueError as exc:
        raise ImageFormatError(f"bad PPM header: {exc}") from exc
    if magic != b"P6":
        raise ImageFormatError(f"unsupported image type {magic!r}, expected P6")
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval}, expected 255")
    if w <= 0 or h <= 0:
        raise ImageFormatError(f"bad image size {w}x{h}")
    need = w * h * 3
    raster = data[pos:pos + need]
    if len(raster) != need:
        raise ImageFormatError(f"PPM raster truncated: need {need} bytes, have {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float32) / 255.0


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim == 4 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 3 or img.shape[0] != 3:
        raise ImageFormatError(f"expected (3,H,W) image, got {img.shape}")
    q = np.clip(np.floor(np.asarray(img, np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)
    _, h, w = q.shape
    return f"P6\n{w} {h}\n255\n".encode() + q.transpose(1, 2, 0).tobytes()


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_ppm(path, img: np.ndarray) -> None:
    """Write atomically so a failure never leaves a partial file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    tmp.write_bytes(encode_ppm(img))
    os.replace(tmp, path)


def to_uint8_grid(img: np.ndarray) -> np.ndarray:
    """Quantize to the 8-bit grid PPM stores, returned as float in [0, 1]."""
    return np.clip(np.floor(np.asarray(img, np.float64) * 255.0 + 0.5), 0, 255).astype(np.float32) / 255.0


def procedural_texture(height: int, width: int, rng: np.random.Generator,
                       n_waves: int = 6, n_shapes: int = 5) -> np.ndarray:
    """Colored sum of oriented sinusoids overlaid with flat discs and boxes.

    Gives both smooth gradients and sharp edges, which is enough structure for
    the codec to have something to spend bits on.
    """
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    img = np.zeros((3, height, width))
    for _ in range(n_waves):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.03, 0.35)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        img += rng.uniform(-0.15, 0.15, size=(3, 1, 1)) * wave
    img += rng.uniform(0.35, 0.65, size=(3, 1, 1))
    for _ in range(n_shapes):
        color = rng.uniform(0, 1, size=(3, 1))
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        r = rng.uniform(0.08, 0.3) * min(height, width)
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < 0.6 * r)
        img[:, mask] = 0.5 * img[:, mask] + 0.5 * color
    return np.clip(img, 0, 1).astype(np.float32)


def list_images(folder) -> list[Path]:
    return sorted(p for p in Path(folder).iterdir() if p.suffix.lower() in (".ppm", ".pnm"))


def load_patches(folder, size: int, rng: np.random.Generator, per_image: int = 4) -> np.ndarray:
    """Random ``size`` x ``size`` crops from every readable PPM in ``folder``."""
    out = []
    for p in list_images(folder):
        try:
            img = read_ppm(p)
        except (OSError, ImageFormatError):
            continue
        _, h, w = img.shape
        if h < size or w < size:
            continue
        for _ in range(per_image):
            i = int(rng.integers(0, h - size + 1))
            j = int(rng.integers(0, w - size + 1))
            out.append(img[:, i:i + size, j:j + size])
    if not out:
        return np.zeros((0, 3, size, size), np.float32)
    return np.stack(out)
