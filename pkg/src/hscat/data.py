"""Image I/O, training crops and a small synthetic corpus."""

from __future__ import annotations

import logging
import os
import re
from pathlib import Path
from typing import Iterator

import numpy as np

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".ppm", ".pnm", ".png")


class ImageError(ValueError):
    """Unreadable, malformed or unusable image data."""


_PPM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_ppm(path) -> np.ndarray:
    """Read a binary (P6) PPM with maxval <= 255 into an (H, W, 3) uint8 array."""
    raw = Path(path).read_bytes()
    pos, fields = 0, []
    for _ in range(4):
        m = _PPM_TOKEN.match(raw, pos)
        if m is None:
            raise ImageError(f"{path}: truncated PPM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P6":
        raise ImageError(f"{path}: not a binary PPM (magic {fields[0]!r})")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as e:
        raise ImageError(f"{path}: malformed PPM header") from e
    if maxval <= 0 or maxval > 255:
        raise ImageError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    pos += 1  # single whitespace byte after maxval
    body = raw[pos:pos + w * h * 3]
    if len(body) != w * h * 3:
        raise ImageError(f"{path}: pixel data truncated ({len(body)} of {w * h * 3} bytes)")
    img = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    if maxval != 255:
        img = np.round(img.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return img


def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = to_uint8(img)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(img).tobytes())


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def read_image(path) -> np.ndarray:
    """(H, W, 3) float32 in [0, 1] from PPM or (if Pillow is installed) PNG."""
    suffix = Path(path).suffix.lower()
    if suffix in (".ppm", ".pnm"):
        img = read_ppm(path)
    elif suffix == ".png":
        try:
            from PIL import Image
        except ImportError as e:  # pragma: no cover - depends on environment
            raise ImageError("PNG input needs Pillow installed") from e
        try:
            with Image.open(path) as im:
                img = np.asarray(im.convert("RGB"), dtype=np.uint8)
        except OSError as e:
            raise ImageError(f"{path}: {e}") from e
    else:
        raise ImageError(f"{path}: unsupported image type {suffix!r}")
    return img.astype(np.float32) / 255.0


def write_image(path, image: np.ndarray) -> None:
    if Path(path).suffix.lower() == ".png":
        from PIL import Image
        Image.fromarray(to_uint8(image)).save(path)
    else:
        write_ppm(path, image)


def list_images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise ImageError(f"{directory}: not a directory")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_training_set(path, min_size: int = 0) -> list[np.ndarray]:
    """All readable images in ``path`` at least ``min_size`` on each side.

    Unreadable or undersized files are skipped with a warning; an empty result
    is an error.
    """
    images = []
    files = list_images(path)
    for p in files:
        try:
            img = read_image(p)
        except ImageError as e:
            log.warning("skipping %s: %s", p.name, e)
            continue
        if min(img.shape[:2]) < min_size:
            log.warning("skipping %s: %dx%d is smaller than crop %d", p.name, img.shape[0], img.shape[1], min_size)
            continue
        images.append(img)
    if not images:
        raise ImageError(f"{path}: no usable training images among {len(files)} files")
    return images


def random_crop(image: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    h, w = image.shape[:2]
    if h < size or w < size:
        raise ImageError(f"image {h}x{w} is smaller than crop {size}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return image[top:top + size, left:left + size]


def crop_batches(images: list[np.ndarray], size: int, batch: int,
                 rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless stream of (batch, size, size, 3) crops; order fixed by ``rng``."""
    while True:
        picks = rng.integers(0, len(images), size=batch)
        yield np.stack([random_crop(images[i], size, rng) for i in picks])


def synthetic_images(count: int, size: int = 64, seed: int = 0) -> list[np.ndarray]:
    """Deterministic toy corpus: smooth colour fields, hard-edged shapes and fine texture.

    Returned images are already on the 8-bit grid so they survive a PPM round trip.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    out = []
    for _ in range(count):
        img = np.empty((size, size, 3))
        for c in range(3):
            field = rng.uniform(0.2, 0.8)
            for _ in range(3):
                fx, fy = rng.uniform(0.5, 3.0, size=2)
                ph = rng.uniform(0, 2 * np.pi)
                field = field + rng.uniform(0.05, 0.2) * np.cos(2 * np.pi * (fx * xx + fy * yy) + ph)
            img[..., c] = field
        for _ in range(rng.integers(2, 5)):
            colour = rng.uniform(0, 1, size=3)
            if rng.random() < 0.5:
                y0, x0 = rng.integers(0, size - 8, size=2)
                y1, x1 = y0 + rng.integers(6, size // 2), x0 + rng.integers(6, size // 2)
                mask = (yy * size >= y0) & (yy * size < y1) & (xx * size >= x0) & (xx * size < x1)
            else:
                cy, cx = rng.uniform(0.2, 0.8, size=2)
                r = rng.uniform(0.08, 0.25)
                mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
            img[mask] = 0.6 * colour + 0.4 * img[mask]
        img += rng.normal(0, 0.02, size=img.shape)
        out.append(to_uint8(img).astype(np.float32) / 255.0)
    return out


def write_corpus(directory, images: list[np.ndarray], prefix: str = "img") -> list[str]:
    os.makedirs(directory, exist_ok=True)
    names = []
    for i, img in enumerate(images):
        name = f"{prefix}{i:03d}.ppm"
        write_ppm(os.path.join(directory, name), img)
        names.append(name)
    return names
