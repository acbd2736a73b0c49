"""Image I/O and the training data pipeline.

Canonical on-disk format is binary 8-bit PGM (P5). In memory images live on
the [0,1] scale. The pipeline mirrors the usual denoising recipe: rescale
each source image at several factors, cut overlapping square patches, add
flipped copies, then stream seeded-shuffled minibatches with fresh Gaussian
noise drawn per epoch. Noisy values are NOT clipped: the noise model is
unbounded Gaussian and clipping would bias the SURE estimate. Clipping
happens only when writing 8-bit output.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .loss import NoiseModel
from .numerics import RngStream, Tensor


class PgmError(Exception):
    """Malformed or unsupported PGM data."""


class PatchCacheError(Exception):
    """Malformed patch cache file."""


@dataclass
class GrayImage:
    """Grayscale image, row-major float pixels in [0,1]."""
    width: int
    height: int
    pixels: np.ndarray  # (height, width) float64

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.shape != (self.height, self.width):
            raise ValueError(
                f"pixel array {self.pixels.shape} does not match "
                f"{self.height}x{self.width}")

    @classmethod
    def from_array(cls, pixels: np.ndarray) -> "GrayImage":
        pixels = np.asarray(pixels, dtype=np.float64)
        h, w = pixels.shape
        return cls(width=w, height=h, pixels=pixels)


@dataclass
class PatchSet:
    patch_size: int
    patches: list[np.ndarray] = field(default_factory=list)  # (size, size) arrays
    provenance: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.patches)


@dataclass
class Batch:
    noisy: Tensor   # (B,1,h,w)
    clean: Tensor | None = None
    indices: np.ndarray | None = None


# -- PGM I/O -----------------------------------------------------------------

def _read_pgm_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    # skip whitespace and '#' comments between header tokens
    while pos < len(buf):
        ch = buf[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
        else:
            break
    start = pos
    while pos < len(buf) and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise PgmError("truncated PGM header")
    return buf[start:pos], pos


def load_pgm(path) -> GrayImage:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise PgmError(f"cannot read {path}: {e}") from e
    if buf[:2] == b"P2":
        raise PgmError("ASCII PGM (P2) is not supported; use binary P5")
    if buf[:2] != b"P5":
        raise PgmError(f"not a binary PGM file: {path}")
    pos = 2
    w_tok, pos = _read_pgm_token(buf, pos)
    h_tok, pos = _read_pgm_token(buf, pos)
    maxval_tok, pos = _read_pgm_token(buf, pos)
    try:
        w, h, maxval = int(w_tok), int(h_tok), int(maxval_tok)
    except ValueError as e:
        raise PgmError(f"malformed PGM header in {path}") from e
    if maxval != 255:
        raise PgmError(f"unsupported maxval {maxval}; only 8-bit (255) PGM")
    pos += 1  # exactly one whitespace byte after maxval
    data = buf[pos:pos + w * h]
    if len(data) < w * h:
        raise PgmError(f"truncated pixel data in {path}")
    pixels = np.frombuffer(data, dtype=np.uint8).reshape(h, w) / 255.0
    return GrayImage(width=w, height=h, pixels=pixels)


def save_pgm(image: GrayImage, path) -> None:
    path = Path(path)
    raw = np.clip(np.rint(image.pixels * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{image.width} {image.height}\n255\n".encode()
    path.write_bytes(header + raw.tobytes())


# -- geometric ops -----------------------------------------------------------

def rescale(image: GrayImage, factor: float) -> GrayImage:
    """Bilinear downscale. Output extents = floor(extent * factor).

    Sample positions use the pixel-center convention
    src = (dst + 0.5) / factor - 0.5, clamped to the image.
    """
    if not 0 < factor <= 1:
        raise ValueError("factor must be in (0, 1]")
    if factor == 1.0:
        return GrayImage.from_array(image.pixels.copy())
    out_h = int(image.height * factor)
    out_w = int(image.width * factor)
    if out_h < 1 or out_w < 1:
        raise ValueError("rescaled image would be smaller than 1x1")
    ys = np.clip((np.arange(out_h) + 0.5) / factor - 0.5, 0, image.height - 1)
    xs = np.clip((np.arange(out_w) + 0.5) / factor - 0.5, 0, image.width - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, image.height - 1)
    x1 = np.minimum(x0 + 1, image.width - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    p = image.pixels
    out = (p[np.ix_(y0, x0)] * (1 - wy) * (1 - wx)
           + p[np.ix_(y0, x1)] * (1 - wy) * wx
           + p[np.ix_(y1, x0)] * wy * (1 - wx)
           + p[np.ix_(y1, x1)] * wy * wx)
    return GrayImage.from_array(out)


def extract_patches(image: GrayImage, size: int = 40, stride: int = 10,
                    source_id: str = "") -> PatchSet:
    """Overlapping square patches at top-left offsets 0, stride, 2*stride, ...

    An image smaller than the patch yields an empty set (caller may warn).
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    out = PatchSet(patch_size=size)
    if image.height < size or image.width < size:
        return out
    for top in range(0, image.height - size + 1, stride):
        for left in range(0, image.width - size + 1, stride):
            out.patches.append(image.pixels[top:top + size, left:left + size].copy())
            out.provenance.append(source_id)
    return out


AUGMENT_MODES = ("none", "hflip", "vflip", "rot90", "rot180", "rot270")


def augment(patches: PatchSet, modes=("none", "hflip")) -> PatchSet:
    """Each selected exact pixel permutation of each patch, in mode order."""
    for m in modes:
        if m not in AUGMENT_MODES:
            raise ValueError(f"unknown augmentation mode {m!r}")
    out = PatchSet(patch_size=patches.patch_size)
    for mode in modes:
        for p, src in zip(patches.patches, patches.provenance):
            if mode == "none":
                q = p.copy()
            elif mode == "hflip":
                q = p[:, ::-1].copy()
            elif mode == "vflip":
                q = p[::-1, :].copy()
            elif mode == "rot90":
                q = np.rot90(p, 1).copy()
            elif mode == "rot180":
                q = np.rot90(p, 2).copy()
            else:
                q = np.rot90(p, 3).copy()
            out.patches.append(q)
            out.provenance.append(f"{src}:{mode}" if src else mode)
    return out


# -- noise and batching --------------------------------------------------------

def add_gaussian_noise(clean: Tensor, noise: NoiseModel, rng: RngStream) -> Tensor:
    """y = x + w with w ~ N(0, sigma^2 I); not clipped."""
    w = rng.normal(clean.shape, 0.0, noise.sigma)
    return Tensor(clean.data + w.astype(clean.dtype))


def batches(patches: PatchSet, batch_size: int, rng: RngStream,
            noise: NoiseModel, include_clean: bool = True,
            dtype=np.float32) -> Iterator[Batch]:
    """One epoch: each patch exactly once in seeded-shuffled order, fresh
    noise per patch. The last short batch is emitted."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(patches)
    if n == 0:
        raise ValueError("empty PatchSet")
    order = rng.permutation(n)
    s = patches.patch_size
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        clean = np.stack([patches.patches[i] for i in idx]).reshape(-1, 1, s, s)
        clean_t = Tensor(clean, dtype=dtype)
        noisy_t = add_gaussian_noise(clean_t, noise, rng)
        yield Batch(noisy=noisy_t,
                    clean=clean_t if include_clean else None,
                    indices=idx)


# -- manifest and patch cache ---------------------------------------------------

def read_manifest(path) -> list[Path]:
    """Plain text, one image path per line, relative to the manifest's dir."""
    path = Path(path)
    base = path.parent
    out = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.append(base / line)
    return out


_CACHE_MAGIC = b"SDPC"
_CACHE_VERSION = 1


def save_patch_cache(patches: PatchSet, path) -> None:
    """Versioned header (magic, version u32, count u32, size u32) followed
    by raw float32 little-endian patch data."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_CACHE_MAGIC)
        f.write(struct.pack("<III", _CACHE_VERSION, len(patches), patches.patch_size))
        for p in patches.patches:
            f.write(p.astype("<f4").tobytes())


def load_patch_cache(path) -> PatchSet:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != _CACHE_MAGIC:
        raise PatchCacheError(f"bad magic in {path}")
    version, count, size = struct.unpack("<III", buf[4:16])
    if version != _CACHE_VERSION:
        raise PatchCacheError(f"unsupported cache version {version}")
    expected = 16 + count * size * size * 4
    if len(buf) != expected:
        raise PatchCacheError(f"truncated cache: {len(buf)} bytes, expected {expected}")
    data = np.frombuffer(buf[16:], dtype="<f4").reshape(count, size, size)
    out = PatchSet(patch_size=size)
    out.patches = [data[i].astype(np.float64) for i in range(count)]
    out.provenance = ["cache"] * count
    return out


def synthetic_piecewise_images(count: int, size: int, rng: RngStream
                               ) -> list[GrayImage]:
    """Procedural piecewise-constant test images: a base level plus a few
    axis-aligned rectangles at random constant intensities."""
    out = []
    for _ in range(count):
        gen = rng._gen
        img = np.full((size, size), gen.uniform(0.1, 0.9))
        for _ in range(gen.integers(3, 7)):
            h = int(gen.integers(size // 8, size // 2))
            w = int(gen.integers(size // 8, size // 2))
            top = int(gen.integers(0, size - h))
            left = int(gen.integers(0, size - w))
            img[top:top + h, left:left + w] = gen.uniform(0.05, 0.95)
        out.append(GrayImage.from_array(img))
    return out


def prepare_patches(images: list[GrayImage], sources: list[str] | None = None,
                    patch_size: int = 40, stride: int = 10,
                    scales=(1.0, 0.9, 0.8, 0.7),
                    modes=("none", "hflip")) -> PatchSet:
    """Full pipeline: multi-scale rescale, overlapping crop, augmentation."""
    if sources is None:
        sources = [f"image{i}" for i in range(len(images))]
    combined = PatchSet(patch_size=patch_size)
    for img, src in zip(images, sources):
        for s in scales:
            scaled = img if s == 1.0 else rescale(img, s)
            ps = extract_patches(scaled, patch_size, stride, source_id=f"{src}@{s}")
            combined.patches.extend(ps.patches)
            combined.provenance.extend(ps.provenance)
    return augment(combined, modes)
