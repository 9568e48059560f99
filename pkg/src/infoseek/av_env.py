"""Active-vision substrate: image corpora and the foveated sensor.

Fixation locations live in [-1, 1]^2 with (-1, -1) at the top-left pixel;
component 0 is vertical (rows), component 1 horizontal (columns). A
glimpse stacks ``n_fov`` concentric windows of side d, d*scale,
d*scale^2, ..., each average-pooled back to d x d, zero-padded where a
window leaves the frame, flattened row-major, and concatenated from the
smallest scale outward.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .imageio import write_pgm

__all__ = [
    "ImageCorpus",
    "FoveationSpec",
    "Glimpse",
    "foveate",
    "observed_mask",
    "make_glyph_corpus",
    "load_idx",
    "export_corpus_pgm",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# 7x5 bitmap font for the digits 0-9; rendered 4x for a 28x20 glyph core.
_GLYPH_ROWS = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}
GLYPH_UPSCALE = 4


@dataclass
class ImageCorpus:
    """Stack of same-size grayscale images in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3:
            raise ValueError("images must be a (count, H, W) array")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("one label per image required")
        if np.any(self.labels < 0):
            raise ValueError("labels must be nonnegative")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.split not in ("train", "test"):
            raise ValueError("split must be 'train' or 'test'")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0


@dataclass
class FoveationSpec:
    """Patch side d, number of scales, and integer growth factor."""

    d: int = 8
    n_fov: int = 1
    scale: int = 2
    pad_value: float = 0.0

    def __post_init__(self):
        if self.d < 1 or self.n_fov < 1:
            raise ValueError("d and n_fov must be at least 1")
        if self.n_fov > 1 and self.scale < 2:
            raise ValueError("scale must be >= 2 when using multiple foveation levels")

    @property
    def glimpse_len(self) -> int:
        return self.n_fov * self.d * self.d


@dataclass
class Glimpse:
    """Flattened multi-scale observation and the location that produced it."""

    x: np.ndarray
    l: np.ndarray
    clamped: bool = False


def center_pixel(l: np.ndarray, shape: tuple[int, int]) -> tuple[int, int]:
    """Map a normalized location to the nearest pixel; corners map to
    corner pixels exactly."""
    h, w = shape
    r = int(np.round((l[0] + 1.0) / 2.0 * (h - 1)))
    c = int(np.round((l[1] + 1.0) / 2.0 * (w - 1)))
    return r, c


def _window(image: np.ndarray, cr: int, cc: int, side: int, pad: float) -> np.ndarray:
    out = np.full((side, side), pad)
    h, w = image.shape
    r0, c0 = cr - side // 2, cc - side // 2
    rs, re = max(r0, 0), min(r0 + side, h)
    cs, ce = max(c0, 0), min(c0 + side, w)
    if rs < re and cs < ce:
        out[rs - r0 : re - r0, cs - c0 : ce - c0] = image[rs:re, cs:ce]
    return out


def foveate(image: np.ndarray, l, spec: FoveationSpec) -> Glimpse:
    """Extract the multi-scale glimpse centered at normalized location l."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("image must be 2-d")
    l = np.asarray(l, dtype=np.float64).reshape(2)
    clamped = bool(np.any(l < -1.0) or np.any(l > 1.0))
    l = np.clip(l, -1.0, 1.0)
    cr, cc = center_pixel(l, image.shape)
    parts = []
    for k in range(spec.n_fov):
        factor = spec.scale**k
        win = _window(image, cr, cc, spec.d * factor, spec.pad_value)
        pooled = win.reshape(spec.d, factor, spec.d, factor).mean(axis=(1, 3))
        parts.append(pooled.ravel())
    return Glimpse(x=np.concatenate(parts), l=l, clamped=clamped)


def observed_mask(shape: tuple[int, int], locations, spec: FoveationSpec) -> np.ndarray:
    """Boolean map of pixels covered by any window of any fixation."""
    mask = np.zeros(shape, dtype=bool)
    h, w = shape
    side = spec.d * spec.scale ** (spec.n_fov - 1)
    for l in locations:
        l = np.clip(np.asarray(l, dtype=np.float64).reshape(2), -1.0, 1.0)
        cr, cc = center_pixel(l, shape)
        r0, c0 = cr - side // 2, cc - side // 2
        mask[max(r0, 0) : min(r0 + side, h), max(c0, 0) : min(c0 + side, w)] = True
    return mask


def glyph_bitmap(digit: int) -> np.ndarray:
    """Upscaled binary bitmap for one digit (28 x 20)."""
    rows = _GLYPH_ROWS[digit]
    small = np.array([[float(ch) for ch in row] for row in rows])
    return np.kron(small, np.ones((GLYPH_UPSCALE, GLYPH_UPSCALE)))


def make_glyph_corpus(
    n_per_class: int,
    image_size: int,
    translated: bool,
    noise_std: float,
    rng: np.random.Generator,
    split: str = "train",
) -> ImageCorpus:
    """Render the built-in digit glyphs onto square canvases.

    Centered placement puts the glyph mid-frame; translated placement
    draws a uniform offset keeping the glyph fully inside. Clipped
    Gaussian pixel noise is added when ``noise_std`` > 0.
    """
    glyphs = {d: glyph_bitmap(d) for d in range(10)}
    gh, gw = glyphs[0].shape
    if image_size < gh or image_size < gw:
        raise ValueError(f"image_size must be at least {max(gh, gw)}")
    images = np.zeros((10 * n_per_class, image_size, image_size))
    labels = np.zeros(10 * n_per_class, dtype=np.int64)
    i = 0
    for digit in range(10):
        for _ in range(n_per_class):
            canvas = np.zeros((image_size, image_size))
            if translated:
                r0 = int(rng.integers(image_size - gh + 1))
                c0 = int(rng.integers(image_size - gw + 1))
            else:
                r0 = (image_size - gh) // 2
                c0 = (image_size - gw) // 2
            canvas[r0 : r0 + gh, c0 : c0 + gw] = glyphs[digit]
            if noise_std > 0:
                canvas = np.clip(canvas + rng.normal(0.0, noise_std, canvas.shape), 0.0, 1.0)
            images[i] = canvas
            labels[i] = digit
            i += 1
    return ImageCorpus(images=images, labels=labels, split=split)


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated IDX file while reading {what}")
    return buf


def load_idx(images_path, labels_path, split: str = "train") -> ImageCorpus:
    """Parse big-endian IDX image/label files (u8 payload scaled to [0, 1])."""
    with open(images_path, "rb") as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, "image magic"))
        if magic != IDX_IMAGES_MAGIC:
            raise ValueError(f"bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
        n, h, w = struct.unpack(">III", _read_exact(fh, 12, "image dims"))
        raw = _read_exact(fh, n * h * w, "image payload")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(n, h, w).astype(np.float64) / 255.0
    with open(labels_path, "rb") as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, "label magic"))
        if magic != IDX_LABELS_MAGIC:
            raise ValueError(f"bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
        (n_labels,) = struct.unpack(">I", _read_exact(fh, 4, "label count"))
        labels = np.frombuffer(_read_exact(fh, n_labels, "label payload"), dtype=np.uint8)
    if n_labels != n:
        raise ValueError(f"label count {n_labels} does not match image count {n}")
    return ImageCorpus(images=images, labels=labels.astype(np.int64), split=split)


def export_corpus_pgm(corpus: ImageCorpus, out_dir, limit: int | None = None) -> list:
    """Dump corpus images as PGM files for eyeballing; returns the paths."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    n = len(corpus) if limit is None else min(limit, len(corpus))
    paths = []
    for i in range(n):
        path = os.path.join(out_dir, f"{corpus.split}_{i:05d}_label{corpus.labels[i]}.pgm")
        write_pgm(path, corpus.images[i])
        paths.append(path)
    return paths
