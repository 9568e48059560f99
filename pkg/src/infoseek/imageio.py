"""8-bit binary PGM (P5) read/write for heatmaps, glyphs, and composites."""

import numpy as np

__all__ = ["write_pgm", "read_pgm"]


def write_pgm(path, image: np.ndarray, normalize: bool = False) -> None:
    """Write a 2-D array as binary PGM. With ``normalize`` the image is
    divided by its max before quantization; otherwise values are clipped
    to [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM export requires a 2-D array")
    if normalize:
        peak = img.max()
        if peak > 0:
            img = img / peak
    img = np.clip(img, 0.0, 1.0)
    data = np.round(img * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM written by :func:`write_pgm`; returns floats in [0, 1]."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise ValueError("not a binary PGM (P5) file")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(fh.readline())
        raw = fh.read(w * h)
        if len(raw) != w * h:
            raise ValueError("truncated PGM payload")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).astype(np.float64) / maxval
