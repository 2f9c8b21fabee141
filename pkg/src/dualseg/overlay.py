"""Portable-pixmap (P6) overlays of predicted masks on CT/PET slices."""
from __future__ import annotations

import numpy as np

RED = (255, 0, 0)
BLUE = (0, 0, 255)
ALPHA = 0.5


def grayscale(plane: np.ndarray) -> np.ndarray:
    """Min-max scale a 2D plane to uint8 and replicate into RGB."""
    p = np.asarray(plane, dtype=np.float64)
    lo, hi = p.min(), p.max()
    g = np.zeros_like(p) if hi == lo else (p - lo) / (hi - lo)
    g8 = np.round(g * 255).astype(np.uint8)
    return np.repeat(g8[..., None], 3, axis=-1)


def tint(base: np.ndarray, mask: np.ndarray, color=RED, alpha: float = ALPHA) -> np.ndarray:
    m = np.asarray(mask).astype(bool)
    if m.shape != base.shape[:2]:
        raise ValueError(f"mask {m.shape} does not match image {base.shape[:2]}")
    out = base.copy()
    blended = np.round((1 - alpha) * base.astype(np.float64) + alpha * np.asarray(color, dtype=np.float64))
    blended = blended.astype(np.uint8)
    out[m] = blended[m]
    return out


def encode_ppm(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("PPM needs an H x W x 3 array")
    h, w = rgb.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6" or int(parts[3]) != 255:
        raise ValueError("not an 8-bit P6 pixmap")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)
