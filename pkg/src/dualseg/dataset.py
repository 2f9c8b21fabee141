"""Patient-wise splitting, geometric augmentation and batch iteration."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterator, Sequence

import numpy as np

from .preprocess import SliceSample


@dataclass(frozen=True)
class SplitAssignment:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def __post_init__(self):
        sets = [set(self.train), set(self.val), set(self.test)]
        if any(not s for s in sets):
            raise ValueError("every split subset must be non-empty")
        if sum(len(s) for s in sets) != len(set().union(*sets)):
            raise ValueError("split subsets overlap")

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)

    def all_ids(self) -> set[str]:
        return set(self.train) | set(self.val) | set(self.test)

    def to_dict(self) -> dict:
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test)}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitAssignment":
        extra = set(d) - {"train", "val", "test"}
        if extra:
            raise ValueError(f"unknown split keys {sorted(extra)}")
        return cls(tuple(d["train"]), tuple(d["val"]), tuple(d["test"]))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def patient_split(
    patient_ids: Sequence[str], ratios: tuple[float, float, float] = (7, 1, 2), seed: int = 0
) -> SplitAssignment:
    """Shuffle ids with a seeded RNG; test gets round(0.2n), val round(0.1n), train the rest.

    Rounding is half-up and both held-out subsets get at least one patient.
    """
    ids = list(patient_ids)
    n = len(ids)
    if n < 3:
        raise ValueError(f"need at least 3 patients to split, got {n}")
    if len(set(ids)) != n:
        raise ValueError("patient ids must be unique")
    total = float(sum(ratios))
    n_test = max(1, _round_half_up(n * ratios[2] / total))
    n_val = max(1, _round_half_up(n * ratios[1] / total))
    if n_test + n_val >= n:
        n_test, n_val = max(1, n - 2), 1
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    test = shuffled[:n_test]
    val = shuffled[n_test : n_test + n_val]
    train = shuffled[n_test + n_val :]
    return SplitAssignment(tuple(sorted(train)), tuple(sorted(val)), tuple(sorted(test)))


@dataclass(frozen=True)
class AugmentationConfig:
    p_flip: float = 0.5
    rot_range_deg: tuple[float, float] = (-15.0, 15.0)
    affine_translate_frac: float = 0.05
    affine_scale_range: tuple[float, float] = (0.95, 1.05)
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.p_flip <= 1.0:
            raise ValueError("p_flip must lie in [0, 1]")
        if not 0 < self.affine_scale_range[0] <= self.affine_scale_range[1]:
            raise ValueError("affine_scale_range must be positive and ordered")
        if self.rot_range_deg[0] > self.rot_range_deg[1]:
            raise ValueError("rot_range_deg must be ordered")
        if self.affine_translate_frac < 0:
            raise ValueError("affine_translate_frac must be >= 0")


@dataclass(frozen=True)
class AugmentParams:
    flip_h: bool = False
    flip_v: bool = False
    angle_deg: float = 0.0
    shift: tuple[float, float] = (0.0, 0.0)  # pixels, (dy, dx)
    scale: float = 1.0

    def is_identity(self) -> bool:
        return not (self.flip_h or self.flip_v) and self.angle_deg == 0 and self.shift == (0.0, 0.0) and self.scale == 1


def draw_augmentation(rng: np.random.Generator, cfg: AugmentationConfig, size: tuple[int, int]) -> AugmentParams:
    h, w = size
    flip_h = bool(rng.random() < cfg.p_flip)
    flip_v = bool(rng.random() < cfg.p_flip)
    angle = float(rng.uniform(*cfg.rot_range_deg))
    dy = float(rng.uniform(-cfg.affine_translate_frac, cfg.affine_translate_frac)) * h
    dx = float(rng.uniform(-cfg.affine_translate_frac, cfg.affine_translate_frac)) * w
    scale = float(rng.uniform(*cfg.affine_scale_range))
    return AugmentParams(flip_h, flip_v, angle, (dy, dx), scale)


def _source_coords(params: AugmentParams, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """For every output pixel, the input position it samples (inverse map).

    Forward map: flip, then rotate by angle and scale about the image center,
    then translate by ``shift``.
    """
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    y = yy - params.shift[0] - cy
    x = xx - params.shift[1] - cx
    a = math.radians(params.angle_deg)
    c, s = math.cos(a), math.sin(a)
    # inverse rotation / scale
    ys = (c * y + s * x) / params.scale
    xs = (-s * y + c * x) / params.scale
    if params.flip_v:
        ys = -ys
    if params.flip_h:
        xs = -xs
    return ys + cy, xs + cx


def _bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Bilinear lookup with zero padding: pixels beyond the border count as 0."""
    h, w = img.shape[:2]
    padded = np.pad(img, ((1, 1), (1, 1)) + ((0, 0),) * (img.ndim - 2))
    yp, xp = ys + 1.0, xs + 1.0
    valid = (yp > 0) & (yp < h + 1) & (xp > 0) & (xp < w + 1)
    yp = np.clip(yp, 0, h + 1)
    xp = np.clip(xp, 0, w + 1)
    y0 = np.minimum(np.floor(yp).astype(int), h)
    x0 = np.minimum(np.floor(xp).astype(int), w)
    fy = (yp - y0)[..., None]
    fx = (xp - x0)[..., None]
    out = (
        padded[y0, x0] * (1 - fy) * (1 - fx)
        + padded[y0, x0 + 1] * (1 - fy) * fx
        + padded[y0 + 1, x0] * fy * (1 - fx)
        + padded[y0 + 1, x0 + 1] * fy * fx
    )
    out[~valid] = 0.0
    return out


def _nearest_sample(mask: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    yi = np.floor(ys + 0.5).astype(int)
    xi = np.floor(xs + 0.5).astype(int)
    valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
    out = mask[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
    return np.where(valid, out, 0).astype(mask.dtype)


def apply_augmentation(sample: SliceSample, params: AugmentParams) -> SliceSample:
    """Apply one geometric map to both image channels (bilinear) and the mask (nearest)."""
    if params.is_identity():
        return sample
    h, w = sample.size
    if params.angle_deg == 0 and params.shift == (0.0, 0.0) and params.scale == 1:
        # pure flips: exact index reversal
        sl = (slice(None, None, -1) if params.flip_v else slice(None), slice(None, None, -1) if params.flip_h else slice(None))
        return replace(sample, image=sample.image[sl].copy(), mask=sample.mask[sl].copy())
    ys, xs = _source_coords(params, h, w)
    image = _bilinear_sample(np.asarray(sample.image, dtype=np.float64), ys, xs)
    mask = _nearest_sample(sample.mask, ys, xs)
    return replace(sample, image=image.astype(sample.image.dtype), mask=mask)


def augment(sample: SliceSample, rng: np.random.Generator, cfg: AugmentationConfig = AugmentationConfig()) -> SliceSample:
    if not cfg.enabled:
        return sample
    return apply_augmentation(sample, draw_augmentation(rng, cfg, sample.size))


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent augmentation stream for one sample in one epoch."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


def batch_iter(
    samples: Sequence, batch_size: int = 8, shuffle_seed: int = 0, epoch: int = 0, shuffle: bool = True
) -> Iterator[list]:
    if not samples:
        raise ValueError("batch_iter needs a non-empty sample list")
    n = len(samples)
    if shuffle:
        order = np.random.default_rng(np.random.SeedSequence([shuffle_seed, epoch])).permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        yield [samples[i] for i in order[start : start + batch_size]]


def stack_batch(samples: Sequence[SliceSample], channels: Sequence[int] = (0, 1), dtype=np.float32):
    """(N x C x H x W images, N x 1 x H x W masks) for the selected input channels."""
    x = np.stack([np.asarray(s.image)[..., list(channels)] for s in samples]).transpose(0, 3, 1, 2)
    y = np.stack([s.mask for s in samples])[:, None]
    return np.ascontiguousarray(x, dtype=dtype), y.astype(dtype)
