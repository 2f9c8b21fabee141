"""Bone windowing, min-max normalization, axial slicing and 2D resizing."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .volumes import InvalidGeometryError, MaskVolume, Study, Volume

NORM_EPS = 1e-8


@dataclass(frozen=True)
class WindowSpec:
    width: float = 1500.0
    center: float = 350.0

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError("window width must be > 0")

    @property
    def bounds(self) -> tuple[float, float]:
        return self.center - self.width / 2.0, self.center + self.width / 2.0


BONE_WINDOW = WindowSpec()


@dataclass(frozen=True, eq=False)
class SliceSample:
    """One axial training unit: H x W x 2 image (0 = CT, 1 = PET) and a binary mask."""

    image: np.ndarray
    mask: np.ndarray
    patient_id: str
    z: int
    label_source: str = "A"

    def __post_init__(self):
        img = np.asarray(self.image)
        m = np.asarray(self.mask)
        if img.ndim != 3 or img.shape[2] != 2:
            raise ValueError(f"image must be H x W x 2, got {img.shape}")
        if m.shape != img.shape[:2]:
            raise ValueError(f"mask {m.shape} and image {img.shape[:2]} disagree")
        if not np.isin(m, (0, 1)).all():
            raise ValueError("mask must be binary")
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "mask", m.astype(np.uint8))

    @property
    def size(self) -> tuple[int, int]:
        return self.mask.shape

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SliceSample)
            and (self.patient_id, self.z, self.label_source) == (other.patient_id, other.z, other.label_source)
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.mask, other.mask)
        )


def window_array(a: np.ndarray, spec: WindowSpec = BONE_WINDOW) -> np.ndarray:
    lo, hi = spec.bounds
    return np.maximum(np.minimum(a, hi), lo)


def window_ct(v: Volume, spec: WindowSpec = BONE_WINDOW) -> Volume:
    if v.modality != "CT":
        raise ValueError("bone windowing applies to CT volumes only")
    return v.with_voxels(window_array(v.voxels, spec))


def normalize_array(a: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    return (a - lo) / (hi - lo + eps)


def min_max_normalize(v: Volume, eps: float = NORM_EPS) -> Volume:
    return v.with_voxels(normalize_array(v.voxels, eps))


def normalized_channels(study: Study, spec: WindowSpec = BONE_WINDOW) -> tuple[np.ndarray, np.ndarray]:
    """Windowed+normalized CT and normalized PET as float64 (Z, Y, X) arrays.

    Normalization is per volume, not per slice.
    """
    ct = normalize_array(window_array(study.ct.voxels.astype(np.float64), spec))
    pet = normalize_array(study.pet.voxels.astype(np.float64))
    return ct, pet


def slice_axial(
    study: Study,
    label_source: str,
    spec: WindowSpec | None = BONE_WINDOW,
    channels: tuple[np.ndarray, np.ndarray] | None = None,
) -> list[SliceSample]:
    """One sample per z. ``label_source`` is "A", "B" or "UNION".

    If ``channels`` is given it is used as the already-normalized (CT, PET)
    pair; otherwise the study is windowed and normalized here.
    """
    g = study.geometry
    for name in ("pet", "label_a", "label_b"):
        if getattr(study, name).geometry != g:
            raise InvalidGeometryError(f"{study.patient_id}: {name} geometry mismatch")
    ct, pet = channels if channels is not None else normalized_channels(study, spec or BONE_WINDOW)
    if source_is_union(label_source):
        mask = study.label_a.voxels | study.label_b.voxels
    else:
        mask = study.label(label_source).voxels
    stacked = np.stack([ct, pet], axis=-1)
    return [
        SliceSample(stacked[z], mask[z], study.patient_id, z, label_source)
        for z in range(g.dims[0])
    ]


def source_is_union(source: str) -> bool:
    if source not in ("A", "B", "UNION"):
        raise ValueError(f"label source must be A, B or UNION, got {source!r}")
    return source == "UNION"


def union_masks(study: Study) -> list[np.ndarray]:
    m = study.label_a.voxels | study.label_b.voxels
    return [m[z] for z in range(m.shape[0])]


def filter_background(samples: list[SliceSample], criterion_masks) -> list[SliceSample]:
    """Keep samples whose criterion mask has at least one positive pixel.

    ``criterion_masks`` is either a list aligned with ``samples`` or a mapping
    keyed by (patient_id, z).
    """
    if isinstance(criterion_masks, dict):
        try:
            masks = [criterion_masks[(s.patient_id, s.z)] for s in samples]
        except KeyError as exc:
            raise ValueError(f"no criterion mask for sample {exc.args[0]}") from None
    else:
        masks = list(criterion_masks)
        if len(masks) != len(samples):
            raise ValueError(f"{len(samples)} samples but {len(masks)} criterion masks")
    out = []
    for s, m in zip(samples, masks):
        if np.shape(m) != s.mask.shape:
            raise ValueError(f"criterion mask for {s.patient_id}/z={s.z} has shape {np.shape(m)}")
        if np.any(m):
            out.append(s)
    return out


def bilinear_resize(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Align-corners-true bilinear resize of an (H, W) or (H, W, C) array."""
    img = np.asarray(img, dtype=np.float64)
    h0, w0 = img.shape[:2]
    if (h0, w0) == (h, w):
        return img.copy()
    ys = np.linspace(0.0, h0 - 1, h) if h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w0 - 1, w) if w > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, max(h0 - 2, 0))
    x0 = np.clip(np.floor(xs).astype(int), 0, max(w0 - 2, 0))
    y1 = np.minimum(y0 + 1, h0 - 1)
    x1 = np.minimum(x0 + 1, w0 - 1)
    fy = (ys - y0).reshape(-1, 1, *([1] * (img.ndim - 2)))
    fx = (xs - x0).reshape(1, -1, *([1] * (img.ndim - 2)))
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def nearest_resize(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour resize on the same align-corners grid as
    :func:`bilinear_resize`, so a mask stays registered to its image."""
    mask = np.asarray(mask)
    h0, w0 = mask.shape[:2]
    if (h0, w0) == (h, w):
        return mask.copy()
    yi = np.rint(np.linspace(0.0, h0 - 1, h)).astype(int) if h > 1 else np.zeros(1, int)
    xi = np.rint(np.linspace(0.0, w0 - 1, w)).astype(int) if w > 1 else np.zeros(1, int)
    return mask[yi][:, xi]


def resize(sample: SliceSample, h: int, w: int) -> SliceSample:
    if h < 8 or w < 8:
        raise ValueError(f"target size must be at least 8x8, got {h}x{w}")
    if sample.size == (h, w):
        return sample
    return replace(sample, image=bilinear_resize(sample.image, h, w), mask=nearest_resize(sample.mask, h, w))


def prepare_slices(
    study: Study,
    label_source: str,
    input_size: int,
    spec: WindowSpec = BONE_WINDOW,
    drop_background: bool = True,
) -> list[SliceSample]:
    """Window, normalize, slice, filter on the A|B union and resize one study."""
    samples = slice_axial(study, label_source, spec)
    if drop_background:
        samples = filter_background(samples, union_masks(study))
    return [resize(s, input_size, input_size) for s in samples]
