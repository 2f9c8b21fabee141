"""3D volume types, the .volhdr/.volraw file format, rigid resampling and
translation-search alignment.

Physical position of voxel index ``(k, j, i)`` is ``origin + index * spacing``
with all triples ordered (z, y, x).
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Union

import numpy as np

FORMAT_VERSION = 1
MODALITIES = ("CT", "PET")
LABEL_SOURCES = ("A", "B", "PRED")


class VolumeError(Exception):
    """Base class for volume construction and I/O failures."""


class InvalidGeometryError(VolumeError):
    pass


class NonBinaryMaskError(VolumeError):
    pass


class NonFiniteVoxelError(VolumeError):
    pass


class VolumeFileMissingError(VolumeError, FileNotFoundError):
    pass


class MalformedHeaderError(VolumeError):
    pass


class PayloadLengthError(VolumeError):
    pass


class DegenerateInputError(VolumeError):
    """NCC is undefined because an image has zero variance over the overlap."""


@dataclass(frozen=True)
class Geometry:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise InvalidGeometryError("dims, spacing and origin must each have 3 components")
        if any(d <= 0 for d in dims):
            raise InvalidGeometryError(f"dims must be positive, got {dims}")
        if any(not (s > 0 and math.isfinite(s)) for s in spacing):
            raise InvalidGeometryError(f"spacing must be positive, got {spacing}")
        if any(not math.isfinite(o) for o in origin):
            raise InvalidGeometryError(f"origin must be finite, got {origin}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.origin) + (np.asarray(self.dims) - 1) / 2.0 * np.asarray(self.spacing)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar voxel grid (Z, Y, X).

    Stored as float32 unless a float64 array is passed explicitly (used by the
    64-bit preprocessing path); files always hold float32.
    """

    voxels: np.ndarray
    geometry: Geometry
    modality: str = "CT"

    def __post_init__(self):
        v = np.asarray(self.voxels)
        v = v if v.dtype == np.float64 else v.astype(np.float32)
        if v.ndim != 3 or v.shape != self.geometry.dims:
            raise InvalidGeometryError(f"voxel array {v.shape} does not match dims {self.geometry.dims}")
        if self.modality not in MODALITIES:
            raise VolumeError(f"unknown modality {self.modality!r}")
        if not np.isfinite(v).all():
            raise NonFiniteVoxelError("volume contains non-finite voxels")
        object.__setattr__(self, "voxels", _readonly(v))

    @property
    def dims(self):
        return self.geometry.dims

    def with_voxels(self, voxels: np.ndarray) -> "Volume":
        return Volume(voxels, self.geometry, self.modality)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Volume)
            and self.geometry == other.geometry
            and self.modality == other.modality
            and np.array_equal(self.voxels, other.voxels)
        )


@dataclass(frozen=True, eq=False)
class MaskVolume:
    """Binary uint8 voxel grid with the annotation source it came from."""

    voxels: np.ndarray
    geometry: Geometry
    label_source: str = "A"

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3 or v.shape != self.geometry.dims:
            raise InvalidGeometryError(f"voxel array {v.shape} does not match dims {self.geometry.dims}")
        if v.dtype == bool:
            v = v.astype(np.uint8)
        elif not np.isin(v, (0, 1)).all():
            raise NonBinaryMaskError("mask voxels must be 0 or 1")
        if self.label_source not in LABEL_SOURCES:
            raise VolumeError(f"unknown label source {self.label_source!r}")
        object.__setattr__(self, "voxels", _readonly(v.astype(np.uint8)))

    @property
    def dims(self):
        return self.geometry.dims

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, MaskVolume)
            and self.geometry == other.geometry
            and self.label_source == other.label_source
            and np.array_equal(self.voxels, other.voxels)
        )


AnyVolume = Union[Volume, MaskVolume]


@dataclass(frozen=True)
class RigidTransform:
    """Maps a reference-space point p to moving space as ``c + R(p - c) + translation``.

    ``R`` rotates about the z axis (in the y-x plane) and ``c`` is the
    reference grid center.
    """

    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    axial_rotation_deg: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))
        object.__setattr__(self, "axial_rotation_deg", float(self.axial_rotation_deg))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_voxels(cls, shift_vox, spacing) -> "RigidTransform":
        return cls(tuple(float(s) * float(sp) for s, sp in zip(shift_vox, spacing)))

    def is_identity(self) -> bool:
        return self.axial_rotation_deg == 0.0 and all(t == 0.0 for t in self.translation)

    def rotation_matrix(self) -> np.ndarray:
        a = math.radians(self.axial_rotation_deg)
        c, s = math.cos(a), math.sin(a)
        # acts on (z, y, x)
        return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])

    def compose(self, first: "RigidTransform") -> "RigidTransform":
        """Transform equivalent to applying ``first`` then ``self`` (same rotation center)."""
        if first.is_identity():
            return self
        if self.is_identity():
            return first
        t = self.rotation_matrix() @ np.asarray(first.translation) + np.asarray(self.translation)
        return RigidTransform(tuple(t), self.axial_rotation_deg + first.axial_rotation_deg)

    def inverse(self) -> "RigidTransform":
        rinv = self.rotation_matrix().T
        t = -(rinv @ np.asarray(self.translation))
        return RigidTransform(tuple(t + 0.0), -self.axial_rotation_deg)

    def in_voxels(self, spacing) -> tuple[float, float, float]:
        return tuple(t / s for t, s in zip(self.translation, spacing))


@dataclass(frozen=True)
class Study:
    patient_id: str
    ct: Volume
    pet: Volume
    label_a: MaskVolume
    label_b: MaskVolume

    def __post_init__(self):
        if not self.patient_id:
            raise VolumeError("patient_id must be non-empty")
        g = self.ct.geometry
        for name in ("pet", "label_a", "label_b"):
            if getattr(self, name).geometry != g:
                raise InvalidGeometryError(f"{self.patient_id}: {name} geometry differs from ct")

    @property
    def geometry(self) -> Geometry:
        return self.ct.geometry

    def label(self, source: str) -> MaskVolume:
        if source == "A":
            return self.label_a
        if source == "B":
            return self.label_b
        raise ValueError(f"label source must be 'A' or 'B', got {source!r}")


# ---------------------------------------------------------------------------
# file format


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".volhdr", ".volraw"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".volhdr"), p.with_name(p.name + ".volraw")


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write via a sibling temp file and rename, so readers never see partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_volume(v: AnyVolume, path) -> tuple[Path, Path]:
    """Write ``<path>.volhdr`` and ``<path>.volraw``; returns both paths."""
    if isinstance(v, MaskVolume):
        if not np.isin(v.voxels, (0, 1)).all():
            raise NonBinaryMaskError("refusing to write a non-binary mask")
        payload = v.voxels.astype("u1").tobytes()
        header = {"dtype": "u8", "modality": "MASK", "label_source": v.label_source}
    elif isinstance(v, Volume):
        payload = v.voxels.astype("<f4").tobytes()
        header = {"dtype": "f32le", "modality": v.modality}
    else:
        raise TypeError(f"cannot write {type(v).__name__}")
    g = v.geometry
    header = {
        "format_version": FORMAT_VERSION,
        "dims": list(g.dims),
        "spacing_mm": list(g.spacing),
        "origin_mm": list(g.origin),
        **header,
    }
    hdr_path, raw_path = _paths(path)
    atomic_write_bytes(raw_path, payload)
    atomic_write_bytes(hdr_path, (json.dumps(header, indent=2) + "\n").encode("utf-8"))
    return hdr_path, raw_path


def read_volume(path) -> AnyVolume:
    hdr_path, raw_path = _paths(path)
    for p in (hdr_path, raw_path):
        if not p.exists():
            raise VolumeFileMissingError(f"missing volume file {p}")
    try:
        header = json.loads(hdr_path.read_text(encoding="utf-8"))
        version = header["format_version"]
        dims = tuple(int(d) for d in header["dims"])
        spacing = tuple(float(s) for s in header["spacing_mm"])
        origin = tuple(float(o) for o in header["origin_mm"])
        dtype = header["dtype"]
        modality = header["modality"]
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedHeaderError(f"{hdr_path}: {exc}") from exc
    if version != FORMAT_VERSION:
        raise MalformedHeaderError(f"{hdr_path}: unsupported format_version {version}")
    if dtype not in ("f32le", "u8"):
        raise MalformedHeaderError(f"{hdr_path}: unknown dtype {dtype!r}")
    if (dtype == "u8") != (modality == "MASK"):
        raise MalformedHeaderError(f"{hdr_path}: dtype {dtype} inconsistent with modality {modality}")
    if len(dims) != 3:
        raise MalformedHeaderError(f"{hdr_path}: dims must have 3 entries")
    geometry = Geometry(dims, spacing, origin)

    raw = raw_path.read_bytes()
    itemsize = 4 if dtype == "f32le" else 1
    expected = int(np.prod(dims)) * itemsize
    if len(raw) != expected:
        raise PayloadLengthError(f"{raw_path}: payload is {len(raw)} bytes, header implies {expected}")
    if dtype == "u8":
        return MaskVolume(np.frombuffer(raw, dtype="u1").reshape(dims).copy(), geometry,
                          header.get("label_source", "PRED"))
    vox = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    return Volume(vox, geometry, modality)


# ---------------------------------------------------------------------------
# resampling


def _sample_positions(reference: Geometry, moving: Geometry, t: RigidTransform) -> np.ndarray:
    """Continuous moving-grid indices for every reference voxel center, shape (3, Z, Y, X)."""
    idx = np.indices(reference.dims, dtype=np.float64)
    sp = np.asarray(reference.spacing).reshape(3, 1, 1, 1)
    org = np.asarray(reference.origin).reshape(3, 1, 1, 1)
    phys = org + idx * sp
    if t.axial_rotation_deg != 0.0:
        c = reference.center.reshape(3, 1, 1, 1)
        phys = c + np.einsum("ij,j...->i...", t.rotation_matrix(), phys - c)
    phys = phys + np.asarray(t.translation).reshape(3, 1, 1, 1)
    return (phys - np.asarray(moving.origin).reshape(3, 1, 1, 1)) / np.asarray(moving.spacing).reshape(3, 1, 1, 1)


def _trilinear(vox: np.ndarray, pos: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dims = np.asarray(vox.shape).reshape(3, 1, 1, 1)
    tol = 1e-9
    valid = np.all((pos >= -tol) & (pos <= dims - 1 + tol), axis=0)
    p = np.clip(pos, 0, dims - 1)
    lo = np.floor(p).astype(np.int64)
    lo = np.minimum(lo, dims - 2).clip(0)  # keep lo+1 in range for size>=2 axes
    frac = p - lo
    hi = np.minimum(lo + 1, dims - 1)
    out = np.zeros(pos.shape[1:], dtype=np.float64)
    for corner in product((0, 1), repeat=3):
        w = np.ones(pos.shape[1:])
        ix = []
        for ax, bit in enumerate(corner):
            if bit:
                w = w * frac[ax]
                ix.append(hi[ax])
            else:
                w = w * (1.0 - frac[ax])
                ix.append(lo[ax])
        out += w * vox[ix[0], ix[1], ix[2]]
    out[~valid] = 0.0
    return out, valid


def _nearest(vox: np.ndarray, pos: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dims = np.asarray(vox.shape).reshape(3, 1, 1, 1)
    r = np.floor(pos + 0.5).astype(np.int64)
    valid = np.all((r >= 0) & (r <= dims - 1), axis=0)
    r = np.clip(r, 0, dims - 1)
    out = vox[r[0], r[1], r[2]].copy()
    out[~valid] = 0
    return out, valid


def resample_to_reference(
    moving: AnyVolume,
    reference: Geometry,
    t: RigidTransform = RigidTransform(),
    interp: str = "trilinear",
    return_valid: bool = False,
):
    """Resample ``moving`` onto ``reference``; samples outside ``moving`` are 0."""
    if interp not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interp!r}")
    if isinstance(moving, MaskVolume) and interp != "nearest":
        raise ValueError("masks can only be resampled with nearest-neighbour interpolation")
    pos = _sample_positions(reference, moving.geometry, t)
    src = moving.voxels
    if interp == "nearest":
        out, valid = _nearest(src, pos)
    else:
        out, valid = _trilinear(src.astype(np.float64), pos)
    if isinstance(moving, MaskVolume):
        result = MaskVolume(out.astype(np.uint8), reference, moving.label_source)
    else:
        result = Volume(out.astype(src.dtype), reference, moving.modality)
    return (result, valid) if return_valid else result


# ---------------------------------------------------------------------------
# alignment


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    if a.size < 2 or den == 0.0:
        raise DegenerateInputError("normalized cross-correlation undefined for zero-variance input")
    return float(a @ b) / den


def _integer_overlap(fixed: np.ndarray, moving: np.ndarray, shift: tuple[int, int, int]):
    """Pairs fixed[p] with moving[p + shift] over their overlap."""
    fs, ms = [], []
    for s, nf, nm in zip(shift, fixed.shape, moving.shape):
        lo = max(0, -s)
        hi = min(nf, nm - s)
        if hi <= lo:
            return None, None
        fs.append(slice(lo, hi))
        ms.append(slice(lo + s, hi + s))
    return fixed[tuple(fs)], moving[tuple(ms)]


def estimate_translation(
    fixed: Volume, moving: Volume, search_radius_vox: int = 4, step_vox: float = 0.25
) -> RigidTransform:
    """Translation maximizing NCC between ``fixed`` and ``moving`` resampled through it.

    Exhaustive integer search over +-``search_radius_vox`` per axis, then a
    step-halving refinement (0.5, 0.25, ... >= ``step_vox``) over the 3x3x3
    neighbourhood of the incumbent.
    """
    if search_radius_vox < 1:
        raise ValueError("search_radius_vox must be >= 1")
    if not np.allclose(fixed.geometry.spacing, moving.geometry.spacing):
        raise InvalidGeometryError("fixed and moving volumes must share spacing")
    f = fixed.voxels.astype(np.float64)
    m = moving.voxels.astype(np.float64)
    if f.std() == 0.0 or m.std() == 0.0:
        raise DegenerateInputError("constant-valued volume: NCC undefined")
    # fixed and moving share spacing; an origin offset is a constant voxel shift
    origin_shift = (np.asarray(fixed.geometry.origin) - np.asarray(moving.geometry.origin)) / np.asarray(
        fixed.geometry.spacing
    )

    best, best_score = (0.0, 0.0, 0.0), -np.inf
    r = int(search_radius_vox)
    for shift in product(range(-r, r + 1), repeat=3):
        total = tuple(int(round(s + o)) for s, o in zip(shift, origin_shift))
        fa, ma = _integer_overlap(f, m, total)
        if fa is None or fa.size < 2:
            continue
        try:
            score = ncc(fa, ma)
        except DegenerateInputError:
            continue
        # ties: keep the earlier shift in lexicographic order, except prefer zero
        if score > best_score or (score == best_score and shift == (0, 0, 0)):
            best, best_score = tuple(float(s) for s in shift), score
    if not np.isfinite(best_score):
        raise DegenerateInputError("no overlap with non-zero variance in the search window")

    spacing = fixed.geometry.spacing
    step = 0.5
    while step >= step_vox:
        center = best
        for d in product((-step, 0.0, step), repeat=3):
            if d == (0.0, 0.0, 0.0):
                continue
            cand = tuple(c + dd for c, dd in zip(center, d))
            t = RigidTransform.from_voxels(cand, spacing)
            res, valid = resample_to_reference(moving, fixed.geometry, t, "trilinear", return_valid=True)
            if valid.sum() < 2:
                continue
            try:
                score = ncc(f[valid], res.voxels[valid])
            except DegenerateInputError:
                continue
            if score > best_score:
                best, best_score = cand, score
        step /= 2.0
    return RigidTransform.from_voxels(best, spacing)
