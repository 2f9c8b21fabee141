"""Synthetic PET/CT osteomyelitis cohorts with two annotation sources.

Each patient has a tubular cortical bone in soft tissue. Lesions sit on the
cortex: a core of bone destruction (visible on CT) under a Gaussian PET
hotspot whose extent is drawn independently of the core. Label B is the core;
Label A additionally takes every voxel in the halo where uptake exceeds a
fraction of the lesion peak. Soft-tissue "false" hotspots appear on PET only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .volumes import Geometry, MaskVolume, RigidTransform, Study, Volume, resample_to_reference

AIR_HU = -1000.0
SOFT_TISSUE_HU = 40.0
MARROW_HU = 100.0
BONE_HU = 1200.0
METAL_HU = 3000.0
CT_RANGE = (-1000.0, 3100.0)

PET_BASE_TISSUE = 1.0
PET_BASE_BONE = 1.5
PET_BASE_MARROW = 1.8


class PhantomGenerationError(ValueError):
    pass


@dataclass(frozen=True)
class LesionSpec:
    center: tuple[float, float, float]
    core_radius_vox: float
    halo_radius_vox: float
    pet_peak: float
    destruction_hu: float

    def __post_init__(self):
        if not self.core_radius_vox > 0:
            raise ValueError("core_radius_vox must be > 0")
        if not self.halo_radius_vox > self.core_radius_vox:
            raise ValueError("halo_radius_vox must exceed core_radius_vox")
        if not self.pet_peak > 0:
            raise ValueError("pet_peak must be > 0")


@dataclass(frozen=True)
class PhantomConfig:
    n_patients: int = 16
    dims: tuple[int, int, int] = (128, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    lesions_per_patient: tuple[int, int] = (4, 6)
    core_radius_range: tuple[float, float] = (3.5, 5.5)
    halo_radius_range: tuple[float, float] = (7.0, 9.5)
    pet_peak_range: tuple[float, float] = (6.0, 10.0)
    destruction_hu_range: tuple[float, float] = (250.0, 450.0)
    label_a_uptake_fraction: float = 0.4
    pet_sigma_per_halo: float = 0.6
    false_hotspots_per_patient: tuple[int, int] = (2, 4)
    false_hotspot_peak_fraction: tuple[float, float] = (0.6, 0.95)
    # distance from the outer cortex surface to a false hotspot centre: close
    # enough to look like bone uptake on PET, outside the cortex on CT
    false_hotspot_bone_gap_vox: tuple[float, float] = (1.0, 4.0)
    implant_probability: float = 0.3
    pet_misalignment_vox: tuple[tuple[int, int], tuple[int, int], tuple[int, int]] = ((-2, 2), (-3, 3), (-3, 3))
    noise_sd_hu: float = 20.0
    pet_noise_sd: float = 0.05

    def __post_init__(self):
        if self.n_patients < 1:
            raise ValueError("n_patients: must be >= 1")
        if len(self.dims) != 3 or any(int(d) < 8 for d in self.dims):
            raise ValueError("dims: need three entries >= 8")
        if any(not s > 0 for s in self.spacing):
            raise ValueError("spacing: components must be > 0")
        lo, hi = self.lesions_per_patient
        if lo < 0 or hi < lo:
            raise ValueError("lesions_per_patient: need 0 <= lo <= hi")
        if not 0.0 <= self.implant_probability <= 1.0:
            raise ValueError("implant_probability: must lie in [0, 1]")
        for lo, hi in self.pet_misalignment_vox:
            if lo > hi or lo < -4 or hi > 4:
                raise ValueError("pet_misalignment_vox: ranges must be ordered and within +-4 voxels")
        if self.noise_sd_hu < 0 or self.pet_noise_sd < 0:
            raise ValueError("noise_sd_hu: must be >= 0")
        if not 0.0 < self.label_a_uptake_fraction < 1.0:
            raise ValueError("label_a_uptake_fraction: must lie in (0, 1)")
        g0, g1 = self.false_hotspot_bone_gap_vox
        if not 0 < g0 <= g1:
            raise ValueError("false_hotspot_bone_gap_vox: need 0 < lo <= hi (hotspots lie outside bone)")
        c0, c1 = self.core_radius_range
        h0, h1 = self.halo_radius_range
        if not (0 < c0 <= c1 and 0 < h0 <= h1 and h0 > c1):
            raise ValueError("halo_radius_range: every halo must exceed every core radius")

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.dims, self.spacing)


@dataclass
class PhantomCase:
    """Everything produced for one patient; ``study`` holds the realigned PET."""

    study: Study
    transform: RigidTransform
    acquired_pet: Volume
    lesions: list[LesionSpec] = field(default_factory=list)
    false_hotspots: list[tuple[tuple[float, float, float], float, float]] = field(default_factory=list)
    bone_center_yx: tuple[float, float] = (0.0, 0.0)
    bone_radii: tuple[float, float] = (0.0, 0.0)
    implant: bool = False


def _dist2(grid, center) -> np.ndarray:
    zz, yy, xx = grid
    cz, cy, cx = center
    return (zz - cz) ** 2 + (yy - cy) ** 2 + (xx - cx) ** 2


def _place_lesions(rng, cfg: PhantomConfig, n: int, bone_c, r_in, r_out) -> list[LesionSpec]:
    nz, ny, nx = cfg.dims
    lesions: list[LesionSpec] = []
    attempts = 0
    while len(lesions) < n:
        attempts += 1
        if attempts > 200:
            raise PhantomGenerationError("lesions_per_patient: could not place that many non-overlapping lesions inside dims")
        core = rng.uniform(*cfg.core_radius_range)
        halo = rng.uniform(*cfg.halo_radius_range)
        peak = rng.uniform(*cfg.pet_peak_range)
        hu = rng.uniform(*cfg.destruction_hu_range)
        theta = rng.uniform(0, 2 * math.pi)
        rad = 0.5 * (r_in + r_out)
        margin = math.ceil(halo) + 1
        if 2 * margin >= nz:
            raise PhantomGenerationError(f"lesion halo {halo:.1f} does not fit in {nz} slices")
        z = rng.uniform(margin, nz - 1 - margin)
        y = bone_c[0] + rad * math.sin(theta)
        x = bone_c[1] + rad * math.cos(theta)
        # clamp in-plane so the halo stays inside the grid
        y = min(max(y, margin), ny - 1 - margin)
        x = min(max(x, margin), nx - 1 - margin)
        if not (margin <= y <= ny - 1 - margin and margin <= x <= nx - 1 - margin):
            raise PhantomGenerationError("lesion sphere exceeds the volume bounds")
        if any(
            math.dist((z, y, x), l.center) < halo + l.halo_radius_vox for l in lesions
        ):
            continue
        lesions.append(LesionSpec((z, y, x), core, halo, peak, hu))
    return lesions


def generate_case(seed: int, config: PhantomConfig, index: int) -> PhantomCase:
    if not 0 <= index < config.n_patients:
        raise PhantomGenerationError(f"index {index} outside 0..{config.n_patients - 1}")
    rng = np.random.default_rng(seed + index)
    nz, ny, nx = config.dims
    geom = config.geometry
    grid = np.indices(config.dims, dtype=np.float64)
    zz, yy, xx = grid

    # anatomy ---------------------------------------------------------------
    body_c = ((ny - 1) / 2 + rng.uniform(-1, 1), (nx - 1) / 2 + rng.uniform(-1, 1))
    body_r = (0.42 * ny, 0.42 * nx)
    body = ((yy - body_c[0]) / body_r[0]) ** 2 + ((xx - body_c[1]) / body_r[1]) ** 2 <= 1.0
    bone_c = (body_c[0] + rng.uniform(-3, 3), body_c[1] + rng.uniform(-3, 3))
    r_out = rng.uniform(0.19, 0.23) * min(ny, nx)
    r_in = r_out - rng.uniform(3.5, 5.0)
    rb2 = (yy - bone_c[0]) ** 2 + (xx - bone_c[1]) ** 2
    cortex = (rb2 <= r_out**2) & (rb2 > r_in**2)
    marrow = rb2 <= r_in**2

    ct = np.full(config.dims, AIR_HU)
    ct[body] = SOFT_TISSUE_HU
    ct[marrow] = MARROW_HU
    ct[cortex] = BONE_HU

    pet = np.zeros(config.dims)
    pet[body] = PET_BASE_TISSUE
    pet[cortex] = PET_BASE_BONE
    pet[marrow] = PET_BASE_MARROW

    # lesions ---------------------------------------------------------------
    lo, hi = config.lesions_per_patient
    n_les = int(rng.integers(lo, hi + 1))
    lesions = _place_lesions(rng, config, n_les, bone_c, r_in, r_out)

    label_b = np.zeros(config.dims, dtype=bool)
    hotspots = []
    for les in lesions:
        d2 = _dist2(grid, les.center)
        core = d2 <= les.core_radius_vox**2
        ct[core] = les.destruction_hu
        label_b |= core
        sigma = config.pet_sigma_per_halo * les.halo_radius_vox
        uptake = les.pet_peak * np.exp(-d2 / (2 * sigma**2))
        hotspots.append((les, d2, uptake))
        pet += uptake

    # false hotspots: soft tissue hugging the bone, away from every lesion
    false_spots = []
    fl, fh = config.false_hotspots_per_patient
    n_false = int(rng.integers(fl, fh + 1)) if fh > 0 else 0
    peak_ref = max((l.pet_peak for l in lesions), default=config.pet_peak_range[0])
    attempts = 0
    while len(false_spots) < n_false and attempts < 500:
        attempts += 1
        sigma = config.pet_sigma_per_halo * rng.uniform(*config.halo_radius_range)
        theta = rng.uniform(0, 2 * math.pi)
        rb = r_out + rng.uniform(*config.false_hotspot_bone_gap_vox)
        z = rng.uniform(2, nz - 3)
        y = bone_c[0] + rb * math.sin(theta)
        x = bone_c[1] + rb * math.cos(theta)
        inside_body = ((y - body_c[0]) / body_r[0]) ** 2 + ((x - body_c[1]) / body_r[1]) ** 2 <= 0.8
        if not inside_body or not (0 <= y <= ny - 1 and 0 <= x <= nx - 1):
            continue
        if any(math.dist((z, y, x), l.center) < 3 * sigma + l.halo_radius_vox for l in lesions):
            continue
        # keep hotspots apart so overlapping tails cannot outshine a lesion
        if any(math.dist((z, y, x), c) < 3 * (sigma + s) for c, s, _ in false_spots):
            continue
        peak = peak_ref * rng.uniform(*config.false_hotspot_peak_fraction)
        pet += peak * np.exp(-_dist2(grid, (z, y, x)) / (2 * sigma**2))
        false_spots.append(((z, y, x), sigma, peak))

    label_a = label_b.copy()
    for les, d2, uptake in hotspots:
        label_a |= (d2 <= les.halo_radius_vox**2) & (uptake > config.label_a_uptake_fraction * les.pet_peak)

    # metal implant in the marrow canal, never touching a lesion core
    implant = bool(rng.random() < config.implant_probability)
    if implant:
        ir = rng.uniform(1.5, 2.5)
        ic = (bone_c[0] + rng.uniform(-1, 1), bone_c[1] + rng.uniform(-1, 1))
        z0 = int(rng.integers(0, nz // 3))
        z1 = int(rng.integers(2 * nz // 3, nz))
        cyl = ((yy - ic[0]) ** 2 + (xx - ic[1]) ** 2 <= ir**2) & (zz >= z0) & (zz <= z1)
        cyl &= ~label_b
        ct[cyl] = METAL_HU

    ct += rng.normal(0.0, config.noise_sd_hu, size=ct.shape) * body
    np.clip(ct, *CT_RANGE, out=ct)
    pet += rng.normal(0.0, config.pet_noise_sd, size=pet.shape) * body
    np.clip(pet, 0.0, None, out=pet)

    # misalignment: the acquired PET is the clean PET seen through inverse(t),
    # so resampling it through t realigns it onto the CT grid
    shift = [int(rng.integers(a, b + 1)) for a, b in config.pet_misalignment_vox]
    t = RigidTransform.from_voxels(shift, config.spacing)
    clean_pet = Volume(pet.astype(np.float32), geom, "PET")
    acquired = resample_to_reference(clean_pet, geom, t.inverse(), "trilinear")
    realigned = resample_to_reference(acquired, geom, t, "trilinear")

    pid = f"P{index:03d}"
    study = Study(
        pid,
        Volume(ct.astype(np.float32), geom, "CT"),
        realigned,
        MaskVolume(label_a.astype(np.uint8), geom, "A"),
        MaskVolume(label_b.astype(np.uint8), geom, "B"),
    )
    return PhantomCase(study, t, acquired, lesions, false_spots, bone_c, (r_in, r_out), implant)


def generate_patient(seed: int, config: PhantomConfig, index: int) -> tuple[Study, RigidTransform]:
    """One patient from cohort seed ``seed``; the per-patient stream is ``seed + index``."""
    case = generate_case(seed, config, index)
    return case.study, case.transform


def generate_cohort(config: PhantomConfig) -> list[Study]:
    return [generate_case(config.seed, config, i).study for i in range(config.n_patients)]
