import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualseg.volumes import (
    DegenerateInputError,
    Geometry,
    InvalidGeometryError,
    MalformedHeaderError,
    MaskVolume,
    NonBinaryMaskError,
    NonFiniteVoxelError,
    PayloadLengthError,
    RigidTransform,
    Volume,
    VolumeFileMissingError,
    estimate_translation,
    read_volume,
    resample_to_reference,
    write_volume,
)


def _smooth_volume(dims=(12, 14, 16), seed=0):
    rng = np.random.default_rng(seed)
    grid = np.indices(dims, dtype=np.float64)
    v = np.zeros(dims)
    for _ in range(4):
        c = [rng.uniform(3, d - 3) for d in dims]
        d2 = sum((g - ci) ** 2 for g, ci in zip(grid, c))
        v += rng.uniform(1, 3) * np.exp(-d2 / (2 * rng.uniform(1.5, 3) ** 2))
    return Volume(v, Geometry(dims), "PET")


def test_round_trip_2x2x2(tmp_path):
    v = Volume(np.arange(8, dtype=np.float32).reshape(2, 2, 2), Geometry((2, 2, 2), (1.5, 2, 2.5), (1, -2, 3)))
    write_volume(v, tmp_path / "v")
    back = read_volume(tmp_path / "v")
    assert back == v
    assert back.voxels.dtype == np.float32


def test_payload_length_scalar_and_mask(tmp_path):
    g = Geometry((3, 4, 5))
    _, raw = write_volume(Volume(np.ones(g.dims), g), tmp_path / "s")
    assert raw.stat().st_size == 3 * 4 * 5 * 4
    _, raw = write_volume(MaskVolume(np.ones(g.dims, np.uint8), g, "B"), tmp_path / "m")
    assert raw.stat().st_size == 3 * 4 * 5
    m = read_volume(tmp_path / "m")
    assert isinstance(m, MaskVolume) and m.label_source == "B"


def test_header_fields(tmp_path):
    g = Geometry((2, 2, 2))
    hdr, _ = write_volume(Volume(np.zeros(g.dims), g, "PET"), tmp_path / "p")
    h = json.loads(hdr.read_text())
    assert h == {
        "format_version": 1,
        "dims": [2, 2, 2],
        "spacing_mm": [1.0, 1.0, 1.0],
        "origin_mm": [0.0, 0.0, 0.0],
        "dtype": "f32le",
        "modality": "PET",
    }


def test_short_payload_rejected(tmp_path):
    g = Geometry((2, 2, 2))
    _, raw = write_volume(Volume(np.zeros(g.dims), g), tmp_path / "v")
    raw.write_bytes(np.zeros(7, "<f4").tobytes())
    with pytest.raises(PayloadLengthError):
        read_volume(tmp_path / "v")


def test_zero_spacing_in_header_rejected(tmp_path):
    g = Geometry((2, 2, 2))
    hdr, _ = write_volume(Volume(np.zeros(g.dims), g), tmp_path / "v")
    h = json.loads(hdr.read_text())
    h["spacing_mm"] = [0, 1, 1]
    hdr.write_text(json.dumps(h))
    with pytest.raises(InvalidGeometryError):
        read_volume(tmp_path / "v")


def test_missing_and_malformed(tmp_path):
    with pytest.raises(VolumeFileMissingError):
        read_volume(tmp_path / "nothing")
    g = Geometry((2, 2, 2))
    hdr, _ = write_volume(Volume(np.zeros(g.dims), g), tmp_path / "v")
    hdr.write_text("{not json")
    with pytest.raises(MalformedHeaderError):
        read_volume(tmp_path / "v")


def test_non_finite_voxel_in_payload(tmp_path):
    g = Geometry((2, 2, 2))
    _, raw = write_volume(Volume(np.zeros(g.dims), g), tmp_path / "v")
    data = np.zeros(8, "<f4")
    data[3] = np.nan
    raw.write_bytes(data.tobytes())
    with pytest.raises(NonFiniteVoxelError):
        read_volume(tmp_path / "v")


def test_invalid_constructions():
    with pytest.raises(InvalidGeometryError):
        Geometry((0, 2, 2))
    g = Geometry((1, 1, 2))
    with pytest.raises(NonBinaryMaskError):
        MaskVolume(np.array([[[0, 2]]], np.uint8), g)
    with pytest.raises(NonFiniteVoxelError):
        Volume(np.array([[[0, np.inf]]]), g)


def test_write_refuses_nonbinary_mask(tmp_path):
    g = Geometry((1, 1, 2))
    m = MaskVolume(np.zeros((1, 1, 2), np.uint8), g)
    # bypass the constructor check to simulate a corrupted buffer
    object.__setattr__(m, "voxels", np.array([[[0, 2]]], np.uint8))
    with pytest.raises(NonBinaryMaskError):
        write_volume(m, tmp_path / "m")
    assert not list(tmp_path.iterdir())


@settings(max_examples=25, deadline=None)
@given(
    dims=st.tuples(*[st.integers(1, 5)] * 3),
    seed=st.integers(0, 2**31),
    spacing=st.tuples(*[st.floats(0.1, 5.0)] * 3),
)
def test_round_trip_property(tmp_path_factory, dims, seed, spacing):
    d = tmp_path_factory.mktemp("rt")
    rng = np.random.default_rng(seed)
    g = Geometry(dims, spacing)
    v = Volume(rng.normal(size=dims).astype(np.float32), g, "CT")
    m = MaskVolume(rng.integers(0, 2, dims).astype(np.uint8), g, "PRED")
    write_volume(v, d / "v")
    write_volume(m, d / "m")
    assert read_volume(d / "v") == v
    assert read_volume(d / "m") == m


# -- resampling ---------------------------------------------------------------


def test_identity_resample():
    v = _smooth_volume()
    out = resample_to_reference(v, v.geometry, RigidTransform.identity())
    assert np.array_equal(out.voxels, v.voxels)


def test_integer_shift_x():
    rng = np.random.default_rng(1)
    v = Volume(rng.normal(size=(3, 4, 5)), Geometry((3, 4, 5)))
    out = resample_to_reference(v, v.geometry, RigidTransform((0, 0, 1)))
    assert np.array_equal(out.voxels[..., :-1], v.voxels[..., 1:])
    assert np.all(out.voxels[..., -1] == 0)


def test_half_voxel_ramp_midpoints():
    v = Volume(np.array([[[0.0, 2.0, 4.0]]]), Geometry((1, 1, 3)))
    out = resample_to_reference(v, v.geometry, RigidTransform((0, 0, 0.5)))
    assert out.voxels[0, 0, 0] == pytest.approx(1.0, abs=1e-9)
    assert out.voxels[0, 0, 1] == pytest.approx(3.0, abs=1e-9)
    assert out.voxels[0, 0, 2] == 0.0  # falls outside the moving grid


def test_mask_resample_rules():
    rng = np.random.default_rng(2)
    m = MaskVolume(rng.integers(0, 2, (4, 5, 6)).astype(np.uint8), Geometry((4, 5, 6)))
    with pytest.raises(ValueError):
        resample_to_reference(m, m.geometry, RigidTransform(), "trilinear")
    out = resample_to_reference(m, m.geometry, RigidTransform((0.3, -1.7, 0.6), 12.0), "nearest")
    assert set(np.unique(out.voxels)) <= {0, 1}


@pytest.mark.parametrize("shift", [(1, 0, 0), (0, -2, 1), (2, 1, -1)])
def test_shift_then_inverse_restores_interior(shift):
    v = _smooth_volume(seed=3)
    t = RigidTransform(shift)
    back = resample_to_reference(resample_to_reference(v, v.geometry, t), v.geometry, t.inverse())
    interior = tuple(slice(abs(s), d - abs(s)) for s, d in zip(shift, v.dims))
    assert np.array_equal(back.voxels[interior], v.voxels[interior])


def test_compose_and_inverse():
    t = RigidTransform((1, 2, 3), 10.0)
    assert t.compose(RigidTransform.identity()) == t
    assert RigidTransform.identity().compose(t) == t
    ident = t.compose(t.inverse())
    assert np.allclose(ident.translation, 0, atol=1e-12) and ident.axial_rotation_deg == 0


# -- alignment ------------------------------------------------------------------


def test_self_alignment_is_zero():
    v = _smooth_volume(seed=4)
    assert estimate_translation(v, v).is_identity()


def test_recovers_injected_shift():
    fixed = _smooth_volume((16, 18, 20), seed=5)
    truth = RigidTransform((2, -1, 0))
    moving = resample_to_reference(fixed, fixed.geometry, truth.inverse())
    est = estimate_translation(fixed, moving, search_radius_vox=3)
    assert np.all(np.abs(np.subtract(est.translation, truth.translation)) <= 1.0)


def test_constant_volume_degenerate():
    v = _smooth_volume()
    const = Volume(np.full(v.dims, 7.0), v.geometry)
    with pytest.raises(DegenerateInputError):
        estimate_translation(v, const)
