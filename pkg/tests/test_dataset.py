import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualseg.dataset import (
    AugmentationConfig,
    AugmentParams,
    SplitAssignment,
    apply_augmentation,
    augment,
    batch_iter,
    draw_augmentation,
    patient_split,
    sample_rng,
    stack_batch,
)
from dualseg.preprocess import SliceSample


def ids(n):
    return [f"P{i:03d}" for i in range(n)]


@pytest.mark.parametrize("n, sizes", [(20, (14, 2, 4)), (10, (7, 1, 2)), (16, (11, 2, 3)), (3, (1, 1, 1))])
def test_split_sizes(n, sizes):
    assert patient_split(ids(n), seed=0).sizes == sizes


@settings(max_examples=40, deadline=None)
@given(n=st.integers(3, 60), seed=st.integers(0, 10**6))
def test_split_is_partition(n, seed):
    s = patient_split(ids(n), seed=seed)
    assert s.all_ids() == set(ids(n))
    assert sum(s.sizes) == n
    assert s == patient_split(ids(n), seed=seed)


def test_split_errors_and_round_trip():
    with pytest.raises(ValueError):
        patient_split(ids(2))
    s = patient_split(ids(16), seed=0)
    assert SplitAssignment.from_dict(s.to_dict()) == s
    with pytest.raises(ValueError):
        SplitAssignment(("a",), ("a",), ("b",))


def _sample(seed=0, size=(16, 16)):
    rng = np.random.default_rng(seed)
    mask = (rng.random(size) > 0.7).astype(np.uint8)
    image = np.stack([mask.astype(float), rng.random(size)], axis=-1)
    return SliceSample(image, mask, "P000", 3, "A")


def test_identity_params_unchanged():
    s = _sample()
    assert apply_augmentation(s, AugmentParams()) == s
    off = AugmentationConfig(enabled=False)
    assert augment(s, np.random.default_rng(0), off) == s


def test_horizontal_flip_reverses_columns():
    s = _sample()
    f = apply_augmentation(s, AugmentParams(flip_h=True))
    assert np.array_equal(f.image, s.image[:, ::-1])
    assert np.array_equal(f.mask, s.mask[:, ::-1])
    assert apply_augmentation(f, AugmentParams(flip_h=True)) == s


def test_rotation_fixes_center():
    mask = np.zeros((15, 15), np.uint8)
    mask[7, 7] = 1
    s = SliceSample(np.zeros((15, 15, 2)), mask, "P", 0)
    r = apply_augmentation(s, AugmentParams(angle_deg=15.0))
    assert r.mask[7, 7] == 1 and r.mask.sum() == 1


def test_draw_ranges():
    cfg = AugmentationConfig()
    rng = np.random.default_rng(0)
    draws = [draw_augmentation(rng, cfg, (64, 64)) for _ in range(300)]
    assert all(-15 <= d.angle_deg <= 15 and 0.95 <= d.scale <= 1.05 for d in draws)
    assert all(abs(d.shift[0]) <= 3.2 and abs(d.shift[1]) <= 3.2 for d in draws)
    assert 0.35 < np.mean([d.flip_h for d in draws]) < 0.65


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_shared_geometric_map(seed):
    s = _sample(seed % 97)
    out = augment(s, sample_rng(seed, 0, 0))
    assert out.image.shape == s.image.shape and out.mask.shape == s.mask.shape
    assert set(np.unique(out.mask)) <= {0, 1}
    # channel 0 carries the mask; bilinear + threshold must agree with the nearest-resampled mask
    # everywhere except pixels whose bilinear value is ambiguous
    ch0 = out.image[..., 0]
    decisive = np.abs(ch0 - 0.5) > 0.49
    assert np.array_equal((ch0 > 0.5)[decisive], out.mask.astype(bool)[decisive])


def test_batches_cover_once():
    batches = list(batch_iter(list(range(20)), 8, shuffle_seed=1, epoch=0))
    assert [len(b) for b in batches] == [8, 8, 4]
    assert sorted(sum(batches, [])) == list(range(20))
    assert batches == list(batch_iter(list(range(20)), 8, shuffle_seed=1, epoch=0))
    with pytest.raises(ValueError):
        list(batch_iter([], 8))


def test_epoch_permutation_fixture():
    assert list(batch_iter(list(range(6)), 6, 0, 0)) == [[3, 2, 5, 4, 0, 1]]
    assert list(batch_iter(list(range(6)), 6, 0, 1)) == [[1, 4, 3, 0, 2, 5]]


def test_stack_batch_layout():
    a, b = _sample(1), _sample(2)
    x, y = stack_batch([a, b], channels=(1,), dtype=np.float64)
    assert x.shape == (2, 1, 16, 16) and y.shape == (2, 1, 16, 16)
    assert np.array_equal(x[1, 0], b.image[..., 1])
    assert np.array_equal(y[0, 0], a.mask)


def test_blob_mask_agrees_with_thresholded_channel():
    yy, xx = np.mgrid[:32, :32]
    mask = (((yy - 14) ** 2 + (xx - 17) ** 2) <= 36).astype(np.uint8)
    s = SliceSample(np.stack([mask.astype(float), np.zeros((32, 32))], -1), mask, "P", 0)
    for seed in range(10):
        out = augment(s, sample_rng(seed, 1, 0))
        agree = np.mean((out.image[..., 0] > 0.5) == out.mask.astype(bool))
        assert agree >= 0.98
