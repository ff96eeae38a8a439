import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gtvseg.errors import DegenerateInputError, ShapeError
from gtvseg.preprocess import (
    RegionBox,
    compute_region,
    normalize,
    preprocess,
    resample,
    resampled_shape,
    sample_patch,
    truncate_hu,
)
from gtvseg.volume import LabelMask, Volume


def test_truncate_hu_clips_to_window():
    v = Volume(np.array([-1000, -200, 0, 700, 3000], np.float32).reshape(1, 1, 5))
    assert truncate_hu(v).data.ravel().tolist() == [-200, -200, 0, 700, 700]


def test_normalize_zero_mean_unit_std():
    v = Volume(np.random.default_rng(0).uniform(-200, 700, (4, 5, 6)))
    d = normalize(v).data.astype(np.float64)
    assert abs(d.mean()) < 1e-5 and abs(d.std() - 1) < 1e-5


def test_normalize_constant_volume_rejected():
    with pytest.raises(DegenerateInputError):
        normalize(Volume(np.full((2, 2, 2), 40.0)))


def test_resampled_shape_rounds_half_up():
    assert resampled_shape((10, 10, 10), (1.5, 0.75, 1.0), (3.0, 1.0, 1.0)) == (5, 8, 10)
    assert resampled_shape((5, 9, 9), (3.0, 0.5, 0.5)) == (5, 5, 5)


def test_resample_identity_is_a_copy():
    v = Volume(np.random.default_rng(1).standard_normal((3, 4, 5)))
    w = resample(v)
    assert np.array_equal(v.data, w.data) and w.data is not v.data


def test_resample_linear_ramp_is_exact():
    z = np.arange(8, dtype=np.float32)[:, None, None] * np.ones((1, 4, 4), np.float32)
    v = Volume(z, (1.5, 1.0, 1.0))
    w = resample(v, (3.0, 1.0, 1.0))
    assert w.shape == (4, 4, 4)
    np.testing.assert_allclose(w.data[:, 0, 0], [0, 2, 4, 6])


def test_mask_round_trip_changes_only_a_boundary_shell():
    m = np.zeros((12, 20, 20), np.uint8)
    m[3:9, 5:15, 6:14] = 1
    lm = LabelMask(m, (3.0, 1.0, 1.0))
    up = resample(lm, (1.5, 0.5, 0.5))
    back = resample(up, (3.0, 1.0, 1.0), out_shape=lm.shape)
    assert back.shape == lm.shape
    assert np.array_equal(back.data, m)


def test_preprocess_chain():
    v = Volume(np.random.default_rng(2).uniform(-1000, 1000, (4, 8, 8)), (3.0, 0.5, 0.5))
    out = preprocess(v)
    assert out.shape == (4, 4, 4) and out.spacing == (3.0, 1.0, 1.0)


def _body_volume():
    d = np.full((50, 20, 20), -200.0, np.float32)
    d[10:50, 5:15, 6:14] = 40.0
    d[30:50, 2:18, 1:19] = 40.0  # wider slab further along z
    return Volume(d)


def test_regions_nest_and_local_takes_first_forty_percent():
    v = _body_volume()
    g = compute_region(v, "global")
    m = compute_region(v, "middle")
    loc = compute_region(v, "local")
    assert g.bounds == (0, 49, 0, 19, 0, 19)
    assert m.bounds == (10, 49, 2, 17, 1, 18)
    assert (loc.z0, loc.z1) == (10, 25)
    assert (loc.y0, loc.y1, loc.x0, loc.x1) == (5, 14, 6, 13)
    assert loc.within(m) and m.within(g) and loc != m


def test_region_errors():
    with pytest.raises(ValueError, match="local, middle, global"):
        compute_region(_body_volume(), "coastal")
    with pytest.raises(DegenerateInputError):
        compute_region(Volume(np.full((4, 4, 4), -500.0)), "middle")
    with pytest.raises(ValueError):
        RegionBox(3, 2, 0, 0, 0, 0)


def test_patch_inside_box_and_foreground_centered():
    rng = np.random.default_rng(3)
    img = rng.standard_normal((40, 96, 96)).astype(np.float32)
    lab = np.zeros(img.shape, np.uint8)
    lab[20, 50, 40] = 1
    box = RegionBox(0, 39, 0, 95, 0, 95, "global")
    s = sample_patch(img, lab, box, rng, fg_prob=1.0, flip_prob=0.0)
    assert s.foreground_centered and s.image.shape == (16, 64, 64)
    assert s.label.sum() == 1 and s.label[8, 32, 32] == 1


def test_patch_without_foreground_falls_back_to_uniform():
    rng = np.random.default_rng(4)
    img = np.zeros((20, 70, 70), np.float32)
    lab = np.zeros(img.shape, np.uint8)
    s = sample_patch(img, lab, RegionBox(0, 19, 0, 69, 0, 69), rng, fg_prob=1.0)
    assert s.fallback_uniform and not s.foreground_centered


def test_patch_pads_small_volumes_with_minimum():
    rng = np.random.default_rng(5)
    img = np.full((4, 10, 10), 2.0, np.float32)
    img[0, 0, 0] = -3.0
    s = sample_patch(img, np.zeros(img.shape, np.uint8), RegionBox(0, 3, 0, 9, 0, 9), rng, flip_prob=0.0)
    assert s.image.shape == (16, 64, 64)
    assert s.image[10, 30, 30] == -3.0


def test_flip_mirrors_x():
    rng = np.random.default_rng(6)
    img = np.arange(16 * 64 * 64, dtype=np.float32).reshape(16, 64, 64)
    lab = np.zeros(img.shape, np.uint8)
    s = sample_patch(img, lab, RegionBox(0, 15, 0, 63, 0, 63), rng, fg_prob=0.0, flip_prob=1.0)
    assert s.flipped and np.array_equal(s.image, img[:, :, ::-1])


def test_patch_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        sample_patch(np.zeros((4, 4, 4)), np.zeros((4, 4, 5)), RegionBox(0, 3, 0, 3, 0, 3), np.random.default_rng())


@settings(max_examples=40, deadline=None)
@given(
    z0=st.integers(0, 20), dz=st.integers(0, 25),
    y0=st.integers(0, 60), dy=st.integers(0, 70),
    seed=st.integers(0, 2**32 - 1),
)
def test_patch_overlaps_box_for_any_box(z0, dz, y0, dy, seed):
    shape = (48, 140, 80)
    box = RegionBox(z0, min(z0 + dz, 47), y0, min(y0 + dy, 139), 0, 79)
    rng = np.random.default_rng(seed)
    img = np.zeros(shape, np.float32)
    s = sample_patch(img, np.zeros(shape, np.uint8), box, rng, fg_prob=0.0)
    for c, p, a, b in zip(s.corner, (16, 64, 64), (box.z0, box.y0, box.x0), (box.z1, box.y1, box.x1)):
        if b - a + 1 >= p:
            assert a <= c and c + p - 1 <= b
        else:
            assert c <= a and b <= c + p - 1
