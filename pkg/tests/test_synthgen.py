import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cobalt import synthgen
from cobalt.synthgen import AugConfig, Crop, DatasetSpec


def small_spec(**kw):
    base = dict(n_train=200, n_val=50, n_test=100, image_size=16, patch_size=4, seed=3)
    base.update(kw)
    return DatasetSpec(**base)


@pytest.fixture(scope="module")
def small():
    return synthgen.generate_dataset(small_spec())


def test_images_in_range_and_labels_in_bounds(small):
    assert small.images.min() >= 0.0 and small.images.max() <= 1.0
    assert set(np.unique(small.y)) <= set(range(5))
    assert set(np.unique(small.a)) <= set(range(5))
    assert small.images.shape == (350, 16, 16, 3)


def test_class_marginals_are_balanced(small):
    counts = np.bincount(small.split("train").y, minlength=5)
    assert np.all(counts == 40)


def test_full_correlation_gives_majority_color_everywhere():
    d = synthgen.generate_dataset(small_spec(correlation=1.0))
    tr = d.split("train")
    assert np.array_equal(tr.y, tr.a)
    groups = synthgen.ground_truth_groups(tr.y, tr.a, 5)
    assert np.unique(groups).size == 5


def test_majority_fraction_at_scale_within_binomial_band():
    rng = np.random.default_rng(0)
    y = np.repeat(np.arange(5), 20000)
    a = synthgen._colors_for_split(y, 0.995, 5, rng)
    for cls in range(5):
        frac = np.mean(a[y == cls] == cls)
        sd = np.sqrt(0.995 * 0.005 / 20000)
        assert abs(frac - 0.995) <= 3 * sd
        minority = a[(y == cls) & (a != cls)]
        assert set(np.unique(minority)) <= set(range(5)) - {cls}


@pytest.mark.parametrize("rho,per_class", [(0.995, 2000), (0.9, 120), (0.5, 20)])
def test_every_class_has_a_minority_when_large_enough(rho, per_class):
    assert per_class >= 10 / (1 - rho)
    y = np.repeat(np.arange(5), per_class)
    a = synthgen._colors_for_split(y, rho, 5, np.random.default_rng(1))
    for cls in range(5):
        assert np.any(a[y == cls] != cls)


def test_test_split_is_uniform_by_default_and_val_follows_train():
    d = synthgen.generate_dataset(small_spec(n_train=500, n_val=500, n_test=2000, correlation=0.98))
    te, va = d.split("test"), d.split("val")
    assert np.mean(te.a == te.y) < 0.35
    assert np.mean(va.a == va.y) == pytest.approx(0.98, abs=1e-9)
    groups = synthgen.ground_truth_groups(te.y, te.a, 5)
    assert np.unique(groups).size == 25


def test_spec_rejects_fewer_colors_than_classes_and_bad_values():
    with pytest.raises(ValueError, match="majority color"):
        DatasetSpec(n_classes=5, n_colors=4)
    with pytest.raises(ValueError):
        DatasetSpec(correlation=1.5)
    with pytest.raises(ValueError):
        DatasetSpec(image_size=30, patch_size=8)
    with pytest.raises(ValueError, match="unknown"):
        DatasetSpec.from_dict({"n_class": 3})


def test_ground_truth_group_formula():
    assert synthgen.ground_truth_groups([2], [3], 5)[0] == 13
    y, a = np.meshgrid(np.arange(5), np.arange(5))
    assert np.unique(synthgen.ground_truth_groups(y.ravel(), a.ravel(), 5)).size == 25


def test_same_seed_gives_byte_identical_files(tmp_path):
    a = synthgen.save_dataset(synthgen.generate_dataset(small_spec()), tmp_path / "a")
    b = synthgen.save_dataset(synthgen.generate_dataset(small_spec()), tmp_path / "b")
    assert a.read_bytes() == b.read_bytes()
    c = synthgen.save_dataset(synthgen.generate_dataset(small_spec(seed=4)), tmp_path / "c")
    assert a.read_bytes() != c.read_bytes()


def test_cblt_layout_and_round_trip(small, tmp_path):
    path = synthgen.save_dataset(small, tmp_path)
    raw = path.read_bytes()
    assert raw[:4] == b"CBLT"
    assert struct.unpack_from("<H", raw, 4)[0] == 1
    assert struct.unpack_from("<6I", raw, 6) == (350, 16, 16, 3, 5, 5)
    first = struct.unpack_from("<IHH", raw, 30)
    assert first == (int(small.sample_id[0]), int(small.y[0]), int(small.a[0]))
    pixel = struct.unpack_from("<d", raw, 38)[0]
    assert pixel == small.images[0, 0, 0, 0]
    back = synthgen.load_dataset(tmp_path)
    np.testing.assert_array_equal(back.images, small.images)
    np.testing.assert_array_equal(back.y, small.y)
    for name in ("train", "val", "test"):
        np.testing.assert_array_equal(back.split(name).sample_id, small.split(name).sample_id)
    assert json.loads((tmp_path / "dataset.json").read_text())["seed"] == 3
    lines = (tmp_path / "val.txt").read_text().split()
    assert [int(v) for v in lines] == small.split("val").sample_id.tolist()


def test_load_rejects_bad_magic_and_truncation(small, tmp_path):
    path = synthgen.save_dataset(small, tmp_path)
    raw = path.read_bytes()
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        synthgen.load_dataset(tmp_path)
    path.write_bytes(raw[:-5])
    with pytest.raises(ValueError, match="size"):
        synthgen.load_dataset(tmp_path)


# views


def test_identity_augmentation_maps_every_patch_to_itself(small):
    pair = synthgen.make_views(small.images[0], AugConfig(enabled=False), 0, 4)
    assert pair.overlap_map == {i: i for i in range(16)}
    np.testing.assert_array_equal(pair.view_s, small.images[0])
    np.testing.assert_array_equal(pair.view_t, small.images[0])


def test_disjoint_crops_have_empty_overlap(small):
    crops = (Crop(0, 0, 8), Crop(8, 8, 8))
    pair = synthgen.make_views(small.images[0], AugConfig(brightness=0.0), 0, 4, crops)
    assert pair.overlap_map == {}
    assert pair.student_mask(16).sum() == 0


def _pixel_oracle(crop_from: Crop, crop_to: Crop, view: int, patch: int, res: int = 8) -> dict[int, int]:
    """Rasterize every patch's source region on a fine grid; map when the regions share over half their area."""
    g = view // patch
    hi = int(np.ceil(max(crop_from.top + crop_from.size, crop_to.top + crop_to.size,
                         crop_from.left + crop_from.size, crop_to.left + crop_to.size))) + 1
    coords = (np.arange(hi * res) + 0.5) / res

    def regions(crop):
        stride = crop.size / g
        out = []
        for r in range(g):
            for c in range(g):
                rows = (coords >= crop.top + r * stride) & (coords < crop.top + (r + 1) * stride)
                cols = (coords >= crop.left + c * stride) & (coords < crop.left + (c + 1) * stride)
                out.append(rows[:, None] & cols[None, :])
        return out

    a, b = regions(crop_from), regions(crop_to)
    found = {}
    for i, ra in enumerate(a):
        for j, rb in enumerate(b):
            if (ra & rb).sum() > 0.5 * min(ra.sum(), rb.sum()):
                found[i] = j
    return found


@pytest.mark.parametrize("shift,expected", [((0, 6), 12), ((6, 0), 12), ((6, 6), 9), ((0, -6), 12)])
def test_shift_by_one_stride_matches_pixel_oracle(shift, expected):
    teacher = Crop(6.0, 6.0, 24.0)
    student = Crop(6.0 + shift[0], 6.0 + shift[1], 24.0)
    got = synthgen.overlap_map(teacher, student, 32, 8)
    assert got == _pixel_oracle(teacher, student, 32, 8)
    assert len(got) == expected


def test_mapped_patches_cover_the_same_region_within_a_stride():
    rng = np.random.default_rng(5)
    for _ in range(30):
        crops = [synthgen._random_crop(32, AugConfig(), rng) for _ in range(2)]
        m = synthgen.overlap_map(crops[1], crops[0], 32, 8)
        ct, cs = synthgen.patch_centers(crops[1], 32, 8), synthgen.patch_centers(crops[0], 32, 8)
        stride = min(c.size for c in crops) / 4
        for i, j in m.items():
            assert np.all(np.abs(ct[i] - cs[j]) < stride)


crop_strategy = st.builds(
    lambda s, t, l: Crop(t * (32 - s), l * (32 - s), s),
    st.floats(8.0, 32.0), st.floats(0, 1), st.floats(0, 1),
)


@settings(max_examples=80, deadline=None)
@given(crop_strategy, crop_strategy)
def test_overlap_map_is_injective_and_symmetric_under_role_swap(a, b):
    forward = synthgen.overlap_map(a, b, 32, 8)
    backward = synthgen.overlap_map(b, a, 32, 8)
    assert len(set(forward.values())) == len(forward)
    assert {j: i for i, j in forward.items()} == backward


def test_views_are_seeded_and_in_range(small):
    img = small.images[1]
    p1 = synthgen.make_views(img, AugConfig(), 11, 4)
    p2 = synthgen.make_views(img, AugConfig(), 11, 4)
    np.testing.assert_array_equal(p1.view_s, p2.view_s)
    assert p1.overlap_map == p2.overlap_map
    assert 0.0 <= p1.view_t.min() and p1.view_t.max() <= 1.0
    with pytest.raises(ValueError):
        synthgen.make_views(img, AugConfig(), 0, 32)


def test_view_batch_matches_single_views_bitwise(small):
    images = small.images[:12]
    seeds = np.random.default_rng(4).integers(0, 2**63 - 1, len(images))
    views_s, views_t, overlaps = synthgen.make_view_batch(images, AugConfig(), seeds, 4)
    for k, img in enumerate(images):
        pair = synthgen.make_views(img, AugConfig(), int(seeds[k]), 4)
        assert np.array_equal(pair.view_s, views_s[k]) and np.array_equal(pair.view_t, views_t[k])
        assert pair.overlap_map == overlaps[k]
    same_s, same_t, ident = synthgen.make_view_batch(images, AugConfig(enabled=False), seeds, 4)
    assert np.array_equal(same_s, images) and np.array_equal(same_t, images)
    assert ident[0] == {i: i for i in range(16)}


def test_crop_resampling_matches_bilinear_oracle():
    # direct evaluation of clamped two-axis linear interpolation
    rng = np.random.default_rng(8)
    img = rng.random((8, 8, 2))
    crop = Crop(1.3, 0.4, 5.5)
    got = synthgen._apply_crop(img, crop)
    for i in range(8):
        for j in range(8):
            r = min(max(crop.top + (i + 0.5) * crop.size / 8 - 0.5, 0.0), 7.0)
            c = min(max(crop.left + (j + 0.5) * crop.size / 8 - 0.5, 0.0), 7.0)
            r0, c0 = int(np.floor(r)), int(np.floor(c))
            r1, c1 = min(r0 + 1, 7), min(c0 + 1, 7)
            fr, fc = r - r0, c - c0
            want = ((1 - fr) * (1 - fc) * img[r0, c0] + (1 - fr) * fc * img[r0, c1]
                    + fr * (1 - fc) * img[r1, c0] + fr * fc * img[r1, c1])
            np.testing.assert_allclose(got[i, j], want, rtol=0, atol=1e-14)
