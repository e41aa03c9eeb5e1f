import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from oracles import resize_scalar, union_find_components
from rbcscope.imgcore import (Box, ScoredBox, bounding_box, connected_components, crop, iou, nms,
                              read_pgm_mask, read_ppm, resize_bilinear, write_pgm_mask, write_ppm)


def as_sets(regions):
    return [frozenset(map(tuple, r.tolist())) for r in regions]


masks = hnp.arrays(bool, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=12))
boxes = st.builds(lambda x, y, w, h: Box(x, y, x + w, y + h),
                  st.integers(0, 20), st.integers(0, 20), st.integers(0, 10), st.integers(0, 10))


# connected components

def test_empty_mask_has_no_regions():
    assert connected_components(np.zeros((5, 5), bool)) == []


def test_block_is_one_region():
    mask = np.zeros((6, 6), bool)
    mask[1:4, 2:5] = True
    regions = connected_components(mask)
    assert len(regions) == 1 and len(regions[0]) == 9


def test_diagonal_pair_joins_under_8_connectivity():
    mask = np.zeros((3, 3), bool)
    mask[0, 0] = mask[1, 1] = True
    assert len(union_find_components(mask, 8)) == 1
    assert len(union_find_components(mask, 4)) == 2
    assert len(connected_components(mask)) == 1


def test_regions_ordered_by_first_pixel():
    mask = np.zeros((5, 5), bool)
    mask[3, 0] = True
    mask[0, 4] = True
    mask[0, 1] = True
    firsts = [min((y, x) for x, y in r.tolist()) for r in connected_components(mask)]
    assert firsts == sorted(firsts)


@settings(max_examples=200, deadline=None)
@given(masks)
def test_components_partition_true_pixels(mask):
    regions = as_sets(connected_components(mask))
    union = set().union(*regions) if regions else set()
    assert sum(len(r) for r in regions) == len(union)
    assert union == {(x, y) for y, x in zip(*np.nonzero(mask))}
    assert set(regions) == union_find_components(mask)


def test_components_match_union_find_on_random_masks():
    rng = np.random.default_rng(3)
    for _ in range(200):
        mask = rng.random((32, 32)) < rng.uniform(0.2, 0.6)
        assert set(as_sets(connected_components(mask))) == union_find_components(mask)


# boxes

def test_bounding_box_examples():
    assert bounding_box([(2, 3)]) == Box(2, 3, 2, 3)
    assert bounding_box([(0, 0), (4, 2)]) == Box(0, 0, 4, 2)
    assert bounding_box([(x, y) for x in range(3) for y in range(3)]) == Box(0, 0, 2, 2)
    with pytest.raises(ValueError, match="empty region"):
        bounding_box([])


def test_iou_examples():
    a = Box(0, 0, 1, 1)
    assert iou(a, a) == 1.0
    assert iou(a, Box(5, 5, 6, 6)) == 0.0
    # intersection 2 px, union 4 + 4 - 2
    assert iou(a, Box(1, 0, 2, 1)) == pytest.approx(2 / 6)


@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0
    assert iou(a, a) == 1.0


def test_nms_examples():
    one = [ScoredBox(Box(0, 0, 3, 3), 0.4)]
    assert nms(one, 0.5) == one
    dup = [ScoredBox(Box(0, 0, 9, 9), 0.8), ScoredBox(Box(0, 0, 9, 9), 0.9)]
    assert nms(dup, 0.5) == [dup[1]]
    a = ScoredBox(Box(0, 0, 9, 9), 0.9)
    b = ScoredBox(Box(0, 0, 9, 5), 0.8)   # IoU 0.6 with a
    c = ScoredBox(Box(20, 20, 25, 25), 0.7)
    assert iou(a.box, b.box) == pytest.approx(0.6)
    assert nms([b, c, a], 0.5) == [a, c]


def test_nms_ties_keep_input_order():
    a = ScoredBox(Box(0, 0, 9, 9), 0.5)
    b = ScoredBox(Box(1, 1, 9, 9), 0.5)
    assert nms([a, b], 0.3) == [a]
    assert nms([b, a], 0.3) == [b]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(boxes, st.floats(0, 1)), max_size=12), st.floats(0.1, 0.9))
def test_nms_subset_and_separated(items, thr):
    cands = [ScoredBox(b, s) for b, s in items]
    kept = nms(cands, thr)
    assert all(k in cands for k in kept)
    assert [k.score for k in kept] == sorted((k.score for k in kept), reverse=True)
    for i in range(len(kept)):
        for j in range(i + 1, len(kept)):
            assert iou(kept[i].box, kept[j].box) <= thr


# crop and resize

def gradient4():
    return (np.arange(16, dtype=np.uint8).reshape(4, 4, 1) * 10)


def test_crop_examples():
    img = gradient4()
    assert np.array_equal(crop(img, Box(0, 0, 3, 3)), img)
    assert crop(img, Box(0, 0, 0, 0))[0, 0, 0] == img[0, 0, 0]
    # rows 1-2, cols 2-3 of the 4x4 ramp 0, 10, ..., 150
    assert crop(img, Box(2, 1, 3, 2))[:, :, 0].tolist() == [[60, 70], [100, 110]]
    with pytest.raises(ValueError, match="box exceeds raster"):
        crop(img, Box(2, 2, 4, 3))


def test_resize_constant_and_identity():
    const = np.full((5, 7, 3), 77, np.uint8)
    assert np.all(resize_bilinear(const, 13, 2) == 77)
    img = np.random.default_rng(0).integers(0, 256, (6, 9, 3), dtype=np.uint8)
    assert np.array_equal(resize_bilinear(img, 9, 6), img)


def test_resize_2x2_upscale_matches_scalar_oracle():
    img = np.array([[0, 100], [100, 200]], np.uint8).reshape(2, 2, 1)
    out = resize_bilinear(img, 4, 4)
    assert np.array_equal(out, resize_scalar(img, 4, 4))
    assert out[:, :, 0].tolist() == [[0, 25, 75, 100], [25, 50, 100, 125],
                                     [75, 100, 150, 175], [100, 125, 175, 200]]


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 3]))),
       st.integers(1, 12), st.integers(1, 12))
def test_resize_matches_oracle_and_stays_in_range(img, ow, oh):
    out = resize_bilinear(img, ow, oh)
    assert out.shape == (oh, ow, img.shape[2])
    assert np.array_equal(out, resize_scalar(img, ow, oh))
    assert out.min() >= int(img.min()) - 1 and out.max() <= int(img.max()) + 1


# netpbm

def test_ppm_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, (5, 8, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), img)
    mask = rng.random((5, 8)) < 0.5
    write_pgm_mask(tmp_path / "m.pgm", mask)
    assert np.array_equal(read_pgm_mask(tmp_path / "m.pgm"), mask)


def test_pgm_threshold_and_comments(tmp_path):
    path = tmp_path / "m.pgm"
    path.write_bytes(b"P5\n# made by hand\n4 1\n255\n" + bytes([0, 127, 128, 255]))
    assert read_pgm_mask(path).tolist() == [[False, False, True, True]]
    with pytest.raises(ValueError):
        read_ppm(path)
