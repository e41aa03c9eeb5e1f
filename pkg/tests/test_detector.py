import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import ap_by_thresholds
from rbcscope import detector as det
from rbcscope.imgcore import Box, ScoredBox, iou
from rbcscope.nn import dumps
from rbcscope.synthgen import DatasetConfig, SceneSpec, generate_scene, generate_scenes

SMALL = det.DetectorConfig(epochs=10)


@pytest.fixture(scope="module")
def trained():
    scenes = generate_scenes(DatasetConfig(n_scenes=24, seed=21))
    model, log = det.train_detector(scenes, SMALL)
    return model, log


def blank(h=96, w=96):
    return generate_scene(SceneSpec(width=w, height=h, cell_count=(0, 0), rng_seed=1))


# window features

def window_stats_by_loops(image, x, y, size):
    """Weighted mean, std and edge energy of each plane at one pixel, summed term by term."""
    h, w, _ = image.shape
    f = image.astype(np.float64) / 255.0
    planes = [f[..., 0], f[..., 1], f[..., 2], 0.299 * f[..., 0] + 0.587 * f[..., 1] + 0.114 * f[..., 2]]
    tri = [(size / 2 + 0.5) - abs(i - (size - 1) / 2) for i in range(size)]
    tot = sum(tri) ** 2
    out = []
    for pl in planes:
        gy, gx = np.gradient(pl)
        s1 = s2 = se = 0.0
        for j in range(size):
            for i in range(size):
                yy = min(max(y - size // 2 + j, 0), h - 1)
                xx = min(max(x - size // 2 + i, 0), w - 1)
                wt = tri[i] * tri[j] / tot
                v = pl[yy, xx]
                s1 += wt * v
                s2 += wt * v * v
                se += wt * (gx[yy, xx] ** 2 + gy[yy, xx] ** 2)
        out += [s1, np.sqrt(max(s2 - s1 * s1, 0.0)), np.sqrt(se)]
    return out


def test_window_features_match_loops():
    rng = np.random.default_rng(0)
    image = rng.integers(0, 256, (20, 23, 3), dtype=np.uint8)
    feats = det.window_features(image, 16)
    assert feats.shape == (20, 23, 12)
    for x, y in [(0, 0), (22, 19), (11, 9), (3, 17)]:
        assert np.allclose(feats[y, x], window_stats_by_loops(image, x, y, 16), atol=1e-9)
    flat = np.full((10, 10, 3), 77, np.uint8)
    f = det.window_features(flat, 16)
    assert np.allclose(f[..., 0], 77 / 255) and np.allclose(f[..., 1], 0) and np.allclose(f[..., 2], 0)


# ground truth

def test_ground_truth_boxes_examples():
    assert det.ground_truth_boxes(np.zeros((20, 20), bool)) == []
    mask = np.zeros((40, 40), bool)
    mask[2:10, 2:10] = True
    mask[20:30, 25:35] = True
    assert det.ground_truth_boxes(mask) == [Box(2, 2, 9, 9), Box(25, 20, 34, 29)]
    mask[5:6, 36:38] = True  # 2 px speck, below the minimum area
    assert len(det.ground_truth_boxes(mask)) == 2


def test_overlapping_cells_make_one_box():
    scene = generate_scene(SceneSpec(width=128, height=128, groups=(2,), overlap_mode="overlapping", rng_seed=3))
    boxes = det.ground_truth_boxes(scene.mask)
    assert len(boxes) == 1
    for inst in scene.instances:
        b = inst.box
        assert boxes[0].x_min <= b.x_min and b.x_max <= boxes[0].x_max
        assert boxes[0].y_min <= b.y_min and b.y_max <= boxes[0].y_max


# training

def test_training_losses_fall(trained):
    _, log = trained
    for curve in (log.foreground, log.objectness):
        assert len(curve) == SMALL.epochs + 1
        assert np.all(np.isfinite(curve)) and curve[-1] < curve[0]


def test_training_deterministic(trained):
    scenes = generate_scenes(DatasetConfig(n_scenes=4, seed=22))
    cfg = det.DetectorConfig(epochs=3)
    a = det.train_detector(scenes, cfg)[0].to_json()
    b = det.train_detector(scenes, cfg)[0].to_json()
    assert dumps(a) == dumps(b)


def test_blank_training_predicts_background():
    scenes = [generate_scene(SceneSpec(width=64, height=64, cell_count=(0, 0), rng_seed=s)) for s in range(3)]
    model, _ = det.train_detector(scenes, det.DetectorConfig(epochs=5))
    for scene in scenes:
        assert det.foreground_map(model, scene.image).max() <= 0.5


def test_empty_dataset_rejected():
    with pytest.raises(ValueError, match="empty dataset"):
        det.train_detector([])


def test_model_json_round_trip(tmp_path, trained):
    model, _ = trained
    det.save_detector(tmp_path / "d.json", model)
    back = det.load_detector(tmp_path / "d.json")
    img = generate_scene(SceneSpec(rng_seed=5)).image
    assert det.propose_regions(back, img) == det.propose_regions(model, img)


# proposals

def test_blank_image_no_proposals(trained):
    assert det.propose_regions(trained[0], blank().image) == []


def test_three_separated_cells(trained):
    scene = generate_scene(SceneSpec(width=160, height=160, overlap_mode="separated", cell_count=(3, 3), rng_seed=8))
    props = det.propose_regions(trained[0], scene.image)
    gt = det.ground_truth_boxes(scene.mask)
    assert len(gt) == 3 and len(props) == 3
    for g in gt:
        assert max(iou(p.box, g) for p in props) >= 0.5


def test_touching_pair_is_one_proposal(trained):
    scene = generate_scene(SceneSpec(width=128, height=128, groups=(2,), overlap_mode="touching", rng_seed=4))
    gt = det.ground_truth_boxes(scene.mask)
    assert len(gt) == 1
    props = det.propose_regions(trained[0], scene.image)
    assert len(props) == 1
    assert iou(props[0].box, gt[0]) >= 0.5
    for inst in scene.instances:
        assert iou(props[0].box, inst.box) < iou(props[0].box, gt[0])


def test_proposals_scored_and_suppressed(trained):
    model = trained[0]
    for seed in range(3):
        props = det.propose_regions(model, generate_scene(SceneSpec(rng_seed=100 + seed)).image)
        assert props
        for p in props:
            assert 0.0 <= p.score <= 1.0
        for a, b in itertools.combinations(props, 2):
            assert iou(a.box, b.box) <= model.nms_iou


# matching

def test_match_examples():
    gt = [Box(0, 0, 9, 9), Box(20, 20, 29, 29)]
    m = det.match_detections([ScoredBox(g, 1.0) for g in gt], gt)
    assert len(m.true_positives) == 2 and not m.false_positives and not m.false_negatives
    m = det.match_detections([], gt)
    assert m.false_negatives == [0, 1]
    lo, hi = ScoredBox(Box(0, 0, 9, 8), 0.6), ScoredBox(Box(1, 0, 9, 9), 0.9)
    m = det.match_detections([lo, hi], gt[:1])
    assert m.true_positives == [(hi, 0)] and m.false_positives == [(lo, None)]


def greedy_by_enumeration(props, gt, thr):
    """Best injective assignment under lexicographic (score order, IoU) preference."""
    order = sorted(range(len(props)), key=lambda i: -props[i].score)
    best_key, best = None, None
    slots = list(range(len(gt))) + [None] * len(props)
    for perm in itertools.permutations(slots, len(props)):
        ok = all(j is None or iou(props[i].box, gt[j]) >= thr for i, j in zip(range(len(props)), perm))
        used = [j for j in perm if j is not None]
        if not ok or len(used) != len(set(used)):
            continue
        key = tuple((perm[i] is not None, iou(props[i].box, gt[perm[i]]) if perm[i] is not None else 0.0)
                    for i in order)
        if best_key is None or key > best_key:
            best_key, best = key, perm
    return {i: j for i, j in enumerate(best) if j is not None}


small_boxes = st.builds(lambda x, y, w, h: Box(x, y, x + w, y + h),
                        st.integers(0, 12), st.integers(0, 12), st.integers(2, 10), st.integers(2, 10))


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(small_boxes, st.floats(0.01, 1.0)), max_size=4, unique_by=lambda t: t[1]),
       st.lists(small_boxes, min_size=1, max_size=4))
def test_match_agrees_with_enumeration(items, gt):
    props = [ScoredBox(b, s) for b, s in items]
    m = det.match_detections(props, gt, 0.5)
    got = {props.index(sb): j for sb, j in m.true_positives}
    want = greedy_by_enumeration(props, gt, 0.5)
    assert {i: iou(props[i].box, gt[j]) for i, j in got.items()} == \
        {i: iou(props[i].box, gt[j]) for i, j in want.items()}
    assert len(m.true_positives) + len(m.false_negatives) == len(gt)
    assert len(m.true_positives) <= min(len(props), len(gt))
    assert len({j for _, j in m.true_positives}) == len(m.true_positives)


# average precision

def as_match(detections, n_gt):
    m = det.DetectionMatch(n_ground_truth=n_gt)
    for s, tp in detections:
        (m.true_positives if tp else m.false_positives).append((ScoredBox(Box(0, 0, 0, 0), s), 0 if tp else None))
    return m


def test_ap_examples():
    assert det.average_precision([as_match([(0.9, True), (0.8, True)], 2)]) == 1.0
    assert det.average_precision([as_match([(0.9, False), (0.8, False)], 2)]) == 0.0
    ap = det.average_precision([as_match([(0.9, True), (0.8, False), (0.7, True)], 2)])
    assert ap == pytest.approx(0.5 * 1.0 + 0.5 * (2 / 3), abs=1e-12)
    assert round(ap, 4) == 0.8333
    with pytest.raises(ValueError, match="undefined recall"):
        det.average_precision([as_match([(0.5, False)], 0)])


detection_sets = st.lists(st.tuples(st.sampled_from([0.1, 0.3, 0.5, 0.7, 0.9]) | st.floats(0, 1), st.booleans()),
                          max_size=25)


@settings(max_examples=200)
@given(detection_sets, st.integers(0, 10))
def test_ap_matches_threshold_sweep(dets, extra_gt):
    n_gt = sum(tp for _, tp in dets) + extra_gt
    if n_gt == 0:
        return
    want = ap_by_thresholds(dets, n_gt) if dets else 0.0
    half = len(dets) // 2
    got = det.average_precision([as_match(dets[:half], n_gt - extra_gt), as_match(dets[half:], extra_gt)])
    assert abs(got - want) < 1e-12
    assert 0.0 <= got <= 1.0


@settings(max_examples=100)
@given(st.lists(st.tuples(st.integers(0, 64).map(lambda i: i / 64), st.booleans()), min_size=1, max_size=25))
def test_ap_invariant_to_increasing_transforms(dets):
    n_gt = sum(tp for _, tp in dets) + 1
    ap = det.average_precision([as_match(dets, n_gt)])
    for f in (lambda v: 0.5 * v + 0.25, lambda v: v ** 3, lambda v: np.sqrt(v)):
        assert det.average_precision([as_match([(float(f(s)), tp) for s, tp in dets], n_gt)]) == ap
