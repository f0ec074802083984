import numpy as np
import pytest

from refinedet_edge import postprocess as pp
from oracles import apply_deltas_gold, decode_gold, iou_gold, nms_gold


def random_boxes(rng, k, size=320.0):
    xy = rng.random((k, 2)) * (size - 40.0)
    wh = rng.random((k, 2)) * 60.0 + 4.0
    return np.concatenate([xy, xy + wh], axis=1).astype(np.float32)


def random_dets(rng, k, n_classes=5, size=320.0):
    return pp.DetectionSet(
        random_boxes(rng, k, size),
        rng.random(k).astype(np.float32),
        rng.integers(1, n_classes + 1, size=k).astype(np.int32),
    )


# ---------------------------------------------------------------------------
# geometry


def test_iou_matches_gold_randomized():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a = random_boxes(rng, 1)[0]
        b = random_boxes(rng, 1)[0]
        np.testing.assert_allclose(pp.iou(a, b), iou_gold(a, b), atol=1e-12)


def test_iou_hand_cases():
    a = [0, 0, 10, 10]
    assert pp.iou(a, a) == 1.0
    assert pp.iou(a, [10, 10, 20, 20]) == 0.0  # touching corners: zero area
    assert pp.iou(a, [5, 0, 15, 10]) == pytest.approx(50.0 / 150.0)
    assert pp.iou(a, [3, 3, 3, 9]) == 0.0  # degenerate: zero width
    assert pp.iou([0, 0, 0, 0], [0, 0, 0, 0]) == 0.0


def test_iou_matrix_matches_pairwise():
    rng = np.random.default_rng(1)
    a = random_boxes(rng, 7)
    b = random_boxes(rng, 5)
    m = pp.iou_matrix(a, b)
    assert m.shape == (7, 5)
    for i in range(7):
        for j in range(5):
            assert m[i, j] == pytest.approx(iou_gold(a[i], b[j]), abs=1e-12)


def test_corner_center_round_trip():
    rng = np.random.default_rng(2)
    boxes = random_boxes(rng, 50).astype(np.float64)
    back = pp.to_corners(pp.to_centers(boxes))
    np.testing.assert_allclose(back, boxes, atol=1e-9)


# ---------------------------------------------------------------------------
# delta coding


def test_apply_deltas_matches_gold():
    rng = np.random.default_rng(3)
    anchors = np.concatenate([rng.random((40, 2)) * 300, rng.random((40, 2)) * 50 + 5], axis=1)
    deltas = rng.standard_normal((40, 4))
    got = pp.apply_deltas(anchors, deltas)
    want = apply_deltas_gold(anchors, deltas, 0.1, 0.2)
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_zero_deltas_are_identity():
    anchors = np.array([[50.0, 60.0, 20.0, 10.0]])
    out = pp.apply_deltas(anchors, np.zeros((1, 4)))
    np.testing.assert_allclose(out, anchors)


def test_decode_matches_gold_and_clips():
    rng = np.random.default_rng(4)
    anchors = np.concatenate([rng.random((30, 2)) * 320, rng.random((30, 2)) * 80 + 5], axis=1)
    deltas = rng.standard_normal((30, 4)) * 2.0
    got = pp.decode(anchors, deltas, image_size=320)
    want = decode_gold(anchors, deltas, 0.1, 0.2, image_size=320)
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-3)
    assert got.min() >= 0.0 and got.max() <= 320.0
    unclipped = pp.decode(anchors, deltas)
    assert unclipped.min() < 0.0 or unclipped.max() > 320.0


def test_encode_decode_inverse():
    rng = np.random.default_rng(5)
    anchors = np.concatenate([rng.random((60, 2)) * 300 + 10, rng.random((60, 2)) * 60 + 5], axis=1)
    boxes = random_boxes(rng, 60)
    deltas = pp.encode(boxes, anchors)
    back = pp.decode(anchors, deltas)
    np.testing.assert_allclose(back, boxes, atol=1e-3)


def test_variance_semantics():
    # center variance scales the translation term; size variance the log-size term
    anchors = np.array([[100.0, 100.0, 40.0, 40.0]])
    deltas = np.array([[1.0, 0.0, 0.0, 0.0]])
    out_default = pp.apply_deltas(anchors, deltas)  # vc = 0.1
    assert out_default[0, 0] == pytest.approx(104.0)
    out_big = pp.apply_deltas(anchors, deltas, variances=(0.5, 0.2))
    assert out_big[0, 0] == pytest.approx(120.0)
    d_size = np.array([[0.0, 0.0, 1.0, 0.0]])
    out_size = pp.apply_deltas(anchors, d_size)  # vs = 0.2
    assert out_size[0, 2] == pytest.approx(40.0 * np.exp(0.2))


def test_apply_deltas_validations():
    anchors = np.array([[10.0, 10.0, 5.0, 5.0]])
    with pytest.raises(ValueError, match="non-finite delta at row 0"):
        pp.apply_deltas(anchors, np.array([[np.nan, 0, 0, 0]]))
    with pytest.raises(ValueError, match="non-positive size"):
        pp.apply_deltas(np.array([[10.0, 10.0, 0.0, 5.0]]), np.zeros((1, 4)))
    with pytest.raises(ValueError, match="variances must be positive"):
        pp.apply_deltas(anchors, np.zeros((1, 4)), variances=(0.0, 0.2))


def test_softmax_rows_sum_to_one_and_handle_extremes():
    logits = np.array([[1000.0, 1000.0, 999.0], [-1000.0, 0.0, 1000.0]])
    probs = pp.softmax(logits, axis=1)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=1e-6)
    assert np.all(np.isfinite(probs))
    assert probs[1, 2] == pytest.approx(1.0)


def test_arm_filter_threshold_semantics():
    probs = np.array([0.5, 0.99, 0.991, 1.0, 0.0])
    kept = pp.arm_filter(probs, neg_thresh=0.99)
    # strictly-above-threshold background is removed; exactly-at stays
    np.testing.assert_array_equal(kept, [0, 1, 4])
    with pytest.raises(ValueError, match="neg_thresh"):
        pp.arm_filter(probs, neg_thresh=1.0)


# ---------------------------------------------------------------------------
# NMS vs the brute-force oracle


def run_both(dets, iou_thresh, params, cap_scope):
    got = pp.nms_greedy(dets, iou_thresh, params, cap_scope=cap_scope)
    want = nms_gold(dets.boxes, dets.scores, dets.class_ids, iou_thresh,
                    params.max_input, params.max_output, params.conf_thresh, cap_scope)
    np.testing.assert_array_equal(got.indices, np.asarray(want, np.int64))
    return got


def test_nms_matches_gold_randomized_both_scopes():
    rng = np.random.default_rng(6)
    for trial in range(60):
        k = int(rng.integers(0, 120))
        dets = random_dets(rng, k)
        params = pp.NmsParams(
            max_input=int(rng.integers(1, 50)),
            max_output=int(rng.integers(1, 40)),
            conf_thresh=float(rng.random() * 0.6),
        )
        thresh = float(rng.random() * 0.8)
        for scope in pp.CAP_SCOPES:
            run_both(dets, thresh, params, scope)


def test_nms_duplicate_boxes_collapse_to_lowest_index():
    boxes = np.tile(np.array([[10.0, 10.0, 50.0, 50.0]], np.float32), (4, 1))
    dets = pp.DetectionSet(boxes, np.full(4, 0.7, np.float32), np.ones(4, np.int32))
    out = pp.nms_greedy(dets, 0.45, pp.NmsParams(10, 10, 0.1))
    assert list(out.indices) == [0]  # equal scores: the earliest candidate wins


def test_nms_iou_threshold_is_strict():
    # two boxes at IoU exactly 0.45: "strictly above" means both survive
    a = np.array([0.0, 0.0, 100.0, 45.0])
    b = np.array([0.0, 0.0, 100.0, 55.0])
    assert pp.iou(a, b) == pytest.approx(45.0 / 55.0)
    boxes = np.stack([np.array([0, 0, 100, 45.0]), np.array([0, 0, 100, 100.0])])
    # iou = 45/100 = 0.45 exactly
    dets = pp.DetectionSet(boxes.astype(np.float32),
                           np.array([0.9, 0.8], np.float32),
                           np.array([1, 1], np.int32))
    out = pp.nms_greedy(dets, 0.45, pp.NmsParams(10, 10, 0.0))
    assert len(out) == 2


def test_nms_conf_threshold_is_inclusive():
    dets = pp.DetectionSet(
        random_boxes(np.random.default_rng(7), 3),
        np.array([0.1, 0.0999, 0.5], np.float32),
        np.array([1, 1, 2], np.int32),
    )
    out = pp.nms_greedy(dets, 0.45, pp.NmsParams(10, 10, 0.1))
    assert set(out.indices.tolist()) <= {0, 2}
    assert 1 not in out.indices


def test_nms_cap_scope_changes_results():
    # 30 class-1 boxes spread apart + 1 strong class-2 box; max_input 10.
    rng = np.random.default_rng(8)
    boxes = np.zeros((31, 4), np.float32)
    for i in range(30):
        boxes[i] = (i * 50, 0, i * 50 + 40, 40)  # disjoint: nothing suppressed
    boxes[30] = (0, 100, 40, 140)
    scores = np.concatenate([np.linspace(0.9, 0.3, 30), [0.95]]).astype(np.float32)
    classes = np.array([1] * 30 + [2], np.int32)
    dets = pp.DetectionSet(boxes, scores, classes)
    params = pp.NmsParams(10, 40, 0.1)
    per_class = pp.nms_greedy(dets, 0.45, params, cap_scope="per_class")
    per_image = pp.nms_greedy(dets, 0.45, params, cap_scope="per_image")
    assert len(per_class) == 11  # 10 class-1 survivors + the class-2 box
    assert len(per_image) == 10  # one shared budget
    run_both(dets, 0.45, params, "per_class")
    run_both(dets, 0.45, params, "per_image")


def test_nms_max_output_truncates_merged_ranking():
    rng = np.random.default_rng(9)
    dets = random_dets(rng, 80)
    out = pp.nms_greedy(dets, 0.45, pp.NmsParams(100, 5, 0.0))
    assert len(out) == 5
    scores = out.scores.astype(np.float64)
    assert all(scores[i] >= scores[i + 1] for i in range(4))  # merged list is ranked


def test_nms_counters():
    rng = np.random.default_rng(10)
    dets = random_dets(rng, 50, n_classes=3)
    counters = pp.NmsCounters()
    pp.nms_greedy(dets, 0.45, pp.NmsParams(400, 200, 0.0), counters=counters)
    per_class = {int(c): int((dets.class_ids == c).sum()) for c in np.unique(dets.class_ids)}
    assert counters.candidates_per_class == per_class  # conf 0: everything enters
    max_pairs = sum(n * (n - 1) // 2 for n in per_class.values())
    assert 0 < counters.iou_evals <= max_pairs


def test_nms_empty_input():
    out = pp.nms_greedy(pp.DetectionSet.empty(), 0.45, pp.NmsParams())
    assert len(out) == 0


def test_nms_params_validation():
    with pytest.raises(ValueError, match="max_input"):
        pp.NmsParams(0, 10, 0.1)
    with pytest.raises(ValueError, match="conf_thresh"):
        pp.NmsParams(10, 10, 1.0)
    assert pp.NmsParams(400, 200, 0.1).short() == "(400,200,0.1)"


# ---------------------------------------------------------------------------
# the pipeline


def build_pipeline_case(n_anchors=40, n_classes=3, seed=11):
    """Anchors + logits crafted so a handful of known detections emerge."""
    rng = np.random.default_rng(seed)
    anchors = np.concatenate([
        rng.random((n_anchors, 2)) * 280 + 20,
        rng.random((n_anchors, 2)) * 40 + 10,
    ], axis=1)
    arm_obj = np.zeros((n_anchors, 2))
    arm_obj[:, 0] = 8.0  # everything confidently background...
    hot = [3, 17, 29]
    for a in hot:
        arm_obj[a] = (0.0, 5.0)  # ...except three anchors
    arm_deltas = np.zeros((n_anchors, 4))
    odm_cls = np.zeros((n_anchors, n_classes + 1))
    for a, cls in zip(hot, (1, 2, 3)):
        odm_cls[a, cls] = 9.0
    odm_deltas = np.zeros((n_anchors, 4))
    return anchors, arm_obj, arm_deltas, odm_cls, odm_deltas, hot


def test_pipeline_end_to_end_known_answers():
    anchors, arm_obj, arm_deltas, odm_cls, odm_deltas, hot = build_pipeline_case()
    out = pp.pipeline(arm_obj, arm_deltas, odm_cls, odm_deltas, anchors,
                      pp.NmsParams(400, 200, 0.1), image_size=320)
    # softmax(8,0) background ~ 0.99966 > 0.99 -> filtered; hot anchors survive
    assert sorted(out.indices.tolist()) == sorted(hot)
    assert sorted(out.class_ids.tolist()) == [1, 2, 3]
    # zero deltas: boxes are the anchors themselves in corner form, clipped
    want = np.clip(pp.to_corners(anchors[sorted(out.indices.tolist())]), 0, 320)
    got = out.boxes[np.argsort(out.indices)]
    np.testing.assert_allclose(got, want, atol=1e-3)


def test_pipeline_arm_filter_blocks_everything_when_confident_background():
    anchors, arm_obj, arm_deltas, odm_cls, odm_deltas, _ = build_pipeline_case()
    arm_obj[:, :] = 0.0
    arm_obj[:, 0] = 20.0  # background prob ~ 1 everywhere
    out = pp.pipeline(arm_obj, arm_deltas, odm_cls, odm_deltas, anchors,
                      pp.NmsParams(400, 200, 0.1), image_size=320)
    assert len(out) == 0


def test_pipeline_arm_deltas_refine_before_decode():
    anchors, arm_obj, arm_deltas, odm_cls, odm_deltas, hot = build_pipeline_case()
    arm_deltas[hot[0]] = (1.0, 0.0, 0.0, 0.0)  # shift the refined prior right
    out = pp.pipeline(arm_obj, arm_deltas, odm_cls, odm_deltas, anchors,
                      pp.NmsParams(400, 200, 0.1), image_size=320)
    row = out.indices.tolist().index(hot[0])
    a = anchors[hot[0]]
    shifted_cx = a[0] + 0.1 * a[2]  # vc * w
    got_cx = (out.boxes[row, 0] + out.boxes[row, 2]) / 2
    assert got_cx == pytest.approx(shifted_cx, abs=1e-3)


def test_pipeline_counters_and_scope_plumbing():
    anchors, arm_obj, arm_deltas, odm_cls, odm_deltas, _ = build_pipeline_case()
    counters = pp.NmsCounters()
    pp.pipeline(arm_obj, arm_deltas, odm_cls, odm_deltas, anchors,
                pp.NmsParams(400, 200, 0.1), image_size=320, counters=counters)
    assert sum(counters.candidates_per_class.values()) == 3


def test_pipeline_rejects_bad_shapes():
    anchors, arm_obj, arm_deltas, odm_cls, odm_deltas, _ = build_pipeline_case()
    with pytest.raises(ValueError, match="objectness must be"):
        pp.pipeline(arm_obj[:, :1], arm_deltas, odm_cls, odm_deltas, anchors,
                    pp.NmsParams(), image_size=320)
    with pytest.raises(ValueError, match="objectness rows"):
        pp.pipeline(arm_obj[:10], arm_deltas, odm_cls, odm_deltas, anchors,
                    pp.NmsParams(), image_size=320)


# ---------------------------------------------------------------------------
# detection records on disk


def test_detection_file_round_trip(tmp_path):
    rng = np.random.default_rng(12)
    by_image = {"img-001": random_dets(rng, 6), "img-002": random_dets(rng, 3)}
    path = tmp_path / "dets.csv"
    pp.write_detections(path, by_image)
    back = pp.read_detections(path)
    assert set(back) == set(by_image)
    for key in by_image:
        np.testing.assert_allclose(back[key].boxes, by_image[key].boxes, atol=1e-5)
        np.testing.assert_array_equal(back[key].scores, by_image[key].scores)
        np.testing.assert_array_equal(back[key].class_ids, by_image[key].class_ids)


def test_detection_file_rejects_malformed(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("img,1,2,3\n")
    with pytest.raises(ValueError, match="expected 7 fields"):
        pp.read_detections(path)
    path.write_text("img,1,a,b,c,d,e\n")
    with pytest.raises(ValueError, match="malformed numeric"):
        pp.read_detections(path)


def test_detection_file_skips_comments_and_blanks(tmp_path):
    path = tmp_path / "dets.csv"
    path.write_text("# header comment\n\nimg,2,1.0,2.0,3.0,4.0,0.5\n")
    back = pp.read_detections(path)
    assert list(back) == ["img"]
    np.testing.assert_allclose(back["img"].boxes[0], [1.0, 2.0, 4.0, 6.0])


def test_detection_set_validation():
    with pytest.raises(ValueError, match="column lengths differ"):
        pp.DetectionSet(np.zeros((2, 4)), np.zeros(3), np.zeros(3, np.int32))
    ds = pp.DetectionSet(np.zeros((2, 4)), np.zeros(2), np.zeros(2, np.int32))
    assert ds.boxes.dtype == np.float32
    assert ds.indices.tolist() == [0, 1]
