import numpy as np
import pytest

from protodet.episodes import generate_episode, load_episode, save_episode
from protodet.errors import BadConfigError
from protodet.evaluation import Detection, ensemble_detections, evaluate_map, nms
from protodet.geometry import Box, iou
from protodet.rng import Rng

from oracles import as_plain, random_scenario, reference_map


def test_episode_protocol():
    ep = generate_episode(3, 5, 4, "photo-like", 0)
    assert len(ep.class_names) == 3 and ep.n_way == 3
    assert sum(len(r.annotations) for r in ep.supports) >= 15
    for c in range(3):
        assert sum(1 for r in ep.supports for k, _ in r.annotations if k == c) >= 5
    for r in ep.queries:
        assert 1 <= len(r.annotations) and all(0 <= k < 3 for k, _ in r.annotations)


def test_episode_deterministic():
    a = generate_episode(2, 1, 3, "cartoon-like", 17)
    b = generate_episode(2, 1, 3, "cartoon-like", 17)
    for x, y in zip(a.supports + a.queries, b.supports + b.queries):
        np.testing.assert_array_equal(x.image, y.image)
        assert x.annotations == y.annotations


def test_style_changes_pixels_not_geometry():
    a = generate_episode(3, 2, 3, "photo-like", 5)
    b = generate_episode(3, 2, 3, "low-contrast", 5)
    assert a.class_names == b.class_names
    for x, y in zip(a.supports + a.queries, b.supports + b.queries):
        assert x.annotations == y.annotations
        assert not np.array_equal(x.image, y.image)


@pytest.mark.parametrize("style", ["photo-like", "cartoon-like", "texture-defect", "low-contrast"])
def test_gt_boxes_valid(style):
    ep = generate_episode(4, 2, 6, style, 3)
    for r in ep.supports + ep.queries:
        assert r.image.shape == (3, 64, 64) and r.image.min() >= 0 and r.image.max() <= 1
        for _, b in r.annotations:
            x1, y1, x2, y2 = b.xyxy()
            assert 0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1


def test_impossible_layout():
    with pytest.raises(BadConfigError):
        generate_episode(2, 1, 1, "photo-like", 0, image_size=16, max_objects=12)
    with pytest.raises(BadConfigError):
        generate_episode(0, 1, 1, "photo-like", 0)


def test_save_load_roundtrip(tmp_path):
    ep = generate_episode(2, 2, 2, "texture-defect", 4)
    save_episode(ep, tmp_path)
    back = load_episode(tmp_path)
    assert back.class_names == ep.class_names and back.shots == 2
    for x, y in zip(ep.supports + ep.queries, back.supports + back.queries):
        np.testing.assert_array_equal(x.image, y.image)
        for (c1, b1), (c2, b2) in zip(x.annotations, y.annotations):
            assert c1 == c2
            np.testing.assert_allclose(b1.as_array(), b2.as_array(), atol=1e-12)


# -- mAP -------------------------------------------------------------------------
GT = [[(0, Box(0.5, 0.5, 0.2, 0.2))]]


def test_map_examples():
    perfect = [[Detection(Box(0.5, 0.5, 0.2, 0.2), 0, 0.9)]]
    assert evaluate_map(perfect, GT)["mAP"] == 1.0
    assert evaluate_map([[]], GT)["mAP"] == 0.0
    fp_then_tp = [[Detection(Box(0.2, 0.2, 0.1, 0.1), 0, 0.9), Detection(Box(0.5, 0.5, 0.2, 0.2), 0, 0.8)]]
    # recall reaches 1 at precision 1/2, so every recall point samples 0.5
    assert evaluate_map(fp_then_tp, GT, iou_thresholds=(0.5,))["AP50"] == pytest.approx(0.5, abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_map_matches_reference(seed):
    dets, gts = random_scenario(seed)
    thr = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
    ours = evaluate_map(dets, gts, thr)["mAP"]
    assert ours == pytest.approx(reference_map(*as_plain(dets, gts), thr), abs=1e-9)


def test_map_invariant_to_monotone_rescaling():
    dets, gts = random_scenario(3)
    warped = [[Detection(d.box, d.class_id, d.score**3 * 0.5, d.branch) for d in img] for img in dets]
    assert evaluate_map(dets, gts)["mAP"] == pytest.approx(evaluate_map(warped, gts)["mAP"], abs=1e-15)


# -- ensembling --------------------------------------------------------------
def test_ensemble_with_empty_branch():
    dets = [Detection(Box(0.3, 0.3, 0.2, 0.2), 0, 0.8, "text"), Detection(Box(0.7, 0.7, 0.2, 0.2), 1, 0.6, "text")]
    out = ensemble_detections(dets, [])
    assert [(d.box, d.class_id, d.score) for d in out] == [(d.box, d.class_id, d.score) for d in dets]
    assert all(d.branch == "ensemble" for d in out)


def test_ensemble_duplicate_keeps_higher():
    b = Box(0.5, 0.5, 0.3, 0.3)
    out = ensemble_detections([Detection(b, 0, 0.4, "text")], [Detection(b, 0, 0.9, "visual")])
    assert len(out) == 1 and out[0].score == 0.9


def test_ensemble_low_overlap_survives():
    a = Box.from_xyxy(0.1, 0.1, 0.5, 0.5)
    b = Box.from_xyxy(0.1, 0.2, 0.5, 0.6)
    # overlap 0.4 x 0.3 = 0.12 over union 0.2 -> IoU 0.6; shrink to below 0.5
    b = Box.from_xyxy(0.1, 0.3, 0.5, 0.7)
    assert iou(a, b) == pytest.approx(0.08 / 0.24)
    out = ensemble_detections([Detection(a, 0, 0.9)], [Detection(b, 0, 0.8)], nms_iou=0.5)
    assert len(out) == 2


def test_ensemble_of_identical_branches_equals_single():
    dets, gts = random_scenario(7)
    single = [nms(img, 0.5) for img in dets]
    merged = [ensemble_detections(img, img, 0.5) for img in dets]
    assert evaluate_map(merged, gts)["mAP"] == pytest.approx(evaluate_map(single, gts)["mAP"], abs=1e-15)
    m = evaluate_map(merged, gts)["mAP"]
    assert 0.0 <= m <= 1.0


def test_score_avg_mode():
    b = Box(0.5, 0.5, 0.3, 0.3)
    out = ensemble_detections([Detection(b, 0, 0.4)], [Detection(b, 0, 0.8)], mode="score_avg")
    assert len(out) == 1 and out[0].score == pytest.approx(0.6)
    with pytest.raises(ValueError):
        ensemble_detections([], [], mode="max")
