import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protodet import tensor as T
from protodet.errors import DegenerateRoiError
from protodet.geometry import (
    Box,
    JitterParams,
    box_convert,
    gap,
    giou,
    giou_tensor,
    iou,
    jitter_box,
    jitter_candidate,
    pairwise_giou,
    pairwise_iou,
    roi_align,
    roi_gap_batch,
)
from protodet.rng import Rng
from protodet.tensor import Tensor, grad_check

from oracles import dense_roi_align, raster_iou_giou


def random_box(rng: Rng) -> Box:
    w, h = rng.uniform(0.05, 0.6), rng.uniform(0.05, 0.6)
    return Box(rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), w, h)


boxes = st.builds(
    Box,
    st.floats(0.1, 0.9),
    st.floats(0.1, 0.9),
    st.floats(0.02, 0.8),
    st.floats(0.02, 0.8),
)


def test_iou_examples():
    assert iou(Box(0.5, 0.5, 1.0, 1.0), Box(0.5, 0.5, 1.0, 1.0)) == 1.0
    assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-12)
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0


def test_giou_examples():
    assert giou((0, 0, 1, 1), (0, 0, 1, 1)) == 1.0
    assert giou((0, 0, 1, 1), (1, 0, 2, 1)) == 0.0
    assert giou((0, 0, 1, 1), (2, 0, 3, 1)) == pytest.approx(-1 / 3, abs=1e-15)


def test_iou_matches_raster_oracle():
    rng = Rng(11)
    for _ in range(50):
        a, b = random_box(rng), random_box(rng)
        ref_iou, ref_giou = raster_iou_giou(a.xyxy(), b.xyxy())
        assert abs(iou(a, b) - ref_iou) < 2e-3
        assert abs(giou(a, b) - ref_giou) < 2e-3


@settings(max_examples=200, deadline=None)
@given(boxes, boxes)
def test_iou_properties(a, b):
    v, g = iou(a, b), giou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou(b, a), abs=1e-15)
    assert g <= v + 1e-12
    assert -1.0 <= g <= 1.0
    assert iou(a, a) == pytest.approx(1.0)


def test_giou_equals_iou_when_nested():
    outer, inner = Box(0.5, 0.5, 0.6, 0.6), Box(0.5, 0.5, 0.2, 0.3)
    assert giou(outer, inner) == pytest.approx(iou(outer, inner), abs=1e-15)


def test_box_convert():
    assert box_convert(Box(0.5, 0.5, 1.0, 1.0), "xyxy") == (0.0, 0.0, 1.0, 1.0)
    np.testing.assert_allclose(box_convert((0.1, 0.2, 0.5, 0.8), "cxcywh"), (0.3, 0.5, 0.4, 0.6), atol=1e-15)
    rng = Rng(3)
    for _ in range(100):
        b = random_box(rng)
        back = box_convert(box_convert(b, "xyxy"), "cxcywh")
        np.testing.assert_allclose(back, b.as_array(), atol=1e-12)


def test_box_rejects_nonpositive_extent():
    with pytest.raises(ValueError):
        Box(0.5, 0.5, 0.0, 0.1)


def test_pairwise_agrees_with_scalar():
    rng = Rng(4)
    a = np.array([random_box(rng).as_array() for _ in range(5)])
    b = np.array([random_box(rng).as_array() for _ in range(4)])
    pi, pg = pairwise_iou(a, b), pairwise_giou(a, b)
    for i in range(5):
        for j in range(4):
            assert pi[i, j] == pytest.approx(iou(Box(*a[i]), Box(*b[j])), abs=1e-12)
            assert pg[i, j] == pytest.approx(giou(Box(*a[i]), Box(*b[j])), abs=1e-12)


def test_giou_tensor_gradient():
    rng = Rng(5)
    target = np.array([random_box(rng).as_array() for _ in range(3)])
    pred = np.array([random_box(rng).as_array() for _ in range(3)])
    np.testing.assert_allclose(giou_tensor(Tensor(pred), target).data, np.diag(pairwise_giou(pred, target)), atol=1e-12)
    assert grad_check(lambda p: T.tsum(giou_tensor(p, target)), pred) < 1e-4


# -- jitter --------------------------------------------------------------------
def test_jitter_identity_candidate_rejected():
    b = Box(0.5, 0.5, 0.2, 0.2)
    cand = jitter_candidate(b, 1.0, 0.0, 0.0)
    assert iou(cand, b) == pytest.approx(1.0)
    assert not (0.1 <= iou(cand, b) <= 0.5)


def test_jitter_shrink_candidate_accepted():
    b = Box(0.5, 0.5, 0.2, 0.2)
    cand = jitter_candidate(b, 0.6, 0.0, 0.0)
    # inter 0.12^2 over union 0.04
    assert iou(cand, b) == pytest.approx(0.12**2 / 0.04, abs=1e-12)
    assert 0.1 <= iou(cand, b) <= 0.5


def test_jitter_outputs_in_window_and_deterministic():
    p = JitterParams()
    rng = Rng(9)
    for k in range(200):
        b = random_box(rng)
        out = jitter_box(b, p, Rng(k))
        assert len(out) <= p.n_neg
        assert all(p.iou_lo <= iou(x, b) <= p.iou_hi for x in out)
        assert out == jitter_box(b, p, Rng(k))
        for x in out:
            x1, y1, x2, y2 = x.xyxy()
            assert 0.0 <= x1 < x2 <= 1.0 + 1e-12 and 0.0 <= y1 < y2 <= 1.0 + 1e-12


def test_jitter_zero_negatives():
    assert jitter_box(Box(0.5, 0.5, 0.3, 0.3), JitterParams(n_neg=0), Rng(0)) == []


def test_jitter_params_validation():
    with pytest.raises(ValueError):
        JitterParams(scale_lo=0.0)
    with pytest.raises(ValueError):
        JitterParams(iou_lo=0.6, iou_hi=0.5)


# -- roi align / gap -------------------------------------------------------------
def test_roi_align_constant_map():
    fmap = Tensor(np.full((2, 6, 5), 3.25))
    out = roi_align(fmap, Box(0.4, 0.55, 0.3, 0.5))
    np.testing.assert_allclose(out.data, 3.25, atol=1e-12)


def test_roi_align_ramp_full_image():
    width = 8
    ramp = np.broadcast_to(np.arange(width, dtype=float), (1, 8, width)).copy()
    out = roi_align(Tensor(ramp), Box(0.5, 0.5, 1.0, 1.0), out=1)
    # the centre of the map in pixel-centre coordinates is (width - 1) / 2
    assert out.data[0, 0, 0] == pytest.approx(3.5, abs=1e-12)


def test_roi_align_degenerate():
    with pytest.raises(DegenerateRoiError):
        roi_align(Tensor(np.ones((1, 4, 4))), (0.5, 0.5, 1e-9, 0.5))


def test_roi_align_matches_dense_oracle():
    h, w = 9, 11
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    fmap = np.stack([np.sin(0.15 * xx) + np.cos(0.1 * yy), 0.01 * xx * yy])
    for roi in [(0.5, 0.5, 0.6, 0.4), (0.3, 0.7, 0.35, 0.5), (0.62, 0.41, 0.2, 0.7)]:
        ours = roi_align(Tensor(fmap), roi, out=3, sampling=2).data
        dense = dense_roi_align(fmap, roi, 3, samples=16)
        assert np.max(np.abs(ours - dense)) < 1e-3
        fine = roi_align(Tensor(fmap), roi, out=3, sampling=16).data
        np.testing.assert_allclose(fine, dense, atol=1e-12)


def test_roi_align_gradient():
    fmap = Rng(2).normal(size=(2, 6, 6))
    roi = Box(0.45, 0.55, 0.5, 0.4)
    weights = Rng(3).normal(size=(2, 7, 7))
    assert grad_check(lambda f: T.tsum(roi_align(f, roi) * Tensor(weights)), fmap) < 1e-4


def test_gap_examples():
    np.testing.assert_allclose(gap(Tensor(np.ones((3, 2, 2)))).data, [1.0, 1.0, 1.0])
    assert gap(Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))).data[0] == pytest.approx(2.5)
    x = np.array([[[7.0]], [[-2.0]]])
    np.testing.assert_array_equal(gap(Tensor(x)).data, [7.0, -2.0])


def test_roi_gap_batch_matches_composition():
    fmap = Tensor(Rng(6).normal(size=(4, 8, 8)))
    rois = [Box(0.3, 0.3, 0.4, 0.4), Box(0.6, 0.5, 0.25, 0.6)]
    batch = roi_gap_batch(fmap, rois).data
    for k, r in enumerate(rois):
        np.testing.assert_allclose(batch[k], gap(roi_align(fmap, r)).data, atol=1e-12)
