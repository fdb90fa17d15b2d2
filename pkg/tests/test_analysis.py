import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from dpcn.analysis import (MIN_SAMPLES, Heatmap, bilinear_upsample, divergence_report, grad_cam,
                           heatmap_overlap, pairwise_separation, score_jsd)
from dpcn.data import synth_shapes
from dpcn.layers import Conv2d, GlobalAvgPool, Linear, Sequential
from dpcn.model import build_preset

LN2 = np.log(2)

A = np.array([[[1.0, 2.0], [3.0, 4.0]],
              [[4.0, 0.0], [-1.0, 2.0]]])


def cam_net(w, scale=1.0, classes=2):
    """Identity 1x1 conv (times ``scale``) -> global average pool -> linear head."""
    conv = Conv2d(2, 2, 1)
    conv.weight.data[:] = scale * np.eye(2)[:, :, None, None]
    head = Linear(2, classes)
    head.weight.data[0] = w
    return Sequential([conv, GlobalAvgPool(), head])


# ---- Grad-CAM ----------------------------------------------------------------

def test_cam_matches_hand_computation():
    # d logit0 / d A_k = w_k / 4, so raw = relu(0.125 * A0 - 0.25 * A1)
    h = grad_cam(cam_net([0.5, -1.0]), A, 0, target_layer=0)
    np.testing.assert_allclose(h.raw, [[0.0, 0.25], [0.625, 0.0]], rtol=0, atol=1e-9)
    np.testing.assert_allclose(h.values, [[0.0, 0.4], [1.0, 0.0]], rtol=0, atol=1e-9)
    assert not h.empty and h.class_index == 0 and h.source_tag == "baseline"
    assert h.upsampled.shape == (2, 2)


def test_zero_weight_head_row_gives_flagged_empty_map():
    net = cam_net([0.5, -1.0], classes=3)  # rows 1 and 2 stay zero
    h = grad_cam(net, A, 2, target_layer=0)
    assert h.empty
    assert not h.values.any() and not h.upsampled.any()


@given(w=arrays(float, 2, elements=st.floats(-3, 3)), c=st.floats(0.01, 100))
def test_cam_invariant_under_activation_scaling(w, c):
    base = grad_cam(cam_net(w), A, 0, target_layer=0)
    scaled = grad_cam(cam_net(w, scale=c), A, 0, target_layer=0)
    np.testing.assert_allclose(scaled.raw, c * base.raw, rtol=1e-9, atol=1e-12)
    assert scaled.empty == base.empty
    if not base.empty:
        np.testing.assert_allclose(scaled.values, base.values, rtol=1e-9, atol=1e-12)
        assert scaled.values.argmax() == base.values.argmax()


def test_cam_on_toy_subnet(rng):
    m = build_preset("small-cnn-toy", 4, seed=2)
    x = rng.uniform(size=(3, 16, 16))
    for i, sub in enumerate(m.subnets):
        h = grad_cam(sub, x, 1, source_tag=f"subnet{i + 1}")
        assert h.values.shape == sub.extractor.shapes[-1][1:]
        assert h.upsampled.shape == (16, 16)
        assert h.values.min() >= 0 and h.values.max() <= 1
        assert h.upsampled.min() >= 0
        assert h.source_tag == f"subnet{i + 1}"
    assert m.subnets[0].training  # mode restored


def test_cam_rejects_bad_requests():
    net = cam_net([1.0, 1.0])
    with pytest.raises(ValueError):
        grad_cam(net, A, 5, target_layer=0)
    with pytest.raises(ValueError):
        grad_cam(net, A, 0, target_layer=2)  # the output layer itself
    with pytest.raises(ValueError):
        grad_cam(net, np.stack([A, A]), 0, target_layer=0)


grids = arrays(float, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(0, 1))


def _near(cells, targets):
    return any(np.abs(c - t).max() <= 1 for c in cells for t in targets)


@given(grid=grids, factor=st.sampled_from([1, 3, 5]))
def test_upsample_odd_factor_keeps_peak(grid, factor):
    # odd factors put an output sample on every source centre
    h, w = grid.shape
    up = bilinear_upsample(grid, h * factor, w * factor)
    assert up.max() == pytest.approx(grid.max(), abs=1e-12)
    maxima = np.argwhere(up >= up.max() - 1e-12) // factor
    assert _near(maxima, np.argwhere(grid == grid.max()))


@given(grid=grids, factor=st.integers(1, 5))
def test_upsample_peak_backed_by_nearby_source(grid, factor):
    h, w = grid.shape
    up = bilinear_upsample(grid, h * factor, w * factor)
    assert up.shape == (h * factor, w * factor)
    assert up.max() <= grid.max() + 1e-12 and up.min() >= grid.min() - 1e-12
    # every output value is a convex mix of its neighbouring source cells
    for cy, cx in np.argwhere(up >= up.max() - 1e-12) // factor:
        near = grid[max(cy - 1, 0):cy + 2, max(cx - 1, 0):cx + 2]
        assert near.max() >= up.max() - 1e-12


def test_upsample_even_factor_attenuates_isolated_peak():
    # no sample lands on the peak centre, so a plateau elsewhere can win
    up = bilinear_upsample(np.array([[0.9, 0.9, 0.0, 1.0, 0.0]]), 2, 10)
    assert up.max() == pytest.approx(0.9)
    assert up[0, 6:8].max() == pytest.approx(0.75)


def test_upsample_identity_and_constant():
    g = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(bilinear_upsample(g, 3, 4), g)
    np.testing.assert_allclose(bilinear_upsample(np.full((2, 2), 0.3), 7, 5), 0.3)


# ---- overlap -------------------------------------------------------------------

def _hm(values):
    v = np.asarray(values, dtype=float)
    return Heatmap(v, v, 0, "subnet1")


def test_overlap_identical_and_disjoint():
    a = _hm([[0.0, 1.0], [0.5, 0.0]])
    b = _hm([[1.0, 0.0], [0.0, 0.0]])
    assert heatmap_overlap(a, a) == 1.0
    assert heatmap_overlap(a, b) == 0.0


def test_overlap_both_empty_is_one(caplog):
    z = _hm(np.zeros((3, 3)))
    with caplog.at_level(logging.WARNING):
        assert heatmap_overlap(z, z) == 1.0
    assert "all-zero" in caplog.text


def test_overlap_rejects_mismatch():
    with pytest.raises(ValueError):
        heatmap_overlap(_hm(np.ones((2, 2))), _hm(np.ones((3, 3))))
    with pytest.raises(ValueError):
        heatmap_overlap(np.ones((2, 2)), -np.ones((2, 2)))


maps = arrays(float, (3, 4), elements=st.floats(0, 1))


@given(a=maps, b=maps)
def test_overlap_symmetric_and_bounded(a, b):
    o = heatmap_overlap(a, b)
    assert o == pytest.approx(heatmap_overlap(b, a), abs=1e-12)
    assert 0.0 <= o <= 1.0 + 1e-12


@given(a=maps, c=st.floats(0.01, 100))
def test_overlap_one_for_proportional_maps(a, c):
    if a.max() > 0:
        assert heatmap_overlap(a, c * a) == pytest.approx(1.0, abs=1e-9)


def test_overlap_below_one_when_not_proportional():
    assert heatmap_overlap([[1.0, 0.5]], [[1.0, 0.4]]) < 1.0


# ---- divergence -------------------------------------------------------------------

def test_jsd_of_disjoint_point_masses():
    ones, zeros = np.ones(100), np.zeros(100)
    assert score_jsd(ones, zeros) == pytest.approx(LN2, abs=1e-6)
    assert pairwise_separation(ones, zeros) == 1.0


scores = arrays(float, st.integers(16, 80), elements=st.floats(-1, 2))


@given(a=scores, b=scores)
def test_jsd_symmetric_and_bounded(a, b):
    j = score_jsd(a, b)
    assert j == pytest.approx(score_jsd(b, a), abs=1e-12)
    assert 0.0 <= j <= LN2


@given(a=scores)
def test_jsd_zero_on_identical(a):
    assert score_jsd(a, a.copy()) == 0.0


def test_pairwise_separation_ties_count_half():
    assert pairwise_separation([1.0, 0.5, 0.2], [0.0, 0.5, 0.9]) == pytest.approx(0.5)


@pytest.fixture(scope="module")
def shapes():
    return synth_shapes(4, 80, 16, 0.2, seed=1)


def test_identical_extractors_are_indistinguishable(shapes):
    m = build_preset("small-cnn-toy", 4, seed=3)
    for p, q in zip(m.subnet_parameters(0), m.subnet_parameters(1)):
        q.data[...] = p.data
    rep = divergence_report(m, shapes[0])
    assert rep.separation_accuracy == pytest.approx(0.5, abs=0.1)
    assert rep.score_jsd < 0.01
    np.testing.assert_allclose(rep.per_channel_cosine, 1.0)
    assert rep.samples == len(shapes[0])


def test_report_fields_in_range(shapes):
    m = build_preset("small-cnn-toy", 4, seed=4)
    rep = divergence_report(m, shapes[0].images)
    assert 0 <= rep.separation_accuracy <= 1 and 0 <= rep.threshold_accuracy <= 1
    assert 0 <= rep.score_jsd <= LN2
    assert np.all(np.abs(rep.per_channel_cosine) <= 1)
    assert not m.training  # evaluated in eval mode


def test_report_rejects_small_samples(shapes):
    m = build_preset("small-cnn-toy", 4, seed=4)
    with pytest.raises(ValueError, match="at least"):
        divergence_report(m, shapes[0].images[:MIN_SAMPLES - 1])
