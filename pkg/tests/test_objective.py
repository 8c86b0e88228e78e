import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import lovasz_oracle
from vggtocc import diffcore as dc
from vggtocc.objective import (
    LOSS_TERMS, Metrics, ce_smoothed, class_weights, downsample_labels, geo_scal, iou_miou, label_pyramid,
    lovasz_softmax, sem_scal, total_loss,
)
from vggtocc.verify import HEAD_TOL, check_total_loss


def softmax_np(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


@given(st.integers(1, 6), st.integers(2, 3), st.integers(0, 100_000))
def test_lovasz_matches_subset_oracle(n, C, seed):
    rng = np.random.default_rng(seed)
    probs = softmax_np(rng.normal(0, 2, size=(n, C)))
    labels = rng.integers(0, C, size=n)
    got = float(lovasz_softmax(dc.const(probs), labels).value)
    assert abs(got - lovasz_oracle(probs, labels)) < 1e-12


def test_lovasz_examples():
    labels = np.array([0, 2, 1, 1])
    assert float(lovasz_softmax(dc.const(np.eye(3)[labels]), labels).value) == 0.0
    assert float(lovasz_softmax(dc.const(np.array([[0.6, 0.4]])), np.array([0])).value) == pytest.approx(0.4)


@given(st.integers(0, 100_000), st.floats(0.0, 1.0))
def test_lovasz_monotone_toward_truth(seed, t):
    rng = np.random.default_rng(seed)
    probs = softmax_np(rng.normal(size=(5, 3)))
    labels = rng.integers(0, 3, size=5)
    onehot = np.eye(3)[labels]
    a = float(lovasz_softmax(dc.const(probs), labels).value)
    b = float(lovasz_softmax(dc.const((1 - t) * probs + t * onehot), labels).value)
    assert b <= a + 1e-12


def test_ce_examples():
    assert float(ce_smoothed(dc.const(np.array([[50.0, -50.0]])), np.array([0]), alpha=0.0).value) < 1e-20
    for alpha in (0.0, 0.1, 0.7):
        assert float(ce_smoothed(dc.const(np.zeros((3, 5))), np.array([0, 1, 4]), alpha).value) == pytest.approx(math.log(5))
    logits = np.log(np.array([[0.6, 0.4]]))
    expect = -0.95 * math.log(0.6) - 0.05 * math.log(0.4)
    assert float(ce_smoothed(dc.const(logits), np.array([0]), 0.1).value) == pytest.approx(expect, abs=1e-12)
    assert expect == pytest.approx(0.5311, abs=1e-4)


def test_geo_scal_examples():
    assert float(geo_scal(dc.const(np.array([[40.0, -40, -40], [-40, 40, -40]])), np.array([0, 1])).value) < 1e-15
    # p_free = 0.5 -> p_occupied = 0.5
    logits = np.log(np.array([[0.5, 0.3, 0.2], [0.5, 0.1, 0.4]]))
    assert float(geo_scal(dc.const(logits), np.array([0, 2])).value) == pytest.approx(math.log(2))
    swapped = logits[:, [0, 2, 1]]
    assert float(geo_scal(dc.const(swapped), np.array([0, 2])).value) == pytest.approx(
        float(geo_scal(dc.const(logits), np.array([0, 2])).value), abs=1e-15)


def test_sem_scal_examples():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(6, 3))
    labels = np.array([0, 1, 2, 0, 1, 2])
    w = class_weights([labels], 3)
    assert np.allclose(w, 1.0)
    assert float(sem_scal(dc.const(logits), labels, w).value) == pytest.approx(
        float(ce_smoothed(dc.const(logits), labels, 0.0).value))
    one = np.array([[0.2, 1.0, -0.5]])
    weights = np.array([0.5, 2.0, 1.0])
    hand = -2.0 * (one[0, 1] - np.log(np.exp(one).sum()))
    assert float(sem_scal(dc.const(one), np.array([1]), weights).value) == pytest.approx(hand)


def test_class_weights_inverse_frequency():
    labels = np.array([0] * 8 + [1] * 2)
    w = class_weights([labels], 2)
    assert w[1] / w[0] == pytest.approx(4.0)
    assert w.mean() == pytest.approx(1.0)
    rare = class_weights([np.array([0] * 10_000 + [1])], 2)
    assert rare.max() <= 10 and rare.min() >= 0.1


def _scales(seed):
    rng = np.random.default_rng(seed)
    labels = label_pyramid(rng.integers(0, 4, size=(4, 4, 2)).astype(np.uint8), 2)
    logits = [dc.const(rng.normal(size=l.shape + (4,))) for l in labels]
    return logits, labels, class_weights(labels, 4)


def test_total_is_sum_of_terms_and_scale_weights_matter():
    logits, labels, w = _scales(0)
    total, br = total_loss(logits, labels, w, (0.75, 1.0))
    assert abs(br.total - (br.ce + br.sem_scal + br.geo_scal + br.lovasz)) < 1e-12
    assert all(getattr(br, k) >= 0 for k in LOSS_TERMS)
    _, only_fine = total_loss(logits, labels, w, (0.0, 1.0))
    assert only_fine.total == pytest.approx(sum(only_fine.per_scale[1].values()))
    _, none = total_loss(logits, labels, w, (0.0, 0.0))
    assert none.total == 0.0
    _, no_lov = total_loss(logits, labels, w, (0.75, 1.0), toggles={"lovasz": False})
    assert no_lov.lovasz == 0.0 and no_lov.total == pytest.approx(br.total - br.lovasz)


def test_total_loss_gradients():
    assert check_total_loss(0).error < HEAD_TOL


def test_iou_examples():
    gt = np.array([1, 2, 0, 1, 0, 3])
    m = iou_miou(gt, gt, 4)
    assert m.iou == 1.0 and m.miou == 1.0
    assert iou_miou(np.zeros_like(gt), gt, 4).iou == 0.0
    # TP=3, FP=1, FN=2 on binary occupancy
    pred = np.array([1, 1, 1, 1, 0, 0])
    gt = np.array([1, 1, 1, 0, 1, 1])
    assert iou_miou(pred, gt, 2).iou == pytest.approx(0.5)


@given(st.integers(0, 100_000), st.integers(1, 5))
def test_streamed_metrics_equal_single_pass(seed, parts):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, 4, size=60)
    gt = rng.integers(0, 4, size=60)
    streamed = Metrics.empty(4)
    for p, g in zip(np.array_split(pred, parts), np.array_split(gt, parts)):
        streamed = streamed + iou_miou(p, g, 4)
    whole = iou_miou(pred, gt, 4)
    assert streamed.iou == whole.iou
    assert streamed.miou == whole.miou or (np.isnan(streamed.miou) and np.isnan(whole.miou))


def test_metrics_report_layout():
    m = iou_miou(np.array([1, 2, 0]), np.array([1, 0, 0]), 3)
    lines = m.report(["free", "a", "b"]).splitlines()
    assert lines[0] == "class\tiou"
    assert [l.split("\t")[0] for l in lines[1:]] == ["a", "b", "IoU", "mIoU"]


def downsample_oracle(labels):
    X, Y, Z = labels.shape
    out = np.zeros((X // 2, Y // 2, Z // 2), dtype=labels.dtype)
    for x, y, z in itertools.product(range(X // 2), range(Y // 2), range(Z // 2)):
        block = labels[2 * x:2 * x + 2, 2 * y:2 * y + 2, 2 * z:2 * z + 2].ravel().tolist()
        best = max(set(block), key=lambda c: (block.count(c), c != 0, -c))
        out[x, y, z] = best
    return out


@given(st.integers(0, 100_000), st.integers(2, 6))
def test_downsample_matches_oracle(seed, n_cls):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, n_cls, size=(4, 6, 2)).astype(np.uint8)
    assert np.array_equal(downsample_labels(labels), downsample_oracle(labels))


def test_downsample_tie_prefers_occupied_then_lowest():
    block = np.array([0, 0, 0, 0, 3, 3, 3, 3], dtype=np.uint8).reshape(2, 2, 2)
    assert downsample_labels(block).item() == 3
    block = np.array([0, 0, 2, 2, 1, 1, 3, 3], dtype=np.uint8).reshape(2, 2, 2)
    assert downsample_labels(block).item() == 1
