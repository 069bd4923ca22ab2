"""Tests for the training objective terms and their weighted sum."""
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import numerics as nx
from config import LossWeights
from losses import (TERMS, LossInputs, align_loss, align_target, combine, contrastive_rank_loss, dice_loss,
                    focal_loss, localization_loss, presence_loss, query_ranks, total_loss)


def test_focal_single_foreground_pixel():
    with nx.precision("double"):
        value = focal_loss(np.array([0.9]), np.array([True])).item()
    assert value == pytest.approx(0.75 * 0.1 ** 2 * -math.log(0.9), rel=1e-6)
    assert value == pytest.approx(7.902e-4, rel=1e-3)


def test_focal_perfect_prediction_vanishes():
    with nx.precision("double"):
        target = np.array([[1, 0], [0, 1]], bool)
        assert focal_loss(target.astype(float), target).item() < 1e-12


def test_focal_reduces_to_half_cross_entropy(rng):
    p = rng.uniform(0.05, 0.95, size=10)
    t = rng.random(10) > 0.5
    with nx.precision("double"):
        value = focal_loss(p, t, alpha=0.5, gamma=0.0).item()
    cross_entropy = -np.mean(np.where(t, np.log(p), np.log(1 - p)))
    assert value == pytest.approx(0.5 * cross_entropy, rel=1e-9)


def test_dice_examples():
    with nx.precision("double"):
        mask = np.array([[1, 0], [1, 1]], bool)
        assert dice_loss(mask.astype(float), mask).item() == 0.0
        assert dice_loss(np.zeros((2, 2)), np.zeros((2, 2), bool)).item() == 0.0
        disjoint = dice_loss(np.array([1.0, 0.0]), np.array([False, True])).item()
        assert disjoint == pytest.approx(1 - 1 / 3)
        assert dice_loss(np.array([1.0, 0.0]), np.array([False, True]), epsilon=1e-9).item() == pytest.approx(1.0)


def test_align_target_example():
    t_c = align_target(np.array([0.8]), np.array([0.9]), np.array([0]), alpha=0.5, tau=2.0)
    assert t_c[0] == pytest.approx(math.sqrt(0.72), abs=1e-5)
    assert t_c[0] == pytest.approx(0.84853, abs=1e-5)


def test_align_target_limits():
    assert align_target(np.array([0.8]), np.array([0.0]), np.array([0]))[0] == 0.0
    assert align_target(np.array([0.8]), np.array([0.9]), np.array([10_000]))[0] < 1e-12


def test_align_loss_with_zero_iou_penalizes_confidence():
    with nx.precision("double"):
        value = align_loss(np.array([0.7]), np.array([0.0]), np.array([0])).item()
    assert value == pytest.approx(0.7 ** 2 * -math.log(0.3))


def test_contrastive_examples():
    with nx.precision("double"):
        assert contrastive_rank_loss(np.array([0.9, 0.2]), np.array([0.8, 0.1])).item() == 0.0
        assert contrastive_rank_loss(np.array([0.3, 0.2]), np.array([0.8, 0.1])).item() == pytest.approx(0.4)
        assert contrastive_rank_loss(np.array([0.3, 0.2]), np.array([0.5, 0.5])).item() == 0.0


def test_query_ranks_break_ties_by_index():
    assert query_ranks(np.array([0.5, 0.9, 0.5])).tolist() == [1, 0, 2]


def test_localization_examples():
    with nx.precision("double"):
        gt = np.array([1.0, 2.0, 3.0])
        centroid, _ = localization_loss(gt.copy(), gt, 0.9, 1)
        assert centroid.item() == 0.0
        centroid, _ = localization_loss(gt + np.array([0.5, 0.0, 0.0]), gt, 0.9, 1)
        assert centroid.item() == pytest.approx(0.125)
        centroid, presence = localization_loss(gt + 4.0, gt, 0.2, 0)
        assert centroid.item() == 0.0
        assert presence.item() == pytest.approx(-math.log(0.8))


def test_presence_loss_positive():
    with nx.precision("double"):
        assert presence_loss(0.9, 1).item() == pytest.approx(-math.log(0.9))


def _random_inputs(rng, present=True, q=4, v=2, h=4, w=4):
    return LossInputs(
        masks=nx.DualTensor(rng.uniform(0.05, 0.95, size=(q, v, h, w))),
        confidences=nx.DualTensor(rng.uniform(0.05, 0.95, size=q)),
        centroid=nx.DualTensor(rng.normal(size=3)),
        gt_masks=(rng.random((v, h, w)) > 0.6) if present else None,
        gt_centroid=rng.normal(size=3) if present else None,
    )


def test_total_is_weighted_sum_of_terms(rng):
    weights = LossWeights()
    with nx.precision("double"):
        report = total_loss(_random_inputs(rng), weights)
    expected = (2.0 * report.terms["focal"] + 0.5 * report.terms["dice"] + 1.0 * report.terms["align"]
                + 0.3 * report.terms["contrastive"] + 0.5 * report.terms["centroid"]
                + 0.5 * report.terms["presence"])
    assert abs(report.total - expected) < 1e-9
    assert abs(float(report.graph.value) - report.total) < 1e-6
    assert set(report.terms) == set(TERMS)


def test_only_focal_weight_keeps_only_focal(rng):
    weights = LossWeights(lambda_focal=2.0, lambda_dice=0.0, lambda_align=0.0, lambda_contrastive=0.0,
                          lambda_centroid=0.0, lambda_presence=0.0)
    with nx.precision("double"):
        report = total_loss(_random_inputs(rng), weights)
    assert report.total == pytest.approx(2.0 * report.terms["focal"], abs=1e-12)


def test_all_zero_terms_give_zero_total():
    report = combine({name: nx.DualTensor(0.0) for name in TERMS}, LossWeights())
    assert report.total == 0.0


def test_absent_prompt_skips_mask_and_centroid_terms(rng):
    with nx.precision("double"):
        inputs = _random_inputs(rng, present=False)
        report = total_loss(inputs, LossWeights())
    assert report.terms["focal"] == 0.0
    assert report.terms["dice"] == 0.0
    assert report.terms["centroid"] == 0.0
    presence = float(inputs.confidences.value.max())
    assert report.terms["presence"] == pytest.approx(-math.log(1.0 - presence))


def test_loss_report_record():
    report = combine({name: nx.DualTensor(1.0) for name in TERMS}, LossWeights())
    record = report.to_record(7)
    assert record["step"] == 7 and record["kind"] == "step"
    assert record["total"] == pytest.approx(4.8)


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_pixel_order_does_not_matter_to_focal_or_dice(data):
    n = data.draw(st.integers(1, 24))
    p = np.array(data.draw(st.lists(st.floats(0.01, 0.99), min_size=n, max_size=n)))
    t = np.array(data.draw(st.lists(st.booleans(), min_size=n, max_size=n)))
    perm = np.array(data.draw(st.permutations(range(n))))
    with nx.precision("double"):
        assert focal_loss(p[perm], t[perm]).item() == pytest.approx(focal_loss(p, t).item(), rel=1e-12, abs=1e-15)
        assert dice_loss(p[perm], t[perm]).item() == pytest.approx(dice_loss(p, t).item(), rel=1e-12, abs=1e-15)


def _value_and_grad(loss_fn, confidences, *args):
    with nx.precision("double"):
        conf = nx.parameter(confidences, "conf")
        loss = loss_fn(conf, *args)
        loss.backward()
    return loss.item(), conf.grad.copy()


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_query_order_permutes_align_and_contrastive(data):
    q = data.draw(st.integers(2, 8))
    conf = np.array(data.draw(st.lists(st.floats(0.05, 0.95), min_size=q, max_size=q)))
    ious = np.array(data.draw(st.lists(st.floats(0.0, 1.0), min_size=q, max_size=q, unique=True)))
    perm = np.array(data.draw(st.permutations(range(q))))
    ranks = query_ranks(ious)
    assert np.array_equal(query_ranks(ious[perm]), ranks[perm])

    value, grad = _value_and_grad(align_loss, conf, ious, ranks)
    permuted, permuted_grad = _value_and_grad(align_loss, conf[perm], ious[perm], ranks[perm])
    assert permuted == pytest.approx(value, rel=1e-12, abs=1e-15)
    assert np.allclose(permuted_grad, grad[perm], rtol=1e-12, atol=1e-15)

    value, grad = _value_and_grad(contrastive_rank_loss, conf, ious)
    permuted, permuted_grad = _value_and_grad(contrastive_rank_loss, conf[perm], ious[perm])
    assert permuted == pytest.approx(value, rel=1e-12, abs=1e-15)
    assert np.allclose(permuted_grad, grad[perm], rtol=1e-12, atol=1e-15)
