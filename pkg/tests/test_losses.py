import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taskseg import gradkernel as gk
from taskseg.annotations import Target, TaskGroundTruth, TaskKind
from taskseg.losses import (
    ConsistencyError,
    EmptyBatchError,
    LossWeights,
    Temperature,
    classification_loss,
    combine_components,
    contrastive_loss,
    mask_losses,
    target_masks,
    total_loss,
)
from taskseg.matcher import MatchResult
from taskseg.model import SegmentationOutput

import gradcases


def _unit_temp():
    return Temperature(1.0)


# ---- contrastive


def test_default_temperature():
    t = Temperature()
    assert t.tau == pytest.approx(0.07)
    assert 1.0 / t.tau == pytest.approx(14.2857, abs=1e-3)


def test_single_pair_is_zero():
    rng = np.random.default_rng(0)
    loss = contrastive_loss(gk.tensor(rng.normal(size=(1, 5))), gk.tensor(rng.normal(size=(1, 5))), Temperature())
    assert abs(float(loss.data)) <= 1e-7


def test_two_orthonormal_pairs():
    x = gk.tensor(np.eye(2))
    loss = contrastive_loss(x, gk.tensor(np.eye(2)), _unit_temp())
    assert float(loss.data) == pytest.approx(2 * math.log(1 + math.exp(-1)), abs=1e-3)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_swap_symmetry(seed, b):
    rng = np.random.default_rng(seed)
    o, t = rng.normal(size=(b, 4)), rng.normal(size=(b, 4))
    temp = Temperature(float(rng.uniform(1, 20)))
    a = float(contrastive_loss(gk.tensor(o), gk.tensor(t), temp).data)
    c = float(contrastive_loss(gk.tensor(t), gk.tensor(o), temp).data)
    assert abs(a - c) <= 1e-6


def test_empty_batch():
    with pytest.raises(EmptyBatchError):
        contrastive_loss(gk.tensor(np.zeros((0, 3))), gk.tensor(np.zeros((0, 3))), Temperature())


@pytest.mark.parametrize("seed", range(5))
def test_contrastive_gradients(seed):
    f, leaves = gradcases._contrastive(np.random.default_rng(seed))
    assert gk.finite_diff_check(f, leaves, step=1e-3) <= 1e-3


# ---- classification


def test_ce_vanishes_with_margin():
    w = LossWeights()
    prev = math.inf
    for margin in (2.0, 5.0, 10.0, 20.0):
        logits = np.zeros((3, 4))
        logits[np.arange(3), [0, 1, 2]] = margin
        value = float(classification_loss(gk.tensor(logits), np.array([0, 1, 2]), w).data)
        assert value < prev
        prev = value
    assert prev < 1e-7


def test_ce_uniform_logits():
    loss = classification_loss(gk.tensor(np.zeros((5, 3))), np.array([0, 1, 0, 1, 0]), LossWeights())
    assert float(loss.data) == pytest.approx(math.log(3), abs=1e-6)


def test_ce_no_object_scaled():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(6, 4))
    assigned = np.full(6, 3)
    weighted = float(classification_loss(gk.tensor(logits), assigned, LossWeights()).data)
    plain = float(classification_loss(gk.tensor(logits), assigned, LossWeights(no_object=1.0)).data)
    assert weighted == pytest.approx(0.1 * plain, rel=1e-6)


def test_ce_out_of_range():
    with pytest.raises(IndexError):
        classification_loss(gk.tensor(np.zeros((2, 3))), np.array([0, 3]), LossWeights())


# ---- mask losses


def test_saturated_perfect_masks():
    rng = np.random.default_rng(0)
    g = rng.random((3, 6, 6)) < 0.5
    g[:, 0, 0] = True
    bce, dice = mask_losses(gk.tensor(np.where(g, 20.0, -20.0)), g)
    assert float(bce.data) <= 1e-6
    assert float(dice.data) <= 1e-3


def test_half_probability_bce():
    g = np.random.default_rng(1).random((2, 4, 4)) < 0.3
    bce, _ = mask_losses(gk.tensor(np.zeros((2, 4, 4))), g)
    assert float(bce.data) == pytest.approx(math.log(2), abs=1e-6)


@pytest.mark.parametrize("side", [2, 4, 8, 16])
def test_disjoint_dice_closed_form(side):
    g = np.zeros((1, side, 2 * side), dtype=bool)
    g[0, :, :side] = True
    logits = np.where(g, -30.0, 30.0)
    _, dice = mask_losses(gk.tensor(logits), g)
    sp, sg = side * side, side * side
    assert float(dice.data) == pytest.approx(1 - 1 / (sp + sg + 1), abs=1e-5)


def test_mask_shape_error():
    with pytest.raises(gk.ShapeError):
        mask_losses(gk.tensor(np.zeros((2, 4, 4))), np.zeros((2, 4, 5)))


def test_mask_loss_gradients():
    for builder in (gradcases._bce, gradcases._dice):
        f, leaves = builder(np.random.default_rng(2))
        assert gk.finite_diff_check(f, leaves, step=1e-3) <= 1e-3


# ---- total loss


def _fake_output(rng, n=4, k1=3, hw=(4, 4), stages=4):
    sets = [(gk.tensor(rng.normal(size=(n, k1))), gk.tensor(rng.normal(size=(n, *hw)))) for _ in range(stages)]
    return SegmentationOutput(sets[-1][0], sets[-1][1], sets[:-1])


def _gt(rng, hw=(4, 4)):
    m1 = np.zeros(hw, bool)
    m1[:2] = True
    return TaskGroundTruth(TaskKind.PANOPTIC, [Target(0, m1, (1,)), Target(1, ~m1, (2,))])


def test_total_matches_componentwise_expansion():
    rng = np.random.default_rng(0)
    out, gt = _fake_output(rng), _gt(rng)
    matches = [MatchResult([(0, 1), (2, 0)], [1, 3]) for _ in out.stages()]
    w = LossWeights(0.5, 2, 5, 5)
    cl = 0.37
    from taskseg.losses import stage_losses

    masks = target_masks(gt, (4, 4))
    comps = []
    for (c, m), match in zip(out.stages(), matches):
        parts = stage_losses(c, m, match, masks, gt.class_ids, w)
        comps.append(tuple(float(p.data) for p in parts))
    total = float(total_loss(out, matches, gt, cl, w).total.data)
    assert total == pytest.approx(combine_components(cl, comps, w), rel=1e-6)
    expected = 0.5 * cl + sum(2 * x + 5 * b + 5 * d for x, b, d in comps)
    assert total == pytest.approx(expected, rel=1e-6)


def test_total_zero_components():
    w = LossWeights()
    assert combine_components(0.0, [(0.0, 0.0, 0.0)] * 4, w) == 0.0
    # saturated correct predictions: every term ~ 0
    n, hw = 2, (4, 4)
    m = np.zeros((n, *hw), dtype=bool)
    m[0, :2] = True
    m[1, 2:] = True
    logits = np.full((n, 3), -40.0)
    logits[0, 0] = logits[1, 1] = 40.0
    sets = [(gk.tensor(logits), gk.tensor(np.where(m, 40.0, -40.0)))] * 2
    out = SegmentationOutput(sets[-1][0], sets[-1][1], sets[:-1])
    gt = TaskGroundTruth(TaskKind.PANOPTIC, [Target(0, m[0]), Target(1, m[1])])
    match = MatchResult([(0, 0), (1, 1)], [])
    assert float(total_loss(out, [match, match], gt, 0.0, w).total.data) <= 1e-6


def test_doubling_weights_doubles_total():
    rng = np.random.default_rng(3)
    out, gt = _fake_output(rng), _gt(rng)
    matches = [MatchResult([(1, 0), (3, 1)], [0, 2]) for _ in out.stages()]
    w = LossWeights()
    # no-object weight is a relative scale inside CE, so it stays fixed
    doubled = LossWeights(2 * w.contrastive, 2 * w.cls, 2 * w.bce, 2 * w.dice, w.no_object)
    a = float(total_loss(out, matches, gt, 0.8, w).total.data)
    b = float(total_loss(out, matches, gt, 0.8, doubled).total.data)
    assert b == pytest.approx(2 * a, rel=1e-6)


def test_missing_stage_match():
    rng = np.random.default_rng(0)
    out, gt = _fake_output(rng), _gt(rng)
    with pytest.raises(ConsistencyError):
        total_loss(out, [MatchResult([], [0, 1, 2, 3])] * 2, gt, 0.0, LossWeights())


def test_weights_validated():
    with pytest.raises(ValueError):
        LossWeights(cls=-1.0)
