import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from slotvsg.core import Box
from slotvsg.objectives import (
    Assignment,
    LossWeights,
    consistency_from_similarity,
    dice_loss,
    giou,
    hungarian_match,
    loss_consistency,
    loss_dsgg,
    loss_pvsg,
    loss_rel,
    object_matching_cost,
    relation_targets,
)

D = torch.float64


def brute_force_assignment(cost: np.ndarray) -> float:
    """Minimum total cost over every injection of the smaller side into the larger."""
    P, G = cost.shape
    if P >= G:
        return min(sum(cost[p, g] for g, p in enumerate(rows)) for rows in itertools.permutations(range(P), G))
    return min(sum(cost[p, g] for p, g in enumerate(cols)) for cols in itertools.permutations(range(G), P))


# ---------------------------------------------------------------- GIoU / dice


def test_giou_identical_boxes():
    b = Box(0.4, 0.5, 0.2, 0.3)
    assert giou(b, b) == pytest.approx(1.0, abs=1e-12)


def test_giou_disjoint_unit_boxes():
    a = Box.from_xyxy(0, 0, 1, 1)
    b = Box.from_xyxy(2, 0, 3, 1)
    assert abs(giou(a, b) - (-1 / 3)) <= 1e-12


def test_giou_corner_boxes():
    a = Box.from_xyxy(0, 0, 2, 2)
    b = Box.from_xyxy(1, 1, 3, 3)
    assert abs(giou(a, b) - (1 / 7 - 2 / 9)) <= 1e-12
    assert abs(giou(a, b) - (-5 / 63)) <= 1e-12


def test_giou_degenerate_box_is_point():
    a = torch.tensor([0.5, 0.5, 0.0, 0.0], dtype=D)
    b = torch.tensor([0.2, 0.2, 0.2, 0.2], dtype=D)
    value = giou(a, b)
    assert torch.isfinite(value) and -1 <= float(value) <= 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.05, 0.95), min_size=8, max_size=8))
def test_giou_loss_range(v):
    a = torch.tensor(v[:4], dtype=D)
    b = torch.tensor(v[4:], dtype=D)
    loss = 1 - giou(a, b)
    assert 0 <= float(loss) <= 2 + 1e-12


def test_dice_hand_case():
    p = torch.tensor([[1.0, 1.0, 0.0]], dtype=D)
    g = torch.tensor([[0.0, 1.0, 1.0]], dtype=D)
    assert float(dice_loss(p, g)) == pytest.approx(1 - 3 / 5, abs=1e-12)


def test_dice_identical_and_disjoint():
    m = torch.zeros(40, 40, dtype=D)
    m[:, :25] = 1
    assert float(dice_loss(m, m)) < 1e-3
    assert float(dice_loss(m, 1 - m, eps=1e-9)) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ValueError):
        dice_loss(m, m[:3])


# ---------------------------------------------------------------- Hungarian


def test_hungarian_examples():
    a = hungarian_match(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert a.pairs == [(0, 0), (1, 1)] and a.cost == 0
    b = hungarian_match(np.array([[4.0, 1.0], [2.0, 3.0]]))
    assert b.pairs == [(0, 1), (1, 0)] and b.cost == 3
    c = hungarian_match(np.random.default_rng(0).random((3, 2)))
    assert len(c.pairs) == 2 and len(c.unmatched) == 1


def test_hungarian_rejects_non_finite():
    with pytest.raises(ValueError):
        hungarian_match(np.array([[np.nan, 1.0]]))


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(200):
        P, G = rng.integers(1, 8, size=2)
        cost = rng.normal(size=(P, G))
        a = hungarian_match(cost)
        assert len({p for p, _ in a.pairs}) == len(a.pairs) == min(P, G)
        assert math.isclose(a.cost, brute_force_assignment(cost), abs_tol=1e-9)


# ---------------------------------------------------------------- matching cost / task losses


def test_identical_prediction_is_row_minimum():
    gt_boxes = torch.tensor([[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]], dtype=D)
    boxes = torch.tensor([[0.3, 0.3, 0.2, 0.2], [0.05, 0.9, 0.05, 0.05], [0.9, 0.1, 0.05, 0.05]], dtype=D)
    logits = torch.zeros(3, 3, dtype=D)
    cost = object_matching_cost(logits, torch.tensor([0, 1]), LossWeights(), boxes, gt_boxes)
    assert cost[0, 0] < cost[0, 1] and cost[0, 0] == cost[:, 0].min()


def test_mask_matching_cost_shape_and_brute_force():
    rng = np.random.default_rng(3)
    logits = torch.tensor(rng.normal(size=(4, 5)), dtype=D)
    masks = torch.tensor(rng.normal(size=(4, 6, 6)), dtype=D)
    gt = torch.tensor(rng.random((3, 6, 6)) > 0.5, dtype=D)
    cost = object_matching_cost(logits, torch.tensor([0, 2, 1]), LossWeights(), mask_logits=masks, gt_masks=gt)
    assert cost.shape == (4, 3) and torch.isfinite(cost).all()
    assert math.isclose(hungarian_match(cost).cost, brute_force_assignment(cost.numpy()), abs_tol=1e-9)


def test_equal_predictions_give_equal_columns():
    logits = torch.zeros(3, 4, dtype=D)
    boxes = torch.full((3, 4), 0.5, dtype=D)
    gt = torch.tensor([[0.2, 0.2, 0.1, 0.1], [0.6, 0.6, 0.3, 0.3]], dtype=D)
    cost = object_matching_cost(logits, torch.tensor([1, 2]), LossWeights(), boxes, gt)
    assert torch.allclose(cost, cost[:1].expand(3, -1))
    assert len(hungarian_match(cost).pairs) == 2


def test_loss_dsgg_perfect_predictions():
    gt_boxes = torch.tensor([[0.3, 0.3, 0.2, 0.2]], dtype=D)
    logits = torch.full((2, 3), -30.0, dtype=D)
    logits[0, 1] = 30.0
    logits[1, 2] = 30.0
    boxes = torch.cat([gt_boxes, torch.full((1, 4), 0.5, dtype=D)])
    rep = loss_dsgg(logits, boxes, torch.tensor([1]), gt_boxes, Assignment([(0, 0)], [1]), LossWeights())
    assert float(rep.terms["box"]) == 0 and abs(float(rep.terms["giou"])) < 1e-12
    assert float(rep.terms["obj_cls"]) < 1e-12


def test_loss_dsgg_without_gt_is_empty_class_ce():
    logits = torch.randn(3, 4, dtype=D)
    rep = loss_dsgg(logits, torch.rand(3, 4, dtype=D), torch.zeros(0, dtype=torch.long), torch.zeros(0, 4, dtype=D),
                    Assignment([], [0, 1, 2]), LossWeights())
    expected = torch.nn.functional.cross_entropy(logits, torch.full((3,), 3))
    assert torch.allclose(rep.total, expected)


def test_loss_pvsg_exact_and_inverted_masks():
    gt = torch.zeros(1, 8, 8, dtype=D)
    gt[0, 2:6, 2:6] = 1
    exact = (gt * 2 - 1) * 40
    logits = torch.tensor([[40.0, -40.0]], dtype=D)
    w = LossWeights()
    rep = loss_pvsg(logits, exact, torch.tensor([0]), gt, Assignment([(0, 0)], []), w)
    assert float(rep.terms["mask"]) < 1e-12 and float(rep.terms["dice"]) < 1e-12
    rep = loss_pvsg(logits, -exact, torch.tensor([0]), gt, Assignment([(0, 0)], []), w)
    assert float(rep.terms["dice"]) > 0.9


def test_losses_nonnegative_random():
    rng = np.random.default_rng(0)
    w = LossWeights()
    for _ in range(20):
        logits = torch.tensor(rng.normal(size=(5, 4)), dtype=D)
        boxes = torch.tensor(rng.random((5, 4)) * 0.5 + 0.1, dtype=D)
        gtb = torch.tensor(rng.random((3, 4)) * 0.5 + 0.1, dtype=D)
        labels = torch.tensor(rng.integers(0, 3, 3))
        asg = hungarian_match(object_matching_cost(logits, labels, w, boxes, gtb))
        rep = loss_dsgg(logits, boxes, labels, gtb, asg, w)
        assert all(float(v) >= 0 for v in rep.terms.values())
        assert float(rep.terms["giou"]) <= 2


# ---------------------------------------------------------------- relation loss


def test_relation_targets_translate_and_drop():
    targets, dropped = relation_targets([(5, 0, 7), (5, 1, 9)], {5: 2, 7: 0})
    assert targets == [(2, 0, 0)] and dropped == 1


def test_index_ce_zero_for_one_hot_similarity():
    w = LossWeights(index_temperature=0.001)
    sim = torch.full((1, 4), -1.0, dtype=D)
    sim[0, 2] = 1.0
    rel = torch.tensor([[10.0, -10.0]], dtype=D)
    rep = loss_rel(rel, sim, sim, [(1, 0, 1)], {1: 2}, w)
    assert float(rep.terms["sidx"]) < 1e-12 and float(rep.terms["oidx"]) < 1e-12


def test_index_ce_uniform_is_log_n():
    N = 6
    sim = torch.zeros(2, N, dtype=D)
    rep = loss_rel(torch.zeros(2, 3, dtype=D), sim, sim, [(1, 0, 2)], {1: 0, 2: 3}, LossWeights())
    assert float(rep.terms["sidx"]) == pytest.approx(math.log(N), abs=1e-12)
    assert float(rep.terms["oidx"]) == pytest.approx(math.log(N), abs=1e-12)


def test_relation_matching_equals_injection_enumeration():
    rng = np.random.default_rng(5)
    w = LossWeights()
    for _ in range(20):
        rel = torch.tensor(rng.normal(size=(3, 4)), dtype=D)
        ss = torch.tensor(rng.uniform(-1, 1, size=(3, 5)), dtype=D)
        so = torch.tensor(rng.uniform(-1, 1, size=(3, 5)), dtype=D)
        gts = [(10, 0, 11), (11, 2, 12)]
        id_to_slot = {10: 0, 11: 3, 12: 4}
        rep = loss_rel(rel, ss, so, gts, id_to_slot, w)
        pr, ps, po = rel.softmax(-1), (ss / 0.1).softmax(-1), (so / 0.1).softmax(-1)
        targets = [(0, 0, 3), (3, 2, 4)]
        cost = np.array([[-(pr[j, r] + ps[j, s] + po[j, o]).item() for s, r, o in targets] for j in range(3)])
        best = min(cost[a, 0] + cost[b, 1] for a, b in itertools.permutations(range(3), 2))
        asg = rep.diagnostics["assignment"]
        assert math.isclose(sum(cost[p, g] for p, g in asg.pairs), best, abs_tol=1e-12)


def test_relation_loss_reports_dropped_triplets():
    rep = loss_rel(torch.zeros(2, 3, dtype=D), torch.zeros(2, 4, dtype=D), torch.zeros(2, 4, dtype=D),
                   [(1, 0, 2), (1, 1, 99)], {1: 0, 2: 1}, LossWeights())
    assert rep.diagnostics["dropped_triplets"] == 1


# ---------------------------------------------------------------- consistency


def test_consistency_single_slot_is_zero():
    s = torch.randn(1, 8, dtype=D)
    assert float(loss_consistency(s, s, [(0, 0)]).total) == 0.0


def test_consistency_uniform_case():
    s = torch.zeros(4, 8, dtype=D)
    rep = loss_consistency(s, s, [(i, i) for i in range(4)])
    assert abs(float(rep.total) - 4 * math.log(4)) <= 1e-9


def test_consistency_scalar_case():
    sim = torch.tensor([[2.0, 0.0]], dtype=D)
    value = consistency_from_similarity(sim, [(0, 0)])
    assert float(value) == pytest.approx(-math.log(math.exp(2) / (math.exp(2) + 1)), abs=1e-12)
    assert float(value) == pytest.approx(0.1269, abs=1e-4)


def test_consistency_without_pairs_flags():
    rep = loss_consistency(torch.randn(3, 4, dtype=D), torch.randn(3, 4, dtype=D), [])
    assert float(rep.total) == 0 and rep.diagnostics["no_pairs"]


def test_consistency_monotone_in_positive_similarity():
    sim = torch.tensor([[1.0, 0.3, -0.2], [0.1, 0.5, 0.0]], dtype=D)
    base = float(consistency_from_similarity(sim, [(0, 0), (1, 1)]))
    bumped = sim.clone()
    bumped[0, 0] += 0.25
    assert float(consistency_from_similarity(bumped, [(0, 0), (1, 1)])) < base


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(box=-1)
    with pytest.raises(ValueError):
        LossWeights(giou=float("inf"))
