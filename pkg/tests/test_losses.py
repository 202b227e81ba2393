import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmrkit.losses import (
    BCE_CLAMP,
    DICE_EPS,
    LossLog,
    LossReport,
    LossWeights,
    heatmap_bce,
    heatmap_dice,
    joint2d_loss,
    joint3d_loss,
    total_loss,
    vertex_loss,
)
from hmrkit.ndtensor import ConfigurationError, ContractError, DimensionError, Tensor, check_gradients

rng = np.random.default_rng(3)


# ------------------------------------------------------------ loop oracles


def vertex_oracle(p, g):
    total = 0.0
    for i in range(len(p)):
        for k in range(3):
            total += abs(g[i][k] - p[i][k])
    return total / len(p)


def joint_oracle(j, jbar, gt):
    total = 0.0
    for i in range(len(gt)):
        total += math.sqrt(sum((gt[i][k] - j[i][k]) ** 2 for k in range(len(gt[i]))))
        total += math.sqrt(sum((gt[i][k] - jbar[i][k]) ** 2 for k in range(len(gt[i]))))
    return total / len(gt)


def bce_oracle(h, t):
    total = 0.0
    for i in range(h.shape[0]):
        for y in range(h.shape[1]):
            for x in range(h.shape[2]):
                p = min(max(h[i, y, x], BCE_CLAMP), 1 - BCE_CLAMP)
                total -= t[i, y, x] * math.log(p) + (1 - t[i, y, x]) * math.log(1 - p)
    return total / h.shape[0]


def dice_oracle(h, t):
    total = 0.0
    for i in range(h.shape[0]):
        inter = sum(h[i, y, x] * t[i, y, x] for y in range(h.shape[1]) for x in range(h.shape[2]))
        total += 1 - 2 * inter / (t[i].sum() + h[i].sum() + DICE_EPS)
    return total / h.shape[0]


def one_hot_maps(n, h, w):
    t = np.zeros((n, h, w))
    for i in range(n):
        t[i, rng.integers(h), rng.integers(w)] = 1.0
    return t


# -------------------------------------------------------------- vertex


def test_vertex_zero_and_unit_offset():
    v = rng.normal(size=(20, 3))
    assert vertex_loss(v, v).item() == 0.0
    assert vertex_loss(v + np.array([1.0, 0, 0]), v).item() == pytest.approx(1.0, abs=1e-12)


def test_vertex_loop_oracle():
    p, g = rng.normal(size=(30, 3)), rng.normal(size=(30, 3))
    assert vertex_loss(p, g).item() == pytest.approx(vertex_oracle(p, g), abs=1e-9)


def test_vertex_shape_mismatch():
    with pytest.raises(DimensionError):
        vertex_loss(np.zeros((4, 3)), np.zeros((5, 3)))


def test_vertex_kink_subgradient_zero():
    p = Tensor(np.ones((3, 3)), requires_grad=True)
    vertex_loss(p, np.ones((3, 3))).backward()
    assert np.all(p.grad == 0)


# --------------------------------------------------------------- joints


@pytest.mark.parametrize("loss, dim", [(joint3d_loss, 3), (joint2d_loss, 2)])
def test_joint_zero_unit_and_oracle(loss, dim):
    gt = rng.normal(size=(14, dim))
    assert loss(gt, gt, gt).item() == 0.0
    unit = rng.normal(size=(14, dim))
    unit /= np.linalg.norm(unit, axis=1, keepdims=True)
    assert loss(unit, unit, np.zeros((14, dim))).item() == pytest.approx(2.0, abs=1e-12)
    j, jb = rng.normal(size=(14, dim)), rng.normal(size=(14, dim))
    assert loss(j, jb, gt).item() == pytest.approx(joint_oracle(j, jb, gt), abs=1e-9)


def test_joint_shape_mismatch():
    with pytest.raises(DimensionError):
        joint3d_loss(np.zeros((14, 3)), np.zeros((13, 3)), np.zeros((14, 3)))


# -------------------------------------------------------------- heatmaps


def test_bce_half_gives_hw_ln2():
    t = one_hot_maps(5, 6, 7)
    assert heatmap_bce(np.full((5, 6, 7), 0.5), t).item() == pytest.approx(6 * 7 * math.log(2), abs=1e-12)


def test_bce_loop_oracle_and_optimal_at_target():
    t = one_hot_maps(4, 5, 5)
    h = rng.uniform(0.01, 0.99, size=(4, 5, 5))
    assert heatmap_bce(h, t).item() == pytest.approx(bce_oracle(h, t), abs=1e-7)
    best = heatmap_bce(np.clip(t, BCE_CLAMP, 1 - BCE_CLAMP), t).item()
    for _ in range(20):
        assert best <= heatmap_bce(rng.uniform(0, 1, size=t.shape), t).item()


def test_bce_rejects_non_binary_target():
    with pytest.raises(ContractError):
        heatmap_bce(np.full((1, 2, 2), 0.5), np.full((1, 2, 2), 0.5))


def test_bce_clamps_extremes():
    t = one_hot_maps(2, 3, 3)
    v = heatmap_bce(1.0 - t, t).item()  # worst case, still finite
    assert np.isfinite(v) and v == pytest.approx(-math.log(BCE_CLAMP) * 9, rel=1e-6)


def test_dice_identity_disjoint_and_oracle():
    t = one_hot_maps(3, 4, 4)
    assert heatmap_dice(t, t).item() == pytest.approx(1 - 2 / (2 + DICE_EPS), abs=1e-15)
    disjoint = np.roll(t, 1, axis=2)
    assert heatmap_dice(disjoint, t).item() == pytest.approx(1.0, abs=1e-12)
    h = rng.uniform(0, 1, size=(3, 4, 4))
    assert heatmap_dice(h, t).item() == pytest.approx(dice_oracle(h, t), abs=1e-9)


def test_dice_rejects_negative():
    with pytest.raises(ContractError):
        heatmap_dice(-np.ones((1, 2, 2)), np.zeros((1, 2, 2)))


def test_heatmap_gradients():
    t = one_hot_maps(2, 3, 3)
    h = rng.uniform(0.1, 0.9, size=(2, 3, 3))
    assert max(check_gradients(lambda x: heatmap_bce(x, t), [h])) < 1e-6
    assert max(check_gradients(lambda x: heatmap_dice(x, t), [h])) < 1e-6


# ----------------------------------------------------------------- total

TERMS = ("l_v", "l_j3d", "l_j2d", "l_bce", "l_dice")


def test_default_weights_exact():
    assert (LossWeights().w_v, LossWeights().w_j3d, LossWeights().w_j2d, LossWeights().w_bce, LossWeights().w_dice) == (
        0.01,
        0.1,
        0.01,
        1.0,
        0.001,
    )


def test_unit_terms_total():
    total, report = total_loss({k: Tensor(1.0) for k in TERMS})
    assert total.item() == pytest.approx(1.121, abs=1e-12)
    assert report.total == total.item()


def test_zero_terms_total():
    assert total_loss({k: Tensor(0.0) for k in TERMS})[0].item() == 0.0


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(0, 100), min_size=5, max_size=5),
    st.lists(st.floats(0, 10), min_size=5, max_size=5),
    st.integers(0, 4),
)
def test_total_weighted_sum_and_linearity(values, ws, which):
    w = LossWeights(*ws)
    terms = {k: Tensor(v) for k, v in zip(TERMS, values)}
    total = total_loss(terms, w)[0].item()
    assert total == pytest.approx(sum(a * b for a, b in zip(values, ws)), abs=1e-9)
    doubled = list(ws)
    doubled[which] *= 2
    total2 = total_loss(terms, LossWeights(*doubled))[0].item()
    assert total2 - total == pytest.approx(ws[which] * values[which], abs=1e-9)


def test_negative_weight_rejected():
    with pytest.raises(ConfigurationError):
        LossWeights(w_v=-0.1)


def test_batch_mean_consistency():
    p, g = rng.normal(size=(4, 10, 3)), rng.normal(size=(4, 10, 3))
    per = np.mean([vertex_loss(p[i], g[i]).item() for i in range(4)])
    assert vertex_loss(p, g).item() == pytest.approx(per, abs=1e-12)
    t = np.stack([one_hot_maps(3, 4, 4) for _ in range(2)])
    h = rng.uniform(0.05, 0.95, size=t.shape)
    per = np.mean([heatmap_bce(h[i], t[i]).item() for i in range(2)])
    assert heatmap_bce(h, t).item() == pytest.approx(per, abs=1e-9)


def test_loss_log_csv(tmp_path):
    log = LossLog(tmp_path / "loss.csv")
    log.append(0, LossReport(1.0, 2.0, 3.0, 4.0, 5.0, 6.0))
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,l_v,l_j3d,l_j2d,l_bce,l_dice,total"
    assert lines[1] == "0,1.0,2.0,3.0,4.0,5.0,6.0"
