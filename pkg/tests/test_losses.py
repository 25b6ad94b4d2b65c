import numpy as np
import pytest

from lidarworld import (
    EmbeddingBatch,
    GridSpec,
    OccupancyGrid,
    ValidationError,
    cosine_prediction_loss,
    ema_update,
    iou_metrics,
    l2_prediction_loss,
    masked_bce,
    sigreg,
    total_loss,
    variance_reg,
)
from lidarworld.core import FREE, INVALID, OCCUPIED
from lidarworld.losses import finite_difference_grad


def _batch(rng, n=16, d=8, mask_p=0.75):
    mask = rng.random(n) < mask_p
    mask[:2] = True
    return EmbeddingBatch(rng.standard_normal((n, d)), mask)


def test_cosine_zero_for_identical():
    rng = np.random.default_rng(0)
    b = _batch(rng)
    v, g = cosine_prediction_loss(b, b)
    assert abs(v) < 1e-12


def test_cosine_two_for_opposite():
    x = np.array([[1.0, 0.0], [0.0, 2.0]])
    mask = np.ones(2, dtype=bool)
    v, _ = cosine_prediction_loss(EmbeddingBatch(x, mask),
                                  EmbeddingBatch(-x, mask))
    assert abs(v - 2.0) < 1e-12


def test_cosine_rejects_zero_norm_row():
    x = np.zeros((2, 3))
    x[1] = 1.0
    mask = np.ones(2, dtype=bool)
    with pytest.raises(ValidationError, match="row 0"):
        cosine_prediction_loss(EmbeddingBatch(x, mask), EmbeddingBatch(x, mask))


def test_unmasked_rows_get_zero_gradient():
    rng = np.random.default_rng(1)
    pred = _batch(rng)
    target = EmbeddingBatch(rng.standard_normal(pred.values.shape), pred.mask)
    for fn in (lambda: cosine_prediction_loss(pred, target),
               lambda: l2_prediction_loss(pred, target),
               lambda: variance_reg(pred),
               lambda: sigreg(pred, k=4)):
        _, g = fn()
        assert not g[~pred.mask].any()


def test_l2_matches_hand_value():
    mask = np.ones(2, dtype=bool)
    pred = EmbeddingBatch(np.array([[1.0, 0.0], [0.0, 0.0]]), mask)
    target = EmbeddingBatch(np.array([[0.0, 0.0], [0.0, 3.0]]), mask)
    v, g = l2_prediction_loss(pred, target)
    assert abs(v - (1.0 + 9.0) / 2.0) < 1e-12
    np.testing.assert_allclose(g, [[1.0, 0.0], [0.0, -3.0]], atol=1e-12)


def test_mismatched_masks_rejected():
    rng = np.random.default_rng(2)
    a = _batch(rng)
    bad_mask = ~a.mask
    b = EmbeddingBatch(a.values.copy(), bad_mask)
    with pytest.raises(ValidationError):
        l2_prediction_loss(a, b)


def test_variance_collapsed_closed_form():
    row = np.linspace(-1, 1, 6)
    batch = EmbeddingBatch(np.tile(row, (10, 1)), np.ones(10, dtype=bool))
    v, _ = variance_reg(batch, gamma=1.0, eps=1e-4)
    assert abs(v - 0.99) < 1e-9


def test_variance_zero_when_spread():
    rng = np.random.default_rng(3)
    batch = EmbeddingBatch(rng.standard_normal((200, 4)) * 10,
                           np.ones(200, dtype=bool))
    v, g = variance_reg(batch, gamma=1.0)
    assert v == 0.0
    assert not g.any()


def test_variance_gradient_matches_fd():
    rng = np.random.default_rng(4)
    batch = EmbeddingBatch(rng.standard_normal((12, 5)) * 0.3,
                           np.ones(12, dtype=bool))
    v, g = variance_reg(batch)
    coords = np.arange(0, 60, 7)
    fd = finite_difference_grad(
        lambda x: variance_reg(EmbeddingBatch(x, batch.mask))[0],
        batch.values, coords)
    np.testing.assert_allclose(g.ravel()[coords], fd, rtol=1e-6, atol=1e-10)


def test_sigreg_collapsed_closed_form():
    batch = EmbeddingBatch(np.zeros((16, 4)), np.ones(16, dtype=bool))
    v, _ = sigreg(batch, k=4, beta=1.0, seed=0)
    expected = 1.0 - 2.0 / np.sqrt(2.0) + 1.0 / np.sqrt(3.0)
    assert abs(v - expected) < 1e-9


def test_sigreg_small_on_gaussian():
    rng = np.random.default_rng(5)
    batch = EmbeddingBatch(rng.standard_normal((4096, 8)),
                           np.ones(4096, dtype=bool))
    v, _ = sigreg(batch, k=4, seed=1)
    assert 0.0 <= v < 0.01


def test_sigreg_deterministic_in_seed():
    rng = np.random.default_rng(6)
    batch = _batch(rng, n=32, d=8)
    assert sigreg(batch, k=8, seed=3)[0] == sigreg(batch, k=8, seed=3)[0]
    assert sigreg(batch, k=8, seed=3)[0] != sigreg(batch, k=8, seed=4)[0]


def test_total_loss_linear_arithmetic():
    g = np.ones((2, 3))
    v, grad = total_loss((0.5, g), (0.05, g), 10.0)
    assert v == 1.0
    np.testing.assert_array_equal(grad, 11.0 * np.ones((2, 3)))


def test_ema_update_blend():
    t = np.array([1.0, 2.0])
    c = np.array([3.0, 4.0])
    np.testing.assert_allclose(ema_update(t, c, 0.9), [1.2, 2.2], atol=1e-12)
    with pytest.raises(ValidationError):
        ema_update(t, np.zeros(3), 0.9)
    with pytest.raises(ValidationError):
        ema_update(t, c, 1.0)


def _grid(state):
    spec = GridSpec(range=(0, 0, 0, state.shape[0], state.shape[1],
                           state.shape[2]), voxel_size=(1, 1, 1))
    return OccupancyGrid(spec, state)


def test_masked_bce_ignores_invalid():
    state = np.full((2, 2, 1), INVALID, dtype=np.uint8)
    state[0, 0, 0] = OCCUPIED
    state[1, 1, 0] = FREE
    logits = np.zeros((2, 2, 1))
    logits[0, 1, 0] = 100.0  # INVALID voxel: must not affect loss or grad
    v, g = masked_bce(logits, _grid(state))
    assert abs(v - np.log(2.0)) < 1e-12
    assert g[0, 1, 0] == 0.0


def test_masked_bce_gradient_matches_fd():
    rng = np.random.default_rng(7)
    state = rng.integers(0, 3, size=(3, 3, 2)).astype(np.uint8)
    state[0, 0, 0] = OCCUPIED
    logits = rng.standard_normal((3, 3, 2))
    v, g = masked_bce(logits, _grid(state))
    coords = np.arange(0, 18, 2)
    fd = finite_difference_grad(lambda x: masked_bce(x, _grid(state))[0],
                                logits, coords)
    np.testing.assert_allclose(g.ravel()[coords], fd, rtol=1e-6, atol=1e-10)


def test_masked_bce_all_invalid_rejected():
    state = np.zeros((2, 2, 1), dtype=np.uint8)
    with pytest.raises(ValidationError):
        masked_bce(np.zeros((2, 2, 1)), _grid(state))


def test_iou_invalid_excluded_and_close_region():
    state = np.full((4, 4, 1), FREE, dtype=np.uint8)
    state[0, 0, 0] = OCCUPIED
    state[2, 2, 0] = INVALID
    pred = np.zeros((4, 4, 1), dtype=bool)
    pred[0, 0, 0] = True
    pred[2, 2, 0] = True  # falls on INVALID: ignored entirely
    iou_full, iou_close = iou_metrics(pred, _grid(state))
    assert iou_full == 1.0
    assert iou_close == 1.0  # close region (central 2x2) has empty union


def test_iou_empty_union_is_one():
    state = np.full((4, 4, 1), FREE, dtype=np.uint8)
    pred = np.zeros((4, 4, 1), dtype=bool)
    assert iou_metrics(pred, _grid(state)) == (1.0, 1.0)


def test_iou_half_extent_close_region():
    state = np.full((4, 4, 1), FREE, dtype=np.uint8)
    state[1, 1, 0] = OCCUPIED   # inside central 2x2
    state[0, 3, 0] = OCCUPIED   # outside it
    pred = np.zeros((4, 4, 1), dtype=bool)
    pred[1, 1, 0] = True
    iou_full, iou_close = iou_metrics(pred, _grid(state))
    assert iou_full == 0.5
    assert iou_close == 1.0
