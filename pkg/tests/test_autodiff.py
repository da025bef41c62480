"""Primitive-level gradient checks and frozen loss values."""

import math

import numpy as np
import pytest

from offsite_fl import autodiff as ad
from offsite_fl.autodiff import Array, Tape
from offsite_fl.errors import EmptySupervisionError, ShapeError

from gradcheck import check_directions, check_entries

RNG = np.random.default_rng(20240817)


def arr(*shape, scale=1.0):
    return Array(RNG.normal(0.0, scale, size=shape), requires_grad=True)


# ---------------------------------------------------------------------------
# elementwise / linear


def test_add_gradients():
    a, b = arr(5, 7), arr(5, 7)
    check_directions(lambda: ad.l2_distance_sq(ad.add(a, b), Array(np.ones((5, 7)))),
                     [a, b])


def test_add_bias_broadcast_gradients():
    x, bias = arr(6, 4), arr(4)
    target = Array(RNG.normal(size=(6, 4)))
    check_directions(lambda: ad.l2_distance_sq(ad.add(x, bias), target), [x, bias])


def test_add_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        ad.add(arr(3, 4), arr(4, 3))
    with pytest.raises(ShapeError):
        ad.add(arr(3, 4), arr(3))  # leading-axis vector is not a valid bias


def test_sub_mul_scale_gradients():
    a, b, c = arr(4, 4), arr(4, 4), arr(4, 4)

    def build():
        return ad.l2_distance_sq(ad.scale(ad.mul(ad.sub(a, b), c), 0.7),
                                 Array(np.zeros((4, 4))))

    check_directions(build, [a, b, c])


def test_matmul_gradients():
    a, b = arr(5, 3), arr(3, 4)
    target = Array(RNG.normal(size=(5, 4)))
    check_directions(lambda: ad.l2_distance_sq(ad.matmul(a, b), target), [a, b])
    check_entries(lambda: ad.l2_distance_sq(ad.matmul(a, b), target), [a, b])


def test_matmul_hand_adjoint():
    # C = A @ B, loss = sum(C^2): dA = 2C @ B^T, dB = A^T @ 2C
    a = Array(np.array([[1.0, 2.0]]), requires_grad=True)
    b = Array(np.array([[3.0], [4.0]]), requires_grad=True)
    with Tape() as tape:
        loss = ad.l2_distance_sq(ad.matmul(a, b), Array(np.zeros((1, 1))))
        tape.backward(loss)
    assert loss.item() == 121.0  # (1*3 + 2*4)^2
    np.testing.assert_allclose(a.grad, [[66.0, 88.0]])
    np.testing.assert_allclose(b.grad, [[22.0], [44.0]])


def test_transpose_gradients():
    a = arr(3, 5)
    target = Array(RNG.normal(size=(5, 3)))
    check_directions(lambda: ad.l2_distance_sq(ad.transpose(a), target), [a])


def test_embedding_gradients_with_repeats():
    table = arr(7, 4)
    ids = np.array([0, 3, 3, 6, 0])  # repeated rows exercise scatter-add
    target = Array(RNG.normal(size=(5, 4)))
    check_directions(lambda: ad.l2_distance_sq(ad.embedding(table, ids), target),
                     [table])
    # rows never gathered must get zero gradient
    with Tape() as tape:
        loss = ad.l2_distance_sq(ad.embedding(table, ids), target)
        table.grad = None
        tape.backward(loss)
    np.testing.assert_array_equal(table.grad[1], np.zeros(4))
    np.testing.assert_array_equal(table.grad[2], np.zeros(4))


def test_embedding_bad_ids_raise():
    table = arr(7, 4)
    with pytest.raises(ShapeError):
        ad.embedding(table, np.array([0, 7]))
    with pytest.raises(ShapeError):
        ad.embedding(table, np.array([-1]))
    with pytest.raises(ShapeError):
        ad.embedding(table, np.array([0.5]))


# ---------------------------------------------------------------------------
# normalization / activation / attention


def test_rms_norm_gradients():
    x, gain = arr(6, 8), Array(RNG.normal(1.0, 0.2, size=8), requires_grad=True)
    target = Array(RNG.normal(size=(6, 8)))
    check_directions(lambda: ad.l2_distance_sq(ad.rms_norm(x, gain), target),
                     [x, gain])
    check_entries(lambda: ad.l2_distance_sq(ad.rms_norm(x, gain), target),
                  [x, gain])


def test_silu_values_and_gradients():
    assert ad.silu(Array(np.zeros((1, 1)))).item() == 0.0
    assert abs(ad.silu(Array(np.full((1, 1), 20.0))).item() - 20.0) < 1e-7
    x = arr(5, 5)
    target = Array(RNG.normal(size=(5, 5)))
    check_directions(lambda: ad.l2_distance_sq(ad.silu(x), target), [x])


def test_rotary_preserves_row_norms():
    x = Array(RNG.normal(size=(9, 8)))
    y = ad.rotary(x, n_heads=2)
    np.testing.assert_allclose((y.values ** 2).sum(axis=1),
                               (x.values ** 2).sum(axis=1), rtol=1e-12)


def test_rotary_position_zero_is_identity():
    x = Array(RNG.normal(size=(4, 8)))
    y = ad.rotary(x, n_heads=2)
    np.testing.assert_allclose(y.values[0], x.values[0], atol=1e-15)


def test_rotary_gradients():
    x = arr(7, 12)
    target = Array(RNG.normal(size=(7, 12)))
    check_directions(lambda: ad.l2_distance_sq(ad.rotary(x, 3), target), [x])


def test_causal_attention_gradients():
    q, k, v = arr(6, 8), arr(6, 8), arr(6, 8)
    target = Array(RNG.normal(size=(6, 8)))
    check_directions(
        lambda: ad.l2_distance_sq(ad.causal_attention(q, k, v, 2), target),
        [q, k, v])
    check_entries(
        lambda: ad.l2_distance_sq(ad.causal_attention(q, k, v, 2), target),
        [q, k, v])


def test_causal_attention_ignores_future():
    q = Array(RNG.normal(size=(5, 8)))
    k = Array(RNG.normal(size=(5, 8)))
    v = Array(RNG.normal(size=(5, 8)))
    base = ad.causal_attention(q, k, v, 2).values.copy()
    k2, v2 = k.values.copy(), v.values.copy()
    k2[3:] += 10.0
    v2[3:] -= 5.0
    pert = ad.causal_attention(Array(q.values), Array(k2), Array(v2), 2).values
    np.testing.assert_array_equal(pert[:3], base[:3])
    assert not np.array_equal(pert[3:], base[3:])


def test_single_position_attention_is_value_passthrough():
    q, k = Array(RNG.normal(size=(1, 4))), Array(RNG.normal(size=(1, 4)))
    v = Array(RNG.normal(size=(1, 4)))
    np.testing.assert_allclose(ad.causal_attention(q, k, v, 2).values, v.values,
                               rtol=1e-15)


# ---------------------------------------------------------------------------
# losses: frozen values, masking, gradients


def test_cross_entropy_uniform_logits_value():
    logits = Array(np.zeros((3, 4)))
    loss = ad.softmax_cross_entropy(logits, np.array([0, 1, 3]), np.ones(3))
    assert abs(loss.item() - math.log(4.0)) < 1e-14


def test_cross_entropy_matches_manual():
    logits = Array(RNG.normal(size=(6, 9)))
    targets = RNG.integers(0, 9, size=6)
    mask = np.array([1, 0, 1, 1, 0, 1])
    z = logits.values
    lse = np.log(np.exp(z - z.max(1, keepdims=True)).sum(1)) + z.max(1)
    per_pos = lse - z[np.arange(6), targets]
    want = per_pos[mask == 1].mean()
    got = ad.softmax_cross_entropy(logits, targets, mask).item()
    assert abs(got - want) < 1e-12


def test_cross_entropy_masked_positions_get_no_gradient():
    logits = arr(5, 6)
    targets = np.array([0, 1, 2, 3, 4])
    mask = np.array([1, 0, 1, 0, 1])
    with Tape() as tape:
        loss = ad.softmax_cross_entropy(logits, targets, mask)
        tape.backward(loss)
    np.testing.assert_array_equal(logits.grad[1], np.zeros(6))
    np.testing.assert_array_equal(logits.grad[3], np.zeros(6))
    assert np.abs(logits.grad[0]).max() > 0


def test_cross_entropy_gradients():
    logits = arr(6, 9)
    targets = RNG.integers(0, 9, size=6)
    mask = np.array([1, 1, 0, 1, 0, 1])
    check_directions(lambda: ad.softmax_cross_entropy(logits, targets, mask),
                     [logits])


def test_cross_entropy_empty_mask_raises():
    with pytest.raises(EmptySupervisionError):
        ad.softmax_cross_entropy(arr(3, 4), np.array([0, 1, 2]), np.zeros(3))


def test_cross_entropy_bad_targets_raise():
    with pytest.raises(ShapeError):
        ad.softmax_cross_entropy(arr(3, 4), np.array([0, 1, 4]), np.ones(3))


def test_kl_hand_value():
    # p = softmax([0,0]) = (.5,.5); q = softmax([ln3,0]) = (.75,.25)
    # KL = .5 ln(.5/.75) + .5 ln(.5/.25) = .5 ln(4/3)
    p = Array(np.zeros((1, 2)))
    q = Array(np.array([[math.log(3.0), 0.0]]))
    got = ad.kl_divergence(p, q, np.ones(1)).item()
    assert abs(got - 0.5 * math.log(4.0 / 3.0)) < 1e-14


def test_kl_zero_when_distributions_match():
    z = RNG.normal(size=(4, 7))
    loss = ad.kl_divergence(Array(z.copy()), Array(z.copy()), np.ones(4))
    assert loss.item() == 0.0


def test_kl_gradient_reaches_only_q():
    p, q = arr(4, 5), arr(4, 5)
    with Tape() as tape:
        loss = ad.kl_divergence(p, q, np.ones(4))
        tape.backward(loss)
    assert p.grad is None
    assert q.grad is not None and np.abs(q.grad).max() > 0
    check_directions(lambda: ad.kl_divergence(Array(p.values), q, np.ones(4)), [q])


def test_kl_empty_mask_raises():
    with pytest.raises(EmptySupervisionError):
        ad.kl_divergence(arr(3, 4), arr(3, 4), np.zeros(3))


def test_l2_hand_value_and_mask():
    a = Array(np.array([[1.0, 2.0], [3.0, 4.0]]))
    b = Array(np.zeros((2, 2)))
    assert ad.l2_distance_sq(a, b).item() == 30.0
    assert ad.l2_distance_sq(a, b, np.array([1, 0])).item() == 5.0


def test_l2_empty_mask_is_legal_zero():
    a, b = arr(3, 4), arr(3, 4)
    with Tape() as tape:
        loss = ad.l2_distance_sq(a, b, np.zeros(3))
        tape.backward(loss)
    assert loss.item() == 0.0
    np.testing.assert_array_equal(a.grad, np.zeros((3, 4)))
    np.testing.assert_array_equal(b.grad, np.zeros((3, 4)))


def test_l2_gradients_with_row_mask():
    a, b = arr(5, 3), arr(5, 3)
    mask = np.array([1, 0, 1, 1, 0])
    check_directions(lambda: ad.l2_distance_sq(a, b, mask), [a, b])


# ---------------------------------------------------------------------------
# tape mechanics


def test_backward_accumulates_across_tapes():
    x = arr(3, 3)
    target = Array(np.zeros((3, 3)))

    def run_once():
        with Tape() as tape:
            loss = ad.l2_distance_sq(x, target)
            tape.backward(loss)

    run_once()
    once = x.grad.copy()
    run_once()
    np.testing.assert_allclose(x.grad, 2.0 * once)


def test_backward_requires_scalar_root():
    x = arr(2, 2)
    with Tape() as tape:
        y = ad.mul(x, x)
        with pytest.raises(ShapeError):
            tape.backward(y)


def test_backward_rejects_foreign_root():
    x = arr(2, 2)
    with Tape() as tape1:
        loss = ad.l2_distance_sq(x, Array(np.zeros((2, 2))))
        tape1.backward(loss)
    with Tape() as tape2:
        with pytest.raises(ValueError):
            tape2.backward(loss)


def test_frozen_inputs_record_nothing():
    a = Array(RNG.normal(size=(3, 3)))  # requires_grad=False
    b = Array(RNG.normal(size=(3, 3)))
    with Tape() as tape:
        ad.l2_distance_sq(ad.mul(a, b), Array(np.zeros((3, 3))))
        assert len(tape._nodes) == 0


def test_detached_copy_blocks_gradient():
    x = arr(3, 3)
    with Tape() as tape:
        y = ad.mul(x, x)
        cut = Array(y.values)  # detach
        loss = ad.l2_distance_sq(cut, Array(np.zeros((3, 3))))
        x.grad = None
        with pytest.raises(ValueError):
            tape.backward(loss)  # loss never reached the tape
    assert x.grad is None


def test_mixed_dtype_raises():
    a = Array(np.zeros((2, 2)), dtype=np.float32)
    b = Array(np.zeros((2, 2)), dtype=np.float64)
    with pytest.raises(ShapeError):
        ad.add(a, b)
