"""Gradient and semantics tests for the autodiff core."""

import numpy as np
import pytest

import sepkit.tensor as T
from sepkit.errors import ShapeError
from sepkit.tensor import Tensor, finite_difference_check, forward_backward, no_grad

from fdsuite import BLOCK_CHECKS, PRIMITIVE_CHECKS

TOL = 1e-6


@pytest.mark.parametrize("name,check", PRIMITIVE_CHECKS, ids=[n for n, _ in PRIMITIVE_CHECKS])
def test_primitive_gradients(name, check):
    assert check() <= TOL


@pytest.mark.parametrize("name,check", BLOCK_CHECKS, ids=[n for n, _ in BLOCK_CHECKS])
def test_block_gradients(name, check):
    assert check() <= TOL


def test_negative_control_detects_wrong_gradient():
    # An op whose backward is off by 10% must produce ~0.1 relative error,
    # proving the checker can actually fail.
    def broken_double(a: Tensor) -> Tensor:
        out = T.Tensor(a.data * 2.0)
        out.requires_grad = True
        out._parents = (a,)

        def backward():
            g = out.grad * 2.2  # deliberately wrong (true factor is 2.0)
            a.grad = g if a.grad is None else a.grad + g

        out._backward = backward
        return out

    err = finite_difference_check(lambda a: broken_double(a).sum(), Tensor(np.ones(4)))
    assert 0.05 < err < 0.15


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * x + x  # dy/dx = 2x + 1 = 7
    y.backward()
    assert np.allclose(x.grad, [7.0])


def test_reused_parameter_accumulates_across_branches():
    w = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
    a = (w * 3.0).sum()
    b = (w * w).sum()
    loss = a + b
    loss.backward()
    assert np.allclose(w.grad, 3.0 + 2.0 * w.data)

def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 2.0 + 1.0
    assert y._parents == () and y._backward is None and not y.requires_grad


def test_stop_gradient_blocks_and_straight_through_passes():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    q = np.array([1.25, 1.75])  # pretend quantized values
    # straight-through: forward equals q, backward is identity to x
    st = x + T.stop_gradient(Tensor(q) - x)
    assert np.array_equal(st.data, q)
    st.sum().backward()
    assert np.array_equal(x.grad, np.ones(2))


def test_matmul_shape_error_names_op_and_shapes():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((4, 5)))
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(4, 5\)"):
        T.matmul(a, b)


def test_broadcast_gradient_shapes():
    a = Tensor(np.ones((3, 1)), requires_grad=True)
    b = Tensor(np.ones((1, 4)), requires_grad=True)
    (a * b).sum().backward()
    assert a.grad.shape == (3, 1) and np.allclose(a.grad, 4.0)
    assert b.grad.shape == (1, 4) and np.allclose(b.grad, 3.0)


def test_softmax_rows_sum_to_one_and_match_direct_formula():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(4, 7))
    s = T.softmax(Tensor(z), axis=-1).data
    assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-12)
    direct = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
    assert np.allclose(s, direct, atol=1e-12)


def test_cross_entropy_matches_manual_nll():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(5, 6))
    targets = np.array([0, 2, 5, 1, 3])
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    expected = -logp[np.arange(5), targets].mean()
    got = T.cross_entropy(Tensor(logits), targets).item()
    assert abs(got - expected) < 1e-12


def test_cross_entropy_zero_weight_positions_get_zero_gradient():
    rng = np.random.default_rng(2)
    logits = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    weights = np.array([1.0, 0.0, 1.0, 0.0])
    T.cross_entropy(logits, np.array([1, 2, 3, 4]), weights).backward()
    assert np.all(logits.grad[1] == 0.0) and np.all(logits.grad[3] == 0.0)
    assert np.any(logits.grad[0] != 0.0)


def test_cross_entropy_near_uniform_logits_is_log_vocab():
    rng = np.random.default_rng(3)
    v = 86
    logits = Tensor(rng.normal(0.0, 1e-3, size=(32, v)))
    loss = T.cross_entropy(logits, rng.integers(0, v, size=32)).item()
    assert abs(loss - np.log(v)) / np.log(v) < 0.01


def test_unfold_fold_round_trip_identity():
    # With hop == size (no overlap) fold(unfold(x)) restores x exactly.
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(3, 12)))
    back = T.fold(T.unfold(x, size=4, hop=4), hop=4, length=12)
    assert np.array_equal(back.data, x.data)


def test_fold_counts_overlap():
    ones = Tensor(np.ones((5, 6)))
    cover = T.fold(ones, hop=2, length=14).data
    # interior positions are covered by 3 windows of size 6 at hop 2
    assert np.all(cover[6:8] == 3.0)


def test_forward_backward_returns_loss_and_grads():
    a = Tensor(np.array([2.0]), requires_grad=True)
    b = Tensor(np.array([3.0]), requires_grad=True)
    loss, (ga, gb) = forward_backward(lambda x, y: (x * y).sum(), [a, b])
    assert loss.item() == 6.0 and ga[0] == 3.0 and gb[0] == 2.0


def test_embedding_rejects_out_of_range_ids():
    w = Tensor(np.ones((4, 3)))
    with pytest.raises(ShapeError, match="embedding"):
        T.embedding(w, np.array([0, 4]))


def test_wave_to_spec_matches_direct_rfft():
    rng = np.random.default_rng(5)
    x = rng.normal(size=24)
    frame, hop = 8, 4
    win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(frame) / frame)
    spec = T.wave_to_spec(Tensor(x), frame, hop, win).data
    n = 1 + (24 - frame) // hop
    for m in range(n):
        z = np.fft.rfft(x[m * hop : m * hop + frame] * win)
        assert np.allclose(spec[0, m], z.real, atol=1e-12)
        assert np.allclose(spec[1, m], z.imag, atol=1e-12)
