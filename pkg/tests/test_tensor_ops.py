import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ncttt.autodiff import NonFiniteError, ShapeError, Tensor, backward, forward_op, grad_check, no_grad, ops, set_debug


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = forward_op("matmul", Tensor(np.eye(2)), Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_sigmoid_zero_is_half():
    assert forward_op("sigmoid", Tensor(0.0)).item() == 0.5


def test_log_sigmoid_deep_negative_is_finite():
    x = -800.0
    got = forward_op("log_sigmoid", Tensor(x)).item()
    oracle = x - np.log1p(np.exp(x))
    assert np.isfinite(got)
    assert got == pytest.approx(oracle, rel=1e-15)
    assert got == pytest.approx(-800.0)


@given(st.floats(-700, 700))
def test_log_sigmoid_matches_stable_formula(x):
    got = ops.log_sigmoid(Tensor(x)).item()
    oracle = x - np.log1p(np.exp(x)) if x < 0 else -np.log1p(np.exp(-x))
    assert got == pytest.approx(oracle, rel=1e-12, abs=1e-300)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))


def test_unknown_op_kind():
    with pytest.raises(ValueError, match="unknown op kind"):
        forward_op("conv3x3", Tensor(1.0))


def test_quadratic_gradient():
    w = Tensor([3.0], requires_grad=True)
    backward(ops.sum(ops.mul(w, w)))
    np.testing.assert_array_equal(w.grad, [6.0])


def test_sigmoid_gradient_at_zero():
    w = Tensor([0.0], requires_grad=True)
    backward(ops.sum(ops.sigmoid(ops.mul(w, 1.0))))
    assert w.grad[0] == 0.25


def test_gradients_accumulate_across_backward_calls():
    w = Tensor([3.0], requires_grad=True)
    for _ in range(2):
        backward(ops.sum(ops.square(w)))
    np.testing.assert_array_equal(w.grad, [12.0])


def test_non_scalar_loss_rejected():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError, match="scalar"):
        backward(ops.mul(w, 2.0))


def test_graph_freed_after_backward():
    w = Tensor([1.0], requires_grad=True)
    loss = ops.sum(ops.square(w))
    backward(loss)
    assert loss.is_leaf and not loss.requires_grad


def test_no_grad_records_nothing():
    w = Tensor([1.0], requires_grad=True)
    with no_grad():
        out = ops.square(w)
    assert not out.requires_grad and out.is_leaf


def test_debug_mode_catches_non_finite():
    set_debug(True)
    try:
        with pytest.raises(NonFiniteError), np.errstate(invalid="ignore"):
            ops.mul(Tensor([np.inf]), 0.0)
    finally:
        set_debug(False)


def test_random_mlp_against_central_differences():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((5, 4)))
    ws = [Tensor(rng.standard_normal(s) * 0.5, requires_grad=True) for s in [(4, 6), (6, 6), (6, 1)]]
    bs = [Tensor(rng.standard_normal(s[1]) * 0.1, requires_grad=True) for s in [(4, 6), (6, 6), (6, 1)]]

    def loss():
        h = ops.leaky_relu(ops.affine(x, ws[0], bs[0]))
        h = ops.sigmoid(ops.affine(h, ws[1], bs[1]))
        return ops.mean(ops.square(ops.affine(h, ws[2], bs[2])))

    params = {f"w{i}": w for i, w in enumerate(ws)} | {f"b{i}": b for i, b in enumerate(bs)}
    assert grad_check(loss, params, h=1e-5) < 1e-5


def test_grad_check_rejects_bad_step():
    with pytest.raises(ValueError):
        grad_check(lambda: Tensor(0.0), {}, h=1e-2)


def test_softmax_rows_sum_to_one():
    x = np.random.default_rng(0).standard_normal((7, 5)) * 50
    s = ops.softmax(Tensor(x), axis=1).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e4, 1e4)),
       st.floats(0.0, 1.0))
def test_soft_bce_finite_for_large_logits(u, p):
    out = ops.bce_with_soft_targets(Tensor(u), np.full(u.shape, p))
    assert np.isfinite(out.item())


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        ops.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_cross_entropy_uniform_logits():
    out = ops.cross_entropy(Tensor(np.zeros((4, 3))), np.array([0, 1, 2, 0]))
    assert out.item() == pytest.approx(np.log(3.0), abs=1e-15)
