import numpy as np
import pytest

from ncttt.autodiff import BatchNorm, ParamSet, ShapeError, Tensor, grad_check, ops
from ncttt.autodiff.nn import Whitening


def _bn(channels=4):
    p = ParamSet()
    return p, BatchNorm(p, "bn", channels)


def test_train_mode_normalizes_each_column():
    _, bn = _bn()
    x = np.random.default_rng(0).normal(3.0, 5.0, size=(64, 4))
    with_stats = ops.batchnorm(x, np.ones(4), np.zeros(4), np.zeros(4), np.ones(4), mode="train").data
    np.testing.assert_allclose(with_stats.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(with_stats.var(axis=0), 1.0, atol=1e-6)
    out = bn(x, "train").data
    np.testing.assert_allclose(out.var(axis=0), 1.0, atol=1e-6)


def test_running_statistics_use_momentum():
    _, bn = _bn(2)
    x = np.random.default_rng(1).normal(size=(10, 2))
    bn(x, "train")
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=0), rtol=1e-14)
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=0, ddof=1), rtol=1e-14)


def test_eval_mode_depends_only_on_running_statistics():
    _, bn = _bn(3)
    bn.running_mean[:] = [1.0, 2.0, 3.0]
    bn.running_var[:] = [4.0, 9.0, 16.0]
    x = np.random.default_rng(2).normal(size=(5, 3))
    full = bn(x, "eval").data
    single = np.vstack([bn(x[i:i + 1], "eval").data for i in range(5)])
    np.testing.assert_array_equal(full, single)
    np.testing.assert_allclose(full, (x - [1, 2, 3]) / [2, 3, 4], rtol=1e-14)


def test_batch_mode_leaves_buffers_alone():
    _, bn = _bn(2)
    bn(np.random.default_rng(3).normal(size=(8, 2)), "batch")
    np.testing.assert_array_equal(bn.running_mean, 0.0)
    np.testing.assert_array_equal(bn.running_var, 1.0)


def test_constant_batch_uses_variance_floor():
    _, bn = _bn(2)
    out = bn(np.full((6, 2), 7.0), "train").data
    np.testing.assert_array_equal(out, 0.0)


def test_single_row_batch_statistics_rejected():
    _, bn = _bn(2)
    with pytest.raises(ShapeError):
        bn(np.ones((1, 2)), "batch")


def test_batchnorm_gradient_train_mode():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(7, 3)), requires_grad=True)
    g = Tensor(rng.normal(size=3), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    w = rng.normal(size=(7, 3))

    def loss():
        out = ops.batchnorm(x, g, b, np.zeros(3), np.ones(3), mode="batch")
        return ops.sum(ops.mul(ops.square(out), w))

    assert grad_check(loss, {"x": x, "gamma": g, "beta": b}) < 1e-4


def test_whitening_gives_identity_covariance():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(200, 3)) @ np.array([[2.0, 0.5, 0.0], [0.0, 1.0, 0.3], [0.1, 0.0, 0.2]])
    z = ops.whiten(x, np.zeros(3), np.eye(3), mode="batch").data
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.T @ z / len(z), np.eye(3), atol=1e-9)


def test_whitening_eval_uses_running_covariance():
    p = ParamSet()
    wh = Whitening(p, "w", 2)
    wh.running_mean[:] = [1.0, -1.0]
    wh.running_cov[:] = [[4.0, 0.0], [0.0, 0.25]]
    out = wh(np.array([[3.0, 0.0]]), "eval").data
    np.testing.assert_allclose(out, [[1.0, 2.0]], rtol=1e-12)


def test_whitening_train_mode_updates_buffers():
    p = ParamSet()
    wh = Whitening(p, "w", 2)
    x = np.random.default_rng(6).normal(size=(20, 2))
    wh(x, "train")
    c = np.cov(x, rowvar=False)
    np.testing.assert_allclose(wh.running_cov, 0.9 * np.eye(2) + 0.1 * c, rtol=1e-12)


@pytest.mark.parametrize("shrink", [0.0, 0.1])
def test_whitening_gradient(shrink):
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(9, 3)), requires_grad=True)
    w = rng.normal(size=(9, 3))

    def loss():
        z = ops.whiten(x, np.zeros(3), np.eye(3), mode="batch", shrink=shrink)
        return ops.sum(ops.mul(ops.sigmoid(z), w))

    assert grad_check(loss, {"x": x}) < 1e-5


def test_buffers_are_not_parameters():
    p, _ = _bn(2)
    Whitening(p, "w", 2)
    assert set(p.params()) == {"bn.gamma", "bn.beta"}
    assert set(p.buffers()) == {"bn.running_mean", "bn.running_var", "w.running_mean", "w.running_cov"}


def test_duplicate_names_rejected():
    p, _ = _bn(2)
    with pytest.raises(KeyError):
        BatchNorm(p, "bn", 2)
