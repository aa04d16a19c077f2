import numpy as np
import pytest

from ncttt.autodiff import SGD, Adam, MissingGradError, MultiStepLR, Tensor, make_optimizer


def _param(value, grad):
    t = Tensor([value], requires_grad=True)
    t.grad = np.array([grad])
    return t


def test_sgd_step():
    p = _param(1.0, 2.0)
    SGD({"p": p}, lr=0.1).step()
    assert p.data[0] == pytest.approx(0.8, abs=1e-15)
    assert p.grad is None


def test_adam_first_step_moves_by_lr():
    p = _param(0.0, 1.0)
    Adam({"p": p}, lr=1e-3).step()
    # t=1: m_hat = g, v_hat = g^2, step = lr * g / (|g| + eps)
    assert p.data[0] == pytest.approx(-1e-3 / (1.0 + 1e-8), rel=1e-12)


def test_adam_matches_hand_rolled_trajectory():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(5, 3))
    p = Tensor(np.zeros(3), requires_grad=True)
    opt = Adam({"p": p}, lr=0.01)
    ref, m, v = np.zeros(3), np.zeros(3), np.zeros(3)
    for t, g in enumerate(grads, start=1):
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-13)
    assert opt.t == 5


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_gradient_leaves_parameter(kind):
    p = _param(1.5, 0.0)
    make_optimizer(kind, {"p": p}, 0.1).step()
    assert p.data[0] == 1.5


def test_missing_gradient_is_an_error():
    p = Tensor([1.0], requires_grad=True)
    with pytest.raises(MissingGradError, match="'p'"):
        SGD({"p": p}, lr=0.1).step()


def test_frozen_tensors_are_skipped():
    frozen = Tensor([1.0])
    SGD({"f": frozen}, lr=0.1).step()
    assert frozen.data[0] == 1.0


def test_multistep_schedule():
    opt = SGD({}, lr=0.1)
    sched = MultiStepLR(opt, [2, 4])
    assert [sched.set_epoch(e) for e in range(6)] == pytest.approx([0.1, 0.1, 0.01, 0.01, 0.001, 0.001])


def test_milestones_must_increase():
    with pytest.raises(ValueError):
        MultiStepLR(SGD({}, lr=0.1), [3, 3])


def test_unknown_optimizer_and_negative_lr():
    with pytest.raises(ValueError):
        make_optimizer("rmsprop", {}, 0.1)
    with pytest.raises(ValueError):
        SGD({}, lr=-1.0)
