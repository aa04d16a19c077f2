import numpy as np
import pytest

from gradcases import LAYER_KINDS, joint_loss_error, layer_error, test_loss_error
from ncttt.autodiff import BatchNorm, Linear, ParamSet, Tensor, grad_check, ops


@pytest.mark.parametrize("kind", LAYER_KINDS)
def test_layer_kind_over_20_seeds(kind):
    worst = max(layer_error(kind, seed) for seed in range(20))
    assert worst < 1e-5


def test_linear_layer_is_nearly_exact():
    rng = np.random.default_rng(0)
    p = ParamSet()
    lin = Linear(p, "lin", 4, 3, rng)
    x = rng.normal(size=(5, 4))
    wt = rng.normal(size=(5, 3))
    assert grad_check(lambda: ops.sum(ops.mul(lin(x), wt)), p.params(), h=1e-5) < 1e-8


def test_batchnorm_layer_train_mode():
    rng = np.random.default_rng(1)
    p = ParamSet()
    bn = BatchNorm(p, "bn", 3)
    x = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    wt = rng.normal(size=(6, 3))
    # batch mode is train mode without the running-buffer side effect
    err = grad_check(lambda: ops.sum(ops.mul(ops.square(bn(x, "batch")), wt)), {"x": x, **p.params()})
    assert err < 1e-4


def test_discriminator_mlp():
    rng = np.random.default_rng(2)
    p = ParamSet()
    l1, l2 = Linear(p, "d0", 2, 16, rng), Linear(p, "d1", 16, 1, rng)
    z = rng.normal(size=(10, 2))
    labels = rng.uniform(size=10)

    def loss():
        return ops.bce_with_soft_targets(ops.reshape(l2(ops.relu(l1(z))), (10,)), labels)

    assert grad_check(loss, p.params()) < 1e-5


@pytest.mark.parametrize("seed", range(0, 20, 4))
def test_model_losses(seed):
    assert joint_loss_error(seed) < 1e-5
    assert test_loss_error(seed) < 1e-5
