import subprocess
import sys

import numpy as np
import pytest

from ncttt import nce
from ncttt.autodiff import SGD, Adam, ShapeError, backward, ops
from ncttt.data import ShiftSpec, apply_shift
from ncttt.model import BlockSpec, ModelSpec, NCTTTModel, encode_checkpoint, load_checkpoint, save_checkpoint
from ncttt.nce import WHOLE_VECTOR, NoiseConfig
from ncttt.pipeline import accuracy


def small_spec(**kw):
    base = dict(in_channels=2, blocks=[BlockSpec(16), BlockSpec(16), BlockSpec(16)], num_classes=3,
                attach_layer=1, projector_dim=2, disc_hidden=32)
    base.update(kw)
    return ModelSpec(**base)


def batch(n=32, dim=2, seed=0, classes=3):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, dim)), rng.integers(0, classes, size=n)


# -- classification ------------------------------------------------------------------------------

def test_fresh_model_is_near_uniform():
    x, _ = batch(64)
    for seed in range(10):
        p = NCTTTModel(small_spec(), seed=seed).forward_classify(x)
        assert np.all(p.max(axis=1) - p.min(axis=1) < 0.2)


def test_probabilities_sum_to_one():
    x, _ = batch(50, seed=1)
    p = NCTTTModel(small_spec(), seed=0).forward_classify(x * 10)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_eval_forward_is_deterministic():
    model = NCTTTModel(small_spec(), seed=0)
    x, _ = batch()
    np.testing.assert_array_equal(model.forward_classify(x), model.forward_classify(x))


def test_input_shape_checked():
    with pytest.raises(ShapeError):
        NCTTTModel(small_spec(), seed=0).forward_classify(np.zeros((4, 3)))


# -- auxiliary branch ------------------------------------------------------------------------------

def test_per_location_view_count():
    spec = small_spec(in_channels=5, spatial=(4, 4), projector_dim=3)
    model = NCTTTModel(spec, seed=0)
    x = np.random.default_rng(0).normal(size=(2, 5, 4, 4))
    logits, labels = model.forward_aux(x, NoiseConfig(0.1, 1.0, 3, M=1), seed=0)
    assert logits.shape == (64,) and labels.shape == (64,)


def test_whole_vector_view_count():
    spec = small_spec(in_channels=5, spatial=(4, 4), projector_dim=3, noise_mode=WHOLE_VECTOR)
    model = NCTTTModel(spec, seed=0)
    x = np.random.default_rng(0).normal(size=(2, 5, 4, 4))
    logits, _ = model.forward_aux(x, NoiseConfig(0.1, 1.0, 48, M=2, mode=WHOLE_VECTOR), seed=0)
    assert logits.shape == (8,)


def test_hard_label_mode():
    model = NCTTTModel(small_spec(), seed=0)
    x, _ = batch()
    _, labels = model.forward_aux(x, NoiseConfig(0.0, 1.0, 2), seed=0)
    assert set(labels.tolist()) == {0.0, 1.0}


def test_noise_config_must_match_model():
    model = NCTTTModel(small_spec(), seed=0)
    x, _ = batch()
    with pytest.raises(ValueError, match="does not match"):
        model.forward_aux(x, NoiseConfig(0.1, 1.0, 3), seed=0)


def test_trained_discriminator_separates_views():
    """Train only the discriminator on fixed 2-D features and score held-out views."""
    model = NCTTTModel(small_spec(disc_hidden=64), seed=0)
    cfg = NoiseConfig(0.05, 1.0, 2, M=8)
    rng = np.random.default_rng(1)
    feats = rng.uniform(-1, 1, size=(20, 2))
    disc = model.params.params(["disc."])
    opt = Adam(disc, lr=5e-3)
    for _ in range(1500):
        v = nce.sample_noisy_views(feats, cfg, seed=rng)
        backward(nce.aux_loss(model.discriminate(ops.add(feats[v.origin_index], v.eps), "train"),
                              nce.soft_labels(v, cfg)))
        opt.step()
    v = nce.sample_noisy_views(feats, cfg, seed=12345)
    logits = model.discriminate(ops.add(feats[v.origin_index], v.eps), "eval").data
    acc = np.mean((logits > 0) == (nce.soft_labels(v, cfg) > 0.5))
    assert acc > 0.9


def test_discriminator_variants():
    leaky = NCTTTModel(small_spec(disc_activation="leaky_relu", disc_batchnorm=True, disc_hidden=1024), seed=0)
    assert "disc.0.bn.gamma" in leaky.params.params()
    default = NCTTTModel(small_spec(), seed=0)
    assert default.spec.disc_activation == "relu"
    assert not any(k.startswith("disc.0.bn") for k in default.params)


# -- joint loss --------------------------------------------------------------------------------------

def test_zero_weight_is_plain_cross_entropy():
    model = NCTTTModel(small_spec(), seed=0)
    x, y = batch()
    total, sup, _ = model.joint_loss(x, y, NoiseConfig(0.35, 0.7, 2), seed=0, lam=0.0, bn_mode="batch")
    ce = ops.cross_entropy(model.class_logits(x, "batch"), y)
    assert total.item() == ce.item() == sup.item()


def test_unit_weight_exceeds_each_term():
    model = NCTTTModel(small_spec(), seed=0)
    x, y = batch()
    total, sup, aux = model.joint_loss(x, y, NoiseConfig(0.35, 0.7, 2), seed=0, lam=1.0, bn_mode="batch")
    assert sup.item() > 0 and aux.item() > 0
    assert total.item() > sup.item() and total.item() > aux.item()
    assert total.item() == pytest.approx(sup.item() + aux.item(), rel=1e-15)


def test_invalid_label_rejected():
    model = NCTTTModel(small_spec(), seed=0)
    x, _ = batch(4)
    with pytest.raises(ValueError):
        model.joint_loss(x, np.array([0, 1, 2, 3]), NoiseConfig(0.35, 0.7, 2), seed=0)


def test_spec_validation():
    with pytest.raises(ValueError):
        small_spec(attach_layer=4)
    with pytest.raises(ValueError):
        small_spec(lam=-1.0)
    with pytest.raises(ValueError):
        small_spec(projector_norm="layernorm")


# -- adaptation ---------------------------------------------------------------------------------------

def test_adapt_step_touches_only_prefix_blocks(fresh):
    model = fresh.model
    before = model.group_hashes()
    opt = Adam(model.adapt_params(), lr=0.03)
    x = fresh.target.inputs[:300]
    for _ in range(5):
        model.adapt_step(x, opt)
    after = model.group_hashes()
    assert after["encoder.0"] != before["encoder.0"]
    for key in ("encoder.1", "encoder.2", "head", "projector", "disc"):
        assert after[key] == before[key], key


def test_optimizer_outside_prefix_rejected(fresh):
    opt = SGD(fresh.model.params.params(["head."]), lr=0.1)
    with pytest.raises(ValueError, match="outside blocks"):
        fresh.model.adapt_step(fresh.target.inputs[:10], opt)


def test_zero_learning_rate_changes_nothing(fresh):
    model = fresh.model
    digest = model.state_digest()
    loss = model.adapt_step(fresh.target.inputs[:100], SGD(model.adapt_params(), lr=0.0))
    assert np.isfinite(loss) and loss > 0
    assert model.state_digest() == digest


def test_empty_batch_rejected(fresh):
    with pytest.raises(ValueError, match="empty"):
        fresh.model.adapt_step(np.zeros((0, 2)), SGD(fresh.model.adapt_params(), lr=0.1))


def test_test_loss_decreases_on_shifted_batch(fresh):
    model = fresh.model
    x = fresh.target.inputs[:300]
    opt = Adam(model.adapt_params(), lr=0.03)
    losses = [model.adapt_step(x, opt) for _ in range(20)]
    losses.append(model.test_loss(x).item())
    assert losses[-1] < losses[0]
    for a, b in zip(losses, losses[1:]):
        assert b <= a * 1.05


def test_no_gradient_beyond_attach_layer(fresh):
    model = fresh.model
    model.zero_grad()
    backward(model.test_loss(fresh.target.inputs[:50]))
    for name, p in model.params.params(["encoder.1.", "encoder.2.", "head."]).items():
        assert p.grad is None or not np.any(p.grad), name
    assert any(p.grad is not None and np.any(p.grad) for p in model.adapt_params().values())
    model.zero_grad()


# -- state ------------------------------------------------------------------------------------------

def test_snapshot_restore_round_trip():
    model = NCTTTModel(small_spec(), seed=0)
    x, y = batch()
    before = model.forward_classify(x)
    snap = model.snapshot()
    opt = Adam(model.params.params(), lr=0.1)
    backward(model.joint_loss(x, y, NoiseConfig(0.35, 0.7, 2), seed=0)[0])
    opt.step()
    assert not np.array_equal(model.forward_classify(x), before)
    model.restore(snap)
    np.testing.assert_array_equal(model.forward_classify(x), before)
    assert model.state_digest() == snap.digest()


def test_snapshot_version_mismatch():
    snap = NCTTTModel(small_spec(), seed=0).snapshot()
    with pytest.raises(ValueError, match="version"):
        NCTTTModel(small_spec(projector_dim=3), seed=0).restore(snap)


def test_checkpoint_across_processes(tmp_path, fresh):
    save_checkpoint(fresh.model, tmp_path / "m.ncttt", {"note": "x"})
    np.save(tmp_path / "x.npy", fresh.target.inputs[:40])
    code = (
        "import sys, numpy as np\n"
        "from ncttt.model import load_checkpoint\n"
        "m, meta = load_checkpoint(sys.argv[1])\n"
        "np.save(sys.argv[3], m.forward_classify(np.load(sys.argv[2])))\n"
        "print(m.state_digest())\n"
    )
    out = subprocess.run([sys.executable, "-c", code, str(tmp_path / "m.ncttt"), str(tmp_path / "x.npy"),
                          str(tmp_path / "p.npy")], capture_output=True, text=True, check=True)
    assert out.stdout.strip() == fresh.model.state_digest()
    np.testing.assert_array_equal(np.load(tmp_path / "p.npy"), fresh.model.forward_classify(fresh.target.inputs[:40]))
    loaded, meta = load_checkpoint(tmp_path / "m.ncttt")
    assert meta == {"note": "x"}
    assert (tmp_path / "m.ncttt").read_bytes() == encode_checkpoint(loaded, {"note": "x"})


def test_restore_after_long_adaptation_recovers_source_accuracy(fresh):
    model = fresh.model
    before = accuracy(model, fresh.source_test)
    opt = Adam(model.adapt_params(), lr=0.03)
    for _ in range(50):
        model.adapt_step(fresh.target.inputs[:300], opt)
    model.restore(fresh.state)
    assert accuracy(model, fresh.source_test) == before


# -- prediction-time batch norm ----------------------------------------------------------------------

def test_ptbn_needs_two_examples(fresh):
    with pytest.raises(ValueError):
        fresh.model.ptbn_predict(fresh.target.inputs[:1])


def test_ptbn_constant_batch_uses_floor(fresh):
    p = fresh.model.ptbn_predict(np.ones((5, 2)))
    assert np.all(np.isfinite(p))


def test_ptbn_agrees_with_eval_on_source(fresh):
    x = fresh.source_test.inputs
    agree = np.mean(fresh.model.ptbn_predict(x).argmax(axis=1) == fresh.model.predict(x))
    assert agree > 0.95


def test_ptbn_beats_unadapted_under_brightness_shift(fresh):
    shifted = apply_shift(fresh.source_test, ShiftSpec("brightness", 4), seed=0)
    unadapted = accuracy(fresh.model, shifted)
    ptbn = np.mean(fresh.model.ptbn_predict(shifted.inputs).argmax(axis=1) == shifted.labels)
    assert ptbn >= unadapted
