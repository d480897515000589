import numpy as np
import pytest

from powerbert import tensor as T
from powerbert.checkpoint import CheckpointError
from powerbert.model import (
    LossSpec, PowerBertConfig, TrainConfig, decode, encode, extract_features, init_params, loss_fn, param_shapes,
    pool, pretrain, reconstruct, save_model, load_model, sme_value,
)

CFG = PowerBertConfig(ws=6, areas=3, dim=8, heads=2, ff_hidden=16)


def zero_blocks(params):
    for name, p in params.items():
        if ".attn.w" in name or ".ff.w" in name or ".attn.b" in name or ".ff.b" in name:
            p.data = np.zeros_like(p.data)
    return params


def test_shapes_and_finiteness():
    params = init_params(CFG, 0)
    x = np.random.default_rng(0).random((4, 6, 3))
    z = encode(params, CFG, x)
    assert z.shape == (4, 6, 8)
    r = decode(params, CFG, z)
    assert r.shape == (4, 6, 3) and np.all(np.isfinite(r.data))
    with pytest.raises(T.ShapeError):
        encode(params, CFG, np.zeros((4, 5, 3)))
    with pytest.raises(T.ShapeError):
        decode(params, CFG, np.zeros((4, 6, 3)))
    assert set(params) == set(param_shapes(CFG))


def test_zero_weight_blocks_are_identity():
    params = zero_blocks(init_params(CFG, 1))
    x = np.random.default_rng(1).random((2, 6, 3))
    e = encode(params, CFG, x, upto=0).data
    for k in range(1, CFG.encoder_blocks + 1):
        assert np.allclose(encode(params, CFG, x, upto=k).data, e, atol=1e-12)
    # all five blocks: reconstruction is the output affine of the embedding
    expect = e @ params["out.w"].data + params["out.b"].data
    assert np.allclose(reconstruct(params, CFG, x).data, expect, atol=1e-12)


def test_identical_segments_identical_codes():
    params = init_params(CFG, 2)
    x = np.random.default_rng(2).random((1, 6, 3))
    z = encode(params, CFG, np.concatenate([x, x])).data
    assert np.array_equal(z[0], z[1])


def test_sme_examples():
    e = np.array([0.1, 0.2, 0.3, 1.4])
    res = loss_fn(T.Tensor(e), np.zeros(4), LossSpec("sme", 1.5))
    assert res.threshold == pytest.approx(0.75) and res.value == pytest.approx(1.6)
    assert res.small.tolist() == [True, True, True, False]
    assert sme_value(np.full(4, 0.5), 1.5) == 0.5
    assert loss_fn(T.Tensor(e), np.zeros(4), LossSpec("mae")).value == pytest.approx(0.5)
    assert loss_fn(T.Tensor(e), np.zeros(4), LossSpec("mse")).value == pytest.approx(np.mean(e**2))
    with pytest.raises(ValueError):
        LossSpec("huber")


def test_sme_backward_uses_group_weights():
    x = T.Tensor(np.array([0.1, -0.2, 0.3, 1.4]), requires_grad=True)
    res = loss_fn(x, np.zeros(4), LossSpec("sme", 1.5))
    T.backward(res.loss)
    assert np.allclose(x.grad, [1 / 3, -1 / 3, 1 / 3, 1.0])


def test_pretrain_reduces_loss_and_is_deterministic():
    rng = np.random.default_rng(3)
    t = np.linspace(0, 2 * np.pi, 6)
    x = 0.5 + 0.3 * np.sin(t[None, :, None] + rng.uniform(0, 6, (64, 1, 3)))
    tc = TrainConfig(epochs=15, batch_size=16, lr=3e-3, warmup_steps=5)
    a = pretrain(x, CFG, LossSpec("sme"), tc, seed=4)
    b = pretrain(x, CFG, LossSpec("sme"), tc, seed=4)
    assert a.epoch_losses[-1] < 0.5 * a.epoch_losses[0]
    assert [h.loss for h in a.history] == [h.loss for h in b.history]
    assert len(a.history) == 15 * 4


def test_zero_epochs_keeps_initialisation():
    x = np.random.default_rng(5).random((8, 6, 3))
    res = pretrain(x, CFG, train=TrainConfig(epochs=0), seed=6)
    init = init_params(CFG, 6)
    assert all(np.array_equal(res.params[n].data, init[n].data) for n in init)
    with pytest.raises(ValueError):
        pretrain(x, CFG, train=TrainConfig(batch_size=16, drop_last=True))


def test_pooling():
    z = np.tile(np.arange(8.0), (2, 6, 1))
    assert np.array_equal(pool(z, "mean"), np.tile(np.arange(8.0), (2, 1)))
    assert pool(z, "flatten").shape == (2, 48)
    params = init_params(CFG, 0)
    x = np.random.default_rng(0).random((3, 6, 3))
    assert extract_features(params, CFG, x).shape == (3, 8)
    assert extract_features(params, CFG, x, "flatten").shape == (3, 48)
    assert extract_features(params, CFG, x[0]).shape == (8,)
    with pytest.raises(ValueError):
        extract_features(params, CFG, x, "max")


def test_checkpoint_round_trip(tmp_path):
    x = np.random.default_rng(7).random((8, 6, 3))
    res = pretrain(x, CFG, train=TrainConfig(epochs=1, batch_size=4), seed=1)
    save_model(tmp_path / "m.ckpt", res.params, CFG, res.adam, {"note": "x"})
    params, cfg, adam, meta = load_model(tmp_path / "m.ckpt")
    assert cfg == CFG and adam.step_count == 2 and meta["note"] == "x"
    z0 = encode(res.params, CFG, x).data
    z1 = encode(params, cfg, x).data
    assert np.allclose(z0, z1, rtol=1e-5, atol=1e-6)
    assert set(adam.first_moment) == set(params)


def test_checkpoint_missing_parameter(tmp_path):
    params = init_params(CFG, 0)
    del params["out.b"]
    save_model(tmp_path / "m.ckpt", params, CFG)
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "m.ckpt")


def test_config_validation():
    with pytest.raises(ValueError):
        PowerBertConfig(dim=30, heads=4)
    with pytest.raises(ValueError):
        PowerBertConfig(areas=5, dim=4, heads=1)
