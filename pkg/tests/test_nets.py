import numpy as np
import pytest

from dgprune import autodiff as ad
from dgprune.autodiff import ShapeError, Tensor
from dgprune.nets import (
    TAGS,
    ConfigError,
    ModelConfig,
    build_model,
    first_layer_fanout,
    load_checkpoint,
    save_checkpoint,
)
from dgprune.training import loss_and_grad


def mlp(widths=(16, 16), d=8, k=5, seed=0):
    return build_model(ModelConfig("mlp", (d,), list(widths), k, seed))


def encdec(channels=(4, 8), k=4, size=32, seed=0):
    return build_model(ModelConfig("encdec", (3, size, size), list(channels), k, seed))


def test_mlp_parameter_count():
    assert len(mlp().registry) == 8 * 16 + 16 + 16 * 16 + 16 + 16 * 5 + 5 == 501


@pytest.mark.parametrize("make", [mlp, encdec])
def test_registry_partitions_flat_vector(make):
    reg = make().registry
    reg.check_partition()
    covered = np.zeros(len(reg), dtype=int)
    for e in reg.entries:
        covered[e.offset:e.offset + e.length] += 1
    assert (covered == 1).all()
    assert sum(reg.counts().values()) == len(reg)
    assert set(reg.tags) <= set(TAGS)


def test_encdec_tags_split_encoder_decoder_head():
    counts = encdec().registry.counts()
    assert all(counts[t] > 0 for t in TAGS)


def test_same_seed_same_initialization():
    np.testing.assert_array_equal(mlp(seed=3).registry.flat, mlp(seed=3).registry.flat)
    assert not np.array_equal(mlp(seed=3).registry.flat, mlp(seed=4).registry.flat)


def test_encdec_output_shape_and_range():
    m = encdec(k=4)
    x = np.random.default_rng(0).standard_normal((2, 3, 32, 32))
    out = m(Tensor(x)).data
    assert out.shape == (2, 5, 32, 32)
    assert np.all((out > 0) & (out < 1))


def test_mlp_zero_input_gives_bias_logits():
    m = mlp(widths=(4,), d=3, k=2)
    reg = m.registry
    reg.param("fc0.bias").data[...] = [0.5, -1.0, 2.0, 0.0]
    reg.param("fc1.bias").data[...] = [0.25, -0.75]
    w1 = reg.param("fc1.weight").data
    expected = np.maximum([0.5, -1.0, 2.0, 0.0], 0) @ w1 + [0.25, -0.75]
    np.testing.assert_allclose(m(np.zeros((1, 3))).data[0], expected, rtol=0, atol=1e-15)


def test_forward_shape_mismatch():
    with pytest.raises(ShapeError):
        mlp()(np.zeros((2, 7)))
    with pytest.raises(ShapeError):
        encdec()(np.zeros((1, 3, 16, 16)))


@pytest.mark.parametrize("kwargs", [
    dict(family="cnn", input_shape=(3,), widths=[2], n_outputs=2),
    dict(family="mlp", input_shape=(3,), widths=[], n_outputs=2),
    dict(family="mlp", input_shape=(3,), widths=[0], n_outputs=2),
    dict(family="encdec", input_shape=(3, 30, 30), widths=[2, 2, 2], n_outputs=2),
])
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs)


def test_snapshot_restore_round_trip():
    reg = encdec().registry
    snap = reg.snapshot()
    counts = reg.counts()
    reg.flat += np.random.default_rng(1).standard_normal(len(reg))
    reg.restore(snap)
    assert reg.flat.tobytes() == snap.tobytes()
    assert reg.counts() == counts


def test_restore_wrong_length():
    with pytest.raises(ValueError):
        mlp().registry.restore(np.zeros(3))


def test_snapshot_changes_only_when_update_is_nonzero():
    m = mlp()
    reg = m.registry
    x = np.random.default_rng(2).standard_normal((4, 8))
    y = np.array([0, 1, 2, 3])
    before = reg.snapshot()
    loss_and_grad(m, x, y)
    ad.sgd_step(reg.flat, reg.grad, lr=0.0)
    assert np.array_equal(reg.snapshot(), before)
    ad.sgd_step(reg.flat, reg.grad, lr=0.1)
    changed = reg.snapshot() != before
    np.testing.assert_array_equal(changed, reg.grad != 0)


def test_params_are_views_of_flat_vector():
    m = mlp()
    reg = m.registry
    reg.flat[:] = 0.0
    assert all(not p.data.any() for p in reg.params)
    loss_and_grad(m, np.ones((2, 8)), np.array([0, 1]))
    assert np.shares_memory(reg.params[0].grad, reg.grad)
    assert reg.grad.any()


def test_forward_is_pure():
    m = encdec()
    x = np.random.default_rng(3).standard_normal((1, 3, 32, 32))
    a = m(x).data
    b = m(x).data
    assert a.tobytes() == b.tobytes()


def test_checkpoint_round_trip(tmp_path):
    m = encdec(seed=5)
    m.registry.mask[::7] = False
    m.registry.flat[~m.registry.mask] = 0.0
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, m, {"phase": "pretrain"})
    back, extra = load_checkpoint(path)
    assert extra == {"phase": "pretrain"}
    assert back.config == m.config
    assert back.registry.flat.tobytes() == m.registry.flat.tobytes()
    np.testing.assert_array_equal(back.registry.mask, m.registry.mask)


def test_checkpoint_layout(tmp_path):
    m = mlp(widths=(2,), d=3, k=2)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, m)
    blob = path.read_bytes()
    assert blob[:8] == b"DGPRCKPT"
    version, hlen = np.frombuffer(blob[8:16], dtype="<u4")
    assert version == 1
    n = len(m.registry)
    assert len(blob) == 16 + hlen + 8 * n + (n + 7) // 8
    vec = np.frombuffer(blob[16 + hlen:16 + hlen + 8 * n], dtype="<f8")
    np.testing.assert_array_equal(vec, m.registry.flat)


def test_first_layer_fanout_indices():
    m = mlp(widths=(4,), d=3, k=2)
    idx = first_layer_fanout(m, 2)
    w = m.registry.param("fc0.weight").data
    np.testing.assert_array_equal(m.registry.flat[idx], w[2])
