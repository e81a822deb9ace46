"""Embedding network: shapes, init, locality, gradients, checkpoints."""
import numpy as np
import pytest

from dn4 import embedding as E
from dn4 import tensor as T
from dn4.errors import ConfigurationError, DimensionError
from dn4.gradcheck import grad_check
from dn4.tensor import Tensor

rng = np.random.default_rng(515)


def small_cfg(**kw):
    base = dict(filters=4, in_channels=1, height=16, width=16, head_hidden=(8, 6))
    base.update(kw)
    return E.EmbeddingConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        E.EmbeddingConfig(height=30, width=32)
    with pytest.raises(ConfigurationError):
        E.EmbeddingConfig(filters=0)
    with pytest.raises(ConfigurationError):
        E.EmbeddingConfig(leaky_slope=1.5)


def test_descriptor_count_arithmetic():
    assert E.descriptor_count(E.EmbeddingConfig(filters=64, height=84, width=84)) \
        == (21, 21, 441, 64)
    assert E.descriptor_count(E.EmbeddingConfig(filters=1, in_channels=1,
                                                height=4, width=4)) == (1, 1, 1, 1)
    assert E.descriptor_count(E.EmbeddingConfig(filters=32, height=32, width=32)) \
        == (8, 8, 64, 32)


def test_init_deterministic_and_statistics():
    cfg = E.EmbeddingConfig(filters=64, height=84, width=84)
    a = E.init_embedding(cfg, seed=3)
    b = E.init_embedding(cfg, seed=3)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert pa.data.tobytes() == pb.data.tobytes()
    blk = a.blocks[1]  # 64 input channels: fan_in 576
    assert np.allclose(blk.gamma.data, 1.0) and np.allclose(blk.beta.data, 0.0)
    assert np.allclose(blk.bias.data, 0.0)
    std = blk.weight.data.std()
    want = np.sqrt(2.0 / 576)
    assert abs(std - want) / want < 0.10
    c = E.init_embedding(cfg, seed=4)
    assert c.blocks[0].weight.data.tobytes() != a.blocks[0].weight.data.tobytes()


def test_embed_shapes_and_batch_symmetry():
    cfg = small_cfg()
    params = E.init_embedding(cfg, seed=1)
    x = rng.random((3, 1, 16, 16), dtype=np.float32)
    x[2] = x[0]  # two identical images in one batch
    sets = E.embed(params, Tensor(x))
    assert len(sets) == 3
    h, w, m, d = E.descriptor_count(cfg)
    for s in sets:
        assert s.descriptors.data.shape == (d, m)
        assert s.spatial == (h, w)
    assert np.array_equal(sets[0].descriptors.data, sets[2].descriptors.data)
    with pytest.raises(DimensionError):
        E.embed(params, Tensor(rng.random((1, 1, 12, 16), dtype=np.float32)))


def test_full_scale_descriptor_geometry():
    cfg = E.EmbeddingConfig(filters=64, in_channels=3, height=84, width=84)
    params = E.init_embedding(cfg, seed=0)
    sets = E.embed(params, Tensor(rng.random((1, 3, 84, 84), dtype=np.float32)))
    assert sets[0].descriptors.data.shape == (64, 441)
    assert sets[0].spatial == (21, 21)


def test_descriptor_locality_under_frozen_statistics():
    """Descriptors whose receptive field misses the lit patch stay at their
    dark-input values. The four-conv/two-pool stack gives each output cell
    the input window [4t-11, 4t+14] in both axes."""
    cfg = E.EmbeddingConfig(filters=3, in_channels=1, height=32, width=32)
    params = E.init_embedding(cfg, seed=7)
    for blk in params.blocks:
        blk.running_mean = rng.normal(size=3).astype(np.float32) * 0.1
        blk.running_var = rng.uniform(0.5, 1.5, size=3).astype(np.float32)
    patch = np.zeros((1, 1, 32, 32), dtype=np.float32)
    patch[0, 0, 0:16, 0:16] = rng.random((16, 16), dtype=np.float32)
    lit = E.forward_blocks(params, Tensor(patch), mode="running").data
    dark = E.forward_blocks(params, Tensor(np.zeros_like(patch)), mode="running").data
    # rows/cols with 4t-11 > 15, i.e. t == 7, cannot see the patch
    assert np.array_equal(lit[0, :, 7, :], dark[0, :, 7, :])
    assert np.array_equal(lit[0, :, :, 7], dark[0, :, :, 7])
    # and the patch certainly moves the cell right on top of it
    assert not np.allclose(lit[0, :, 1, 1], dark[0, :, 1, 1])


def test_grad_through_embedding():
    cfg = E.EmbeddingConfig(filters=2, in_channels=1, height=8, width=8)
    params = E.init_embedding(cfg, seed=2)
    # jitter init so gamma/beta sit away from their flat defaults
    for p in params.parameters():
        p.data = p.data + rng.normal(size=p.data.shape).astype(np.float32) * 0.05
    x0 = rng.random((2, 1, 8, 8)).astype(np.float32)
    leaves = [x0] + [p.data for p in params.parameters()]

    def loss(x, *flat):
        it = iter(flat)
        for blk in params.blocks:
            blk.weight, blk.bias = next(it), next(it)
            blk.gamma, blk.beta = next(it), next(it)
        sets = E.embed(params, x)
        total = T.tensor_sum(sets[0].descriptors)
        for s in sets[1:]:
            total = T.add(total, T.tensor_sum(s.descriptors))
        return total

    grad_check(loss, leaves, tol=1e-4)


def test_embed_global_wiring():
    cfg = small_cfg()
    params = E.init_embedding(cfg, seed=5)
    head = E.init_head(cfg, num_classes=7, seed=5)
    x = rng.random((4, 1, 16, 16), dtype=np.float32)
    x[1] = x[3]
    feats, logits = E.embed_global(params, head, Tensor(x))
    assert feats.data.shape == (4, 6)
    assert logits.data.shape == (4, 7)
    assert np.array_equal(feats.data[1], feats.data[3])
    # same thing assembled by hand from the already-tested ops
    fmap = E.forward_blocks(params, Tensor(x))
    _, _, m, d = E.descriptor_count(cfg)
    flat = T.reshape(fmap, (4, d * m))
    h1 = T.leaky_relu(T.fully_connected(flat, *head.layers[0]), cfg.leaky_slope)
    f2 = T.leaky_relu(T.fully_connected(h1, *head.layers[1]), cfg.leaky_slope)
    assert np.allclose(feats.data, f2.data, atol=1e-6)


def test_running_stat_update_moves_buffers():
    cfg = small_cfg()
    params = E.init_embedding(cfg, seed=6)
    before = params.blocks[0].running_mean.copy()
    x = Tensor(rng.random((4, 1, 16, 16), dtype=np.float32) + 2.0)
    E.forward_blocks(params, x, mode="batch", update_running=True)
    after = params.blocks[0].running_mean
    assert not np.allclose(before, after)


def test_checkpoint_round_trip(tmp_path):
    cfg = small_cfg()
    params = E.init_embedding(cfg, seed=11)
    head = E.init_head(cfg, num_classes=5, seed=11)
    for blk in params.blocks:
        blk.running_mean = rng.normal(size=cfg.filters).astype(np.float32)
        blk.running_var = rng.uniform(0.5, 2.0, size=cfg.filters).astype(np.float32)
    path = tmp_path / "model.ckpt"
    E.save_model(path, params, head)
    loaded, lhead = E.load_model(path, cfg, with_head=True)
    for pa, pb in zip(params.parameters(), loaded.parameters()):
        assert pa.data.tobytes() == pb.data.tobytes()
    for ha, hb in zip(head.parameters(), lhead.parameters()):
        assert ha.data.tobytes() == hb.data.tobytes()
    assert np.array_equal(params.blocks[2].running_var, loaded.blocks[2].running_var)
    only = E.load_model(path, cfg)  # body only, head left on disk
    assert isinstance(only, E.EmbeddingParams)


def test_checkpoint_same_seed_byte_identical(tmp_path):
    cfg = small_cfg()
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    E.save_model(a, E.init_embedding(cfg, seed=9))
    E.save_model(b, E.init_embedding(cfg, seed=9))
    assert a.read_bytes() == b.read_bytes()


def test_load_model_shape_mismatch(tmp_path):
    cfg = small_cfg()
    path = tmp_path / "model.ckpt"
    E.save_model(path, E.init_embedding(cfg, seed=1))
    other = small_cfg(filters=6)
    with pytest.raises(DimensionError):
        E.load_model(path, other)
    with pytest.raises(DimensionError):
        E.load_model(path, cfg, with_head=True)
