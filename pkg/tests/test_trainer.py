"""Optimizer, schedule, loss, and the episodic/pretraining loops."""
import numpy as np
import pytest

from dn4 import tensor as T
from dn4 import trainer as TR
from dn4.data import ClassSplit, make_split
from dn4.embedding import EmbeddingConfig, embed_global, init_embedding, save_model, load_model
from dn4.errors import ConfigurationError, ContractError, TrainingDiverged
from dn4.measure import MeasureConfig
from dn4.rng import substream
from dn4.tensor import Tensor

rng = np.random.default_rng(808)

EMB16 = EmbeddingConfig(filters=8, in_channels=3, height=16, width=16,
                        head_hidden=(32, 16))


def test_lr_schedule():
    cfg = TR.TrainConfig(learning_rate=1e-3, lr_halve_every=100)
    assert TR.lr_at(0, cfg) == 1e-3
    assert TR.lr_at(99, cfg) == 1e-3
    assert TR.lr_at(100, cfg) == 5e-4
    assert TR.lr_at(199, cfg) == 5e-4
    assert TR.lr_at(200, cfg) == 2.5e-4


def test_episode_loss_uniform_and_saturated():
    uniform = Tensor(np.zeros((4, 5)), dtype=np.float64)
    labels = np.array([0, 1, 2, 3])
    loss = TR.episode_loss(uniform, labels).item()
    assert abs(loss - np.log(5)) < 1e-9
    sat = np.full((3, 5), -50.0)
    sat[np.arange(3), [1, 2, 0]] = 50.0
    assert TR.episode_loss(Tensor(sat, dtype=np.float64),
                           np.array([1, 2, 0])).item() < 1e-8


def test_episode_loss_matches_oracle_and_scaling():
    z = rng.normal(size=(6, 4))
    labels = rng.integers(0, 4, size=6)
    got = TR.episode_loss(Tensor(z, dtype=np.float64), labels, score_scale=2.5).item()
    zs = 2.5 * z
    p = np.exp(zs - zs.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    want = -np.log(p[np.arange(6), labels]).mean()
    assert abs(got - want) < 1e-9
    with pytest.raises(ContractError):
        TR.episode_loss(Tensor(z), np.array([0, 1, 2, 3, 4, 9]))


def test_loss_minimizing_class_is_argmax():
    z = rng.normal(size=(1, 5))
    per_label = [TR.episode_loss(Tensor(z, dtype=np.float64),
                                 np.array([c])).item() for c in range(5)]
    assert int(np.argmin(per_label)) == int(z.argmax())


def test_adam_zero_grad_and_first_step():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True, dtype=np.float64)
    st = TR.AdamState.for_params([p])
    TR.adam_step([p], st, lr=0.1)
    assert np.array_equal(p.data, [1.0, -2.0])  # no grad, fresh state
    q = Tensor(np.array([1.0, -2.0]), requires_grad=True, dtype=np.float64)
    st2 = TR.AdamState.for_params([q])
    q.grad = np.array([0.5, -3.0])
    TR.adam_step([q], st2, lr=0.1)
    # bias correction makes the first step magnitude ~lr, direction -sign(g)
    assert np.allclose(q.data, [1.0 - 0.1, -2.0 + 0.1], atol=1e-6)


def test_adam_converges_on_quadratic():
    target = rng.normal(size=(8,))
    x = Tensor(rng.normal(size=(8,)), requires_grad=True, dtype=np.float64)
    st = TR.AdamState.for_params([x])
    for _ in range(300):
        x.grad = None
        with T.Tape() as tape:
            diff = T.subtract(x, Tensor(target, dtype=np.float64))
            tape.backward(T.tensor_sum(T.multiply(diff, diff)))
        TR.adam_step([x], st, lr=0.05)
    assert np.abs(x.data - target).max() < 1e-2
    assert st.step == 300


def test_adam_rejects_nan_without_mutating():
    p = Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
    st = TR.AdamState.for_params([p])
    p.grad = np.array([np.nan])
    with pytest.raises(TrainingDiverged):
        TR.adam_step([p], st, lr=0.1)
    assert p.data[0] == 1.0 and st.step == 0


def small_train_cfg(**kw):
    base = dict(way=2, shot=1, queries_per_class=2, episodes_total=4,
                learning_rate=1e-3, lr_halve_every=1000, k_neighbors=1,
                seed=5, val_every=2, val_episodes=2)
    base.update(kw)
    return TR.TrainConfig(**base)


def test_train_zero_episodes_returns_init(tiny_dataset):
    manifest, split = tiny_dataset
    cfg = small_train_cfg(episodes_total=0)
    result = TR.train(cfg, EMB16, manifest, split)
    init = init_embedding(EMB16, cfg.seed)
    for a, b in zip(result.params.parameters(), init.parameters()):
        assert a.data.tobytes() == b.data.tobytes()
    assert result.episodes_run == 0 and not result.diverged


def test_train_is_deterministic(tiny_dataset):
    manifest, split = tiny_dataset
    cfg = small_train_cfg()
    r1 = TR.train(cfg, EMB16, manifest, split)
    r2 = TR.train(cfg, EMB16, manifest, split)
    for a, b in zip(r1.params.parameters(), r2.params.parameters()):
        assert a.data.tobytes() == b.data.tobytes()
    assert r1.log == r2.log


def test_train_logs_and_validation(tiny_dataset):
    manifest, split = tiny_dataset
    cfg = small_train_cfg()
    result = TR.train(cfg, EMB16, manifest, split)
    assert result.episodes_run == 4
    assert len(result.log) == 2  # episodes 1 and 3 (0-based val_every=2)
    for entry in result.log:
        assert {"episode", "loss", "lr", "val_acc"} <= set(entry)
    assert result.best_val_accuracy >= 0.0


def test_train_with_augmentation_changes_trajectory(tiny_dataset):
    from dn4.data import AugmentConfig
    manifest, split = tiny_dataset
    plain = TR.train(small_train_cfg(), EMB16, manifest, split)
    aug_cfg = small_train_cfg(augment=AugmentConfig(enabled=True, crop_padding=2,
                                                    flip_probability=0.5))
    aug = TR.train(aug_cfg, EMB16, manifest, split)
    assert plain.params.blocks[0].weight.data.tobytes() \
        != aug.params.blocks[0].weight.data.tobytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_keeps_last_good(tiny_dataset):
    manifest, split = tiny_dataset
    # scale pushes float32 scores past overflow, poisoning the loss
    cfg = small_train_cfg(score_scale=1e38, episodes_total=3)
    result = TR.train(cfg, EMB16, manifest, split)
    assert result.diverged and "non-finite" in result.divergence_reason
    for p in result.params.parameters():
        assert np.all(np.isfinite(p.data))
    assert result.log[-1].get("event") == "diverged"


def test_gradient_reaches_every_block(tiny_dataset):
    manifest, split = tiny_dataset
    from dn4.data import sample_episode
    params = init_embedding(EMB16, seed=3)
    ep = sample_episode(manifest, split.train, 2, 1, 2, substream(3, "g"))
    for p in params.parameters():
        p.grad = None
    with T.Tape() as tape:
        scores = TR.run_episode_forward(params, ep, MeasureConfig(k_neighbors=1))
        tape.backward(TR.episode_loss(scores, ep.query_labels))
    for b, blk in enumerate(params.blocks):
        for p in (blk.weight, blk.bias, blk.gamma, blk.beta):
            assert p.grad is not None and np.abs(p.grad).max() > 0, f"block {b}"


def test_pretrain_separable_reaches_high_accuracy(separable_dataset):
    split = ClassSplit(("half_0", "half_1"), (), ())
    cfg = TR.PretrainConfig(epochs=15, batch_size=8, learning_rate=2e-3, seed=1)
    emb = EmbeddingConfig(filters=4, in_channels=1, height=16, width=16,
                          head_hidden=(16, 8))
    result = TR.pretrain_classifier(cfg, emb, separable_dataset, split)
    assert result.final_train_accuracy >= 0.99
    assert result.classes == ["half_0", "half_1"]
    assert len(result.log) == 15


def test_pretrain_checkpoint_round_trip(separable_dataset, tmp_path):
    split = ClassSplit(("half_0", "half_1"), (), ())
    cfg = TR.PretrainConfig(epochs=1, batch_size=8, seed=2)
    emb = EmbeddingConfig(filters=4, in_channels=1, height=16, width=16,
                          head_hidden=(16, 8))
    result = TR.pretrain_classifier(cfg, emb, separable_dataset, split)
    path = tmp_path / "pre.ckpt"
    save_model(path, result.params, result.head)
    params2, head2 = load_model(path, emb, with_head=True)
    x = Tensor(np.stack(separable_dataset.images[:4]))
    f1, l1 = embed_global(result.params, result.head, x, mode="running")
    f2, l2 = embed_global(params2, head2, x, mode="running")
    assert f1.data.tobytes() == f2.data.tobytes()
    assert l1.data.tobytes() == l2.data.tobytes()


def test_train_rejects_empty_split(tiny_dataset):
    manifest, _ = tiny_dataset
    empty = ClassSplit((), ("class_000",), ())
    with pytest.raises(ConfigurationError):
        TR.train(small_train_cfg(), EMB16, manifest, empty)
