from __future__ import annotations

from collections import Counter

import numpy as np
import pytest

from dfmnet.data import Sample
from dfmnet.errors import EmptyDataset, InvalidConfig, ModeMismatch
from dfmnet.model import DFMNet, ModelConfig
from dfmnet.synthetic import scenes
from dfmnet.tensor import DTYPE, no_grad
from dfmnet.train import Adam, TrainConfig, augment, batch_order, make_joint_pairs, mix, poly_lr, train


def test_poly_lr_schedule():
    assert poly_lr(1e-4, 0, 100) == 1e-4
    assert poly_lr(1e-4, 100, 100) == 0.0
    assert poly_lr(1e-4, 50, 100) == pytest.approx(1e-4 * 0.5**0.9)
    lrs = [poly_lr(1.0, t, 10) for t in range(11)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(InvalidConfig):
        poly_lr(1.0, 0, 0)


def test_train_config_defaults_and_validation():
    cfg = TrainConfig()
    assert cfg.batch_size == 10 and cfg.lr == 1e-4 and cfg.power == 0.9
    for bad in [dict(batch_size=0), dict(epochs=0), dict(lr=0.0), dict(steps=0), dict(crop_min=0.0)]:
        with pytest.raises(InvalidConfig):
            TrainConfig(**bad)


def test_adam_first_step_moves_by_lr():
    from dfmnet.tensor import Tensor

    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    p.grad = np.array([3.0, -0.5], DTYPE)
    opt.step()
    np.testing.assert_allclose(p.data, [0.9, -1.9], rtol=1e-5)


def test_batch_order_covers_every_index_once():
    parts = batch_order(23, 5, np.random.default_rng(0))
    assert [len(p) for p in parts] == [5, 5, 5, 5, 3]
    assert sorted(np.concatenate(parts).tolist()) == list(range(23))


def test_augment_keeps_shapes_and_binary_gt():
    s = scenes(1, 32, seed=0)[0]
    r = np.random.default_rng(1)
    for _ in range(10):
        a = augment(s, r)
        assert a.rgb.shape == s.rgb.shape and a.aux.shape == s.aux.shape and a.gt.shape == s.gt.shape
        assert set(np.unique(a.gt)) <= {0.0, 1.0}


def test_augment_flip_only_mirrors():
    s = scenes(1, 32, seed=0)[0]

    class FlipOnly:
        def random(self):
            return 0.0

        def uniform(self, lo, hi):
            return 1.0

    a = augment(s, FlipOnly())
    assert np.array_equal(a.rgb, s.rgb[:, :, ::-1])
    assert np.array_equal(a.gt, s.gt[:, :, ::-1])


def test_empty_dataset():
    with pytest.raises(EmptyDataset):
        train(DFMNet(), [], TrainConfig(steps=1))


def test_training_reduces_loss_and_is_seeded():
    data = scenes(4, 32, seed=3)
    runs = []
    for _ in range(2):
        m = DFMNet(seed=0)
        h = train(m, data, TrainConfig(batch_size=2, lr=3e-3, steps=6, seed=5))
        runs.append((m, h))
    (m1, h1), (m2, h2) = runs
    assert h1.loss == h2.loss
    for (n1, t1), (n2, t2) in zip(m1.named_tensors(), m2.named_tensors()):
        assert n1 == n2
        assert np.array_equal(getattr(t1, "data", t1), getattr(t2, "data", t2))
    assert h1.lr[0] == 3e-3 and h1.lr[-1] < h1.lr[0]
    assert not m1.training


def test_different_seeds_diverge():
    data = scenes(4, 32, seed=3)
    a, b = DFMNet(seed=0), DFMNet(seed=0)
    train(a, data, TrainConfig(batch_size=2, steps=2, seed=1))
    train(b, data, TrainConfig(batch_size=2, steps=2, seed=2))
    assert not np.array_equal(a.decoder.head_out.w.data, b.decoder.head_out.w.data)


def test_joint_pairs_have_black_flow():
    imgs = scenes(3, 32, seed=0)
    pairs = make_joint_pairs(imgs, "flow3")
    for src, p in zip(imgs, pairs):
        assert p.aux.shape == (3, 32, 32)
        assert not p.aux.any()
        assert np.array_equal(p.gt, src.gt) and np.array_equal(p.rgb, src.rgb)
    with pytest.raises(ModeMismatch):
        make_joint_pairs(imgs, "rgbd")


def test_mix_preserves_counts_for_any_seed():
    real = scenes(4, 16, seed=0, aux_channels=3)
    pseudo = make_joint_pairs(scenes(6, 16, seed=1), "flow3")
    for seed in range(5):
        mixed = mix(real, pseudo, seed)
        kinds = Counter("pseudo" if not s.aux.any() else "real" for s in mixed)
        assert kinds == {"real": 4, "pseudo": 6}


def test_forward_on_black_flow_pair_is_finite():
    m = DFMNet(ModelConfig(mode="flow3")).eval()
    s = make_joint_pairs(scenes(1, 64, seed=0), "flow3")[0]
    with no_grad():
        out = m(s.rgb[None], s.aux[None])
    assert np.isfinite(out.s_c.data).all() and np.isfinite(out.s_d.data).all()


def test_sample_validation():
    from dfmnet.errors import ShapeMismatch

    with pytest.raises(ShapeMismatch):
        Sample(np.zeros((1, 4, 4)), np.zeros((1, 4, 4)), np.zeros((1, 4, 4)))
    with pytest.raises(ShapeMismatch):
        Sample(np.zeros((3, 4, 4)), np.zeros((1, 4, 4)), np.zeros((1, 2, 2)))
