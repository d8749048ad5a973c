import math

import numpy as np
import pytest

from mixlab import data_io, model as M
from mixlab.data_io import Dataset
from mixlab.errors import ShapeError


def _blobs(n=200, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    imgs = np.clip(0.5 + 0.1 * rng.normal(size=(n, 1, 2, 2)), 0, 1)
    imgs[labels == 1, 0, 0, 0] = np.clip(imgs[labels == 1, 0, 0, 0] + 0.4, 0, 1)
    imgs[labels == 0, 0, 0, 0] = np.clip(imgs[labels == 0, 0, 0, 0] - 0.4, 0, 1)
    return Dataset(imgs, labels, 2)


def numeric_param_grad(model, x, tgt, layer, idx, eps=1e-3):
    p = model.params()[layer]
    old = p[idx]
    p[idx] = old + eps
    up = M.loss_and_grads(model, x, tgt)[0]
    p[idx] = old - eps
    dn = M.loss_and_grads(model, x, tgt)[0]
    p[idx] = old
    return (up - dn) / (2 * eps)


def test_soft_ce_examples():
    assert M.soft_target_ce(np.zeros(10), np.eye(10)[3]) == pytest.approx(math.log(10), abs=1e-12)
    z = np.random.default_rng(0).normal(size=5)
    t = np.zeros(5)
    t[1], t[4] = 0.3, 0.7
    ce = lambda k: -M.log_softmax(z)[k]
    assert M.soft_target_ce(z, t) == pytest.approx(0.3 * ce(1) + 0.7 * ce(4), abs=1e-14)
    assert M.soft_target_ce(z + 1000, t) == pytest.approx(M.soft_target_ce(z, t), abs=1e-10)
    with pytest.raises(ValueError):
        M.soft_target_ce(z, np.full(5, 0.3))


def test_soft_ce_one_hot_equals_hard_ce():
    z = np.random.default_rng(1).normal(size=(6, 4))
    y = np.array([0, 1, 2, 3, 0, 1])
    np.testing.assert_array_equal(M.soft_target_ce(z, M.one_hot(y, 4)), M.hard_ce(z, y))


def test_param_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    net = M.MlpModel.init((1, 3, 3), (7, 5), 4, seed=3)
    for b in net.biases:
        b[:] = rng.normal(scale=0.1, size=b.shape)
    x = rng.random((6, 9)) - 0.5
    tgt = rng.dirichlet(np.ones(4), size=6)
    _, grads = M.loss_and_grads(net, x, tgt)
    for layer in range(len(grads)):
        for _ in range(5):
            idx = tuple(int(rng.integers(0, s)) for s in grads[layer].shape)
            num = numeric_param_grad(net, x, tgt, layer, idx)
            assert abs(num - grads[layer][idx]) <= 1e-4 * max(abs(num), 1e-3)


def test_input_gradient_linear_model():
    w = np.random.default_rng(0).normal(size=(4, 3))
    net = M.MlpModel([w], [np.zeros(3)], (1, 2, 2))
    g = M.input_gradient(net, np.zeros((1, 1, 2, 2)), [2])
    np.testing.assert_allclose(g.ravel(), w[:, 2])
    raw = M.saliency(net, np.zeros((1, 1, 2, 2)), classes=2, raw=True)
    np.testing.assert_allclose(raw[0].ravel(), np.abs(w[:, 2]))


def test_saliency_properties():
    ds = data_io.gen_composite(3, 3, 0.4, seed=0)
    net = M.MlpModel.init(ds.image_shape, (16,), 3, seed=0)
    st = M.saliency(net, ds.images)
    assert st.maps.shape == (9, 24, 12)
    assert st.maps.min() >= 0 and st.maps.max() <= 1
    m0, flat = M.saliency(net, ds.images[0])
    # single-row and batched products may use different BLAS kernels
    np.testing.assert_allclose(m0, st.maps[0], rtol=1e-12, atol=1e-12)
    assert not flat
    dup = M.saliency(net, np.stack([ds.images[0], ds.images[0]]))
    np.testing.assert_array_equal(dup.maps[0], dup.maps[1])


def test_flat_saliency_flagged():
    net = M.MlpModel([np.zeros((4, 2))], [np.zeros(2)], (1, 2, 2))
    st = M.saliency(net, np.zeros((2, 1, 2, 2)))
    assert st.flat.all() and st.maps.max() == 0


def test_box_blur_border_mean():
    m = np.zeros((1, 3, 3))
    m[0, 0, 0] = 9.0
    out = M.box_blur3(m)
    assert out[0, 0, 0] == pytest.approx(9 / 4)
    assert out[0, 1, 1] == pytest.approx(1.0)
    assert out[0, 2, 2] == 0


def test_train_blobs_separable():
    net, hist = M.train(_blobs(), M.TrainConfig(epochs=20, batch_size=32, lr=0.1, hidden=(8,), seed=0))
    assert len(hist) == 20
    assert M.accuracy(net, _blobs().images, _blobs().labels) >= 0.99


def test_train_zero_epochs_is_init():
    net, hist = M.train(_blobs(), M.TrainConfig(epochs=0, hidden=(8,), seed=5))
    assert hist == []
    init = M.MlpModel.init((1, 2, 2), (8,), 2, seed=5)
    assert net.fingerprint() == init.fingerprint()


def test_train_deterministic():
    cfg = M.TrainConfig(epochs=3, batch_size=16, hidden=(8,), seed=2)
    a, _ = M.train(_blobs(), cfg)
    b, _ = M.train(_blobs(), cfg)
    for p, q in zip(a.params(), b.params()):
        np.testing.assert_array_equal(p, q)


def test_lr_schedule():
    cfg = M.TrainConfig(epochs=10, lr=0.1)
    assert cfg.lr_at(4) == 0.1
    assert cfg.lr_at(5) == pytest.approx(0.001)
    with pytest.raises(ValueError):
        M.TrainConfig(lr=0)
    with pytest.raises(ValueError):
        M.TrainConfig(momentum=1.0)


def test_soft_labels_used_when_present():
    ds = _blobs(40)
    soft = np.full((40, 2), 0.5)
    a, _ = M.train(Dataset(ds.images, ds.labels, 2, soft), M.TrainConfig(epochs=2, hidden=(4,), seed=0))
    b, _ = M.train(ds, M.TrainConfig(epochs=2, hidden=(4,), seed=0))
    assert a.fingerprint() != b.fingerprint()


def test_evaluate_perfect_model():
    ds = _blobs(30)
    oracle = lambda imgs: M.one_hot(ds.labels, 2) * 5.0
    res = M.evaluate(oracle, ds)
    assert res.accuracy == 1.0
    np.testing.assert_array_equal(res.wrong_counts, [0, 0])


def test_evaluate_constant_model_ties_to_class_zero():
    labels = np.repeat(np.arange(10), 10)
    ds = Dataset(np.zeros((100, 1, 2, 2)), labels, 10)
    res = M.evaluate(lambda imgs: np.zeros((len(imgs), 10)), ds)
    assert res.accuracy == pytest.approx(0.1)
    assert res.wrong_counts[0] == 90 and res.wrong_counts[1:].sum() == 0
    assert res.wrong_counts.sum() == 100 * (1 - res.accuracy)


def test_shape_mismatch():
    net = M.MlpModel.init((1, 2, 2), (4,), 2, seed=0)
    with pytest.raises(ShapeError):
        net.logits(np.zeros((1, 1, 3, 3)))


def test_checkpoint_roundtrip(tmp_path):
    net, _ = M.train(_blobs(), M.TrainConfig(epochs=2, hidden=(6, 5), seed=1))
    net.save(tmp_path / "m.mbt")
    back = M.MlpModel.load(tmp_path / "m.mbt")
    assert back.fingerprint() == net.fingerprint()
    assert back.layer_dims == [4, 6, 5, 2] and back.epochs_trained == 2
    # the MBT1 container alone restores float32-rounded weights
    (tmp_path / "m.f64.npy").unlink()
    approx = M.MlpModel.load(tmp_path / "m.mbt")
    for p, q in zip(approx.params(), net.params()):
        np.testing.assert_allclose(p, q, rtol=1e-6, atol=1e-7)


def test_randomize_labels():
    ds = data_io.gen_composite(1000, 10, 0.4, seed=0)
    r = M.randomize_labels(ds, 3)
    assert 0.08 <= np.mean(r.labels == ds.labels) <= 0.12
    np.testing.assert_array_equal(r.labels, M.randomize_labels(ds, 3).labels)
    assert r.images.tobytes() == ds.images.tobytes()


def test_drop_class():
    ds = data_io.gen_composite(100, 10, 0.4, seed=0)
    out, mapping = M.drop_class(ds, 9)
    assert len(out) == 900 and out.class_count == 9
    out, mapping = M.drop_class(ds, 3)
    assert mapping[4] == 3 and mapping[2] == 2
    np.testing.assert_array_equal(out.labels, [mapping[v] for v in ds.labels if v != 3])
    net = M.MlpModel.init(out.image_shape, (4,), out.class_count, seed=0)
    assert net.logits(out.images).shape[1] == 9
    with pytest.raises(ValueError):
        M.drop_class(ds, 10)


def test_composite_model_uses_easy_half():
    drops = []
    for seed in range(3):
        train = data_io.gen_composite(100, 10, 0.4, seed)
        test = data_io.gen_composite(30, 10, 0.4, seed + 1000)
        net, _ = M.train(train, M.TrainConfig(epochs=15, lr=0.05, hidden=(64,), seed=seed))
        zeroed = test.images.copy()
        zeroed[:, :, 12:] = 0.0
        drops.append(M.accuracy(net, test.images, test.labels) - M.accuracy(net, zeroed, test.labels))
    assert max(drops) < 0.05


@pytest.mark.slow
def test_memorizes_random_labels():
    base = data_io.gen_composite(52, 10, 0.4, seed=0).subset(np.arange(512))
    ds = M.randomize_labels(base, 0)
    net, hist = M.train(ds, M.TrainConfig(epochs=300, lr=0.05, hidden=(640,), seed=0))
    assert M.accuracy(net, ds.images, ds.labels) >= 0.99
