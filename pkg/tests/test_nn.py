import numpy as np
import pytest

from polarlab import nn
from polarlab import tensor as T
from polarlab.data import gen_shapes_dataset
from polarlab.polarizer import VARIANTS, make_polarizer

# self-recorded regression values for build_cnn(8, seed=0) on a fixed input
GOLDEN = np.array([
    [0.543023, 1.4505, -0.01899, -0.180609, 1.492647, 0.336322, -0.024631, -0.352854],
    [0.581627, 1.386094, -0.01169, -0.120178, 1.530566, 0.344097, -0.015393, -0.331673],
])


def _x(n=4, seed=7):
    return np.random.default_rng(seed).random((n, 3, 16, 16)).astype(np.float32)


def test_logit_shape():
    assert nn.forward(nn.build_cnn(8), _x(3)).shape == (3, 8)


def test_needs_two_classes():
    with pytest.raises(ValueError):
        nn.build_cnn(1)


def test_golden_logits():
    out = nn.forward(nn.build_cnn(8, seed=0), _x(2)).data
    np.testing.assert_allclose(out, GOLDEN, atol=2e-6)


def test_default_splice_before_final_block():
    net = nn.build_cnn(8)
    assert net.splice_index == nn.CONV_BLOCK_STARTS[-1] == 6
    assert net.feature_shape(6) == (32, 8, 8)
    assert net.feature_shape(3) == (16, 16, 16)


@pytest.mark.parametrize("index", [0, 11, 12])
def test_splice_index_out_of_range(index):
    net = nn.build_cnn(8)
    with pytest.raises(ValueError):
        nn.splice(net, index, make_polarizer("plain", 16, 8, 16, 16))


def test_splice_channel_mismatch():
    with pytest.raises(ValueError):
        nn.splice(nn.build_cnn(8), 6, make_polarizer("plain", 16, 8, 16, 16))


def test_splice_then_detach_is_exact():
    net = nn.build_cnn(8)
    x = _x()
    before = nn.forward(net, x).data
    spliced = nn.splice(net, 6, make_polarizer("plain", 32, 8, 8, 8))
    assert all(not p.requires_grad for p in spliced.parameters())
    np.testing.assert_array_equal(nn.forward(nn.detach(spliced), x).data, before)


def test_condition_contract():
    net = nn.build_cnn(8)
    with pytest.raises(ValueError):
        nn.forward(net, _x(), condition=np.zeros(4, int))
    cond = nn.splice(net, 6, make_polarizer("replicated", 32, 8, 8, 8))
    with pytest.raises(ValueError):
        nn.forward(cond, _x())
    plain = nn.splice(nn.build_cnn(8), 6, make_polarizer("plain", 32, 8, 8, 8))
    with pytest.raises(ValueError):
        nn.forward(plain, _x(), condition=np.zeros(4, int))


@pytest.mark.parametrize("variant", VARIANTS)
def test_polarizer_preserves_shape(variant):
    pol = make_polarizer(variant, 32, 8, 8, 8, seed=3)
    f = T.Tensor(np.random.default_rng(0).normal(size=(5, 32, 8, 8)))
    cls = None if variant == "plain" else np.arange(5) % 8
    assert pol.forward(f, cls).shape == f.shape


@pytest.mark.parametrize("variant", ["plain", "replicated"])
def test_identity_init(variant):
    pol = make_polarizer(variant, 32, 8, 8, 8)
    f = T.Tensor(np.random.default_rng(1).normal(size=(6, 32, 8, 8)))
    cls = None if variant == "plain" else np.arange(6)
    np.testing.assert_allclose(pol.forward(f, cls).data, f.data, atol=1e-6)


def test_polarizer_class_errors():
    pol = make_polarizer("embedding", 4, 3, 2, 2)
    f = T.Tensor(np.zeros((2, 4, 2, 2)))
    with pytest.raises(ValueError):
        pol.forward(f)
    with pytest.raises(ValueError):
        pol.forward(f, np.array([0, 3]))


def test_replicated_class_isolation():
    rng = np.random.default_rng(4)
    pol = make_polarizer("replicated", 4, 5, 3, 3)
    for p in pol.trainable_params():
        p.data += rng.normal(0, 0.1, size=p.shape).astype(np.float32)
    f = T.Tensor(rng.normal(size=(6, 4, 3, 3)))
    cls = np.array([1, 3, 1, 3, 3, 1])
    T.sum(T.mul(pol.forward(f, cls, train=True), T.Tensor(rng.normal(size=f.shape)))).backward()
    for c in range(5):
        grads = [p.grad for p in pol.block_params(c)]
        if c in (1, 3):
            assert all(g is not None and np.any(g != 0) for g in grads)
        else:
            assert all(g is None for g in grads)


def test_trainable_params():
    def count(pol):
        return sum(p.data.size for p in pol.trainable_params())

    c, k, d = 32, 8, 32
    assert count(make_polarizer("plain", c, k, 8, 8)) == c * c + 3 * c
    assert count(make_polarizer("replicated", c, k, 8, 8)) == k * (c * c + 3 * c)
    emb = make_polarizer("embedding", c, k, 8, 8)
    assert emb.embedding not in emb.trainable_params()
    assert count(emb) == ((c + 1) * c + 3 * c) + (c * c + 3 * c)
    att = make_polarizer("attention", c, k, 8, 8, d_k=d)
    # e(c), theta_Q, theta_K, theta_V with bias, theta_o conv+BN
    assert count(att) == k * c * d + 2 * d * d + (c * c + c) + (c * c + 3 * c)


def test_calibrate_keeps_eval_identity():
    rng = np.random.default_rng(5)
    pol = make_polarizer("plain", 4, 2, 3, 3)
    f = T.Tensor(rng.normal(3.0, 2.0, size=(16, 4, 3, 3)))
    pol.calibrate(f)
    np.testing.assert_allclose(pol.forward(f).data, f.data, atol=1e-5)
    # under batch statistics only the biased/unbiased variance ratio remains
    x = f.data.astype(np.float64)
    mu, var = x.mean(axis=(0, 2, 3)), x.var(axis=(0, 2, 3))
    m = 16 * 9
    r = np.sqrt((var * m / (m - 1) + T.BN_EPS) / (var + T.BN_EPS))[None, :, None, None]
    ref = mu[None, :, None, None] + (x - mu[None, :, None, None]) * r
    np.testing.assert_allclose(pol.forward(f, train=True).data, ref, atol=1e-4)


def _small_data():
    train, _ = gen_shapes_dataset(0, 4, 48, 0, 8, 8)
    return train


def test_train_zero_epochs_is_noop():
    ds = _small_data()
    net = nn.build_cnn(4, (3, 8, 8))
    before = [p.data.copy() for p in net.parameters()]
    nn.train_supervised(net, ds.images, ds.labels, nn.TrainHP(epochs=0))
    for a, p in zip(before, net.parameters()):
        np.testing.assert_array_equal(a, p.data)


def test_train_is_deterministic():
    ds = _small_data()
    hp = nn.TrainHP(epochs=2, batch_size=16)
    nets = [nn.train_supervised(nn.build_cnn(4, (3, 8, 8)), ds.images, ds.labels, hp)
            for _ in range(2)]
    for a, b in zip(nets[0].parameters(), nets[1].parameters()):
        np.testing.assert_array_equal(a.data, b.data)


def test_train_empty_data():
    with pytest.raises(ValueError):
        nn.train_supervised(nn.build_cnn(4, (3, 8, 8)), np.zeros((0, 3, 8, 8)), [],
                            nn.TrainHP())


def test_clip_grad_norm():
    p = T.parameter(np.zeros(2))
    p.grad = np.array([3.0, 4.0])
    assert nn.clip_grad_norm([p], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(p.grad, [0.6, 0.8])


def test_replicated_stats_pass_without_labels():
    pol = make_polarizer("replicated", 4, 3, 3, 3)
    f = np.random.default_rng(0).normal(2.0, 3.0, size=(10, 4, 3, 3)).astype(np.float32)
    pol.refresh_stats(T.Tensor(f))
    for b in pol.blocks:
        np.testing.assert_allclose(b.running_mean, f.mean(axis=(0, 2, 3)), rtol=1e-4)
