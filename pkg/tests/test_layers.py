import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dpcn.autodiff import Parameter, ShapeError, Tensor, grad_check, no_grad
from dpcn.layers import (Activation, AvgPool2d, BasicBlock, BatchNorm2d, Conv2d, Dropout,
                         GlobalAvgPool, LeakyReLU, Linear, MaxPool2d, ReLU, Sequential,
                         frozen_stats, init_params, softmax_cross_entropy)

TOL = 1e-4


def small_net(channels=3):
    return Sequential([Conv2d(channels, 4, 3, padding=1), BatchNorm2d(4), ReLU(), MaxPool2d(2),
                       Conv2d(4, 6, 3, stride=2, padding=1), BatchNorm2d(6), LeakyReLU(0.1),
                       Dropout(0.3), GlobalAvgPool(), Linear(6, 5)], (channels, 8, 8))


# ---- shapes -----------------------------------------------------------------------

@given(size=st.integers(1, 12), k=st.integers(1, 5), s=st.integers(1, 3), p=st.integers(0, 2))
def test_conv_output_size_formula(size, k, s, p):
    conv = Conv2d(2, 3, k, s, p)
    expected = (size + 2 * p - k) // s + 1
    if expected < 1:
        with pytest.raises(ShapeError):
            conv.output_shape((2, size, size))
        return
    assert conv.output_shape((2, size, size)) == (3, expected, expected)
    out = conv(Tensor(np.zeros((1, 2, size, size))))
    assert out.shape == (1, 3, expected, expected)


def test_validation_names_failing_layer():
    with pytest.raises(ShapeError, match="layer 2"):
        Sequential([Conv2d(3, 4, 3), ReLU(), Linear(4, 2)], (3, 5, 5))


def test_forward_mismatch_names_layer():
    net = Sequential([Conv2d(3, 4, 3), ReLU(), GlobalAvgPool(), Linear(4, 2)], (3, 5, 5))
    with pytest.raises(ShapeError, match="layer 0"):
        net(Tensor(np.zeros((1, 2, 5, 5))))


@given(h=st.integers(2, 10), c=st.integers(1, 4), k=st.integers(1, 4), s=st.integers(1, 3))
def test_validated_spec_never_fails_forward(h, c, k, s):
    layers = [Conv2d(c, 2, k, s, k // 2), BatchNorm2d(2), ReLU(), GlobalAvgPool(), Linear(2, 3)]
    try:
        net = Sequential(layers, (c, h, h))
    except ShapeError:
        assert (h + 2 * (k // 2) - k) // s + 1 < 1
        return
    out = net(Tensor(np.random.default_rng(0).normal(size=(2, c, h, h))))
    assert out.shape == (2, 3) and out.shape[1:] == net.shapes[-1]


def test_global_avg_pool_shape():
    assert GlobalAvgPool()(Tensor(np.ones((3, 5, 4, 2)))).shape == (3, 5)


def test_dropout_rate_bounds():
    with pytest.raises(ValueError):
        Dropout(1.0)
    with pytest.raises(ValueError):
        BatchNorm2d(3, eps=0)


# ---- batch norm ---------------------------------------------------------------------

def test_batchnorm_train_output_is_standardized():
    rng = np.random.default_rng(0)
    bn = BatchNorm2d(3, eps=1e-12)
    out = bn(Tensor(rng.normal(3.0, 2.0, size=(4, 3, 5, 5)))).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-6)


def test_batchnorm_running_update_rule():
    rng = np.random.default_rng(1)
    x = rng.normal(1.0, 3.0, size=(5, 2, 3, 3))
    bn = BatchNorm2d(2, momentum=0.25)
    bn(Tensor(x))
    np.testing.assert_allclose(bn.running_mean, 0.25 * x.mean(axis=(0, 2, 3)), atol=1e-15)
    np.testing.assert_allclose(bn.running_var, 0.75 + 0.25 * x.var(axis=(0, 2, 3)), atol=1e-15)


def test_frozen_stats_leaves_running_estimates():
    bn = BatchNorm2d(2)
    with frozen_stats([bn]):
        bn(Tensor(np.random.default_rng(2).normal(size=(3, 2, 2, 2))))
    assert not bn.running_mean.any() and (bn.running_var == 1).all()
    assert bn.track_stats


def test_eval_mode_is_pure_and_deterministic():
    net = small_net()
    init_params(net, 3)
    net.train()
    rng = np.random.default_rng(3)
    net(Tensor(rng.normal(size=(6, 3, 8, 8))))  # move the running stats
    net.eval()
    before = {k: v.copy() for k, v in net.named_buffers()}
    x = Tensor(rng.normal(size=(2, 3, 8, 8)))
    a, b = net(x).data, net(x).data
    assert a.tobytes() == b.tobytes()
    for k, v in net.named_buffers():
        assert v.tobytes() == before[k].tobytes()


def test_dropout_identity_in_eval_and_masks_in_train():
    d = Dropout(0.5)
    x = Tensor(np.ones((50, 20)))
    d.eval()
    assert d(x).data.tobytes() == x.data.tobytes()
    d.train()
    vals = np.unique(d(x).data)
    assert set(vals) <= {0.0, 2.0}


# ---- init ------------------------------------------------------------------------

def test_init_is_deterministic():
    a, b = small_net(), small_net()
    init_params(a, 7)
    init_params(b, 7)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()


def test_kaiming_variance_matches_fan_in():
    conv = Conv2d(64, 64, 3)  # 36864 draws, fan_in = 64 * 9
    init_params(conv, 0, "kaiming-normal")
    target = 2.0 / (64 * 9)
    assert abs(conv.weight.data.var() / target - 1) < 0.2


def test_xavier_uniform_bound():
    lin = Linear(30, 20)
    init_params(lin, 0, "xavier-uniform")
    assert np.abs(lin.weight.data).max() <= math.sqrt(6 / 50)


def test_normal_zero_gives_zero_weights():
    net = small_net()
    init_params(net, 0, "normal(0)")
    assert all(not p.data.any() for n, p in net.named_parameters() if n.endswith("weight"))


def test_init_sets_bias_and_bn_defaults():
    net = small_net()
    for p in net.parameters():
        p.data[...] = 5.0
    init_params(net, 0)
    for name, p in net.named_parameters():
        if name.endswith(("bias", "beta")):
            assert not p.data.any()
        if name.endswith("gamma"):
            assert (p.data == 1).all()


def test_unknown_init_scheme():
    with pytest.raises(ValueError):
        init_params(small_net(), 0, "orthogonal")


# ---- cross entropy ---------------------------------------------------------------

def test_cross_entropy_saturated():
    loss = softmax_cross_entropy(Tensor([[10.0, -10.0]]), [0]).item()
    assert loss == pytest.approx(math.log1p(math.exp(-20)), rel=1e-9)
    assert loss == pytest.approx(2.06e-9, rel=1e-2)


@pytest.mark.parametrize("k", [4, 100])
def test_cross_entropy_uniform_is_log_k(k):
    loss = softmax_cross_entropy(Tensor(np.zeros((3, k))), [0, 1, 2]).item()
    assert loss == pytest.approx(math.log(k), abs=1e-12)


def test_cross_entropy_matches_direct_formula():
    rng = np.random.default_rng(11)
    z = rng.normal(size=(7, 5))
    y = rng.integers(0, 5, 7)
    direct = np.mean([-math.log(math.exp(z[i, y[i]]) / sum(math.exp(v) for v in z[i])) for i in range(7)])
    assert abs(softmax_cross_entropy(Tensor(z), y).item() - direct) < 1e-12


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


# ---- gradients (train mode, fixed dropout mask) -----------------------------------------

@pytest.mark.parametrize("layer,shape", [
    (Conv2d(2, 3, 3, stride=2, padding=1), (2, 2, 5, 5)),
    (BatchNorm2d(3), (4, 3, 3, 3)),
    (Linear(4, 3), (5, 4)),
    (ReLU(), (3, 6)),
    (LeakyReLU(0.2), (3, 6)),
    (Activation("sigmoid"), (3, 6)),
    (MaxPool2d(2), (2, 2, 4, 4)),
    (AvgPool2d(3, 2, 1), (2, 2, 5, 5)),
    (GlobalAvgPool(), (2, 3, 3, 3)),
    (BasicBlock(2, 4, stride=2), (3, 2, 6, 6)),
    (BasicBlock(3, 3), (3, 3, 4, 4)),
])
def test_layer_gradients(layer, shape):
    rng = np.random.default_rng(0)
    init_params(layer, 0)
    for p in layer.parameters():
        p.data += 0.1 * rng.normal(size=p.shape)
    x = Parameter(rng.normal(size=shape), name="input")
    with no_grad():
        w = Tensor(rng.normal(size=layer(Tensor(x.data)).shape))
    assert grad_check(lambda: (layer(x) * w).sum(), [x] + layer.parameters()) < TOL


def test_network_gradients_with_fixed_dropout_mask():
    net = small_net()
    init_params(net, 0)
    drop = net[7]
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(4, 3, 8, 8)))
    y = rng.integers(0, 5, 4)

    def loss():
        drop.rng = np.random.default_rng(99)
        return softmax_cross_entropy(net(x), y)
    assert grad_check(loss, net.parameters()) < TOL
