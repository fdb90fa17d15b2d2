import json

import numpy as np
import pytest

from dpcn.autodiff import ShapeError, Tensor, no_grad
from dpcn.layers import Activation, Linear
from dpcn.model import Discriminator, build_backbone, build_preset, fuse


@pytest.fixture(scope="module")
def resnet():
    return build_preset("resnet20-cifar", 100, seed=0)


@pytest.fixture(scope="module")
def toy():
    return build_preset("small-cnn-toy", 4, seed=0)


def x_of(shape, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=shape))


def test_resnet_shapes(resnet):
    resnet.eval()
    with no_grad():
        feats, logits = resnet.forward_subnet(0, x_of((4, 3, 32, 32)))
    assert feats.shape == (4, 64, 8, 8)
    assert logits.shape == (4, 100)
    # concat of two 64-channel extractors
    assert resnet.extra_classifier.input_shape == (128, 8, 8)


def test_toy_parameter_count(toy):
    # per subnet: conv 3*16*9=432, bn 32, conv 16*32*9=4608, bn 64, fc 32*4+4=132  -> 5268
    # discriminator on (32,8,8): 32*16*9+32 + 16*32*9+64 + 32*64*9+128 + 64+1 = 27937
    # extra: fc 64*4+4 = 260
    assert toy.subnets[0].num_parameters() == 5268
    assert toy.discriminator.num_parameters() == 27937
    assert toy.num_parameters() == 2 * 5268 + 27937 + 260 == 38733 < 10**5


def test_nin_preset_sigmoid_and_extra_fc():
    m = build_preset("nin-cifar", 10, image_size=8)
    assert m.discriminator.final_sigmoid
    assert isinstance(m.discriminator.head[-1], Linear)
    assert isinstance(m.extra_classifier[-1], Linear)
    assert m.subnets[0].feature_shape[0] == 10
    assert not any(isinstance(layer, Linear) for layer in m.subnets[0].classifier.layers)
    with no_grad():
        m.eval()
        s = m.discriminator_score(m.extract(0, x_of((3, 3, 8, 8)))[1]).data
    assert ((s > 0) & (s < 1)).all()


def test_other_presets_have_no_sigmoid(toy, resnet):
    assert not toy.discriminator.final_sigmoid and not resnet.discriminator.final_sigmoid


def test_unknown_preset_and_class_count():
    with pytest.raises(ValueError):
        build_preset("vgg16", 10)
    with pytest.raises(ValueError):
        build_preset("small-cnn-toy", 1)


def test_subnets_share_architecture(resnet):
    a, b = (json.dumps(s.spec(), sort_keys=True).encode() for s in resnet.subnets)
    assert a == b
    assert any((p1.data != p2.data).any() for p1, p2 in
               zip(resnet.subnet_parameters(0), resnet.subnet_parameters(1)))


def test_mismatched_subnets_rejected(toy):
    other = build_backbone("small-cnn-toy", 4, width=2)
    with pytest.raises(ValueError):
        type(toy)([toy.subnets[0], other], toy.discriminator, toy.extra_classifier)


def test_identical_parameters_identical_outputs():
    m = build_preset("small-cnn-toy", 4, seed=3)
    for p, q in zip(m.subnet_parameters(0), m.subnet_parameters(1)):
        q.data[...] = p.data
    m.eval()
    x = x_of((3, 3, 16, 16))
    f1, l1 = m.forward_subnet(0, x)
    f2, l2 = m.forward_subnet(1, x)
    assert f1.data.tobytes() == f2.data.tobytes() and l1.data.tobytes() == l2.data.tobytes()


def test_eval_forward_bit_identical(toy):
    toy.eval()
    x = x_of((2, 3, 16, 16), 1)
    assert toy.predict(x).data.tobytes() == toy.predict(x).data.tobytes()
    a, b = toy.forward_subnet(1, x), toy.forward_subnet(1, x)
    assert a[1].data.tobytes() == b[1].data.tobytes()


def test_subnet_index_checked(toy):
    with pytest.raises(IndexError):
        toy.forward_subnet(2, x_of((1, 3, 16, 16)))


@pytest.mark.parametrize("sigmoid,value", [(True, 0.5), (False, 0.0)])
def test_zero_head_scores(sigmoid, value):
    d = Discriminator({"s": (8, 4, 4)}, channels=(8, 8), final_sigmoid=sigmoid)
    d.eval()
    s = d({"s": x_of((8, 8, 4, 4))})  # fresh weights are zero, so the head outputs 0
    assert s.shape == (8, 1)
    np.testing.assert_array_equal(s.data, value)


def test_discriminator_leaky_slope():
    d = Discriminator({"s": (4, 4, 4)}, channels=(8,))
    acts = [m for m in d.modules() if isinstance(m, Activation)]
    assert acts and all(a.kind == "leaky_relu" and a.slope == 0.2 for a in acts)


def test_discriminator_missing_stage(toy):
    with pytest.raises(ShapeError):
        toy.discriminator({"block1": x_of((2, 16, 8, 8))})


def test_multi_stage_feed_with_adapters():
    m = build_preset("resnet20-cifar", 10, feed=["block2", "block3"], image_size=16)
    assert set(m.discriminator.adapters) == {"block2", "block3"}
    m.train()
    with no_grad():
        _, taps = m.extract(0, x_of((3, 3, 16, 16)))
        assert m.discriminator_score(taps).shape == (3, 1)
    with pytest.raises(ShapeError):
        m.discriminator_score(taps["block3"])


def test_fuse_shapes():
    a, b = x_of((4, 64, 8, 8), 0), x_of((4, 64, 8, 8), 1)
    assert fuse([a, b], "concat").shape == (4, 128, 8, 8)
    assert fuse([x_of((2, 5, 3, 3), k) for k in range(3)], "concat").shape == (2, 15, 3, 3)
    assert not fuse([a, -a], "sum").data.any()
    with pytest.raises(ShapeError):
        fuse([a, x_of((4, 32, 8, 8))], "concat")


def test_fusion_algebra():
    f = [x_of((2, 3, 2, 2), k) for k in range(3)]
    s1 = fuse(f, "sum").data
    s2 = fuse(f[::-1], "sum").data
    np.testing.assert_allclose(s1, s2, rtol=0, atol=1e-15)
    c = fuse(f, "concat").data
    cp = fuse([f[2], f[0], f[1]], "concat").data
    np.testing.assert_array_equal(cp, np.concatenate([c[:, 6:9], c[:, 0:3], c[:, 3:6]], axis=1))


def test_extra_width_scales_with_subnets():
    m3 = build_preset("small-cnn-toy", 4, subnets=3)
    assert m3.extra_classifier.input_shape[0] == 3 * 32
    ms = build_preset("small-cnn-toy", 4, fusion="sum")
    assert ms.extra_classifier.input_shape[0] == 32


def test_predict_shape_k100():
    m = build_preset("small-cnn-toy", 100)
    m.eval()
    assert m.predict(x_of((4, 3, 16, 16))).shape == (4, 100)


def test_sum_fusion_regression_pin():
    m = build_preset("small-cnn-toy", 4, fusion="sum", seed=5)
    for p, q in zip(m.subnet_parameters(0), m.subnet_parameters(1)):
        q.data[...] = p.data
    for p, q in zip(m.classifier_parameters(0), m.extra_classifier.parameters()):
        q.data[...] = p.data
    m.eval()
    x = x_of((3, 3, 16, 16), 2)
    f = m.subnets[0].extractor(x)
    np.testing.assert_allclose(m.predict(x).data, m.classify(0, f * 2.0).data, rtol=0, atol=1e-12)


def test_inference_ignores_discriminator_and_subnet_classifiers(toy):
    toy.eval()
    x = x_of((2, 3, 16, 16), 4)
    before = toy.predict(x).data.copy()
    saved = {id(p): p.data.copy() for p in toy.parameters()}
    try:
        for p in toy.discriminator.parameters() + toy.classifier_parameters(0) + toy.classifier_parameters(1):
            p.data[...] = np.nan
        assert toy.predict(x).data.tobytes() == before.tobytes()
    finally:
        for p in toy.parameters():
            p.data[...] = saved[id(p)]


def test_parameter_names(toy):
    names = [n for n, _ in toy.named_parameters()]
    assert "subnet1.0.weight" in names and "subnet2.5.gamma" in names
    assert any(n.startswith("discriminator.trunk.") for n in names)
    assert all(p.name == n for n, p in toy.named_parameters())
    rn = [n for n, _ in build_preset("resnet20-cifar", 10, image_size=8).named_parameters()]
    assert "subnet1.3.conv2.weight" in rn


def test_state_dict_round_trip(toy):
    other = build_preset("small-cnn-toy", 4, seed=9)
    other.load_state_dict(toy.state_dict())
    for (n, a), (_, b) in zip(toy.named_parameters(), other.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes(), n
    bad = dict(toy.state_dict())
    bad.pop("extra.1.bias")
    with pytest.raises(KeyError):
        other.load_state_dict(bad)
