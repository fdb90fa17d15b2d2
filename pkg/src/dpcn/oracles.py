"""Finite-difference gradient checks for every layer and every training objective."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, Tensor, grad_check, no_grad
from .layers import (AvgPool2d, BasicBlock, BatchNorm2d, Conv2d, Dropout, GlobalAvgPool,
                     LeakyReLU, Linear, MaxPool2d, ReLU, Sequential, init_params,
                     softmax_cross_entropy)
from .model import PRESETS, build_preset
from .training import discriminator_loss, joint_scores, loss_d1, loss_d2, loss_d3, subnet_loss

TOLERANCE = 1e-4
# deep ReLU stacks: a 1e-5 step can cross an activation kink in an early layer
COMPOSITE_EPS = 1e-6


@dataclass
class CheckResult:
    name: str
    error: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.error < TOLERANCE


def _input(rng, shape, name="x") -> Parameter:
    return Parameter(rng.normal(size=shape), name=name)


def _layer_case(layer, in_shape, rng, coords):
    """Check a layer's parameters and its input against a random linear readout."""
    layer.train()
    x = _input(rng, in_shape)
    with no_grad():
        out_shape = layer(Tensor(x.data)).shape
    w = Tensor(rng.normal(size=out_shape))
    return grad_check(lambda: (layer(x) * w).sum(), [x] + layer.parameters(), max_coords=coords)


def layer_cases():
    yield "conv2d", lambda: Conv2d(2, 3, 3, stride=2, padding=1), (2, 2, 5, 5)
    yield "conv2d-1x1-nobias", lambda: Conv2d(3, 2, 1, bias=False), (2, 3, 4, 4)
    yield "batchnorm2d", lambda: BatchNorm2d(3), (4, 3, 3, 3)
    yield "linear", lambda: Linear(5, 3), (4, 5)
    yield "relu", ReLU, (3, 7)
    yield "leaky-relu", lambda: LeakyReLU(0.2), (3, 7)
    yield "maxpool", lambda: MaxPool2d(3, 2, padding=1), (2, 2, 5, 5)
    yield "avgpool", lambda: AvgPool2d(3, 2, padding=1), (2, 2, 5, 5)
    yield "global-avg-pool", GlobalAvgPool, (2, 3, 4, 4)
    yield "basic-block", lambda: BasicBlock(2, 4, stride=2), (3, 2, 6, 6)


def _scores(rng, n):
    return Parameter(rng.uniform(-0.5, 1.5, size=(n, 1)), name="scores")


def loss_cases(rng, coords):
    s = _scores(rng, 6)
    yield "loss_d1", lambda: grad_check(lambda: loss_d1(s), [s], max_coords=coords)
    yield "loss_d2", lambda: grad_check(lambda: loss_d2(s), [s], max_coords=coords)
    yield "loss_d3", lambda: grad_check(lambda: loss_d3(s), [s], max_coords=coords)
    parts = [_scores(rng, 5) for _ in range(3)]
    yield "discriminator_loss-3", lambda: grad_check(lambda: discriminator_loss(parts), parts,
                                                     max_coords=coords)
    logits = _input(rng, (5, 4), "logits")
    labels = rng.integers(0, 4, 5)
    yield "cross-entropy", lambda: grad_check(lambda: softmax_cross_entropy(logits, labels), [logits],
                                              max_coords=coords)


def _fix_dropout(model):
    """Dropout masks must not change between the perturbed evaluations."""
    drops = [m for m in model.modules() if isinstance(m, Dropout)]

    def reset():
        for j, m in enumerate(drops):
            m.rng = np.random.default_rng(j)
    return reset


def composite_cases(preset: str, rng, coords, subnets=2, image_size=8, batch=3, classes=4,
                    eps=COMPOSITE_EPS):
    """Step objectives of a whole preset at a small image size."""
    model = build_preset(preset, classes, subnets=subnets, image_size=image_size, seed=1)
    model.train()
    x = Tensor(rng.normal(size=(batch, 3, image_size, image_size)))
    y = rng.integers(0, classes, batch)
    reset = _fix_dropout(model)

    def sub_loss(i, with_disc):
        def fn():
            reset()
            return subnet_loss(model, i, x, y, 1.0, with_disc)[0]
        return fn

    def d_loss():
        reset()
        with no_grad():
            taps = [model.extract(i, x)[1] for i in range(model.n_subnets)]
        return discriminator_loss(joint_scores(model, taps))

    tag = f"{preset}/{subnets}"
    yield f"{tag}/step1-subnet1", lambda: grad_check(sub_loss(0, False), model.subnet_parameters(0),
                                                      eps=eps, max_coords=coords)
    for i in range(1, subnets):
        yield f"{tag}/step1-subnet{i + 1}", lambda i=i: grad_check(
            sub_loss(i, True), model.subnet_parameters(i), eps=eps, max_coords=coords)
    yield f"{tag}/step2-subnet1", lambda: grad_check(sub_loss(0, True), model.subnet_parameters(0),
                                                      eps=eps, max_coords=coords)
    yield f"{tag}/step2-discriminator", lambda: grad_check(d_loss, model.discriminator.parameters(),
                                                            eps=eps, max_coords=coords)

    def extra_loss():
        reset()
        with no_grad():
            fused = model.fuse([s.extractor(x) for s in model.subnets])
        return softmax_cross_entropy(model.extra_classifier(fused), y)
    yield f"{tag}/step3-extra", lambda: grad_check(extra_loss, model.extra_classifier.parameters(),
                                                    eps=eps, max_coords=coords)


def run_suite(presets=PRESETS, coords: int = 64, seed: int = 0, composite_coords: int = 16,
              report=None) -> list[CheckResult]:
    """Every layer, every loss, and the Step 1/2/3 objectives of each preset (float64)."""
    rng = np.random.default_rng(seed)
    results = []

    def record(name, fn):
        t = time.perf_counter()
        err = fn()
        res = CheckResult(name, err, time.perf_counter() - t)
        results.append(res)
        if report:
            report(res)

    for name, make, shape in layer_cases():
        layer = make()
        init_params(layer, seed)
        for p in layer.parameters():  # move BN scales/shifts and biases off 1 and 0
            p.data += 0.1 * rng.normal(size=p.shape)
        record(f"layer/{name}", lambda: _layer_case(layer, shape, rng, coords))
    # BN eval mode uses running stats; check that path too
    bn = BatchNorm2d(3)
    bn.running_mean[...] = rng.normal(size=3)
    bn.running_var[...] = rng.uniform(0.5, 2, size=3)
    seq = Sequential([bn])
    seq.eval()
    x = _input(rng, (2, 3, 3, 3))
    w = Tensor(rng.normal(size=(2, 3, 3, 3)))
    record("layer/batchnorm2d-eval", lambda: grad_check(lambda: (seq(x) * w).sum(), [x] + seq.parameters(),
                                                        max_coords=coords))
    for name, fn in loss_cases(rng, coords):
        record(f"loss/{name}", fn)
    cc = composite_coords
    for preset in presets:
        for name, fn in composite_cases(preset, rng, cc):
            record(name, fn)
    for name, fn in composite_cases("small-cnn-toy", rng, cc, subnets=3):
        record(name, fn)
    return results
