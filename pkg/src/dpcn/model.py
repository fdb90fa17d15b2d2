"""Parallel subnetworks, the feature discriminator, fusion and the extra classifier."""

from __future__ import annotations

import json

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .layers import (Activation, AvgPool2d, BasicBlock, BatchNorm2d, Conv2d, Dropout,
                     GlobalAvgPool, Linear, MaxPool2d, Module, ReLU, Sequential, init_params)
from .seeding import substream

PRESETS = ("nin-cifar", "resnet20-cifar", "small-cnn-toy")
FUSIONS = ("concat", "sum")


class SubnetSpec(Module):
    """One backbone split into extractor (layers < split_index) and classifier."""

    def __init__(self, backbone: Sequential, split_index: int, stages: dict[str, int]):
        super().__init__()
        if not 0 < split_index < len(backbone):
            raise ValueError(f"split index {split_index} outside (0, {len(backbone)})")
        if backbone.input_shape is None:
            raise ValueError("backbone needs a declared input shape")
        self.backbone = backbone
        self.split_index = split_index
        self.stages = dict(stages)
        for name, idx in self.stages.items():
            if not 0 <= idx < split_index:
                raise ValueError(f"stage {name!r} at layer {idx} is not inside the extractor")
        self.extractor = Sequential(backbone.layers[:split_index], backbone.input_shape)
        self.feature_shape = self.extractor.shapes[-1]
        self.classifier = Sequential(backbone.layers[split_index:], self.feature_shape)

    def children(self):
        return self.backbone.children()

    def stage_shape(self, stage: str) -> tuple[int, ...]:
        return self.extractor.shapes[self.stages[stage]]

    def spec(self):
        return {"backbone": self.backbone.spec(), "split_index": self.split_index,
                "stages": self.stages, "input_shape": list(self.backbone.input_shape)}


class Discriminator(Module):
    """Conv/BN/LeakyReLU trunk, global average pool, linear to one score per sample.

    With several feed stages each stage goes through its own adapter conv that
    maps it onto the deepest stage's (C, H, W); the results are concatenated.
    """

    def __init__(self, stage_shapes: dict[str, tuple[int, ...]], channels=(64, 128, 256),
                 slope=0.2, final_sigmoid=False):
        super().__init__()
        self.stage_names = list(stage_shapes)
        self.final_sigmoid = final_sigmoid
        self.adapters: dict[str, Conv2d] = {}
        target = stage_shapes[self.stage_names[-1]]
        if len(self.stage_names) > 1:
            for name in self.stage_names:
                c, h, _ = stage_shapes[name]
                stride = h // target[1]
                if stride < 1 or h != stride * target[1]:
                    raise ShapeError(f"stage {name} {stage_shapes[name]} cannot be adapted to {target}")
                k, p = (1, 0) if stride == 1 else (3, 1)
                self.adapters[name] = Conv2d(c, target[0], k, stride, p)
            in_shape = (target[0] * len(self.stage_names),) + tuple(target[1:])
        else:
            in_shape = tuple(target)
        layers, prev = [], in_shape[0]
        for ch in channels:
            layers += [Conv2d(prev, ch, 3, 2, 1, bias=False), BatchNorm2d(ch), Activation("leaky_relu", slope)]
            prev = ch
        self.trunk = Sequential(layers, in_shape)
        self.head = Sequential([GlobalAvgPool(), Linear(prev, 1)], self.trunk.output_shape(in_shape))

    def children(self):
        out = [(f"adapter.{name}", conv) for name, conv in self.adapters.items()]
        return out + [("trunk", self.trunk), ("head", self.head)]

    def forward(self, taps: dict[str, Tensor]) -> Tensor:
        missing = [s for s in self.stage_names if s not in taps]
        if missing:
            raise ShapeError(f"discriminator needs features from stages {missing}")
        if self.adapters:
            x = ad.concat([self.adapters[s](taps[s]) for s in self.stage_names], axis=1)
        else:
            x = taps[self.stage_names[0]]
        scores = self.head(self.trunk(x))
        return ad.sigmoid(scores) if self.final_sigmoid else scores

    def __call__(self, taps):
        return self.forward(taps)

    def spec(self):
        return {"stages": self.stage_names, "adapters": {k: v.spec() for k, v in self.adapters.items()},
                "trunk": self.trunk.spec(), "head": self.head.spec(), "final_sigmoid": self.final_sigmoid}


def fuse(features: list[Tensor], mode: str = "concat") -> Tensor:
    shapes = {f.shape for f in features}
    if len(shapes) != 1:
        raise ShapeError(f"fuse: feature shapes differ: {sorted(shapes)}")
    if mode == "concat":
        return ad.concat(features, axis=1)
    if mode == "sum":
        out = features[0]
        for f in features[1:]:
            out = out + f
        return out
    raise ValueError(f"unknown fusion mode {mode!r}")


class DpcnModel(Module):
    def __init__(self, subnets: list[SubnetSpec], discriminator: Discriminator,
                 extra_classifier: Sequential, fusion: str = "concat", feed=None,
                 name: str = "custom", classes: int | None = None):
        super().__init__()
        if len(subnets) not in (2, 3):
            raise ValueError("a D-PCN has 2 or 3 subnetworks")
        specs = {json.dumps(s.spec(), sort_keys=True) for s in subnets}
        if len(specs) != 1:
            raise ValueError("subnetworks must share one architecture")
        if fusion not in FUSIONS:
            raise ValueError(f"unknown fusion mode {fusion!r}")
        self.subnets = list(subnets)
        self.discriminator = discriminator
        self.extra_classifier = extra_classifier
        self.fusion = fusion
        self.feed = list(feed) if feed else list(discriminator.stage_names)
        self.name = name
        self.classes = classes
        self._feed_index = {s: subnets[0].stages[s] for s in self.feed}
        self._assign_names()

    @property
    def n_subnets(self) -> int:
        return len(self.subnets)

    @property
    def input_shape(self):
        return self.subnets[0].backbone.input_shape

    def children(self):
        out = [(f"subnet{i + 1}", s) for i, s in enumerate(self.subnets)]
        if self.discriminator is not None:
            out.append(("discriminator", self.discriminator))
        return out + [("extra", self.extra_classifier)]

    def _assign_names(self):
        for name, p in self.named_parameters():
            p.name = name

    def _subnet(self, i) -> SubnetSpec:
        if not 0 <= i < len(self.subnets):
            raise IndexError(f"subnet index {i} out of range for {len(self.subnets)} subnets")
        return self.subnets[i]

    # ---- forward paths -----------------------------------------------------
    def extract(self, i: int, x: Tensor):
        """Features of subnet ``i`` plus the {stage: output} taps the discriminator reads."""
        sub = self._subnet(i)
        feats, seen = sub.extractor(x, taps=set(self._feed_index.values()))
        return feats, {s: seen[idx] for s, idx in self._feed_index.items()}

    def classify(self, i: int, features: Tensor) -> Tensor:
        return self._subnet(i).classifier(features)

    def forward_subnet(self, i: int, x: Tensor):
        sub = self._subnet(i)
        feats = sub.extractor(x)
        return feats, sub.classifier(feats)

    def discriminator_score(self, taps) -> Tensor:
        if isinstance(taps, Tensor):
            if len(self.feed) != 1:
                raise ShapeError(f"discriminator is fed from {self.feed}; pass a dict of stage outputs")
            taps = {self.feed[0]: taps}
        return self.discriminator(taps)

    def fuse(self, features) -> Tensor:
        return fuse(features, self.fusion)

    def predict(self, x: Tensor) -> Tensor:
        feats = [sub.extractor(x) for sub in self.subnets]
        return self.extra_classifier(self.fuse(feats))

    # ---- parameter groups ----------------------------------------------------
    def subnet_parameters(self, i):
        return self._subnet(i).parameters()

    def extractor_parameters(self, i):
        return self._subnet(i).extractor.parameters()

    def classifier_parameters(self, i):
        return self._subnet(i).classifier.parameters()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True):
        own = {name: p.data for name, p in self.named_parameters()}
        own.update(dict(self.named_buffers()))
        if strict:
            missing, extra = set(own) - set(state), set(state) - set(own)
            if missing or extra:
                raise KeyError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, arr in own.items():
            if name in state:
                if state[name].shape != arr.shape:
                    raise ShapeError(f"{name}: checkpoint shape {state[name].shape} vs model {arr.shape}")
                arr[...] = state[name]


# ---- presets -------------------------------------------------------------------

def backbone_layers(name: str, classes: int, image_size: int | None = None, width: int = 1):
    """Layer list, split index, stage map and input shape for a named backbone."""
    if name == "small-cnn-toy":
        size = image_size or 16
        c1, c2 = 16 * width, 32 * width
        layers = [Conv2d(3, c1, 3, 1, 1, bias=False), BatchNorm2d(c1), ReLU(), MaxPool2d(2),
                  Conv2d(c1, c2, 3, 1, 1, bias=False), BatchNorm2d(c2), ReLU(),
                  GlobalAvgPool(), Linear(c2, classes)]
        return layers, 7, {"block1": 3, "block2": 6}, (3, size, size)
    if name == "resnet20-cifar":
        size = image_size or 32
        w16, w32, w64 = 16 * width, 32 * width, 64 * width
        layers = [Conv2d(3, w16, 3, 1, 1, bias=False), BatchNorm2d(w16), ReLU()]
        for cin, cout, stride in ((w16, w16, 1), (w16, w32, 2), (w32, w64, 2)):
            layers += [BasicBlock(cin, cout, stride), BasicBlock(cout, cout), BasicBlock(cout, cout)]
        layers += [GlobalAvgPool(), Linear(w64, classes)]
        return layers, 12, {"block1": 5, "block2": 8, "block3": 11}, (3, size, size)
    if name == "nin-cifar":
        size = image_size or 32
        a, b, c = 192 * width, 160 * width, 96 * width

        def mlpconv(cin, cout, k):
            return [Conv2d(cin, cout, k, 1, k // 2, bias=False), BatchNorm2d(cout), ReLU()]

        layers = (mlpconv(3, a, 5) + mlpconv(a, b, 1) + mlpconv(b, c, 1)
                  + [MaxPool2d(3, 2, 1), Dropout(0.5)]
                  + mlpconv(c, a, 5) + mlpconv(a, a, 1) + mlpconv(a, a, 1)
                  + [AvgPool2d(3, 2, 1), Dropout(0.5)]
                  + mlpconv(a, a, 3) + mlpconv(a, a, 1) + mlpconv(a, classes, 1)
                  + [GlobalAvgPool()])
        return layers, 31, {"block1": 10, "block2": 21, "block3": 30}, (3, size, size)
    raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")


def build_backbone(name: str, classes: int, image_size=None, width=1, seed=0,
                   init="kaiming-normal") -> SubnetSpec:
    layers, split, stages, shape = backbone_layers(name, classes, image_size, width)
    sub = SubnetSpec(Sequential(layers, shape), split, stages)
    init_params(sub, seed, init)
    return sub


def _extra_classifier(name, classes, n, fusion, feature_shape):
    factor = n if fusion == "concat" else 1
    in_ch = feature_shape[0] * factor
    shape = (in_ch,) + tuple(feature_shape[1:])
    # NIN's subnet classifier is a bare pool, so the extra one gains an fc layer
    return Sequential([GlobalAvgPool(), Linear(in_ch, classes)], shape)


DISC_CHANNELS = {"small-cnn-toy": (16, 32, 64)}


def build_preset(name: str, classes: int, *, subnets: int = 2, fusion: str = "concat",
                 feed=None, image_size=None, width: int = 1, disc_channels=None,
                 final_sigmoid=None, seed: int = 0, init: str = "kaiming-normal",
                 dtype=None) -> DpcnModel:
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")
    subs = []
    for i in range(subnets):
        sub = build_backbone(name, classes, image_size, width)
        init_params(sub, 0, init, rng=substream(seed, f"init.subnet{i + 1}"))
        for j, m in enumerate(mod for mod in sub.modules() if isinstance(mod, Dropout)):
            m.rng = substream(seed, f"dropout.subnet{i + 1}.{j}")
        subs.append(sub)
    if feed is None:
        feed = [max(subs[0].stages, key=subs[0].stages.get)]
    elif isinstance(feed, str):
        feed = [s for s in feed.replace(",", "+").split("+") if s]
    for s in feed:
        if s not in subs[0].stages:
            raise ValueError(f"unknown feed stage {s!r}; {name} has {sorted(subs[0].stages)}")
    feed = sorted(feed, key=subs[0].stages.get)
    if final_sigmoid is None:
        final_sigmoid = name == "nin-cifar"
    disc = Discriminator({s: subs[0].stage_shape(s) for s in feed},
                         channels=disc_channels or DISC_CHANNELS.get(name, (64, 128, 256)),
                         final_sigmoid=final_sigmoid)
    init_params(disc, 0, init, rng=substream(seed, "init.discriminator"))
    extra = _extra_classifier(name, classes, subnets, fusion, subs[0].feature_shape)
    init_params(extra, 0, init, rng=substream(seed, "init.extra"))
    model = DpcnModel(subs, disc, extra, fusion, feed, name=name, classes=classes)
    if dtype is not None and np.dtype(dtype) != np.float64:
        model.astype(dtype)
    return model
