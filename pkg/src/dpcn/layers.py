"""CNN building blocks on top of :mod:`dpcn.autodiff`.

Every layer knows its output shape for a given (C, H, W) or (F,) input shape
so a :class:`Sequential` can be validated before any data flows through it.
"""

from __future__ import annotations

import contextlib
import re

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ShapeError, Tensor


class Module:
    def __init__(self):
        self.training = True

    # subclasses override these three
    def children(self) -> list[tuple[str, Module]]:
        return []

    def own_params(self) -> list[tuple[str, Parameter]]:
        return []

    def own_buffers(self) -> list[tuple[str, np.ndarray]]:
        return []

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        return shape

    def spec(self) -> dict:
        return {"type": type(self).__name__}

    def __call__(self, x):
        return self.forward(x)

    def modules(self):
        yield self
        for _, child in self.children():
            yield from child.modules()

    def named_parameters(self, prefix: str = ""):
        for name, p in self.own_params():
            yield prefix + name, p
        for cname, child in self.children():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, b in self.own_buffers():
            yield prefix + name, b
        for cname, child in self.children():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype):
        for p in self.parameters():
            p.astype(dtype)
        for m in self.modules():
            if isinstance(m, BatchNorm2d):
                m.running_mean = m.running_mean.astype(dtype)
                m.running_var = m.running_var.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0, bias=True):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.weight = Parameter(np.zeros((out_channels, in_channels, kernel, kernel)))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None

    def own_params(self):
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.in_channels:
            raise ShapeError(f"Conv2d expects ({self.in_channels}, H, W), got {shape}")
        h, w = ((s + 2 * self.padding - self.kernel) // self.stride + 1 for s in shape[1:])
        if h < 1 or w < 1:
            raise ShapeError(f"Conv2d kernel {self.kernel} too large for input {shape}")
        return (self.out_channels, h, w)

    def forward(self, x):
        n = x.shape[0]
        c, oh, ow = self.output_shape(x.shape[1:])
        cols = ad.im2col(x, self.kernel, self.stride, self.padding)
        w = self.weight.reshape(self.out_channels, -1).transpose()
        out = cols @ w
        if self.bias is not None:
            out = out + self.bias
        return out.reshape(n, oh, ow, c).transpose(0, 3, 1, 2)

    def spec(self):
        return {"type": "Conv2d", "in": self.in_channels, "out": self.out_channels,
                "kernel": self.kernel, "stride": self.stride, "padding": self.padding,
                "bias": self.bias is not None}


class BatchNorm2d(Module):
    """Per-channel normalization of (N, C, H, W) batches.

    Train mode normalizes with the biased batch statistics and folds them
    into the running estimates; eval mode uses the running estimates only.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        if eps <= 0:
            raise ValueError("BatchNorm eps must be positive")
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.track_stats = True

    def own_params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def own_buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.channels:
            raise ShapeError(f"BatchNorm2d expects ({self.channels}, H, W), got {shape}")
        return shape

    def forward(self, x):
        self.output_shape(x.shape[1:])
        bshape = (1, self.channels, 1, 1)
        if self.training:
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            xc = x - mu
            var = ad.square(xc).mean(axis=(0, 2, 3), keepdims=True)
            xhat = xc * (var + self.eps) ** -0.5
            if self.track_stats:
                m = self.momentum
                self.running_mean[...] = (1 - m) * self.running_mean + m * mu.data.reshape(-1)
                self.running_var[...] = (1 - m) * self.running_var + m * var.data.reshape(-1)
        else:
            mu = self.running_mean.reshape(bshape).astype(x.dtype)
            inv = ((self.running_var + self.eps) ** -0.5).reshape(bshape).astype(x.dtype)
            xhat = (x - Tensor(mu)) * Tensor(inv)
        return xhat * self.gamma.reshape(bshape) + self.beta.reshape(bshape)

    def spec(self):
        return {"type": "BatchNorm2d", "channels": self.channels, "eps": self.eps,
                "momentum": self.momentum}


@contextlib.contextmanager
def frozen_stats(modules):
    """Train-mode forwards inside this block leave BatchNorm running stats alone."""
    bns = [m for mod in modules for m in mod.modules() if isinstance(m, BatchNorm2d)]
    saved = [bn.track_stats for bn in bns]
    for bn in bns:
        bn.track_stats = False
    try:
        yield
    finally:
        for bn, flag in zip(bns, saved):
            bn.track_stats = flag


class Activation(Module):
    KINDS = ("relu", "leaky_relu", "sigmoid")

    def __init__(self, kind="relu", slope=0.01):
        super().__init__()
        if kind not in self.KINDS:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind, self.slope = kind, slope

    def forward(self, x):
        if self.kind == "relu":
            return ad.relu(x)
        if self.kind == "leaky_relu":
            return ad.leaky_relu(x, self.slope)
        return ad.sigmoid(x)

    def spec(self):
        out = {"type": "Activation", "kind": self.kind}
        if self.kind == "leaky_relu":
            out["slope"] = self.slope
        return out


def ReLU():
    return Activation("relu")


def LeakyReLU(slope=0.01):
    return Activation("leaky_relu", slope)


class Pool2d(Module):
    def __init__(self, kind, kernel, stride=None, padding=0):
        super().__init__()
        if kind not in ("max", "avg"):
            raise ValueError(f"unknown pool kind {kind!r}")
        self.kind, self.kernel = kind, kernel
        self.stride = stride or kernel
        self.padding = padding

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"Pool2d expects (C, H, W), got {shape}")
        h, w = ((s + 2 * self.padding - self.kernel) // self.stride + 1 for s in shape[1:])
        if h < 1 or w < 1:
            raise ShapeError(f"Pool2d kernel {self.kernel} too large for input {shape}")
        return (shape[0], h, w)

    def forward(self, x):
        self.output_shape(x.shape[1:])
        fn = ad.max_pool2d if self.kind == "max" else ad.avg_pool2d
        return fn(x, self.kernel, self.stride, self.padding)

    def spec(self):
        return {"type": "Pool2d", "kind": self.kind, "kernel": self.kernel,
                "stride": self.stride, "padding": self.padding}


def MaxPool2d(kernel, stride=None, padding=0):
    return Pool2d("max", kernel, stride, padding)


def AvgPool2d(kernel, stride=None, padding=0):
    return Pool2d("avg", kernel, stride, padding)


class GlobalAvgPool(Module):
    def output_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"GlobalAvgPool expects (C, H, W), got {shape}")
        return (shape[0],)

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"GlobalAvgPool expects rank-4 input, got {x.shape}")
        return x.mean(axis=(2, 3))


class Linear(Module):
    def __init__(self, in_features, out_features, bias=True):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(np.zeros((out_features, in_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def own_params(self):
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out

    def output_shape(self, shape):
        if shape != (self.in_features,):
            raise ShapeError(f"Linear expects ({self.in_features},), got {shape}")
        return (self.out_features,)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"Linear expects (N, {self.in_features}), got {x.shape}")
        out = x @ self.weight.transpose()
        if self.bias is not None:
            out = out + self.bias
        return out

    def spec(self):
        return {"type": "Linear", "in": self.in_features, "out": self.out_features,
                "bias": self.bias is not None}


class Dropout(Module):
    def __init__(self, rate=0.5):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.rng = np.random.default_rng(0)

    def forward(self, x):
        if not self.training or self.rate == 0:
            return x
        keep = (self.rng.random(x.shape) >= self.rate).astype(x.dtype) / (1 - self.rate)
        return x * Tensor(keep)

    def spec(self):
        return {"type": "Dropout", "rate": self.rate}


class BasicBlock(Module):
    """Two 3x3 conv/BN stages plus a shortcut branch, summed then rectified."""

    def __init__(self, in_channels, out_channels, stride=1):
        super().__init__()
        self.in_channels, self.out_channels, self.stride = in_channels, out_channels, stride
        self.conv1 = Conv2d(in_channels, out_channels, 3, stride, 1, bias=False)
        self.bn1 = BatchNorm2d(out_channels)
        self.conv2 = Conv2d(out_channels, out_channels, 3, 1, 1, bias=False)
        self.bn2 = BatchNorm2d(out_channels)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = Sequential([Conv2d(in_channels, out_channels, 1, stride, 0, bias=False),
                                        BatchNorm2d(out_channels)])

    def children(self):
        out = [("conv1", self.conv1), ("bn1", self.bn1), ("conv2", self.conv2), ("bn2", self.bn2)]
        if self.shortcut is not None:
            out.append(("shortcut", self.shortcut))
        return out

    def output_shape(self, shape):
        return self.conv2.output_shape(self.conv1.output_shape(shape))

    def forward(self, x):
        h = ad.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        skip = x if self.shortcut is None else self.shortcut(x)
        return ad.relu(h + skip)

    def spec(self):
        return {"type": "BasicBlock", "in": self.in_channels, "out": self.out_channels,
                "stride": self.stride}


class Sequential(Module):
    def __init__(self, layers, input_shape=None):
        super().__init__()
        self.layers = list(layers)
        self.input_shape = tuple(input_shape) if input_shape is not None else None
        if self.input_shape is not None:
            self.shapes = self.validate(self.input_shape)

    def children(self):
        return [(str(i), layer) for i, layer in enumerate(self.layers)]

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, index):
        return self.layers[index]

    def validate(self, shape) -> list[tuple[int, ...]]:
        """Output shape after each layer; raises ShapeError naming the layer."""
        shapes = []
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(tuple(shape))
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({type(layer).__name__}): {exc}") from None
            shapes.append(shape)
        return shapes

    def output_shape(self, shape):
        shapes = self.validate(shape)
        return shapes[-1] if shapes else tuple(shape)

    def forward(self, x, taps=None):
        """Run all layers; with ``taps`` also return {index: output} for those layer indices."""
        seen = {}
        for i, layer in enumerate(self.layers):
            try:
                x = layer(x)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({type(layer).__name__}): {exc}") from None
            if taps is not None and i in taps:
                seen[i] = x
        return (x, seen) if taps is not None else x

    def __call__(self, x, taps=None):
        return self.forward(x, taps)

    def spec(self):
        return {"type": "Sequential", "layers": [layer.spec() for layer in self.layers]}


_NORMAL = re.compile(r"^normal\(\s*([0-9.eE+-]+)\s*\)$")


def init_params(module: Module, seed: int, scheme: str = "kaiming-normal", rng=None) -> Module:
    """Initialize weights in place; deterministic for a given (module layout, seed, scheme).

    Biases and BN shifts start at 0, BN scales at 1, running stats at (0, 1).
    """
    sigma = None
    m = _NORMAL.match(scheme)
    if m:
        sigma = float(m.group(1))
    elif scheme not in ("kaiming-normal", "xavier-uniform"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    for mod in module.modules():
        if isinstance(mod, (Conv2d, Linear)):
            w = mod.weight
            receptive = mod.kernel ** 2 if isinstance(mod, Conv2d) else 1
            fan_in = w.shape[1] * receptive
            fan_out = w.shape[0] * receptive
            if sigma is not None:
                vals = rng.normal(0.0, sigma, w.shape) if sigma > 0 else np.zeros(w.shape)
            elif scheme == "kaiming-normal":
                vals = rng.normal(0.0, np.sqrt(2.0 / fan_in), w.shape)
            else:
                bound = np.sqrt(6.0 / (fan_in + fan_out))
                vals = rng.uniform(-bound, bound, w.shape)
            w.data[...] = vals
            if mod.bias is not None:
                mod.bias.data[...] = 0
        elif isinstance(mod, BatchNorm2d):
            mod.gamma.data[...] = 1
            mod.beta.data[...] = 0
            mod.running_mean[...] = 0
            mod.running_var[...] = 1
    return module


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross entropy: logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    picked = ad.log_softmax(logits, axis=1)[np.arange(labels.size), labels]
    return -picked.mean()
