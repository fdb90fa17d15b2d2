"""Grad-CAM heatmaps and discriminator-based divergence diagnostics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, backward, frozen, no_grad
from .data import Dataset
from .layers import Sequential
from .model import DpcnModel, SubnetSpec

log = logging.getLogger(__name__)


@dataclass
class Heatmap:
    values: np.ndarray  # normalized to [0, 1] at target-layer resolution
    upsampled: np.ndarray  # bilinear, input resolution
    class_index: int
    source_tag: str
    raw: np.ndarray = field(repr=False, default=None)  # before max-normalization
    empty: bool = False  # max was 0; values left all-zero


def bilinear_upsample(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize with edge clamping."""
    h, w = grid.shape

    def axis(n_out, n_in):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, wy = axis(out_h, h)
    x0, x1, wx = axis(out_w, w)
    top = grid[y0][:, x0] * (1 - wx) + grid[y0][:, x1] * wx
    bottom = grid[y1][:, x0] * (1 - wx) + grid[y1][:, x1] * wx
    return top * (1 - wy)[:, None] + bottom * wy[:, None]


def grad_cam(net, x, class_idx: int, target_layer: int | None = None,
             source_tag: str = "baseline") -> Heatmap:
    """Gradient-weighted class activation map for one input.

    ``net`` is a :class:`SubnetSpec` (extractor + classifier) or a plain
    :class:`Sequential`; ``target_layer`` indexes the layer whose output is
    explained and defaults to the last extractor layer.
    """
    if isinstance(net, SubnetSpec):
        seq = net.backbone
        target_layer = net.split_index - 1 if target_layer is None else target_layer
    elif isinstance(net, Sequential):
        seq = net
        if target_layer is None:
            raise ValueError("target_layer is required for a bare Sequential")
    else:
        raise TypeError(f"cannot run Grad-CAM on {type(net).__name__}")
    if not 0 <= target_layer < len(seq) - 1:
        raise ValueError(f"target layer {target_layer} must precede the network output")
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise ValueError("grad_cam explains a single input")
    dtype = seq.parameters()[0].dtype if seq.parameters() else np.float64
    was_training = seq.training
    seq.eval()
    try:
        with no_grad():
            acts = Tensor(x.astype(dtype))
            for layer in seq.layers[:target_layer + 1]:
                acts = layer(acts)
        if acts.ndim != 4:
            raise ValueError(f"target layer output {acts.shape} is not a convolutional map")
        leaf = Tensor(acts.data, requires_grad=True)
        with frozen(seq.parameters()):
            out = leaf
            for layer in seq.layers[target_layer + 1:]:
                out = layer(out)
            if not 0 <= class_idx < out.shape[1]:
                raise ValueError(f"class index {class_idx} outside [0, {out.shape[1]})")
            backward(out[0, class_idx])
    finally:
        seq.train(was_training)
    a = leaf.data[0]
    alpha = leaf.grad[0].mean(axis=(1, 2))
    raw = np.maximum(np.tensordot(alpha, a, axes=1), 0.0)
    peak = raw.max()
    empty = not peak > 0
    values = raw / peak if not empty else raw.copy()
    up = bilinear_upsample(values, x.shape[2], x.shape[3])
    return Heatmap(values, up, class_idx, source_tag, raw=raw, empty=empty)


def heatmap_overlap(h1, h2) -> float:
    """Soft Jaccard sum(min)/sum(max) of two max-normalized maps.

    Two all-zero maps count as identical (1.0, logged).
    """
    a = h1.values if isinstance(h1, Heatmap) else np.asarray(h1, dtype=float)
    b = h2.values if isinstance(h2, Heatmap) else np.asarray(h2, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"heatmap grids differ: {a.shape} vs {b.shape}")
    if (a < 0).any() or (b < 0).any():
        raise ValueError("heatmaps must be non-negative")
    a = a / a.max() if a.max() > 0 else a
    b = b / b.max() if b.max() > 0 else b
    denom = np.maximum(a, b).sum()
    if denom == 0:
        log.warning("heatmap_overlap: both maps are all-zero; reporting 1.0")
        return 1.0
    return float(np.minimum(a, b).sum() / denom)


# ---- divergence -------------------------------------------------------------------

def score_jsd(scores_a, scores_b, bins: int = 64, smoothing: float = 1e-9) -> float:
    """Jensen-Shannon divergence (nats) between histograms over the pooled score range."""
    a = np.asarray(scores_a, dtype=float).ravel()
    b = np.asarray(scores_b, dtype=float).ravel()
    lo, hi = min(a.min(), b.min()), max(a.max(), b.max())
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    p = np.histogram(a, bins=bins, range=(lo, hi))[0] + smoothing
    q = np.histogram(b, bins=bins, range=(lo, hi))[0] + smoothing
    p, q = p / p.sum(), q / q.sum()
    m = 0.5 * (p + q)
    js = 0.5 * np.sum(p * np.log(p / m)) + 0.5 * np.sum(q * np.log(q / m))
    return float(min(max(js, 0.0), np.log(2)))


def pairwise_separation(scores_1, scores_2) -> float:
    """Fraction of samples with D(E_1(x)) > D(E_2(x)); ties count one half."""
    s1, s2 = np.asarray(scores_1).ravel(), np.asarray(scores_2).ravel()
    return float(np.mean((s1 > s2) + 0.5 * (s1 == s2)))


def _cosine(u, v) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 and nv == 0:
        return 1.0
    if nu == 0 or nv == 0:
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


@dataclass
class DivergenceReport:
    separation_accuracy: float
    threshold_accuracy: float
    score_jsd: float
    mean_score_subnet1: float
    mean_score_subnet2: float
    per_channel_cosine: np.ndarray = field(repr=False)
    samples: int = 0


MIN_SAMPLES = 16


def divergence_report(model: DpcnModel, data, batch_size: int = 256) -> DivergenceReport:
    """How well the discriminator tells subnet 1 from subnet 2 on ``data`` (eval mode)."""
    from .training import separation_accuracy

    images = data.images if isinstance(data, Dataset) else np.asarray(data)
    if len(images) < MIN_SAMPLES:
        raise ValueError(f"divergence report needs at least {MIN_SAMPLES} inputs, got {len(images)}")
    dtype = model.subnets[0].parameters()[0].dtype
    model.eval()
    scores = [[] for _ in range(model.n_subnets)]
    feats = [[] for _ in range(2)]
    with no_grad():
        for start in range(0, len(images), batch_size):
            xb = Tensor(images[start:start + batch_size].astype(dtype))
            for i in range(model.n_subnets):
                f, taps = model.extract(i, xb)
                scores[i].append(model.discriminator_score(taps).data.ravel())
                if i < 2:
                    feats[i].append(f.data)
    scores = [np.concatenate(s) for s in scores]
    f1, f2 = (np.concatenate(f) for f in feats)
    cos = np.array([_cosine(f1[:, c].ravel(), f2[:, c].ravel()) for c in range(f1.shape[1])])
    return DivergenceReport(
        separation_accuracy=pairwise_separation(scores[0], scores[1]),
        threshold_accuracy=separation_accuracy(scores),
        score_jsd=score_jsd(scores[0], scores[1]),
        mean_score_subnet1=float(scores[0].mean()),
        mean_score_subnet2=float(scores[1].mean()),
        per_channel_cosine=cos,
        samples=len(images),
    )
