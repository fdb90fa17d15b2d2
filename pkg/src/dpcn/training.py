"""Discriminator losses, the three-step schedule, SGD and the comparison baselines."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward, frozen, no_grad
from .data import Dataset
from .errors import NumericError
from .layers import Dropout, frozen_stats, init_params, softmax_cross_entropy
from .model import DpcnModel, SubnetSpec, build_backbone
from .seeding import substream

log = logging.getLogger(__name__)


# ---- discriminator losses ----------------------------------------------------

def _scores_check(scores: Tensor):
    if scores.size == 0:
        raise ValueError("discriminator loss on an empty batch")


def loss_d1(scores: Tensor) -> Tensor:
    """mean (1 - s)^2: pulls subnet-1 scores toward 1."""
    _scores_check(scores)
    return ad.square(1.0 - scores).mean()


def loss_d2(scores: Tensor) -> Tensor:
    """mean s^2: pulls subnet-2 scores toward 0."""
    _scores_check(scores)
    return ad.square(scores).mean()


def loss_d3(scores: Tensor) -> Tensor:
    """mean (0.5 - s)^2: pulls subnet-3 scores toward 0.5."""
    _scores_check(scores)
    return ad.square(0.5 - scores).mean()


DISC_LOSSES = (loss_d1, loss_d2, loss_d3)
DISC_TARGETS = (1.0, 0.0, 0.5)


def discriminator_loss(scores_per_subnet) -> Tensor:
    """L_D = L_D1 + L_D2 (+ L_D3)."""
    terms = [fn(s) for fn, s in zip(DISC_LOSSES, scores_per_subnet)]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def joint_scores(model: DpcnModel, taps_per_subnet) -> list[Tensor]:
    """Score every subnet's features in one discriminator batch; split back per subnet.

    The discriminator always sees the stacked batch [E_1(x); E_2(x); ...], so its
    batch statistics are shared by all populations it must tell apart.
    """
    n = next(iter(taps_per_subnet[0].values())).shape[0]
    joint = {s: ad.concat([t[s] for t in taps_per_subnet], axis=0) for s in model.feed}
    scores = model.discriminator_score(joint)
    return [scores[k * n:(k + 1) * n] for k in range(len(taps_per_subnet))]


def subnet_loss(model: DpcnModel, i: int, x: Tensor, labels, lam: float, with_disc: bool = True,
                detach_others: bool = True):
    """(L_i, L_cls_i, L_D_i) for subnet ``i``; L_D_i is None when ``with_disc`` is False.

    Discriminator running statistics are left untouched. Other subnets'
    features are computed without gradient unless ``detach_others`` is off.
    """
    feats, taps = model.extract(i, x)
    cls = softmax_cross_entropy(model.classify(i, feats), labels)
    if not with_disc:
        return cls, cls, None
    taps_all = []
    for j in range(model.n_subnets):
        if j == i:
            taps_all.append(taps)
        elif detach_others:
            with no_grad(), frozen_stats([model.subnets[j]]):
                taps_all.append(model.extract(j, x)[1])
        else:
            with frozen_stats([model.subnets[j]]):
                taps_all.append(model.extract(j, x)[1])
    with frozen_stats([model.discriminator]):
        d = DISC_LOSSES[i](joint_scores(model, taps_all)[i])
    return cls + lam * d, cls, d


def separation_accuracy(scores_per_subnet) -> float:
    """Fraction of samples whose score lies nearest its own subnet's target.

    For two subnets this is thresholding at 0.5 between targets 1 and 0.
    """
    targets = np.array(DISC_TARGETS[:len(scores_per_subnet)])
    correct = total = 0
    for k, s in enumerate(scores_per_subnet):
        s = np.asarray(s).reshape(-1, 1)
        nearest = np.abs(s - targets[None]).argmin(axis=1)
        correct += int((nearest == k).sum())
        total += len(s)
    return correct / total if total else float("nan")


# ---- schedule and optimizer -------------------------------------------------------

@dataclass
class TrainingSchedule:
    step1_epochs: int = 3
    step2_epochs: int = 21
    step3_epochs: int = 6
    lam: float = 1.0
    lr_policy: tuple = ((0, 0.05),)  # (run epoch, lr) pairs, piecewise constant
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("step1_epochs", "step2_epochs", "step3_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        self.lr_policy = tuple(sorted((int(e), float(lr)) for e, lr in self.lr_policy))
        if not self.lr_policy or self.lr_policy[0][0] != 0:
            raise ValueError("lr policy must start at epoch 0")

    @classmethod
    def from_total(cls, total_epochs: int, **kw) -> TrainingSchedule:
        """Split a budget: Step 1 gets 10% (at least 2), Step 3 20% (at least 1), Step 2 the rest."""
        s1 = max(2, round(0.1 * total_epochs))
        s3 = max(1, round(0.2 * total_epochs))
        s2 = max(0, total_epochs - s1 - s3)
        return cls(step1_epochs=s1, step2_epochs=s2, step3_epochs=s3, **kw)

    @property
    def total_epochs(self) -> int:
        return self.step1_epochs + self.step2_epochs + self.step3_epochs

    def lr_at(self, epoch: int) -> float:
        lr = self.lr_policy[0][1]
        for start, value in self.lr_policy:
            if epoch >= start:
                lr = value
        return lr


class SGD:
    """v <- mu v + g;  w <- w - lr (v + wd w)."""

    def __init__(self, params, lr=0.05, momentum=0.9, weight_decay=5e-4):
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p, v in zip(self.params, self.buffers):
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * (v + self.weight_decay * p.data)


# ---- metrics ---------------------------------------------------------------------

NAN = float("nan")


@dataclass
class MetricsRecord:
    epoch: int
    step: int
    lr: float = NAN
    train_acc_subnet1: float = NAN
    test_acc_subnet1: float = NAN
    train_acc_subnet2: float = NAN
    test_acc_subnet2: float = NAN
    train_acc_subnet3: float = NAN
    test_acc_subnet3: float = NAN
    train_acc_extra: float = NAN
    test_acc_extra: float = NAN
    l_cls1: float = NAN
    l_cls2: float = NAN
    l_cls3: float = NAN
    l_d1: float = NAN
    l_d2: float = NAN
    l_d3: float = NAN
    l1: float = NAN
    l2: float = NAN
    l3: float = NAN
    l_d: float = NAN
    l_extra: float = NAN
    sep_acc: float = NAN

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]


class _Means:
    def __init__(self):
        self.values: dict[str, list[float]] = {}

    def add(self, **kw):
        for k, v in kw.items():
            if v is not None:
                self.values.setdefault(k, []).append(v)

    def result(self) -> dict[str, float]:
        return {k: math.fsum(v) / len(v) for k, v in self.values.items()}


def _value(t: Tensor, term: str) -> float:
    v = t.item()
    if not math.isfinite(v):
        raise NumericError(f"non-finite {term}: {v}")
    return v


def predict_logits(fn, data: Dataset, batch_size=256) -> np.ndarray:
    out = []
    with no_grad():
        for xb, _ in data.batches(batch_size, drop_singletons=False):
            out.append(fn(xb).data)
    return np.concatenate(out) if out else np.zeros((0,))


def accuracy(net: SubnetSpec, data: Dataset) -> float:
    net.eval()
    logits = predict_logits(net.backbone, data)
    return float((logits.argmax(axis=1) == data.labels).mean())


def ensemble_accuracy(nets, data: Dataset) -> float:
    """Accuracy of averaged softmax predictions."""
    probs = 0
    for net in nets:
        net.eval()
        z = predict_logits(net.backbone, data)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        probs = probs + z / z.sum(axis=1, keepdims=True)
    return float((np.argmax(probs, axis=1) == data.labels).mean())


# ---- three-step protocol -------------------------------------------------------------

class Trainer:
    """Runs Steps 1-3 on one model, keeping one optimizer per parameter group."""

    def __init__(self, model: DpcnModel, train_data: Dataset, test_data: Dataset | None,
                 schedule: TrainingSchedule, eval_every_epoch: bool = True):
        self.model = model
        self.train_data, self.test_data = train_data, test_data
        self.schedule = schedule
        self.eval_every_epoch = eval_every_epoch
        sch = schedule
        opt = dict(momentum=sch.momentum, weight_decay=sch.weight_decay)
        self.subnet_opts = [SGD(model.subnet_parameters(i), **opt) for i in range(model.n_subnets)]
        self.disc_opt = SGD(model.discriminator.parameters(), **opt)
        self.extra_opt = SGD(model.extra_classifier.parameters(), **opt)
        self.shuffle_rng = substream(sch.seed, "shuffle")
        self.augment_rng = substream(sch.seed, "augment")
        self.dtype = model.subnets[0].parameters()[0].dtype
        self.history: list[MetricsRecord] = []
        self.epoch = 0
        self.completed = 0

    def _batches(self):
        return self.train_data.batches(self.schedule.batch_size, self.shuffle_rng,
                                       self.augment_rng, self.dtype)

    def _set_lr(self) -> float:
        lr = self.schedule.lr_at(self.epoch)
        for o in self.subnet_opts + [self.disc_opt, self.extra_opt]:
            o.lr = lr
        return lr

    # ---- sub-updates ---------------------------------------------------------
    def subnet_update(self, i: int, xb: Tensor, yb, with_disc: bool):
        """One SGD step of subnet ``i`` against the frozen discriminator."""
        m = self.model
        m.zero_grad()
        m.discriminator.train()
        # the tape is read at backward time, so the freeze has to span it
        with frozen(m.discriminator.parameters()):
            loss, cls, d = subnet_loss(m, i, xb, yb, self.schedule.lam, with_disc)
            vals = {f"l_cls{i + 1}": _value(cls, f"L_cls{i + 1}")}
            if d is not None:
                vals[f"l_d{i + 1}"] = _value(d, f"L_D{i + 1}")
            vals[f"l{i + 1}"] = _value(loss, f"L{i + 1}")
            backward(loss)
        self.subnet_opts[i].step()
        return vals

    def discriminator_update(self, xb: Tensor):
        """One SGD step of the discriminator on L_D with every extractor frozen."""
        m = self.model
        m.zero_grad()
        with no_grad(), frozen_stats(m.subnets):
            taps = [m.extract(i, xb)[1] for i in range(m.n_subnets)]
        m.discriminator.train()
        loss = discriminator_loss(joint_scores(m, taps))
        value = _value(loss, "L_D")
        backward(loss)
        self.disc_opt.step()
        return {"l_d": value}

    def extra_update(self, xb: Tensor, yb):
        m = self.model
        with no_grad():
            fused = m.fuse([sub.extractor(xb) for sub in m.subnets])
        m.extra_classifier.zero_grad()
        loss = softmax_cross_entropy(m.extra_classifier(fused), yb)
        value = _value(loss, "L_extra")
        backward(loss)
        self.extra_opt.step()
        return {"l_extra": value}

    # ---- epochs ----------------------------------------------------------------
    def step1_epoch(self) -> MetricsRecord:
        m = self.model
        lr = self._set_lr()
        m.train()
        acc = _Means()
        for xb, yb in self._batches():
            acc.add(**self.subnet_update(0, xb, yb, with_disc=False))
            for i in range(1, m.n_subnets):
                acc.add(**self.subnet_update(i, xb, yb, with_disc=True))
        return self._finish(1, lr, acc)

    def step2_epoch(self) -> MetricsRecord:
        m = self.model
        lr = self._set_lr()
        m.train()
        acc = _Means()
        d_losses = _Means()
        for xb, yb in self._batches():
            for i in range(m.n_subnets):
                acc.add(**self.subnet_update(i, xb, yb, with_disc=True))
            d_losses.add(**self.discriminator_update(xb))
        acc.values.update(d_losses.values)
        return self._finish(2, lr, acc)

    def step3_epoch(self) -> MetricsRecord:
        m = self.model
        lr = self._set_lr()
        m.eval()
        m.extra_classifier.train()
        acc = _Means()
        for xb, yb in self._batches():
            acc.add(**self.extra_update(xb, yb))
        return self._finish(3, lr, acc)

    def _finish(self, step: int, lr: float, acc: _Means) -> MetricsRecord:
        self.epoch += 1
        rec = MetricsRecord(epoch=self.epoch, step=step, lr=lr, **acc.result())
        if self.eval_every_epoch:
            self._evaluate(rec)
        self.history.append(rec)
        log.info("epoch %d step %d: %s", rec.epoch, step,
                 {k: round(v, 4) for k, v in acc.result().items()})
        return rec

    def _evaluate(self, rec: MetricsRecord):
        m = self.model
        for split, data in (("train", self.train_data), ("test", self.test_data)):
            if data is None or len(data) == 0:
                continue
            ev = evaluate(m, data)
            for i in range(m.n_subnets):
                setattr(rec, f"{split}_acc_subnet{i + 1}", ev[f"subnet{i + 1}"])
            setattr(rec, f"{split}_acc_extra", ev["extra"])
            if split == "train":
                rec.sep_acc = ev["separation"]

    def run(self) -> list[MetricsRecord]:
        sch = self.schedule
        for step, epochs, fn in ((1, sch.step1_epochs, self.step1_epoch),
                                 (2, sch.step2_epochs, self.step2_epoch),
                                 (3, sch.step3_epochs, self.step3_epoch)):
            if epochs == 0:
                log.info("step %d skipped (0 epochs)", step)
            for _ in range(epochs):
                fn()
            self.completed = step
        return self.history


def evaluate(model: DpcnModel, data: Dataset, batch_size: int = 256) -> dict[str, float]:
    """Eval-mode accuracy of every classifier plus discriminator separation accuracy."""
    model.eval()
    correct = {f"subnet{i + 1}": 0 for i in range(model.n_subnets)}
    correct["extra"] = 0
    scores = [[] for _ in range(model.n_subnets)]
    dtype = model.subnets[0].parameters()[0].dtype
    with no_grad():
        for xb, yb in data.batches(batch_size, dtype=dtype, drop_singletons=False):
            feats = []
            for i in range(model.n_subnets):
                f, taps = model.extract(i, xb)
                feats.append(f)
                correct[f"subnet{i + 1}"] += int((model.classify(i, f).data.argmax(1) == yb).sum())
                scores[i].append(model.discriminator_score(taps).data.reshape(-1))
            correct["extra"] += int((model.extra_classifier(model.fuse(feats)).data.argmax(1) == yb).sum())
    out = {k: v / len(data) for k, v in correct.items()}
    out["separation"] = separation_accuracy([np.concatenate(s) for s in scores])
    return out


def train(model: DpcnModel, train_data: Dataset, test_data: Dataset | None,
          schedule: TrainingSchedule) -> tuple[DpcnModel, list[MetricsRecord]]:
    if len(train_data) == 0:
        raise ValueError("empty training set")
    trainer = Trainer(model, train_data, test_data, schedule)
    return model, trainer.run()


# ---- baselines --------------------------------------------------------------------------

def classifier_epoch(net: SubnetSpec, opt: SGD, data: Dataset, batch_size: int,
                     shuffle_rng, augment_rng=None) -> float:
    """One epoch of plain cross-entropy training; returns the mean batch loss."""
    net.train()
    dtype = net.parameters()[0].dtype
    losses = []
    for xb, yb in data.batches(batch_size, shuffle_rng, augment_rng, dtype):
        opt.zero_grad()
        loss = softmax_cross_entropy(net.backbone(xb), yb)
        losses.append(_value(loss, "L_cls"))
        backward(loss)
        opt.step()
    return math.fsum(losses) / max(1, len(losses))


def fit_classifier(net: SubnetSpec, data: Dataset, schedule: TrainingSchedule, epochs: int,
                   seed_label: str = "") -> SubnetSpec:
    opt = SGD(net.parameters(), momentum=schedule.momentum, weight_decay=schedule.weight_decay)
    shuffle = substream(schedule.seed, f"shuffle{seed_label}")
    augment = substream(schedule.seed, f"augment{seed_label}")
    for e in range(epochs):
        opt.lr = schedule.lr_at(e)
        classifier_epoch(net, opt, data, schedule.batch_size, shuffle, augment)
    return net


BASELINES = ("single", "ensemble2", "doubleWidth")


@dataclass
class BaselineResult:
    kind: str
    train_acc: float
    test_acc: float
    params: int
    nets: list = field(default_factory=list, repr=False)


def baseline(kind: str, preset: str, classes: int, train_data: Dataset, test_data: Dataset,
             schedule: TrainingSchedule, epochs: int | None = None, init: str = "kaiming-normal",
             dtype=None) -> BaselineResult:
    """Train a comparison model for the same epoch budget as the D-PCN run.

    single: one backbone; ensemble2: two independently initialized backbones
    with averaged softmax; doubleWidth: one backbone with every width doubled.
    """
    if kind not in BASELINES:
        raise ValueError(f"unknown baseline {kind!r}; choose from {BASELINES}")
    epochs = schedule.total_epochs if epochs is None else epochs
    size = train_data.image_size
    width = 2 if kind == "doubleWidth" else 1
    count = 2 if kind == "ensemble2" else 1
    nets = []
    for k in range(count):
        net = build_backbone(preset, classes, size, width, init=init)
        init_params(net, 0, init, rng=substream(schedule.seed, f"init.baseline.{kind}.{k}"))
        for j, m in enumerate(mod for mod in net.modules() if isinstance(mod, Dropout)):
            m.rng = substream(schedule.seed, f"dropout.baseline.{kind}.{k}.{j}")
        if dtype is not None:
            net.astype(dtype)
        fit_classifier(net, train_data, schedule, epochs, seed_label=f".baseline.{kind}.{k}")
        nets.append(net)
    return BaselineResult(kind, ensemble_accuracy(nets, train_data), ensemble_accuracy(nets, test_data),
                          sum(n.num_parameters() for n in nets), nets)

