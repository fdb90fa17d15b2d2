"""Glue between a RunConfig and the training code: data, model, run, outputs."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .analysis import DivergenceReport, divergence_report
from .config import RunConfig
from .data import Dataset, load_cifar100_pair, preprocess, synth_shapes
from .errors import ConfigError
from .model import DpcnModel, build_preset
from .persist import save_checkpoint, write_metrics_csv
from .seeding import subseed
from .training import BaselineResult, MetricsRecord, Trainer, baseline, evaluate

log = logging.getLogger(__name__)

DEFAULT_SIZE = {"small-cnn-toy": 16}


def image_size(cfg: RunConfig) -> int:
    if cfg.dataset == "cifar100-binary":
        return 32
    return cfg.image_size or DEFAULT_SIZE.get(cfg.preset, 32)


def build_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "synthetic-shapes":
        train, test = synth_shapes(cfg.classes, cfg.images, image_size(cfg), cfg.noise,
                                   seed=subseed(cfg.seed, "data"))
        train, test = preprocess(train, test, cfg.preprocessing)
    else:
        train, test = load_cifar100_pair(cfg.data_path or None, cfg.subset_classes,
                                         cfg.preprocessing, cfg.strict)
    train = Dataset(train.images, train.labels, train.classes, crop_pad=cfg.crop)
    return train, test


def n_classes(cfg: RunConfig) -> int:
    if cfg.dataset == "cifar100-binary":
        subset = cfg.subset_classes
        return len(subset) if subset else 100
    return cfg.classes


def build_model(cfg: RunConfig) -> DpcnModel:
    try:
        return build_preset(cfg.preset, n_classes(cfg), subnets=cfg.subnets, fusion=cfg.fusion,
                            feed=cfg.feed_stages, image_size=image_size(cfg), width=cfg.width,
                            seed=cfg.seed, init=cfg.init, dtype=np.dtype(cfg.dtype))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


@dataclass
class RunResult:
    model: DpcnModel
    history: list[MetricsRecord]
    final: dict[str, dict[str, float]]  # split -> evaluate() output
    divergence: DivergenceReport | None
    baselines: list[BaselineResult] = field(default_factory=list)

    def rows(self) -> list[tuple[str, float, float, int]]:
        """(name, train acc, test acc, inference params) for the comparison table."""
        m = self.model
        sub_params = m.subnets[0].num_parameters()
        out = [(f"subnet{i + 1}", self.final["train"][f"subnet{i + 1}"],
                self.final["test"][f"subnet{i + 1}"], sub_params) for i in range(m.n_subnets)]
        dpcn_params = sum(s.extractor.num_parameters() for s in m.subnets) + m.extra_classifier.num_parameters()
        out.append(("extra", self.final["train"]["extra"], self.final["test"]["extra"], dpcn_params))
        out += [(b.kind, b.train_acc, b.test_acc, b.params) for b in self.baselines]
        return out


def run(cfg: RunConfig, data=None) -> RunResult:
    """Train D-PCN (plus requested baselines) from one config; nothing is written."""
    train, test = data or build_data(cfg)
    if len(train) == 0:
        raise ConfigError("training set is empty")
    model = build_model(cfg)
    schedule = cfg.schedule()
    trainer = Trainer(model, train, test, schedule, eval_every_epoch=cfg.eval_every_epoch)
    trainer.run()
    final = {"train": evaluate(model, train), "test": evaluate(model, test)}
    div = divergence_report(model, train) if len(train) >= 16 else None
    dtype = np.dtype(cfg.dtype)
    bases = [baseline(kind, cfg.preset, n_classes(cfg), train, test, schedule, init=cfg.init, dtype=dtype)
             for kind in cfg.baseline_kinds]
    return RunResult(model, trainer.history, final, div, bases)


def write_results(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "train_acc", "test_acc", "params"])
        for name, tr, te, params in rows:
            w.writerow([name, f"{tr:.6f}", f"{te:.6f}", params])


def save_run(cfg: RunConfig, result: RunResult, out_dir=None) -> str:
    out_dir = out_dir or cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.cfg"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), result.history)
    write_results(os.path.join(out_dir, "results.csv"), result.rows())
    save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), result.model.state_dict())
    if result.divergence is not None:
        d = result.divergence
        with open(os.path.join(out_dir, "divergence.txt"), "w", encoding="utf-8") as fh:
            fh.write(f"separation_accuracy = {d.separation_accuracy:.6f}\n"
                     f"threshold_accuracy = {d.threshold_accuracy:.6f}\n"
                     f"score_jsd = {d.score_jsd:.6f}\n"
                     f"mean_score_subnet1 = {d.mean_score_subnet1:.6f}\n"
                     f"mean_score_subnet2 = {d.mean_score_subnet2:.6f}\n"
                     f"mean_channel_cosine = {float(np.mean(d.per_channel_cosine)):.6f}\n")
    return out_dir
