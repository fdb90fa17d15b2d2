"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .errors import ConfigError
from .model import FUSIONS, PRESETS
from .training import BASELINES, TrainingSchedule

ALIASES = {"lambda": "lam"}
DATASETS = ("synthetic-shapes", "cifar100-binary")
PREPROCESSING = ("normalize", "zero-center", "unit-range")
AUGMENTATION = ("auto", "none", "random-crop")
DTYPES = ("float64", "float32")


@dataclass
class RunConfig:
    preset: str = "small-cnn-toy"
    subnets: int = 2
    fusion: str = "concat"
    feed: str = ""  # comma-separated stage names; empty = deepest stage
    width: int = 1
    init: str = "kaiming-normal"
    dtype: str = "float64"
    # schedule
    epochs: int = 0  # > 0 splits this budget over the three steps
    step1_epochs: int = 3
    step2_epochs: int = 21
    step3_epochs: int = 6
    lam: float = 1.0
    lr: float = 0.05
    lr_drops: str = "18:0.005"  # "epoch:lr,..." counted over the whole run
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    baselines: str = ""  # comma-separated subset of single,ensemble2,doubleWidth
    # data
    dataset: str = "synthetic-shapes"
    data_path: str = ""
    classes: int = 4
    images: int = 2500  # synthetic: total before the 80/20 split
    image_size: int = 0  # 0 = preset default
    noise: float = 0.3
    subset: str = ""  # cifar: comma-separated fine-label indices
    preprocessing: str = "unit-range"
    augmentation: str = "auto"
    crop_pad: int = 4
    strict: bool = True
    # run
    output_dir: str = "runs/default"
    seed: int = 0
    eval_every_epoch: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        checks = [
            (self.preset in PRESETS, f"preset must be one of {PRESETS}"),
            (self.subnets in (2, 3), "subnets must be 2 or 3"),
            (self.fusion in FUSIONS, f"fusion must be one of {FUSIONS}"),
            (self.width >= 1, "width must be >= 1"),
            (self.dtype in DTYPES, f"dtype must be one of {DTYPES}"),
            (self.dataset in DATASETS, f"dataset must be one of {DATASETS}"),
            (self.preprocessing in PREPROCESSING, f"preprocessing must be one of {PREPROCESSING}"),
            (self.augmentation in AUGMENTATION, f"augmentation must be one of {AUGMENTATION}"),
            (self.lam >= 0, "lambda must be non-negative"),
            (self.lr > 0, "lr must be positive"),
            (self.batch_size >= 1, "batch_size must be positive"),
            (self.epochs >= 0, "epochs must be non-negative"),
            (min(self.step1_epochs, self.step2_epochs, self.step3_epochs) >= 0,
             "step epochs must be non-negative"),
            (self.images >= 2, "images must be >= 2"),
            (self.crop_pad >= 0, "crop_pad must be non-negative"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        for b in self.baseline_kinds:
            if b not in BASELINES:
                raise ConfigError(f"unknown baseline {b!r}; choose from {BASELINES}")
        self.lr_policy  # parse check

    # ---- derived views ----------------------------------------------------------------
    @property
    def baseline_kinds(self) -> list[str]:
        return [b.strip() for b in self.baselines.split(",") if b.strip()]

    @property
    def feed_stages(self):
        stages = [s.strip() for s in self.feed.split(",") if s.strip()]
        return stages or None

    @property
    def subset_classes(self):
        try:
            items = [int(s) for s in self.subset.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"subset must list integers, got {self.subset!r}") from None
        return items or None

    @property
    def lr_policy(self) -> tuple:
        policy = [(0, self.lr)]
        for item in filter(None, (s.strip() for s in self.lr_drops.split(","))):
            try:
                epoch, lr = item.split(":")
                policy.append((int(epoch), float(lr)))
            except ValueError:
                raise ConfigError(f"lr_drops entries look like 'epoch:lr', got {item!r}") from None
        return tuple(policy)

    @property
    def crop(self) -> int:
        """Random-crop padding actually used; 'auto' crops only for the ResNet preset."""
        if self.augmentation == "none":
            return 0
        if self.augmentation == "auto" and self.preset != "resnet20-cifar":
            return 0
        return self.crop_pad

    def schedule(self) -> TrainingSchedule:
        common = dict(lam=self.lam, lr_policy=self.lr_policy, momentum=self.momentum,
                      weight_decay=self.weight_decay, batch_size=self.batch_size, seed=self.seed)
        try:
            if self.epochs:
                return TrainingSchedule.from_total(self.epochs, **common)
            return TrainingSchedule(self.step1_epochs, self.step2_epochs, self.step3_epochs, **common)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELDS[key].type
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind}") from None
    return raw


def canonical_key(key: str) -> str:
    key = key.strip().replace("-", "_")
    key = ALIASES.get(key, key)
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    return key


def parse_config_text(text: str) -> dict[str, object]:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, raw = line.split("=", 1)
        key = canonical_key(key)
        values[key] = _coerce(key, raw)
    return values


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Defaults, then the file, then ``overrides`` (raw strings, e.g. from the CLI)."""
    values = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                values.update(parse_config_text(fh.read()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    for key, raw in (overrides or {}).items():
        key = canonical_key(key)
        values[key] = _coerce(key, str(raw))
    return RunConfig(**values)


def replace(cfg: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(cfg, **changes)

