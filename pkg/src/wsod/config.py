"""Flat ``key = value`` run configuration.

Lines are ``section.name = value``; ``#`` starts a comment. Unknown keys are
an error, so a typo cannot silently fall back to a default. Values are parsed
according to the type of the default: tuples are comma separated, optional
integers accept ``none``, a schedule is ``step:rate`` pairs separated by
commas.
"""
from dataclasses import dataclass

from .data import SceneSpec
from .model import ModelConfig
from .nn.optim import OptimizerConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "data.train_size": 500,
    "data.test_size": 100,
    "data.seed": 1,
    "data.test_seed": 2,
    "data.image_size": 64,
    "data.count_range": (1, 4),
    "data.radius_range": (10, 12),
    "data.noise": 12.0,
    "model.channels": (8, 16, 16),
    "model.kernel": 6,
    "model.hidden": 24,
    "model.symmetric_kernels": True,
    "model.scan_style": "serpentine",
    "model.critical_rule": "median",
    "model.merge_radius": 1.0,
    "model.scales": (8.0, 16.0, 32.0),
    "model.ratios": (0.5, 1.0, 2.0),
    "model.head_hidden": 64,
    "model.stages": 3,
    "model.seg_threshold": 0.5,
    "model.couple_iou": 0.5,
    "model.refine_iou": 0.5,
    "model.seed": 0,
    "train.optimizer": "adam",
    "train.lr": 0.01,
    "train.schedule": (),
    "train.batchnorm_step": None,
    "train.square_ratios_step": None,
    "train.epochs": 30,
    "train.batch": 16,
    "train.classifier_backprop": False,
    "train.seed": 0,
    "eval.iou": 0.5,
    "eval.nms": 0.3,
}

_OPTIONAL_INT = {"train.batchnorm_step", "train.square_ratios_step"}
_CHOICES = {
    "model.scan_style": ("serpentine", "raster"),
    "model.critical_rule": ("median", "max"),
    "train.optimizer": ("sgd", "adam"),
}


def _parse_bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_value(key, text):
    text = text.strip()
    default = DEFAULTS[key]
    if key in _OPTIONAL_INT:
        return None if text.lower() in ("", "none") else int(text)
    if key == "train.schedule":
        pairs = []
        for item in filter(None, (t.strip() for t in text.split(","))):
            step, rate = item.split(":")
            pairs.append((int(step), float(rate)))
        return tuple(pairs)
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, tuple):
        kind = type(default[0])
        return tuple(kind(t) for t in text.split(",") if t.strip())
    if isinstance(default, float):
        return float(text)
    if isinstance(default, int):
        return int(text)
    if key in _CHOICES and text not in _CHOICES[key]:
        raise ValueError(f"expected one of {_CHOICES[key]}, got {text!r}")
    return text


def format_value(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{s}:{r}" for s, r in value)
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    values: dict

    @classmethod
    def from_pairs(cls, pairs):
        values = dict(DEFAULTS)
        for key, text in pairs:
            if key not in DEFAULTS:
                raise ConfigError(f"unknown configuration key {key!r}")
            try:
                values[key] = parse_value(key, text)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        cfg = cls(values)
        cfg.optimizer()  # validates the schedule
        return cfg

    @classmethod
    def from_text(cls, text, overrides=()):
        pairs = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
            key, value = line.split("=", 1)
            pairs.append((key.strip(), value))
        return cls.from_pairs(pairs + list(overrides))

    @classmethod
    def from_file(cls, path, overrides=()):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), overrides)

    def __getitem__(self, key):
        return self.values[key]

    def dump(self):
        """Fully resolved configuration, one sorted ``key = value`` line each."""
        return "".join(f"{k} = {format_value(self.values[k])}\n" for k in sorted(self.values))

    def scene_spec(self):
        v = self.values
        return SceneSpec(size=v["data.image_size"], count_range=v["data.count_range"],
                         radius_range=v["data.radius_range"], noise=v["data.noise"])

    def model_config(self):
        v = self.values
        return ModelConfig(image_size=v["data.image_size"], channels=v["model.channels"],
                           kernel=v["model.kernel"], hidden=v["model.hidden"],
                           symmetric_kernels=v["model.symmetric_kernels"], scan_style=v["model.scan_style"],
                           critical_rule=v["model.critical_rule"], merge_radius=v["model.merge_radius"],
                           scales=v["model.scales"], ratios=v["model.ratios"], head_hidden=v["model.head_hidden"],
                           stages=v["model.stages"], seg_threshold=v["model.seg_threshold"],
                           couple_iou=v["model.couple_iou"], refine_iou=v["model.refine_iou"],
                           nms_threshold=v["eval.nms"])

    def optimizer(self):
        v = self.values
        try:
            return OptimizerConfig(v["train.lr"], list(v["train.schedule"]), v["train.batchnorm_step"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def ratios_at(self, step):
        sq = self.values["train.square_ratios_step"]
        if sq is not None and step >= sq:
            return (1.0,)
        return self.values["model.ratios"]
