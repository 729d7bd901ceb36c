"""Experiment configuration loaded from JSON.

Top-level keys: ``seed``, ``paths`` and the sections ``augment``, ``train``,
``model``, ``quantify`` and ``eval``. Unknown keys at any level raise
:class:`ConfigError`. ``paths.data`` is either a directory written by
``fibcap phantom`` or ``suite:<name>`` to render a standard phantom suite.
"""

import json
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


SECTION_KEYS = {
    "paths": {"data", "pretrain_data", "test_data", "runs", "reports"},
    "augment": {"offsets", "flip_prob", "scale_prob", "shift_prob", "factor", "seed"},
    "train": {"lr", "adam_eps", "weight_decay", "l2_reg", "max_epochs", "batch_size", "patience", "beta1",
              "beta2", "crop_width", "min_delta", "folds", "ratios", "enabled_augment"},
    "model": {"in_channels", "init_filters", "levels", "dropout", "groups", "blocks_down"},
    "quantify": {"tcfa_threshold_um", "radial_spacing_um", "frame_spacing_mm", "catheter_offset_um"},
    "eval": {"threshold", "radius", "connectivity", "depth"},
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    paths: dict = field(default_factory=dict)
    augment: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    quantify: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    source: Path = None

    @classmethod
    def from_dict(cls, d, source=None):
        if not isinstance(d, dict):
            raise ConfigError("config root must be an object")
        known = {f.name for f in fields(cls)} - {"source"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for name, allowed in SECTION_KEYS.items():
            sec = d.get(name, {})
            if not isinstance(sec, dict):
                raise ConfigError(f"[{name}] must be an object")
            bad = set(sec) - allowed
            if bad:
                raise ConfigError(f"unknown [{name}] keys: {sorted(bad)}")
        cfg = cls(**{k: v for k, v in d.items()}, source=source)
        if not isinstance(cfg.seed, int):
            raise ConfigError("seed must be an integer")
        return cfg

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        return cls.from_dict(d, source=path)

    def resolve(self, key):
        """Path value of ``paths.<key>`` relative to the config file, or None."""
        v = self.paths.get(key)
        if v is None or str(v).startswith("suite:"):
            return v
        p = Path(v)
        if not p.is_absolute() and self.source is not None:
            p = self.source.parent / p
        return p

    def check_paths(self, *keys):
        """Fail early when an input path does not exist."""
        for key in keys:
            p = self.resolve(key)
            if p is None:
                raise ConfigError(f"paths.{key} is required")
            if not isinstance(p, str) and not p.exists():
                raise ConfigError(f"paths.{key} does not exist: {p}")
