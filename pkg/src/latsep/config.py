"""Experiment configuration: YAML files with include/override preset support.

A config file may name a base via ``include:`` (a relative path or
``preset:<name>`` for a packaged preset); its own keys then deep-merge over
the base (dicts merge recursively, everything else replaces). The resolved
config is a plain dict snapshot, so parse -> serialize -> parse is the
identity.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .errors import ConfigError

DEFAULTS: dict = {
    "run_name": None,
    "output_dir": "runs/latest",
    "dataset": {
        "name": "synth10",
        "root": None,
        "train_subset": None,
        "val_size": 2000,
        "synth_train_n": 6000,
        "synth_test_n": 1500,
        "synth_seed": 0,
    },
    "attack": {
        "strategy": "adaptive_blend",
        "target_class": 0,
        "poison_seed": 0,
        "payload_rate": None,
        "cover_rate": None,
        "payload_source_classes": None,
        "cover_source_classes": None,
        "test_trigger_ids": None,
        "trigger_opacities": {},
        "trigger_files": [],
    },
    "train": {
        "preset": "desk",
        "architecture": "resnet20",
        "epochs": None,
        "lr": None,
        "lr_decay_epochs": None,
        "batch_size": None,
        "augment_variants": ["aug", "no_aug"],
    },
    "defenses": [],
    "seeds": [666],
    "evaluation": {
        "figures": True,
        "figure_classes": None,
        "max_tsne_rows": 3000,
        "opacity_sweep": [],
        "retrain_after_cleanse": True,
        "strip_filter_n": 2000,
        "nc_unlearn_pool": 5000,
    },
}

_SECTION_KEYS = set(DEFAULTS)


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _load_yaml_with_includes(path: Path, _depth: int = 0) -> dict:
    if _depth > 8:
        raise ConfigError(f"include chain too deep at {path}")
    try:
        with open(path) as f:
            raw = yaml.safe_load(f) or {}
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping: {path}")
    include = raw.pop("include", None)
    if include is None:
        return raw
    if isinstance(include, str) and include.startswith("preset:"):
        base = load_preset_dict(include.split(":", 1)[1])
    else:
        base_path = (path.parent / include).resolve()
        base = _load_yaml_with_includes(base_path, _depth + 1)
    return deep_merge(base, raw)


def load_preset_dict(name: str) -> dict:
    ref = resources.files("latsep").joinpath("presets", f"{name}.yaml")
    if not ref.is_file():
        available = sorted(p.name[:-5] for p in resources.files("latsep").joinpath("presets").iterdir()
                           if p.name.endswith(".yaml"))
        raise ConfigError(f"unknown preset '{name}' (available: {available})")
    raw = yaml.safe_load(ref.read_text()) or {}
    include = raw.pop("include", None)
    if include is not None:
        if not (isinstance(include, str) and include.startswith("preset:")):
            raise ConfigError(f"packaged preset '{name}' may only include other presets")
        raw = deep_merge(load_preset_dict(include.split(":", 1)[1]), raw)
    return raw


@dataclass
class ExperimentConfig:
    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __post_init__(self):
        unknown = set(self.data) - _SECTION_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        self.data = deep_merge(DEFAULTS, self.data)

    # section accessors
    @property
    def dataset(self) -> dict:
        return self.data["dataset"]

    @property
    def attack(self) -> dict:
        return self.data["attack"]

    @property
    def train(self) -> dict:
        return self.data["train"]

    @property
    def defenses(self) -> list[dict]:
        return [d if isinstance(d, dict) else {"name": d} for d in self.data["defenses"]]

    @property
    def seeds(self) -> list[int]:
        return [int(s) for s in self.data["seeds"]]

    @property
    def evaluation(self) -> dict:
        return self.data["evaluation"]

    @property
    def output_dir(self) -> str:
        return self.data["output_dir"]

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    def save(self, path) -> None:
        Path(path).write_text(self.to_yaml())

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(data=d)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls(data=_load_yaml_with_includes(Path(path)))

    @classmethod
    def from_preset(cls, name: str) -> "ExperimentConfig":
        return cls(data=load_preset_dict(name))

    def with_overrides(self, **sections) -> "ExperimentConfig":
        """Copy with section-level overrides, e.g. with_overrides(seeds=[1])."""
        merged = deep_merge(self.data, sections)
        return ExperimentConfig(data=merged)


def load_config(source) -> ExperimentConfig:
    """Load a config from a YAML path or a ``preset:<name>`` reference."""
    if isinstance(source, str) and source.startswith("preset:"):
        return ExperimentConfig.from_preset(source.split(":", 1)[1])
    return ExperimentConfig.from_file(source)
