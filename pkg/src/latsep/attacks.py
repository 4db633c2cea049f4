"""Catalog of poisoning strategies and test-time trigger composition.

Naive strategies relabel every trigger-planted sample to the target class
(cover rate 0). Adaptive strategies additionally plant the trigger into
cover samples that keep their ground-truth labels; the conservatism ratio
eta = rho_c / (rho_c + rho_p) then caps the expected attack success rate at
rho_p / (rho_p + rho_c). Multi-trigger strategies give each poisoned sample
one trigger picked uniformly from the set and may apply several enhanced
triggers jointly at inference time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .poison import PoisonPlan, build_plan
from .triggers import TriggerSpec, apply_trigger, make_trigger

NAIVE_STRATEGIES = {"badnet", "blend", "trojan", "k_triggers"}
ADAPTIVE_STRATEGIES = {"adaptive_blend", "adaptive_k", "adaptive_patch", "adaptive_watermark"}
STRATEGIES = NAIVE_STRATEGIES | ADAPTIVE_STRATEGIES | {"tact", "k_way"}
MULTI_TRIGGER_STRATEGIES = {"k_triggers", "adaptive_k", "k_way"}


@dataclass
class AttackConfig:
    strategy: str
    triggers: list[TriggerSpec]
    target_class: int
    payload_rate: float
    cover_rate: float
    payload_source_classes: list[int] | None = None
    cover_source_classes: list[int] | None = None
    test_trigger_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy '{self.strategy}'")
        if not self.triggers:
            raise ConfigError("attack needs at least one trigger")
        names = [t.name for t in self.triggers]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate trigger names in {names}")
        if self.strategy in MULTI_TRIGGER_STRATEGIES and len(self.triggers) < 2:
            raise ConfigError(f"{self.strategy} requires k >= 2 triggers")
        if self.strategy in ADAPTIVE_STRATEGIES and not self.cover_rate > 0:
            raise ConfigError(f"{self.strategy} requires a positive cover rate")
        if self.strategy in NAIVE_STRATEGIES and self.cover_rate != 0:
            raise ConfigError(f"{self.strategy} is a naive strategy and must have cover rate 0")
        if not self.test_trigger_ids:
            self.test_trigger_ids = list(names)
        unknown = set(self.test_trigger_ids) - set(names)
        if unknown:
            raise ConfigError(f"test_trigger_ids reference unknown triggers: {sorted(unknown)}")

    def trigger_map(self) -> dict[str, TriggerSpec]:
        return {t.name: t for t in self.triggers}

    @property
    def test_triggers(self) -> list[TriggerSpec]:
        m = self.trigger_map()
        return [m[name] for name in self.test_trigger_ids]


def make_attack(config: AttackConfig, labels, seed: int) -> PoisonPlan:
    """Build the strategy's poison plan; every poisoned sample gets exactly
    one trigger chosen uniformly from the strategy's trigger set."""
    payload_src = config.payload_source_classes
    cover_src = config.cover_source_classes
    if config.strategy == "tact":
        if payload_src is None:
            raise ConfigError("tact requires payload_source_classes (the source class)")
        if config.cover_rate > 0 and cover_src is None:
            raise ConfigError("tact with a cover rate requires cover_source_classes")
    return build_plan(
        labels,
        target_class=config.target_class,
        payload_rate=config.payload_rate,
        cover_rate=config.cover_rate,
        trigger_ids=[t.name for t in config.triggers],
        seed=seed,
        payload_source_classes=payload_src,
        cover_source_classes=cover_src,
    )


def make_test_trigger_fn(config: AttackConfig, opacity_override: float | None = None):
    """Inference-time planting: apply each selected trigger, in listed order,
    at its test opacity (or a single override used for opacity sweeps)."""
    specs = config.test_triggers
    if not specs:
        raise ConfigError("no test triggers selected")

    def plant(x: np.ndarray) -> np.ndarray:
        out = x
        for spec in specs:
            alpha = spec.test_opacity if opacity_override is None else opacity_override
            out = apply_trigger(out, spec, alpha)
        return out

    return plant


def expected_asr(config: AttackConfig) -> float:
    """Expected success rate rho_p / (rho_p + rho_c) of the labeling strategy."""
    total = config.payload_rate + config.cover_rate
    if total <= 0:
        raise ConfigError("expected_asr undefined for rho_p + rho_c = 0")
    return config.payload_rate / total


# Paper-style presets: trigger inventory and rates per strategy. Entries are
# (trigger name, train opacity, test opacity).
_PRESETS: dict[str, dict] = {
    "blend": {
        "triggers": [("blend", 0.2, 0.2)],
        "payload_rate": 0.005, "cover_rate": 0.0,
    },
    "badnet": {
        "triggers": [("badnet_patch", 1.0, 1.0)],
        "payload_rate": 0.005, "cover_rate": 0.0,
    },
    "trojan": {
        "triggers": [("trojan_square", 1.0, 1.0)],
        "payload_rate": 0.005, "cover_rate": 0.0,
    },
    "k_triggers": {
        "triggers": [("flame", 0.5, 0.5), ("rings", 0.2, 0.2),
                     ("badnet_patch", 0.5, 1.0), ("trojan_square", 0.3, 1.0)],
        "payload_rate": 0.005, "cover_rate": 0.0,
        "test_trigger_ids": ["badnet_patch", "trojan_square"],
    },
    "tact": {
        "triggers": [("trojan_square", 1.0, 1.0)],
        "payload_rate": 0.005, "cover_rate": 0.005,
        "payload_source_classes": [1], "cover_source_classes": [5, 7],
    },
    "adaptive_blend": {
        "triggers": [("blend", 0.2, 0.2)],
        "payload_rate": 0.005, "cover_rate": 0.005,
    },
    "adaptive_k": {
        "triggers": [("flame", 0.5, 0.5), ("rings", 0.2, 0.2),
                     ("badnet_patch", 0.5, 1.0), ("trojan_square", 0.3, 1.0)],
        "payload_rate": 0.005, "cover_rate": 0.01,
        "test_trigger_ids": ["badnet_patch", "trojan_square"],
    },
    "adaptive_patch": {
        "triggers": [("badnet_patch", 1.0, 1.0)],
        "payload_rate": 0.005, "cover_rate": 0.005,
    },
    "adaptive_watermark": {
        "triggers": [("watermark", 0.2, 0.3)],
        "payload_rate": 0.005, "cover_rate": 0.005,
    },
    "k_way": {
        "triggers": [("pixel_tl", 1.0, 1.0), ("pixel_tr", 1.0, 1.0),
                     ("pixel_bl", 1.0, 1.0), ("pixel_br", 1.0, 1.0)],
        "payload_rate": 0.005, "cover_rate": 0.005,
    },
}


def preset_attack_config(strategy: str, image_shape, target_class: int = 0, **overrides) -> AttackConfig:
    """Build an AttackConfig from the built-in preset for ``strategy``.

    Overrides accept any AttackConfig field; trigger opacities can be
    overridden via ``trigger_opacities={name: (train, test)}``.
    """
    if strategy not in _PRESETS:
        raise ConfigError(f"no preset for strategy '{strategy}'")
    preset = dict(_PRESETS[strategy])
    trigger_defs = preset.pop("triggers")
    opacity_overrides = overrides.pop("trigger_opacities", {})
    triggers = []
    for name, train_a, test_a in trigger_defs:
        if name in opacity_overrides:
            train_a, test_a = opacity_overrides[name]
        triggers.append(make_trigger(name, image_shape, train_a, test_a))
    kwargs = {
        "strategy": strategy,
        "triggers": triggers,
        "target_class": target_class,
        **preset,
        **overrides,
    }
    return AttackConfig(**kwargs)
