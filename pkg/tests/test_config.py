import pytest
import yaml

from latsep.config import DEFAULTS, ExperimentConfig, deep_merge, load_config
from latsep.errors import ConfigError


def test_defaults_fill_missing_sections():
    cfg = ExperimentConfig(data={"seeds": [5]})
    assert cfg.seeds == [5]
    assert cfg.dataset["name"] == DEFAULTS["dataset"]["name"]
    assert cfg.attack["strategy"] == "adaptive_blend"


def test_unknown_top_level_key_rejected():
    with pytest.raises(ConfigError, match="unknown config keys"):
        ExperimentConfig(data={"dataest": {}})


def test_deep_merge_semantics():
    base = {"a": {"x": 1, "y": 2}, "b": [1, 2], "c": 3}
    override = {"a": {"y": 5}, "b": [9]}
    merged = deep_merge(base, override)
    assert merged == {"a": {"x": 1, "y": 5}, "b": [9], "c": 3}
    assert base["a"]["y"] == 2  # no mutation


def test_roundtrip_parse_serialize_parse(tmp_path):
    cfg = ExperimentConfig(data={"seeds": [1, 2], "attack": {"strategy": "blend"}})
    path = tmp_path / "cfg.yaml"
    cfg.save(path)
    again = ExperimentConfig.from_file(path)
    assert again.to_dict() == cfg.to_dict()
    assert again.to_yaml() == cfg.to_yaml()


def test_include_chain_and_override(tmp_path):
    (tmp_path / "base.yaml").write_text(yaml.safe_dump({
        "seeds": [1],
        "attack": {"strategy": "blend", "target_class": 3},
    }))
    (tmp_path / "child.yaml").write_text(yaml.safe_dump({
        "include": "base.yaml",
        "attack": {"strategy": "adaptive_blend"},
    }))
    cfg = load_config(tmp_path / "child.yaml")
    assert cfg.attack["strategy"] == "adaptive_blend"
    assert cfg.attack["target_class"] == 3  # inherited
    assert cfg.seeds == [1]


def test_packaged_presets_load():
    for name in ("synth_smoke", "cifar10_desk", "cifar10_paper", "gtsrb_paper"):
        cfg = ExperimentConfig.from_preset(name)
        assert cfg.output_dir
        assert cfg.seeds


def test_preset_reference_via_load_config():
    cfg = load_config("preset:synth_smoke")
    assert cfg.dataset["name"] == "synth10"


def test_unknown_preset_lists_available():
    with pytest.raises(ConfigError, match="synth_smoke"):
        ExperimentConfig.from_preset("nope")


def test_with_overrides_copies():
    cfg = ExperimentConfig(data={"seeds": [1]})
    out = cfg.with_overrides(seeds=[2, 3], train={"architecture": "vgg16"})
    assert out.seeds == [2, 3]
    assert out.train["architecture"] == "vgg16"
    assert cfg.seeds == [1]
    assert cfg.train["architecture"] == "resnet20"


def test_defense_entries_normalize():
    cfg = ExperimentConfig(data={"defenses": ["scan", {"name": "spectre", "params": {"alpha": 2}}]})
    entries = cfg.defenses
    assert entries[0] == {"name": "scan"}
    assert entries[1]["params"]["alpha"] == 2
