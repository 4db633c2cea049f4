import json
from pathlib import Path

import numpy as np
import pytest

from latsep.config import ExperimentConfig
from latsep.errors import IntegrityError, StageError
from latsep.metrics import EvalReport
from latsep.pipeline import (
    RunDir,
    asr_opacity_sweep,
    export_poisoned_npz,
    prepare_poisoned,
    resolve_attack,
    resolve_train_config,
    run_pipeline,
    separability_report,
)


def micro_config(output_dir, **over):
    data = {
        "output_dir": str(output_dir),
        "dataset": {"name": "synth10", "synth_train_n": 400, "synth_test_n": 160, "val_size": 60},
        "attack": {"strategy": "adaptive_blend", "payload_rate": 0.05, "cover_rate": 0.05},
        "train": {"preset": None, "epochs": 2, "lr_decay_epochs": [1], "batch_size": 64,
                  "augment_variants": ["aug"]},
        "defenses": [{"name": "spectral_signature"}, {"name": "scan"}],
        "seeds": [1],
        "evaluation": {"opacity_sweep": [0.0, 0.2], "strip_filter_n": 40,
                       "max_tsne_rows": 150},
    }
    for key, value in over.items():
        data[key] = value
    return ExperimentConfig(data=data)


@pytest.fixture(scope="module")
def micro_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "micro"
    config = micro_config(out)
    report = run_pipeline(config)
    return config, report, Path(out)


@pytest.mark.slow
def test_run_dir_is_self_describing(micro_run):
    config, report, out = micro_run
    assert (out / "config.snapshot.yaml").exists()
    assert (out / "stage_ledger.jsonl").exists()
    manifest = json.loads((out / "poison" / "manifest.json").read_text())
    assert manifest["content_digest"]
    assert (out / "reports" / "report.json").exists()
    assert (out / "reports" / "report.csv").exists()
    assert (out / "reports" / "report.txt").exists()


@pytest.mark.slow
def test_report_rows_cover_all_defenses(micro_run):
    config, report, out = micro_run
    defenses = {r.defense for r in report.rows}
    assert defenses == {"without_defense", "spectral_signature", "scan"}
    wd = [r for r in report.rows if r.defense == "without_defense"][0]
    assert wd.asr is not None and wd.clean_accuracy is not None
    ss = [r for r in report.rows if r.defense == "spectral_signature"][0]
    assert ss.elimination_rate is not None
    assert ss.sacrifice_rate is not None
    assert ss.asr is not None  # retrained and re-evaluated


@pytest.mark.slow
def test_figures_and_sweep_emitted(micro_run):
    config, report, out = micro_run
    figs = list((out / "figures").glob("pca_class*.png"))
    assert len(figs) == 10
    assert (out / "figures" / "asr_opacity.png").exists()
    sweep = (out / "reports" / "asr_opacity.csv").read_text().splitlines()
    assert sweep[0] == "opacity,asr"
    assert len(sweep) == 3
    assert any((out / "figures").glob("svm_hist_class0_*.png"))
    assert (out / "figures").glob("separability_*.json")


@pytest.mark.slow
def test_rerun_skips_training_and_reproduces_report(micro_run):
    config, report, out = micro_run
    ckpt = out / "checkpoints" / "base_s1_aug.pt"
    before_bytes = (out / "reports" / "report.json").read_bytes()
    mtime = ckpt.stat().st_mtime_ns
    run_pipeline(config)
    assert ckpt.stat().st_mtime_ns == mtime  # training skipped
    assert (out / "reports" / "report.json").read_bytes() == before_bytes


@pytest.mark.slow
def test_resume_with_changed_config_refused(micro_run, tmp_path):
    config, report, out = micro_run
    changed = micro_config(out, seeds=[2])
    with pytest.raises(StageError) as err:
        run_pipeline(changed)
    assert err.value.stage == "config"


@pytest.mark.slow
def test_sweep_consistency_with_evaluate(micro_run):
    config, report, out = micro_run
    from latsep.training import ModelCheckpoint, evaluate, predict

    state = prepare_poisoned(micro_config(out))
    ckpt = ModelCheckpoint.load(out / "checkpoints" / "base_s1_aug.pt")
    model = ckpt.model()
    attack_cfg = resolve_attack(state.config, state.train_clean.image_shape)
    curve = dict(asr_opacity_sweep(model, attack_cfg, [0.0, 0.2], state.eval_test))

    # opacity = train opacity reproduces evaluate()'s ASR exactly
    from latsep.attacks import make_test_trigger_fn

    base = evaluate(model, state.eval_test, trigger_fn=make_test_trigger_fn(attack_cfg),
                    target_class=attack_cfg.target_class)
    assert curve[0.2] == pytest.approx(base["asr"])
    # opacity 0 equals the baseline misclassification-into-target rate
    keep = state.eval_test.labels != attack_cfg.target_class
    pred = predict(model, state.eval_test.images[keep])
    assert curve[0.0] == pytest.approx(float((pred == attack_cfg.target_class).mean()))


@pytest.mark.slow
def test_no_poison_run(tmp_path):
    config = micro_config(tmp_path / "nopoison",
                          attack={"strategy": "none"},
                          defenses=[{"name": "spectral_signature"}],
                          evaluation={"opacity_sweep": [], "figures": False})
    report = run_pipeline(config)
    manifest = json.loads((tmp_path / "nopoison" / "poison" / "manifest.json").read_text())
    assert manifest["entries"] == []
    wd = [r for r in report.rows if r.defense == "without_defense"][0]
    assert wd.asr is None
    ss = [r for r in report.rows if r.defense == "spectral_signature"][0]
    assert ss.elimination_rate is None  # undefined without payload
    assert ss.sacrifice_rate is not None


def test_poison_only_and_export(tmp_path):
    config = micro_config(tmp_path / "poisononly", evaluation={"figures": False})
    state = prepare_poisoned(config)
    path = export_poisoned_npz(state)
    blob = np.load(path)
    assert blob["images"].dtype == np.uint8
    assert len(blob["labels"]) == 400
    assert (np.asarray(blob["roles"]) == "payload").sum() == len(state.manifest.payload_indices)
    assert str(blob["digest"]) == state.manifest.content_digest


def test_separability_report_digest_check(tmp_path):
    from latsep.data import make_synthetic
    from latsep.poison import PoisonPlan, PoisonedDatasetManifest
    from latsep.training import TrainConfig, train

    ds = make_synthetic(200, seed=31)
    ckpt = train(ds, TrainConfig(epochs=1, lr_decay_epochs=(), batch_size=64, augment=False))
    manifest = PoisonedDatasetManifest("x", 200, PoisonPlan(0, 0, [], 0.0, 0.0), "not-the-digest")
    with pytest.raises(IntegrityError):
        separability_report(ckpt, manifest, ds, out_dir=tmp_path)


def test_resolve_train_config_presets():
    cfg = ExperimentConfig(data={"train": {"preset": "cifar10_full"},
                                 "dataset": {"name": "cifar10"}})
    tc = resolve_train_config(cfg, seed=3, augment=True)
    assert tc.epochs == 200
    assert tc.lr_decay_epochs == (100, 150)
    assert tc.seed == 3 and tc.augment

    gt = ExperimentConfig(data={"train": {"preset": "gtsrb_full"}, "dataset": {"name": "gtsrb"}})
    tg = resolve_train_config(gt, seed=0, augment=False)
    assert tg.epochs == 100 and tg.lr_decay_epochs == (40, 80)
    assert tg.aug_recipe == "gtsrb"

    desk = resolve_train_config(ExperimentConfig(data={}), seed=0, augment=True)
    assert desk.epochs == 30 and desk.lr_decay_epochs == (15, 25)


def test_resolve_attack_none():
    cfg = ExperimentConfig(data={"attack": {"strategy": "none"}})
    assert resolve_attack(cfg, (32, 32, 3)) is None


def test_resolve_attack_custom_trigger_file(tmp_path):
    from latsep.triggers import make_trigger, save_trigger_png

    png = tmp_path / "blend.png"
    save_trigger_png(make_trigger("rings", (32, 32, 3), 1.0), png)
    cfg = ExperimentConfig(data={"attack": {
        "strategy": "adaptive_blend",
        "trigger_files": [{"name": "blend", "path": str(png),
                           "train_opacity": 0.15, "test_opacity": 0.3}],
    }})
    attack = resolve_attack(cfg, (32, 32, 3))
    spec = attack.trigger_map()["blend"]
    assert spec.train_opacity == 0.15 and spec.test_opacity == 0.3
    assert spec.pattern.shape == (32, 32, 3)


def test_resolve_attack_opacity_override():
    cfg = ExperimentConfig(data={"attack": {
        "strategy": "adaptive_blend",
        "trigger_opacities": {"blend": [0.2, 0.25]},
    }})
    attack = resolve_attack(cfg, (32, 32, 3))
    assert attack.trigger_map()["blend"].test_opacity == 0.25


def test_run_dir_ledger_atomicity(tmp_path):
    run = RunDir(tmp_path / "run")
    artifact = run.path / "poison" / "manifest.json"
    artifact.write_text("{}")
    run.mark_done("poison", [artifact])
    assert run.is_done("poison")
    artifact.unlink()
    assert not run.is_done("poison")  # artifacts must exist, not just the record
    run.mark_done("other", [])
    assert set(run.ledger()) == {"poison", "other"}
