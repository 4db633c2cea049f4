"""End-to-end orchestration: poison -> train -> defend -> cleanse -> retrain
-> measure, with a resumable run directory.

A run directory is self-describing: a config snapshot, an append-only stage
ledger, the poison manifest, checkpoints, per-defense artifacts, reports and
figures. Re-running with an intact directory skips completed stages and
reproduces the report byte-for-byte.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, make_attack, make_test_trigger_fn, preset_attack_config
from .config import ExperimentConfig
from .data import ImageDataset, load_dataset, split_validation, subsample
from .errors import ConfigError, IntegrityError, StageError
from .latent import partition_by_class, separability_profile
from .metrics import EvalReport, ReportRow, cover_removed, elimination_rate, sacrifice_rate
from .poison import PoisonedDatasetManifest, PoisonPlan, materialize
from .training import ModelCheckpoint, PRESET_TRAIN_CONFIGS, TrainConfig, evaluate, extract_latents, train
from .triggers import load_trigger_image, save_trigger_png

RETRAIN_SEED_OFFSET = 100000  # retrain-after-cleanse uses run seed + this offset

STAGE_EXIT_CODES = {
    "config": 2,
    "data": 3,
    "poison": 10,
    "train": 20,
    "defend": 30,
    "evaluate": 40,
    "report": 50,
    "figures": 60,
    "sweep": 70,
}

CLEANSER_DEFENSES = ("spectral_signature", "activation_clustering", "scan", "spectre",
                     "strip_cleanse")
MODEL_DEFENSES = ("strip_filter", "neural_cleanse", "fine_pruning", "abl")
KNOWN_DEFENSES = CLEANSER_DEFENSES + MODEL_DEFENSES


class RunDir:
    """Filesystem layout + append-only stage ledger with atomic updates."""

    def __init__(self, path):
        self.path = Path(path)
        for sub in ("poison", "checkpoints", "defenses", "reports", "figures"):
            (self.path / sub).mkdir(parents=True, exist_ok=True)
        self.ledger_path = self.path / "stage_ledger.jsonl"

    def ledger(self) -> dict[str, dict]:
        records = {}
        if self.ledger_path.exists():
            for line in self.ledger_path.read_text().splitlines():
                if line.strip():
                    rec = json.loads(line)
                    records[rec["stage"]] = rec
        return records

    def mark_done(self, stage: str, artifacts: list) -> None:
        rec = {
            "stage": stage,
            "status": "done",
            "artifacts": [str(Path(a).relative_to(self.path)) for a in artifacts],
            "completed_at": datetime.now(timezone.utc).isoformat(),
        }
        existing = self.ledger_path.read_text() if self.ledger_path.exists() else ""
        fd, tmp = tempfile.mkstemp(dir=self.path, suffix=".ledger")
        with os.fdopen(fd, "w") as f:
            f.write(existing + json.dumps(rec, sort_keys=True) + "\n")
        os.replace(tmp, self.ledger_path)

    def is_done(self, stage: str) -> bool:
        rec = self.ledger().get(stage)
        if rec is None or rec.get("status") != "done":
            return False
        return all((self.path / a).exists() for a in rec.get("artifacts", []))


# ---------------------------------------------------------------------------
# config resolution helpers
# ---------------------------------------------------------------------------

def resolve_attack(config: ExperimentConfig, image_shape) -> AttackConfig | None:
    a = config.attack
    if a["strategy"] in (None, "none"):
        return None
    overrides = {}
    for key in ("payload_rate", "cover_rate", "payload_source_classes",
                "cover_source_classes", "test_trigger_ids"):
        if a.get(key) is not None:
            overrides[key] = a[key]
    if a.get("trigger_opacities"):
        overrides["trigger_opacities"] = {
            name: tuple(v) for name, v in a["trigger_opacities"].items()
        }
    cfg = preset_attack_config(a["strategy"], image_shape,
                               target_class=a["target_class"], **overrides)
    for spec in a.get("trigger_files", []):
        loaded = load_trigger_image(
            spec["path"], image_shape, name=spec.get("name"),
            train_opacity=spec.get("train_opacity", 1.0),
            test_opacity=spec.get("test_opacity"),
            mask_path=spec.get("mask_path"),
        )
        cfg.triggers = [t for t in cfg.triggers if t.name != loaded.name] + [loaded]
    return cfg


def resolve_train_config(config: ExperimentConfig, seed: int, augment: bool) -> TrainConfig:
    t = config.train
    if t.get("preset"):
        if t["preset"] not in PRESET_TRAIN_CONFIGS:
            raise ConfigError(f"unknown train preset '{t['preset']}'")
        base = PRESET_TRAIN_CONFIGS[t["preset"]].to_dict()
    else:
        base = TrainConfig().to_dict()
    for key in ("architecture", "epochs", "lr", "lr_decay_epochs", "batch_size"):
        if t.get(key) is not None:
            base[key] = t[key]
    base["aug_recipe"] = "gtsrb" if config.dataset["name"] == "gtsrb" else "cifar"
    base["augment"] = augment
    base["seed"] = seed
    return TrainConfig.from_dict(base)


def load_splits(config: ExperimentConfig):
    """Returns (clean train, evaluation test, clean validation).

    The validation split is carved out of the test split and held out of all
    accuracy/ASR evaluation; defenses use it as their clean base.
    """
    d = config.dataset
    kwargs = {"root": d.get("root")}
    if d["name"] == "synth10":
        kwargs.update(synth_seed=d.get("synth_seed", 0))
        train_ds = load_dataset("synth10", train=True, synth_n=d.get("synth_train_n"), **kwargs)
        test_ds = load_dataset("synth10", train=False, synth_n=d.get("synth_test_n"), **kwargs)
    else:
        train_ds = load_dataset(d["name"], train=True, **kwargs)
        test_ds = load_dataset(d["name"], train=False, **kwargs)
    if d.get("train_subset"):
        train_ds = subsample(train_ds, int(d["train_subset"]), seed=0)
    val_size = min(int(d.get("val_size", 2000)), max(len(test_ds) - 1, 0))
    val_ds, eval_test = split_validation(test_ds, n_val=val_size, seed=0)
    return train_ds, eval_test, val_ds


# ---------------------------------------------------------------------------
# pipeline state
# ---------------------------------------------------------------------------

@dataclass
class PipelineState:
    config: ExperimentConfig
    run: RunDir
    device: str = "cpu"
    progress: bool = False
    train_clean: ImageDataset = None
    eval_test: ImageDataset = None
    val: ImageDataset = None
    attack_cfg: AttackConfig | None = None
    poisoned: ImageDataset = None
    manifest: PoisonedDatasetManifest = None
    checkpoints: dict = field(default_factory=dict)  # (seed, aug) -> ModelCheckpoint
    _latents: dict = field(default_factory=dict)

    @property
    def target(self) -> int | None:
        return None if self.attack_cfg is None else self.attack_cfg.target_class

    @property
    def trigger_fn(self):
        return None if self.attack_cfg is None else make_test_trigger_fn(self.attack_cfg)

    def train_latents(self, seed: int, aug: str) -> np.ndarray:
        key = ("train", seed, aug)
        if key not in self._latents:
            cache = self.run.path / "checkpoints" / f"latents_train_s{seed}_{aug}.npy"
            if cache.exists():
                self._latents[key] = np.load(cache)
            else:
                lat = extract_latents(self.checkpoints[(seed, aug)], self.poisoned.images,
                                      device=self.device)
                np.save(cache, lat)
                self._latents[key] = lat
        return self._latents[key]

    def val_latents(self, seed: int, aug: str) -> np.ndarray:
        key = ("val", seed, aug)
        if key not in self._latents:
            self._latents[key] = extract_latents(self.checkpoints[(seed, aug)],
                                                 self.val.images, device=self.device)
        return self._latents[key]


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def _stage_config(state: PipelineState) -> None:
    snapshot = state.run.path / "config.snapshot.yaml"
    rendered = state.config.to_yaml()
    if snapshot.exists():
        if snapshot.read_text() != rendered:
            raise StageError("config", f"run directory {state.run.path} was created with a "
                                       "different config; refusing to resume")
    else:
        snapshot.write_text(rendered)


def _stage_poison(state: PipelineState) -> None:
    run = state.run
    manifest_path = run.path / "poison" / "manifest.json"
    image_shape = state.train_clean.image_shape
    state.attack_cfg = resolve_attack(state.config, image_shape)

    if state.attack_cfg is None:
        plan = PoisonPlan(target_class=0, seed=state.config.attack["poison_seed"],
                          entries=[], payload_rate=0.0, cover_rate=0.0)
        triggers = {}
    else:
        plan = make_attack(state.attack_cfg, state.train_clean.labels,
                           seed=state.config.attack["poison_seed"])
        triggers = state.attack_cfg.trigger_map()

    images, labels, manifest = materialize(
        state.train_clean.images, state.train_clean.labels, plan, triggers,
        dataset_id=state.train_clean.name,
    )
    state.poisoned = ImageDataset(state.train_clean.name + "+poison", images, labels,
                                  state.train_clean.num_classes)

    if manifest_path.exists():
        stored = PoisonedDatasetManifest.load(manifest_path)
        if stored.content_digest != manifest.content_digest:
            raise IntegrityError(
                "existing manifest digest does not match the rematerialized dataset; "
                "the source data or attack config changed"
            )
        state.manifest = stored
        return
    state.manifest = manifest
    manifest.save(manifest_path)
    for spec in triggers.values():
        save_trigger_png(spec, run.path / "poison" / f"trigger_{spec.name}.png")
    run.mark_done("poison", [manifest_path])


def _stage_train(state: PipelineState, seed: int, aug: str) -> ModelCheckpoint:
    run = state.run
    stage = f"train_s{seed}_{aug}"
    path = run.path / "checkpoints" / f"base_s{seed}_{aug}.pt"
    if run.is_done(stage) and path.exists():
        ckpt = ModelCheckpoint.load(path)
        if ckpt.dataset_digest != state.manifest.content_digest:
            raise IntegrityError(f"checkpoint {path.name} was trained on different data")
        return ckpt
    cfg = resolve_train_config(state.config, seed, augment=(aug == "aug"))
    ckpt = train(state.poisoned, cfg, device=state.device, progress=state.progress,
                 eval_set=state.eval_test, digest=state.manifest.content_digest)
    ckpt.save(path)
    run.mark_done(stage, [path])
    return ckpt


def _retrain_on_kept(state: PipelineState, suspected, seed: int, aug: str, tag: str):
    keep = np.setdiff1d(np.arange(len(state.poisoned)), np.asarray(list(suspected), dtype=np.int64))
    cleansed = state.poisoned.subset(keep, name=f"{state.poisoned.name}-minus-{tag}")
    cfg = resolve_train_config(state.config, seed + RETRAIN_SEED_OFFSET, augment=(aug == "aug"))
    ckpt = train(cleansed, cfg, device=state.device, progress=state.progress)
    path = state.run.path / "checkpoints" / f"retrain_{tag}_s{seed}_{aug}.pt"
    ckpt.save(path)
    return ckpt


def _strip_entropy_cache(state: PipelineState, seed: int, aug: str, n_overlays: int):
    from .defenses.strip import strip_entropies

    cache = state.run.path / "defenses" / f"strip_entropies_s{seed}_{aug}.npz"
    if cache.exists():
        blob = np.load(cache)
        return blob["train"], blob["val"]
    model = state.checkpoints[(seed, aug)].model(state.device)
    train_e = strip_entropies(model, state.poisoned.images, state.val.images,
                              n_overlays=n_overlays, seed=seed, device=state.device)
    val_e = strip_entropies(model, state.val.images, state.val.images,
                            n_overlays=n_overlays, seed=seed + 1, device=state.device)
    np.savez(cache, train=train_e, val=val_e)
    return train_e, val_e


def _cleanse(state: PipelineState, name: str, params: dict, seed: int, aug: str):
    """Dispatch a training-set cleanser; returns a CleanseResult."""
    from . import cleansers as C

    latents = state.train_latents(seed, aug)
    labels = state.poisoned.labels
    rho_p = state.attack_cfg.payload_rate if state.attack_cfg else params.get("payload_rate", 0.005)

    if name == "spectral_signature":
        return C.spectral_signature(latents, labels, payload_rate=rho_p,
                                    **{k: v for k, v in params.items() if k != "payload_rate"})
    if name == "activation_clustering":
        return C.activation_clustering(latents, labels, **params)
    if name == "scan":
        scan_params = dict(params)
        if state.config.train["architecture"] == "mobilenetv2":
            scan_params.setdefault("pca_dim", 128)
        return C.scan(latents, labels, state.val_latents(seed, aug), state.val.labels,
                      **scan_params)
    if name == "spectre":
        return C.spectre(latents, labels, payload_rate=rho_p,
                         **{k: v for k, v in params.items() if k != "payload_rate"})
    if name == "strip_cleanse":
        from .defenses.strip import strip_cleanse

        n_overlays = params.get("n_overlays", 64)
        train_e, val_e = _strip_entropy_cache(state, seed, aug, n_overlays)
        return strip_cleanse(train_e, val_e, fpr=params.get("fpr", 0.10))
    raise ConfigError(f"unknown cleanser '{name}'")


def _defend_one(state: PipelineState, defense: dict, seed: int, aug: str) -> ReportRow:
    name = defense["name"]
    params = dict(defense.get("params", {}))
    attack_name = state.attack_cfg.strategy if state.attack_cfg else "none"
    row = ReportRow(attack=attack_name, defense=name, seed=seed, aug=aug)
    ddir = state.run.path / "defenses" / name
    ddir.mkdir(exist_ok=True)
    ckpt = state.checkpoints[(seed, aug)]

    if name in CLEANSER_DEFENSES:
        result = _cleanse(state, name, params, seed, aug)
        with open(ddir / f"cleanse_s{seed}_{aug}.json", "w") as f:
            json.dump(result.to_dict(), f, indent=1, sort_keys=True)
        row.elimination_rate = elimination_rate(state.manifest, result.suspected_indices)
        row.sacrifice_rate = sacrifice_rate(state.manifest, result.suspected_indices)
        row.cover_removed = cover_removed(state.manifest, result.suspected_indices)
        if state.config.evaluation.get("retrain_after_cleanse", True):
            retrained = _retrain_on_kept(state, result.suspected_indices, seed, aug, tag=name)
            metrics = evaluate(retrained, state.eval_test, trigger_fn=state.trigger_fn,
                               target_class=state.target, device=state.device)
            row.asr = metrics.get("asr")
            row.clean_accuracy = metrics["clean_accuracy"]
        return row

    if name == "strip_filter":
        from .defenses.strip import strip_filter, strip_threshold

        n_overlays = params.get("n_overlays", 64)
        _, val_e = _strip_entropy_cache(state, seed, aug, n_overlays)
        threshold = strip_threshold(val_e, fpr=params.get("fpr", 0.10))
        n_inputs = min(int(state.config.evaluation.get("strip_filter_n", 2000)),
                       len(state.eval_test))
        rng = np.random.default_rng([seed, 47])
        pick = np.sort(rng.choice(len(state.eval_test), size=n_inputs, replace=False))
        clean_inputs = state.eval_test.images[pick]
        model = ckpt.model(state.device)
        accepted_clean, ent_clean = strip_filter(model, clean_inputs, threshold,
                                                 state.val.images, n_overlays=n_overlays,
                                                 seed=seed + 2, device=state.device)
        row.sacrifice_rate = float(1.0 - accepted_clean.mean())
        if state.trigger_fn is not None:
            poisoned_inputs = state.trigger_fn(clean_inputs)
            accepted_poison, ent_poison = strip_filter(model, poisoned_inputs, threshold,
                                                       state.val.images, n_overlays=n_overlays,
                                                       seed=seed + 2, device=state.device)
            row.elimination_rate = float(1.0 - accepted_poison.mean())
            from .plotting import entropy_histogram

            entropy_histogram(ent_clean, ent_poison,
                              ddir / f"entropies_s{seed}_{aug}.png", threshold=threshold,
                              title=f"STRIP filter ({attack_name})")
        return row

    if name == "neural_cleanse":
        from .defenses.neural_cleanse import nc_unlearn, neural_cleanse
        from .plotting import trigger_gallery

        nc_params = {k: params[k] for k in ("epochs", "patience", "batch_size", "init_cost",
                                            "success_threshold", "lr", "cost_multiplier")
                     if k in params}
        model = ckpt.model(state.device)
        result = neural_cleanse(model, state.val.images, state.poisoned.num_classes,
                                seed=seed, device=state.device, progress=state.progress,
                                **nc_params)
        report = {
            "mask_norms": {str(c): (v if np.isfinite(v) else None)
                           for c, v in result.mask_norms.items()},
            "anomaly_indices": {str(c): (None if np.isnan(v) else v)
                                for c, v in result.anomaly_indices.items()},
            "selected_target": result.selected_target,
            "true_target": state.target,
            "parameters": result.parameters,
        }
        trigger_gallery(result.masks, result.patterns, ddir)
        if state.target is not None:
            ai = result.anomaly_indices.get(state.target)
            row.anomaly_index = None if ai is None or np.isnan(ai) else float(ai)
        if result.selected_target is not None:
            pool = _clean_train_pool(state, seed,
                                     state.config.evaluation.get("nc_unlearn_pool", 5000))
            unlearned = nc_unlearn(model, result.masks[result.selected_target],
                                   result.patterns[result.selected_target],
                                   pool.images, pool.labels,
                                   seed=seed, device=state.device,
                                   epochs=params.get("unlearn_epochs", 1),
                                   lr=params.get("unlearn_lr", 1e-2))
            metrics = evaluate(unlearned, state.eval_test, trigger_fn=state.trigger_fn,
                               target_class=state.target, device=state.device)
            report["unlearned"] = True
        else:
            metrics = evaluate(ckpt, state.eval_test, trigger_fn=state.trigger_fn,
                               target_class=state.target, device=state.device)
            report["unlearned"] = False
            report["note"] = "no class met the selection rule; model unchanged"
        row.asr = metrics.get("asr")
        row.clean_accuracy = metrics["clean_accuracy"]
        with open(ddir / f"report_s{seed}_{aug}.json", "w") as f:
            json.dump(report, f, indent=1, sort_keys=True)
        return row

    if name == "fine_pruning":
        from .defenses.fine_pruning import fine_prune

        model = ckpt.model(state.device)
        pruned, info = fine_prune(model, state.val.images, state.val.labels,
                                  max_ca_drop=params.get("max_ca_drop", 0.10),
                                  device=state.device)
        metrics = evaluate(pruned, state.eval_test, trigger_fn=state.trigger_fn,
                           target_class=state.target, device=state.device)
        row.asr = metrics.get("asr")
        row.clean_accuracy = metrics["clean_accuracy"]
        with open(ddir / f"report_s{seed}_{aug}.json", "w") as f:
            json.dump(info, f, indent=1, sort_keys=True)
        return row

    if name == "abl":
        from .defenses.abl import abl

        abl_params = {k: params[k] for k in ("isolation_count", "isolation_epochs",
                                             "isolation_lr", "flooding", "finetune_epochs",
                                             "finetune_lr", "finetune_decay_epoch",
                                             "unlearn_epochs", "unlearn_lr", "batch_size")
                      if k in params}
        model, result = abl(state.poisoned, architecture=state.config.train["architecture"],
                            seed=seed, device=state.device, manifest=state.manifest,
                            augment=(resolve_train_config(state.config, seed, aug == "aug").aug_recipe
                                     if aug == "aug" else None),
                            **abl_params)
        metrics = evaluate(model, state.eval_test, trigger_fn=state.trigger_fn,
                           target_class=state.target, device=state.device)
        row.asr = metrics.get("asr")
        row.clean_accuracy = metrics["clean_accuracy"]
        row.isolation_precision = result.isolation_precision
        with open(ddir / f"report_s{seed}_{aug}.json", "w") as f:
            json.dump({"isolated_indices": result.isolated_indices.tolist(),
                       "isolation_precision": result.isolation_precision,
                       "parameters": result.parameters}, f, indent=1, sort_keys=True)
        return row

    raise ConfigError(f"unknown defense '{name}'")


def _clean_train_pool(state: PipelineState, seed: int, size: int) -> ImageDataset:
    planted = {int(e.index) for e in state.manifest.plan.entries}
    available = np.array([i for i in range(len(state.train_clean)) if i not in planted])
    rng = np.random.default_rng([seed, 31])
    pick = np.sort(rng.choice(available, size=min(size, len(available)), replace=False))
    return state.train_clean.subset(pick, name="clean-pool")


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def prepare_poisoned(config: ExperimentConfig, device: str = "cpu") -> PipelineState:
    """Run the config/data/poison stages only and return the live state."""
    state = PipelineState(config=config, run=RunDir(config.output_dir), device=device)
    try:
        _stage_config(state)
    except Exception as exc:
        raise StageError("config", str(exc)) from exc
    try:
        state.train_clean, state.eval_test, state.val = load_splits(config)
    except StageError:
        raise
    except Exception as exc:
        raise StageError("data", str(exc)) from exc
    try:
        _stage_poison(state)
    except StageError:
        raise
    except Exception as exc:
        raise StageError("poison", str(exc)) from exc
    return state


def export_poisoned_npz(state: PipelineState, path=None) -> str:
    """Export the materialized poisoned training set (8-bit quantized) plus
    labels and roles; the manifest remains the canonical record."""
    path = Path(path) if path else state.run.path / "poison" / "poisoned_train.npz"
    images8 = np.clip(state.poisoned.images * 255.0 + 0.5, 0, 255).astype(np.uint8)
    roles = np.full(len(state.poisoned), "clean", dtype="U7")
    for e in state.manifest.plan.entries:
        roles[e.index] = e.role.value
    np.savez_compressed(path, images=images8, labels=state.poisoned.labels, roles=roles,
                        digest=np.array(state.manifest.content_digest))
    return str(path)


def figures_from_run(config: ExperimentConfig, device: str = "cpu") -> None:
    """Regenerate latent figures for an existing run directory."""
    state = prepare_poisoned(config, device=device)
    seed = config.seeds[0]
    found = False
    for aug in config.train.get("augment_variants", ["aug"]):
        path = state.run.path / "checkpoints" / f"base_s{seed}_{aug}.pt"
        if not path.exists():
            continue
        state.checkpoints[(seed, aug)] = ModelCheckpoint.load(path)
        found = True
    if not found:
        raise StageError(
            "train",
            f"no base checkpoints under {state.run.path / 'checkpoints'}; "
            "run `latsep train` (or `latsep run`) for this config first",
        )
    _figures_stage(state)

def run_pipeline(config: ExperimentConfig, device: str = "cpu", progress: bool = False,
                 stop_after: str | None = None) -> EvalReport:
    """Execute (or resume) the full experiment described by ``config``.

    ``stop_after`` ends the run early after the named stage (one of
    poison/train/defend), which backs the narrower CLI subcommands.
    """
    state = PipelineState(config=config, run=RunDir(config.output_dir),
                          device=device, progress=progress)
    report_path = state.run.path / "reports" / "report.json"

    stage = "config"
    try:
        _stage_config(state)

        stage = "data"
        state.train_clean, state.eval_test, state.val = load_splits(config)

        stage = "poison"
        _stage_poison(state)
        if stop_after == "poison":
            return EvalReport(meta={"stopped_after": "poison",
                                    "manifest_digest": state.manifest.content_digest})

        stage = "train"
        report = EvalReport(meta={
            "run_name": config.data.get("run_name"),
            "dataset": config.dataset["name"],
            "attack": state.attack_cfg.strategy if state.attack_cfg else "none",
            "manifest_digest": state.manifest.content_digest,
            "seeds": config.seeds,
            "aug_selection_rule": "lower post-defense ASR, ties broken by higher clean accuracy",
        })
        aug_variants = list(config.train.get("augment_variants", ["aug"]))
        for seed in config.seeds:
            for aug in aug_variants:
                ckpt = _stage_train(state, seed, aug)
                state.checkpoints[(seed, aug)] = ckpt
                metrics = evaluate(ckpt, state.eval_test, trigger_fn=state.trigger_fn,
                                   target_class=state.target, device=state.device)
                report.add(ReportRow(
                    attack=state.attack_cfg.strategy if state.attack_cfg else "none",
                    defense="without_defense", seed=seed, aug=aug,
                    asr=metrics.get("asr"), clean_accuracy=metrics["clean_accuracy"],
                ))

        if stop_after == "train":
            return report

        stage = "defend"
        for defense in config.defenses:
            name = defense["name"] if isinstance(defense, dict) else defense
            if name not in KNOWN_DEFENSES:
                raise ConfigError(f"unknown defense '{name}' (known: {sorted(KNOWN_DEFENSES)})")
            for seed in config.seeds:
                for aug in aug_variants:
                    row_cache = state.run.path / "defenses" / name / f"row_s{seed}_{aug}.json"
                    if row_cache.exists():
                        with open(row_cache) as f:
                            report.add(ReportRow(**json.load(f)))
                        continue
                    row = _defend_one(state, defense if isinstance(defense, dict) else {"name": name},
                                      seed, aug)
                    row_cache.parent.mkdir(exist_ok=True)
                    from dataclasses import asdict

                    with open(row_cache, "w") as f:
                        json.dump(asdict(row), f, indent=1, sort_keys=True)
                    state.run.mark_done(f"defend_{name}_s{seed}_{aug}", [row_cache])
                    report.add(row)

        if stop_after == "defend":
            return report

        stage = "sweep"
        sweep = config.evaluation.get("opacity_sweep") or []
        if sweep and state.attack_cfg is not None:
            _sweep_stage(state, sweep)

        stage = "report"
        report.select_better_aug()
        report.save(report_path)
        csv_path = state.run.path / "reports" / "report.csv"
        csv_path.write_text(report.to_csv())
        (state.run.path / "reports" / "report.txt").write_text(report.to_text())
        state.run.mark_done("report", [report_path, csv_path])

        stage = "figures"
        if config.evaluation.get("figures", True):
            _figures_stage(state)
            state.run.mark_done("figures", [])
    except StageError:
        raise
    except Exception as exc:
        _write_partial_report(state, stage, exc)
        raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
    return report


def _write_partial_report(state: PipelineState, stage: str, exc: Exception) -> None:
    try:
        marker = state.run.path / "reports" / "partial_report.json"
        with open(marker, "w") as f:
            json.dump({"failed_stage": stage, "error": f"{type(exc).__name__}: {exc}"},
                      f, indent=1, sort_keys=True)
    except OSError:
        pass


def _sweep_stage(state: PipelineState, opacities) -> None:
    seed = state.config.seeds[0]
    aug = list(state.config.train.get("augment_variants", ["aug"]))[0]
    model = state.checkpoints[(seed, aug)].model(state.device)
    curve = asr_opacity_sweep(model, state.attack_cfg, opacities, state.eval_test,
                              device=state.device)
    out = state.run.path / "reports" / "asr_opacity.csv"
    lines = ["opacity,asr"] + [f"{a},{v:.6f}" for a, v in curve]
    out.write_text("\n".join(lines) + "\n")
    from .plotting import asr_opacity_curve

    asr_opacity_curve([a for a, _ in curve], [v for _, v in curve],
                      state.run.path / "figures" / "asr_opacity.png",
                      title=f"{state.attack_cfg.strategy}: inference-opacity sweep")


def _figures_stage(state: PipelineState) -> None:
    seed = state.config.seeds[0]
    for aug in state.config.train.get("augment_variants", ["aug"]):
        ckpt = state.checkpoints.get((seed, aug))
        if ckpt is None:
            continue
        separability_report(
            ckpt, state.manifest, state.poisoned,
            out_dir=state.run.path / "figures",
            tag=f"s{seed}_{aug}",
            classes=state.config.evaluation.get("figure_classes"),
            max_tsne_rows=state.config.evaluation.get("max_tsne_rows", 3000),
            device=state.device,
            latents=state.train_latents(seed, aug),
        )


def asr_opacity_sweep(model, attack_cfg: AttackConfig, opacities, test_set: ImageDataset,
                      device: str = "cpu") -> list[tuple[float, float]]:
    """ASR at each inference-time opacity, using the attack's test triggers."""
    curve = []
    for alpha in opacities:
        fn = make_test_trigger_fn(attack_cfg, opacity_override=float(alpha))
        metrics = evaluate(model, test_set, trigger_fn=fn,
                           target_class=attack_cfg.target_class, device=device)
        curve.append((float(alpha), metrics["asr"]))
    return curve


def separability_report(checkpoint: ModelCheckpoint, manifest: PoisonedDatasetManifest,
                        dataset: ImageDataset, out_dir, tag: str = "", classes=None,
                        max_tsne_rows: int = 3000, device: str = "cpu",
                        latents: np.ndarray | None = None) -> dict:
    """Per-class separability profiles plus figures for a trained checkpoint.

    The checkpoint must have been trained on exactly the manifest's dataset
    (digest-checked).
    """
    from .plotting import scatter_projection, signed_distance_histogram

    if checkpoint.dataset_digest != manifest.content_digest:
        raise IntegrityError("checkpoint digest does not match manifest digest")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if latents is None:
        latents = extract_latents(checkpoint, dataset.images, device=device)
    parts = partition_by_class(latents, dataset.labels, manifest)
    wanted = set(classes) if classes else set(parts)
    suffix = f"_{tag}" if tag else ""

    profiles = {}
    bundle = {}
    for c, cl in sorted(parts.items()):
        if c not in wanted:
            continue
        profile = separability_profile(cl, seed=0, max_tsne_rows=max_tsne_rows)
        profiles[c] = profile
        planted = cl.planted_mask
        scatter_projection(profile.pca_coords, planted,
                           out_dir / f"pca_class{c}{suffix}.png",
                           title=f"PCA class {c}")
        if profile.tsne_coords is not None:
            rows = profile.params.get("tsne_rows", np.arange(len(planted)))
            scatter_projection(profile.tsne_coords, planted[rows],
                               out_dir / f"tsne_class{c}{suffix}.png",
                               title=f"t-SNE class {c}")
        if profile.svm_signed_distances is not None:
            signed_distance_histogram(profile.svm_signed_distances, planted,
                                      out_dir / f"svm_hist_class{c}{suffix}.png",
                                      title=f"oracle distances class {c}")
        bundle[str(c)] = {
            "counts": profile.counts,
            "silhouette": profile.silhouette,
            "svm_train_accuracy": profile.svm_train_accuracy,
            "low_confidence": profile.low_confidence,
            "params": {k: v for k, v in profile.params.items() if k != "tsne_rows"},
        }
    with open(out_dir / f"separability{suffix}.json", "w") as f:
        json.dump(bundle, f, indent=1, sort_keys=True, default=float)
    return profiles
