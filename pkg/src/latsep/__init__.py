"""latsep: adaptive backdoor poisoning and latent-separability defense toolkit."""

__version__ = "0.1.0"

from .attacks import AttackConfig, expected_asr, make_attack, make_test_trigger_fn, preset_attack_config
from .cleansers import CleanseResult, activation_clustering, scan, spectral_signature, spectre, synth_latents
from .config import ExperimentConfig, load_config
from .data import ImageDataset, load_dataset, make_synthetic, split_validation, subsample
from .latent import ClassLatents, oracle_svm_profile, partition_by_class, project_pca, project_tsne, separability_score
from .metrics import EvalReport, ReportRow, cover_removed, elimination_rate, sacrifice_rate
from .pipeline import asr_opacity_sweep, run_pipeline, separability_report
from .poison import (
    PlanEntry,
    PoisonedDatasetManifest,
    PoisonPlan,
    Role,
    build_plan,
    dataset_digest,
    materialize,
    verify_manifest,
)
from .training import ModelCheckpoint, TrainConfig, evaluate, extract_latents, train
from .triggers import TriggerSpec, apply_trigger, load_trigger_image, make_trigger

__all__ = [
    "AttackConfig",
    "ClassLatents",
    "CleanseResult",
    "EvalReport",
    "ExperimentConfig",
    "ImageDataset",
    "ModelCheckpoint",
    "PlanEntry",
    "PoisonPlan",
    "PoisonedDatasetManifest",
    "ReportRow",
    "Role",
    "TrainConfig",
    "TriggerSpec",
    "activation_clustering",
    "apply_trigger",
    "asr_opacity_sweep",
    "build_plan",
    "cover_removed",
    "dataset_digest",
    "elimination_rate",
    "evaluate",
    "expected_asr",
    "extract_latents",
    "load_config",
    "load_dataset",
    "load_trigger_image",
    "make_attack",
    "make_synthetic",
    "make_test_trigger_fn",
    "make_trigger",
    "materialize",
    "oracle_svm_profile",
    "partition_by_class",
    "preset_attack_config",
    "project_pca",
    "project_tsne",
    "run_pipeline",
    "sacrifice_rate",
    "scan",
    "separability_report",
    "separability_score",
    "spectral_signature",
    "spectre",
    "split_validation",
    "subsample",
    "synth_latents",
    "train",
    "verify_manifest",
]
