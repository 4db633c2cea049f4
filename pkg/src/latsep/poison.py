"""Poison plan construction, dataset materialization, and manifests.

A plan fixes, per poisoned sample: its index, its role (payload samples are
relabeled to the target class; cover samples keep their ground-truth label),
and which trigger it carries. Rates are realized as exact counts
round_half_up(rate * n) sampled without replacement, so a plan - and the
dataset materialized from it - is fully determined by (labels, config, seed).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import IntegrityError, PlanningError
from .triggers import TriggerSpec, apply_trigger

PAYLOAD_STREAM = 0
COVER_STREAM = 1


class Role(str, Enum):
    PAYLOAD = "payload"
    COVER = "cover"


def round_half_up(x: float) -> int:
    """Budget rounding used everywhere a fractional count is realized."""
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class PlanEntry:
    index: int
    role: Role
    trigger_id: str
    assigned_label: int


@dataclass
class PoisonPlan:
    target_class: int
    seed: int
    entries: list[PlanEntry]
    payload_rate: float
    cover_rate: float

    @property
    def payload_indices(self) -> np.ndarray:
        return np.array([e.index for e in self.entries if e.role is Role.PAYLOAD], dtype=np.int64)

    @property
    def cover_indices(self) -> np.ndarray:
        return np.array([e.index for e in self.entries if e.role is Role.COVER], dtype=np.int64)

    def validate(self, n: int, labels=None) -> None:
        indices = [e.index for e in self.entries]
        if len(set(indices)) != len(indices):
            raise PlanningError("plan entries contain duplicate indices")
        if indices and (min(indices) < 0 or max(indices) >= n):
            raise PlanningError("plan index out of range")
        expected_payload = round_half_up(self.payload_rate * n)
        expected_cover = round_half_up(self.cover_rate * n)
        if len(self.payload_indices) != expected_payload:
            raise PlanningError(
                f"payload count {len(self.payload_indices)} != round({self.payload_rate}*{n})"
            )
        if len(self.cover_indices) != expected_cover:
            raise PlanningError(
                f"cover count {len(self.cover_indices)} != round({self.cover_rate}*{n})"
            )
        for e in self.entries:
            if e.role is Role.PAYLOAD and e.assigned_label != self.target_class:
                raise PlanningError(f"payload entry {e.index} not labeled to target class")
            if labels is not None and e.role is Role.COVER and e.assigned_label != int(labels[e.index]):
                raise PlanningError(f"cover entry {e.index} does not keep its ground-truth label")


def _pick(rng: np.random.Generator, pool: np.ndarray, count: int, what: str) -> np.ndarray:
    if count > len(pool):
        raise PlanningError(f"need {count} {what} samples but only {len(pool)} are eligible")
    return rng.choice(pool, size=count, replace=False)


def build_plan(
    labels,
    target_class: int,
    payload_rate: float,
    cover_rate: float,
    trigger_ids,
    seed: int,
    payload_source_classes=None,
    cover_source_classes=None,
) -> PoisonPlan:
    """Randomly select disjoint payload/cover index sets and assign triggers.

    Payload selection and trigger assignment consume a dedicated RNG stream,
    so adding cover samples never perturbs which samples become payload:
    the payload half of an adaptive plan equals the plan a naive attack with
    the same payload rate and seed would produce.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if payload_rate < 0 or cover_rate < 0 or payload_rate + cover_rate >= 1:
        raise PlanningError(f"rates must satisfy 0 <= rho_p + rho_c < 1, got {payload_rate}+{cover_rate}")
    trigger_ids = list(trigger_ids)
    if not trigger_ids:
        raise PlanningError("at least one trigger id is required")

    n_payload = round_half_up(payload_rate * n)
    n_cover = round_half_up(cover_rate * n)

    if payload_source_classes is not None:
        payload_pool = np.flatnonzero(np.isin(labels, list(payload_source_classes)))
        if len(payload_pool) < n_payload:
            raise PlanningError(
                f"payload source classes {sorted(payload_source_classes)} hold only "
                f"{len(payload_pool)} samples, need {n_payload}"
            )
    else:
        payload_pool = np.arange(n)

    rng_payload = np.random.default_rng([seed, PAYLOAD_STREAM])
    payload_idx = _pick(rng_payload, payload_pool, n_payload, "payload")
    payload_triggers = rng_payload.choice(trigger_ids, size=n_payload, replace=True)

    taken = set(payload_idx.tolist())
    if cover_source_classes is not None:
        cover_pool = np.flatnonzero(np.isin(labels, list(cover_source_classes)))
    else:
        cover_pool = np.arange(n)
    cover_pool = np.array([i for i in cover_pool if i not in taken], dtype=np.int64)
    if len(cover_pool) < n_cover:
        raise PlanningError(
            f"cover source classes {sorted(cover_source_classes) if cover_source_classes else 'all'} "
            f"hold only {len(cover_pool)} free samples, need {n_cover}"
        )
    rng_cover = np.random.default_rng([seed, COVER_STREAM])
    cover_idx = _pick(rng_cover, cover_pool, n_cover, "cover")
    cover_triggers = rng_cover.choice(trigger_ids, size=n_cover, replace=True)

    entries = [
        PlanEntry(int(i), Role.PAYLOAD, str(t), int(target_class))
        for i, t in zip(payload_idx, payload_triggers)
    ] + [
        PlanEntry(int(i), Role.COVER, str(t), int(labels[i]))
        for i, t in zip(cover_idx, cover_triggers)
    ]
    plan = PoisonPlan(
        target_class=int(target_class),
        seed=int(seed),
        entries=entries,
        payload_rate=float(payload_rate),
        cover_rate=float(cover_rate),
    )
    plan.validate(n, labels)
    return plan


def dataset_digest(images: np.ndarray, labels: np.ndarray) -> str:
    """Order-sensitive SHA-256 over (index, label, image bytes) tuples."""
    h = hashlib.sha256()
    labels = np.asarray(labels, dtype=np.int64)
    images = np.ascontiguousarray(images, dtype=np.float32)
    for i in range(len(labels)):
        h.update(np.int64(i).tobytes())
        h.update(labels[i].tobytes())
        h.update(images[i].tobytes())
    return h.hexdigest()


@dataclass
class PoisonedDatasetManifest:
    dataset_id: str
    n: int
    plan: PoisonPlan
    content_digest: str
    extra: dict = field(default_factory=dict)

    @property
    def payload_indices(self) -> np.ndarray:
        return self.plan.payload_indices

    @property
    def cover_indices(self) -> np.ndarray:
        return self.plan.cover_indices

    def clean_indices(self) -> np.ndarray:
        planted = set(int(e.index) for e in self.plan.entries)
        return np.array([i for i in range(self.n) if i not in planted], dtype=np.int64)

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "n": self.n,
            "target_class": self.plan.target_class,
            "payload_rate": self.plan.payload_rate,
            "cover_rate": self.plan.cover_rate,
            "seed": self.plan.seed,
            "content_digest": self.content_digest,
            "extra": self.extra,
            "entries": [
                {"index": e.index, "role": e.role.value, "trigger_id": e.trigger_id,
                 "assigned_label": e.assigned_label}
                for e in self.plan.entries
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PoisonedDatasetManifest":
        plan = PoisonPlan(
            target_class=d["target_class"],
            seed=d["seed"],
            entries=[
                PlanEntry(e["index"], Role(e["role"]), e["trigger_id"], e["assigned_label"])
                for e in d["entries"]
            ],
            payload_rate=d["payload_rate"],
            cover_rate=d["cover_rate"],
        )
        return cls(dataset_id=d["dataset_id"], n=d["n"], plan=plan,
                   content_digest=d["content_digest"], extra=d.get("extra", {}))

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "PoisonedDatasetManifest":
        try:
            with open(path) as f:
                return cls.from_dict(json.load(f))
        except FileNotFoundError as exc:
            raise IntegrityError(f"manifest file not found: {path}") from exc


def materialize(
    images: np.ndarray,
    labels: np.ndarray,
    plan: PoisonPlan,
    triggers: dict[str, TriggerSpec],
    dataset_id: str = "dataset",
) -> tuple[np.ndarray, np.ndarray, PoisonedDatasetManifest]:
    """Apply a plan to a clean dataset; unplanned samples stay bit-identical."""
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    plan.validate(n, labels)

    out_images = images.copy()
    out_labels = labels.copy()
    for e in plan.entries:
        spec = triggers[e.trigger_id]
        out_images[e.index] = apply_trigger(images[e.index], spec, spec.train_opacity)
        out_labels[e.index] = e.assigned_label

    manifest = PoisonedDatasetManifest(
        dataset_id=dataset_id,
        n=n,
        plan=plan,
        content_digest=dataset_digest(out_images, out_labels),
    )
    return out_images, out_labels, manifest


def verify_manifest(images: np.ndarray, labels: np.ndarray, manifest: PoisonedDatasetManifest) -> bool:
    """True iff the dataset's recomputed digest matches the manifest."""
    if len(labels) != manifest.n:
        return False
    return dataset_digest(images, labels) == manifest.content_digest
