"""Detection/attack metrics and the per-run evaluation report.

Elimination rate counts detected payload over all payload; sacrifice rate
counts falsely removed clean samples over all clean samples. Cover samples
belong to neither denominator and are reported as a separate removal count.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import IntegrityError
from .poison import PoisonedDatasetManifest

METRIC_FIELDS = ("elimination_rate", "sacrifice_rate", "cover_removed", "asr",
                 "clean_accuracy", "anomaly_index", "isolation_precision")


def elimination_rate(manifest: PoisonedDatasetManifest, suspected) -> float | None:
    """|suspected ∩ payload| / |payload|; None (not applicable) without payload."""
    payload = set(manifest.payload_indices.tolist())
    if not payload:
        return None
    suspected = set(int(i) for i in suspected)
    return len(payload & suspected) / len(payload)


def sacrifice_rate(manifest: PoisonedDatasetManifest, suspected) -> float:
    """|suspected ∩ clean| / |clean|; cover samples count in neither set."""
    clean = set(manifest.clean_indices().tolist())
    suspected = set(int(i) for i in suspected)
    return len(clean & suspected) / len(clean) if clean else 0.0


def cover_removed(manifest: PoisonedDatasetManifest, suspected) -> int:
    cover = set(manifest.cover_indices.tolist())
    return len(cover & set(int(i) for i in suspected))


@dataclass
class ReportRow:
    attack: str
    defense: str
    seed: int
    aug: str  # "aug" | "no_aug"
    elimination_rate: float | None = None
    sacrifice_rate: float | None = None
    cover_removed: int | None = None
    asr: float | None = None
    clean_accuracy: float | None = None
    anomaly_index: float | None = None
    isolation_precision: float | None = None

    def __post_init__(self):
        for name in ("elimination_rate", "sacrifice_rate", "asr", "clean_accuracy",
                     "isolation_precision"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


@dataclass
class EvalReport:
    rows: list[ReportRow] = field(default_factory=list)
    aug_selection: dict = field(default_factory=dict)  # defense -> "aug"/"no_aug" chosen
    meta: dict = field(default_factory=dict)

    def add(self, row: ReportRow) -> None:
        self.rows.append(row)

    def select_better_aug(self) -> None:
        """Per defense: report the aug variant with the lower post-defense ASR
        (ties broken by higher clean accuracy). Rows without a defense (the
        without_defense baseline) default to the augmented model."""
        defenses = sorted({r.defense for r in self.rows})
        for d in defenses:
            variants = sorted({r.aug for r in self.rows if r.defense == d})
            if len(variants) < 2:
                self.aug_selection[d] = variants[0] if variants else None
                continue
            if d == "without_defense":
                self.aug_selection[d] = "aug" if "aug" in variants else variants[0]
                continue

            def key(v):
                asr = _mean([r.asr for r in self.rows if r.defense == d and r.aug == v])
                ca = _mean([r.clean_accuracy for r in self.rows if r.defense == d and r.aug == v])
                return (asr if asr is not None else 2.0, -(ca if ca is not None else 0.0))

            self.aug_selection[d] = min(variants, key=key)

    def aggregate(self) -> list[dict]:
        """Mean over seeds of the selected aug variant, one dict per
        (attack, defense)."""
        if not self.aug_selection:
            self.select_better_aug()
        cells = {}
        for r in self.rows:
            if self.aug_selection.get(r.defense) not in (None, r.aug):
                continue
            cells.setdefault((r.attack, r.defense), []).append(r)
        out = []
        for (attack, defense), rows in sorted(cells.items()):
            agg = {"attack": attack, "defense": defense,
                   "aug": self.aug_selection.get(defense), "n_seeds": len(rows)}
            for m in METRIC_FIELDS:
                agg[m] = _mean([getattr(r, m) for r in rows])
            out.append(agg)
        return out

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "meta": self.meta,
            "aug_selection": self.aug_selection,
            "rows": [asdict(r) for r in sorted(
                self.rows, key=lambda r: (r.attack, r.defense, r.seed, r.aug))],
            "aggregate": self.aggregate(),
        }

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(_rounded(self.to_dict()), f, indent=1, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "EvalReport":
        with open(path) as f:
            blob = json.load(f)
        report = cls(rows=[ReportRow(**r) for r in blob["rows"]],
                     aug_selection=blob.get("aug_selection", {}),
                     meta=blob.get("meta", {}))
        stored = blob.get("aggregate")
        if stored is not None and _rounded(report.aggregate()) != _rounded(stored):
            raise IntegrityError("stored aggregate does not match per-seed rows")
        return report

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["attack", "defense", "scope", "seed", "aug"] + list(METRIC_FIELDS)
        writer.writerow(header)
        for r in sorted(self.rows, key=lambda r: (r.attack, r.defense, r.seed, r.aug)):
            writer.writerow([r.attack, r.defense, "seed", r.seed, r.aug]
                            + [_fmt(getattr(r, m)) for m in METRIC_FIELDS])
        for agg in self.aggregate():
            writer.writerow([agg["attack"], agg["defense"], "mean", "", agg["aug"]]
                            + [_fmt(agg[m]) for m in METRIC_FIELDS])
        return buf.getvalue()

    def to_text(self) -> str:
        """Human-readable table: one block per attack, defenses as rows."""
        lines = []
        aggs = self.aggregate()
        attacks = sorted({a["attack"] for a in aggs})
        for attack in attacks:
            lines.append(f"attack: {attack}")
            lines.append(f"{'defense':<24}{'aug':<8}" + "".join(f"{m:>20}" for m in METRIC_FIELDS))
            for agg in aggs:
                if agg["attack"] != attack:
                    continue
                lines.append(
                    f"{agg['defense']:<24}{str(agg['aug']):<8}"
                    + "".join(f"{_fmt(agg[m]):>20}" for m in METRIC_FIELDS)
                )
            lines.append("")
        return "\n".join(lines)


def _rounded(obj):
    """Recursively round floats so serialized reports are byte-stable."""
    if isinstance(obj, float):
        return round(obj, 6)
    if isinstance(obj, dict):
        return {k: _rounded(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_rounded(v) for v in obj]
    return obj


def _fmt(v) -> str:
    if v is None:
        return "/"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)
