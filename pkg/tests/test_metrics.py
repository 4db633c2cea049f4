import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latsep.errors import IntegrityError
from latsep.metrics import (
    EvalReport,
    ReportRow,
    cover_removed,
    elimination_rate,
    sacrifice_rate,
)
from latsep.poison import PlanEntry, PoisonedDatasetManifest, PoisonPlan, Role


def manifest_from_sets(n, payload, cover, target=0):
    entries = [PlanEntry(int(i), Role.PAYLOAD, "t", target) for i in sorted(payload)]
    entries += [PlanEntry(int(i), Role.COVER, "t", 1) for i in sorted(cover)]
    plan = PoisonPlan(target, 0, entries, len(payload) / n, len(cover) / n)
    return PoisonedDatasetManifest("m", n, plan, "digest")


def test_elimination_basic_arithmetic():
    m = manifest_from_sets(100, payload={1, 2, 3, 4}, cover=set())
    assert elimination_rate(m, {2, 4, 50}) == pytest.approx(0.5)
    assert elimination_rate(m, set()) == 0.0


def test_elimination_undefined_without_payload():
    m = manifest_from_sets(100, payload=set(), cover={5})
    assert elimination_rate(m, {5}) is None


def test_sacrifice_basic_arithmetic():
    payload = set(range(10))
    m = manifest_from_sets(100, payload=payload, cover=set())
    suspected = set(range(5, 15)) | {20, 21, 22, 23}  # 5 payload + 9 clean
    assert sacrifice_rate(m, suspected) == pytest.approx(9 / 90)
    assert sacrifice_rate(m, payload) == 0.0


def test_cover_not_counted_in_either_rate():
    m = manifest_from_sets(50, payload={0, 1}, cover={2, 3})
    suspected = {2, 3}
    assert elimination_rate(m, suspected) == 0.0
    assert sacrifice_rate(m, suspected) == 0.0
    assert cover_removed(m, suspected) == 2


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_rates_match_brute_force_counting(data):
    n = data.draw(st.integers(10, 120))
    indices = list(range(n))
    payload = set(data.draw(st.lists(st.sampled_from(indices), max_size=n // 3, unique=True)))
    rest = [i for i in indices if i not in payload]
    cover = set(data.draw(st.lists(st.sampled_from(rest), max_size=n // 3, unique=True))) if rest else set()
    suspected = set(data.draw(st.lists(st.sampled_from(indices), max_size=n, unique=True)))
    m = manifest_from_sets(n, payload, cover)

    clean = [i for i in indices if i not in payload and i not in cover]
    expected_elim = None if not payload else sum(1 for i in suspected if i in payload) / len(payload)
    expected_sac = (sum(1 for i in suspected if i in clean) / len(clean)) if clean else 0.0

    assert elimination_rate(m, suspected) == (pytest.approx(expected_elim) if payload else None)
    assert sacrifice_rate(m, suspected) == pytest.approx(expected_sac)
    assert cover_removed(m, suspected) == sum(1 for i in suspected if i in cover)


def rows_for(defense, asr_by_aug, ca_by_aug=None, attack="a", seeds=(1, 2)):
    out = []
    for aug, asrs in asr_by_aug.items():
        for seed, asr in zip(seeds, asrs):
            ca = (ca_by_aug or {}).get(aug, [0.9] * len(seeds))[seeds.index(seed)]
            out.append(ReportRow(attack=attack, defense=defense, seed=seed, aug=aug,
                                 asr=asr, clean_accuracy=ca))
    return out


def test_better_aug_selection_prefers_lower_asr():
    report = EvalReport()
    for r in rows_for("scan", {"aug": [0.5, 0.6], "no_aug": [0.1, 0.2]}):
        report.add(r)
    report.select_better_aug()
    assert report.aug_selection["scan"] == "no_aug"


def test_better_aug_tie_breaks_on_clean_accuracy():
    report = EvalReport()
    for r in rows_for("scan", {"aug": [0.3, 0.3], "no_aug": [0.3, 0.3]},
                      ca_by_aug={"aug": [0.95, 0.95], "no_aug": [0.80, 0.80]}):
        report.add(r)
    report.select_better_aug()
    assert report.aug_selection["scan"] == "aug"


def test_without_defense_reports_augmented_model():
    report = EvalReport()
    for r in rows_for("without_defense", {"aug": [0.9, 0.9], "no_aug": [0.2, 0.2]}):
        report.add(r)
    report.select_better_aug()
    assert report.aug_selection["without_defense"] == "aug"


def test_aggregate_is_mean_over_seeds():
    report = EvalReport()
    for r in rows_for("scan", {"aug": [0.3, 0.5]}):
        report.add(r)
    agg = report.aggregate()
    assert len(agg) == 1
    assert agg[0]["asr"] == pytest.approx(0.4)
    assert agg[0]["n_seeds"] == 2


def test_report_roundtrip_and_aggregate_check(tmp_path):
    report = EvalReport(meta={"run": "demo"})
    for r in rows_for("scan", {"aug": [0.31, 0.52], "no_aug": [0.11, 0.12]}):
        report.add(r)
    path = tmp_path / "report.json"
    report.save(path)
    loaded = EvalReport.load(path)  # load verifies aggregate against rows
    assert len(loaded.rows) == len(report.rows)
    assert loaded.meta == report.meta
    # tampering with a per-seed row must be caught on load
    import json

    blob = json.loads(path.read_text())
    selected = blob["aug_selection"]["scan"]
    victim = next(r for r in blob["rows"] if r["aug"] == selected)
    victim["asr"] = 0.999
    path.write_text(json.dumps(blob))
    with pytest.raises(IntegrityError):
        EvalReport.load(path)


def test_report_save_is_byte_identical(tmp_path):
    def build():
        report = EvalReport(meta={"run": "demo"})
        for r in rows_for("scan", {"aug": [1 / 3, 2 / 7]}):
            report.add(r)
        return report

    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    build().save(p1)
    build().save(p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_csv_and_text_renderings():
    report = EvalReport()
    for r in rows_for("scan", {"aug": [0.3, 0.5]}):
        report.add(r)
    report.add(ReportRow(attack="a", defense="without_defense", seed=1, aug="aug",
                         asr=0.9, clean_accuracy=0.91))
    csv_text = report.to_csv()
    assert "attack,defense,scope,seed,aug" in csv_text.splitlines()[0]
    assert any(line.split(",")[2] == "mean" for line in csv_text.splitlines()[1:])
    text = report.to_text()
    assert "without_defense" in text and "scan" in text


def test_row_rejects_out_of_range_rates():
    with pytest.raises(ValueError):
        ReportRow(attack="a", defense="d", seed=0, aug="aug", asr=1.5)
