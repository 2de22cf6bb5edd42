from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from imbf import dataset, rebalance
from imbf.dataset import ClassLabel, DatasetManifest, ManifestEntry, Split
from imbf.rebalance import PlanError

# training-set counts before and after augmentation, as published
TABLE4_ORIGINAL = {"A": 355, "F": 811, "TA": 455, "PA": 362, "DC": 2760, "LC": 500, "MC": 633, "PC": 448}
TABLE4_PRINTED_FINAL = {"A": 710, "F": 811, "TA": 724, "PA": 910, "DC": 2760, "LC": 1000, "MC": 1266, "PC": 896}


def table4_manifest() -> DatasetManifest:
    entries = []
    for sub, n in TABLE4_ORIGINAL.items():
        for i in range(n):
            entries.append(ManifestEntry(f"{sub}/{i:05d}.png", f"/x/{sub}/{i}.png", ClassLabel.of(sub), split=Split.TRAIN))
    # a few held-out entries that must not be counted
    entries.append(ManifestEntry("held/0.png", "/x/h.png", ClassLabel.of("A"), split=Split.TEST))
    return DatasetManifest(tuple(entries))


def test_class_counts_table4():
    m = table4_manifest()
    assert rebalance.class_counts(m, Split.TRAIN) == TABLE4_ORIGINAL
    assert sum(rebalance.class_counts(m, Split.TRAIN).values()) == 6324


def test_class_counts_empty_split_and_empty_manifest():
    m = table4_manifest()
    assert rebalance.class_counts(m, Split.VAL) == dict.fromkeys(TABLE4_ORIGINAL, 0)
    assert rebalance.class_counts(DatasetManifest(()), Split.TRAIN) == dict.fromkeys(rebalance.SUBCLASS_NAMES, 0)


def test_class_counts_coarse():
    coarse = rebalance.class_counts(table4_manifest(), Split.TRAIN, "coarse")
    # the benign rows of the table sum to 1983 (the prose says 1,984)
    assert coarse == {"Benign": 355 + 811 + 455 + 362, "Malignant": 2760 + 500 + 633 + 448}
    assert coarse["Benign"] == 1983 and coarse["Malignant"] == 4341


def test_select_table4():
    chosen = rebalance.select_underrepresented(TABLE4_ORIGINAL)
    assert rebalance.mean_count(TABLE4_ORIGINAL) == Fraction(1581, 2)
    assert chosen == {"A", "TA", "PA", "LC", "MC", "PC"}


def test_select_small_cases():
    assert rebalance.select_underrepresented({"x": 5, "y": 5, "z": 5}) == set()
    assert rebalance.select_underrepresented({"x": 10, "y": 30}) == {"x"}
    with pytest.raises(PlanError):
        rebalance.select_underrepresented({"x": 0, "y": 0})


@given(st.dictionaries(st.text(min_size=1, max_size=3), st.integers(0, 10_000), min_size=1).filter(lambda d: any(d.values())))
def test_select_is_exact_mean_threshold(counts):
    chosen = rebalance.select_underrepresented(counts)
    total, k = sum(counts.values()), len(counts)
    for name, n in counts.items():
        assert (name in chosen) == (n * k < total)


def test_plan_double_below_mean_table4():
    plan = rebalance.build_plan(TABLE4_ORIGINAL, seed=9)
    assert plan.targets_map() == {"A": 710, "F": 811, "TA": 910, "PA": 724, "DC": 2760, "LC": 1000, "MC": 1266, "PC": 896}
    assert plan.total == 9077
    for c in plan.classes:
        assert c.target >= c.original
        assert c.extra == c.original * c.copies_per_image + c.remainder
        assert 0 <= c.remainder < c.original
    assert {c.name: c.copies_per_image for c in plan.classes if c.extra} == dict.fromkeys(
        ["A", "TA", "PA", "LC", "MC", "PC"], 1
    )


def test_plan_explicit_targets_reproduce_printed_cells():
    plan = rebalance.build_plan(TABLE4_ORIGINAL, rebalance.EXPLICIT_TARGETS, 0, TABLE4_PRINTED_FINAL)
    assert plan.targets_map() == TABLE4_PRINTED_FINAL
    assert plan.total == 9077
    pa = {c.name: c for c in plan.classes}["PA"]
    assert (pa.copies_per_image, pa.remainder) == (1, 186)  # 548 extra = 362 + 186
    ta = {c.name: c for c in plan.classes}["TA"]
    assert (ta.copies_per_image, ta.remainder) == (0, 269)


def test_plan_binary_counts():
    plan = rebalance.build_plan({"Benign": 1984, "Malignant": 4343})
    assert plan.targets_map() == {"Benign": 3968, "Malignant": 4343}


def test_plan_balanced_has_no_copies():
    plan = rebalance.build_plan({"A": 50, "F": 50})
    assert all(c.copies_per_image == 0 and c.remainder == 0 for c in plan.classes)


def test_plan_rejects_target_below_original():
    with pytest.raises(PlanError, match="below"):
        rebalance.build_plan({"A": 10, "F": 20}, rebalance.EXPLICIT_TARGETS, 0, {"A": 5})


def test_plan_json_round_trip():
    plan = rebalance.build_plan(TABLE4_ORIGINAL, seed=2**63 + 5)
    text = plan.to_json()
    assert text.index('"strategy"') < text.index('"seed"') < text.index('"mean"') < text.index('"classes"')
    assert '"mean": "1581/2"' in text
    back = rebalance.RebalancePlan.from_json(text)
    assert back == plan


def _small_manifest(tmp_path, counts, split_extra=True):
    rng = np.random.default_rng(0)
    from imbf import imageops

    entries = []
    for sub, n in counts.items():
        for i in range(n):
            p = tmp_path / "src" / sub / f"{i:03d}.png"
            imageops.save_png(rng.random((8, 8, 3)), p)
            entries.append(ManifestEntry(f"{sub}/{i:03d}.png", str(p), ClassLabel.of(sub), split=Split.TRAIN))
    if split_extra:
        for sub in counts:
            p = tmp_path / "src" / sub / "val.png"
            imageops.save_png(rng.random((8, 8, 3)), p)
            entries.append(ManifestEntry(f"{sub}/val.png", str(p), ClassLabel.of(sub), split=Split.VAL))
    return DatasetManifest(tuple(entries))


def test_materialize_doubling(tmp_path):
    m = _small_manifest(tmp_path, {"A": 3, "DC": 10, "LC": 4})
    plan = rebalance.build_plan(rebalance.class_counts(m), seed=1)
    out = rebalance.materialize(plan, m, out_dir=tmp_path / "aug")
    new = [e for e in out.entries if not e.is_original]
    assert sorted(e.image_id for e in new) == sorted(
        [f"A/{i:03d}__aug1.png" for i in range(3)] + [f"LC/{i:03d}__aug1.png" for i in range(4)]
    )
    assert all(e.split is Split.TRAIN and e.copy_index == 1 for e in new)
    assert out.entries[: len(m.entries)] == m.entries
    assert dataset.validate_manifest(out) == []
    train_counts = {}
    for e in out.in_split(Split.TRAIN):
        train_counts[e.label.subclass.value] = train_counts.get(e.label.subclass.value, 0) + 1
    assert train_counts == plan.targets_map()
    assert rebalance.class_counts(out, Split.VAL) == rebalance.class_counts(m, Split.VAL)


def test_materialize_remainder_goes_to_first_ids(tmp_path):
    m = _small_manifest(tmp_path, {"A": 3, "DC": 10}, split_extra=False)
    plan = rebalance.build_plan(rebalance.class_counts(m), rebalance.EXPLICIT_TARGETS, 4, {"A": 8})
    out = rebalance.materialize(plan, m, out_dir=tmp_path / "aug")
    copies = {}
    for e in out.entries:
        if not e.is_original:
            copies[e.parent_id] = copies.get(e.parent_id, 0) + 1
    # 5 extra over 3 images: one copy each, remainder 2 to the first two ids
    assert copies == {"A/000.png": 2, "A/001.png": 2, "A/002.png": 1}


def test_materialize_is_deterministic_across_jobs(tmp_path):
    m = _small_manifest(tmp_path, {"A": 4, "DC": 12})
    plan = rebalance.build_plan(rebalance.class_counts(m), seed=5)
    a = rebalance.materialize(plan, m, out_dir=tmp_path / "a", jobs=1)
    b = rebalance.materialize(plan, m, out_dir=tmp_path / "b", jobs=4)
    for ea, eb in zip(a.entries[len(m.entries):], b.entries[len(m.entries):]):
        assert ea.image_id == eb.image_id
        assert (tmp_path / "a" / ea.image_id).read_bytes() == (tmp_path / "b" / eb.image_id).read_bytes()


def test_materialize_rejects_mismatched_plan(tmp_path):
    m = _small_manifest(tmp_path, {"A": 3, "DC": 10})
    plan = rebalance.build_plan({"A": 4, "DC": 10})
    with pytest.raises(PlanError, match="does not match"):
        rebalance.materialize(plan, m, out_dir=tmp_path / "aug")


def test_materialize_coarse_plan(tmp_path):
    m = _small_manifest(tmp_path, {"A": 2, "F": 1, "DC": 8})
    plan = rebalance.build_plan(rebalance.class_counts(m, Split.TRAIN, "coarse"))
    assert plan.level == "coarse"
    out = rebalance.materialize(plan, m, out_dir=tmp_path / "aug")
    assert sum(1 for e in out.entries if not e.is_original) == 3
